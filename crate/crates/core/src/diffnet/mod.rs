//! Small reverse-mode MLP engine: dense layers, Adam, diagonal-Gaussian
//! sampling and KL. Both the multi-modal VAE and the Q-network are built on it.

mod adam;
mod gaussian;
mod gradcheck;
mod mlp;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gaussian::{
    clamp_log_var, kl_diag_gaussians, kl_standard_normal, reparam_backward, reparam_sample,
    std_from_log_var, LOG_VAR_LIMIT,
};
pub use gradcheck::{compare_gradients, grad_check, relative_error, GradCheck, FD_STEP};
pub use mlp::{build_mlp, Activation, Backprop, ForwardBackward, Grads, Layer, Mlp, MlpSpec, Trace};
pub use tensor::Tensor;
