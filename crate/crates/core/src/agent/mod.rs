//! Multi-headed DQN meta-agent: shared trunk, one head per modality,
//! experience replay, masked epsilon-greedy selection and target-network TD
//! learning.

mod policy;
mod qnet;
mod replay;

pub use policy::{greedy_nearest_action, masked_argmax, random_action, select_action, EpsilonSchedule};
pub use qnet::{AgentCheckpoint, AgentConfig, MultiHeadQNet};
pub use replay::{ReplayBuffer, Transition};
