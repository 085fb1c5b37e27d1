//! Fully connected networks with hand-written reverse-mode gradients.
//!
//! A layer computes `y = act(W x + b)` with `W` stored row-major as
//! `(out, in)`. Inputs are either a single vector `[in]` or a batch `[B, in]`;
//! outputs keep the same rank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(T::zero()),
            Activation::Identity => z,
        }
    }

    /// Derivative given pre-activation `z` and output `y`. ReLU uses 0 at `z == 0`.
    #[inline]
    fn derivative<T: Real>(self, z: T, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Architecture of a network: sizes from input to output, one activation per
/// layer boundary, and the seed used for initialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    /// `hidden` on every layer except the last, which is linear.
    pub fn new(layer_sizes: Vec<usize>, hidden: Activation, seed: u64) -> Self {
        let n = layer_sizes.len().saturating_sub(1);
        let activations = (0..n)
            .map(|i| if i + 1 == n { Activation::Identity } else { hidden })
            .collect();
        Self {
            layer_sizes,
            activations,
            seed,
        }
    }

    pub fn with_activations(layer_sizes: Vec<usize>, activations: Vec<Activation>, seed: u64) -> Self {
        Self {
            layer_sizes,
            activations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid(format!(
                "an MLP needs at least 2 layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        if self.activations.len() != self.layer_sizes.len() - 1 {
            return Err(Error::invalid(format!(
                "{} layer boundaries but {} activations",
                self.layer_sizes.len() - 1,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }
}

/// Weight `(out, in)` and bias `(out)` of one layer. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Layer<T> {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out, inp]),
            bias: Tensor::zeros(vec![out]),
        }
    }

    pub fn in_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_size(&self) -> usize {
        self.bias.len()
    }
}

/// Network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpRepr<T>", try_from = "MlpRepr<T>", bound = "T: Real")]
pub struct Mlp<T: Real> {
    spec: MlpSpec,
    layers: Vec<Layer<T>>,
}

/// Gradient with the same layout as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<Layer<T>>,
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    batched: bool,
    batch: usize,
    /// Input of each layer, flattened `[batch, in]`.
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    output: Tensor<T>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone)]
pub struct Backprop<T: Real> {
    pub grads: Grads<T>,
    pub input_grad: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardBackward<T: Real> {
    pub output: Tensor<T>,
    pub grads: Grads<T>,
    pub input_grad: Tensor<T>,
}

/// Builds a network with Glorot-uniform weights and zero biases.
///
/// Initialization draws `f64` values from a ChaCha stream seeded by
/// `spec.seed`, so the same spec gives the same parameters on every platform
/// (up to rounding for `f32`).
pub fn build_mlp<T: Real>(spec: &MlpSpec) -> Result<Mlp<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layers = spec
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| T::lit(rng.random_range(-limit..limit)))
                .collect();
            Layer {
                weight: Tensor::from_raw(vec![fan_out, fan_in], weights),
                bias: Tensor::zeros(vec![fan_out]),
            }
        })
        .collect();
    Ok(Mlp {
        spec: spec.clone(),
        layers,
    })
}

impl<T: Real> Mlp<T> {
    pub fn new(spec: &MlpSpec) -> Result<Self> {
        build_mlp(spec)
    }

    /// Wraps explicit layers, checking them against `spec`.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer<T>>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layer_sizes.len() - 1 {
            return Err(Error::shape(format!(
                "spec has {} layers, got {}",
                spec.layer_sizes.len() - 1,
                layers.len()
            )));
        }
        for (i, (layer, w)) in layers.iter().zip(spec.layer_sizes.windows(2)).enumerate() {
            if layer.weight.shape() != [w[1], w[0]] || layer.bias.shape() != [w[1]] {
                return Err(Error::shape(format!(
                    "layer {i}: weight {:?} bias {:?}, expected ({}, {}) and ({})",
                    layer.weight.shape(),
                    layer.bias.shape(),
                    w[1],
                    w[0],
                    w[1]
                )));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::Divergence(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size()
    }

    pub fn output_size(&self) -> usize {
        self.spec.output_size()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter slices in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn param_slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.values(), l.bias.values()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let Layer { weight, bias } = l;
                [weight.values_mut(), bias.values_mut()]
            })
            .collect()
    }

    /// Sets every weight and bias to zero.
    pub fn zero_params(&mut self) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(input)?.output)
    }

    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<Trace<T>> {
        let (batched, batch) = self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.values().to_vec();
        for (layer, act) in self.layers.iter().zip(&self.spec.activations) {
            let (n_in, n_out) = (layer.in_size(), layer.out_size());
            let w = layer.weight.values();
            let b = layer.bias.values();
            let mut z = vec![T::zero(); batch * n_out];
            for r in 0..batch {
                let xr = &x[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    let wo = &w[o * n_in..(o + 1) * n_in];
                    let dot = wo.iter().zip(xr).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi);
                    z[r * n_out + o] = dot;
                }
            }
            let y: Vec<T> = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut x, y));
            pre.push(z);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite network output".into()));
        }
        let shape = if batched {
            vec![batch, self.output_size()]
        } else {
            vec![self.output_size()]
        };
        Ok(Trace {
            batched,
            batch,
            inputs,
            pre,
            output: Tensor::from_raw(shape, x),
        })
    }

    /// Reverse pass: gradients of `⟨out_grad, output⟩` with respect to the
    /// parameters and the input of the traced forward pass.
    pub fn backward(&self, trace: &Trace<T>, out_grad: &Tensor<T>) -> Result<Backprop<T>> {
        out_grad.same_shape(&trace.output, "output gradient")?;
        let batch = trace.batch;
        let mut grads = Grads::zeros_like(self);
        let mut g = out_grad.values().to_vec();
        for (li, (layer, act)) in self
            .layers
            .iter()
            .zip(&self.spec.activations)
            .enumerate()
            .rev()
        {
            let (n_in, n_out) = (layer.in_size(), layer.out_size());
            let x = &trace.inputs[li];
            let z = &trace.pre[li];
            let y: &[T] = if li + 1 == self.layers.len() {
                trace.output.values()
            } else {
                &trace.inputs[li + 1]
            };
            for i in 0..g.len() {
                g[i] = g[i] * act.derivative(z[i], y[i]);
            }
            let gl = &mut grads.layers[li];
            {
                let dw = gl.weight.values_mut();
                for r in 0..batch {
                    let xr = &x[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        let go = g[r * n_out + o];
                        if go == T::zero() {
                            continue;
                        }
                        let row = &mut dw[o * n_in..(o + 1) * n_in];
                        for (d, &xi) in row.iter_mut().zip(xr) {
                            *d = *d + go * xi;
                        }
                    }
                }
            }
            {
                let db = gl.bias.values_mut();
                for r in 0..batch {
                    for o in 0..n_out {
                        db[o] = db[o] + g[r * n_out + o];
                    }
                }
            }
            let w = layer.weight.values();
            let mut gx = vec![T::zero(); batch * n_in];
            for r in 0..batch {
                for o in 0..n_out {
                    let go = g[r * n_out + o];
                    if go == T::zero() {
                        continue;
                    }
                    let wo = &w[o * n_in..(o + 1) * n_in];
                    let gxr = &mut gx[r * n_in..(r + 1) * n_in];
                    for (d, &wi) in gxr.iter_mut().zip(wo) {
                        *d = *d + go * wi;
                    }
                }
            }
            g = gx;
        }
        if !grads.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        let shape = if trace.batched {
            vec![batch, self.input_size()]
        } else {
            vec![self.input_size()]
        };
        Ok(Backprop {
            grads,
            input_grad: Tensor::from_raw(shape, g),
        })
    }

    /// Forward pass followed by the reverse pass seeded with `loss_grad`.
    pub fn forward_backward(
        &self,
        input: &Tensor<T>,
        loss_grad: &Tensor<T>,
    ) -> Result<ForwardBackward<T>> {
        let trace = self.forward_trace(input)?;
        let Backprop { grads, input_grad } = self.backward(&trace, loss_grad)?;
        Ok(ForwardBackward {
            output: trace.output,
            grads,
            input_grad,
        })
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(bool, usize)> {
        let n_in = self.input_size();
        match input.shape() {
            [n] if *n == n_in => Ok((false, 1)),
            [b, n] if *n == n_in => Ok((true, *b)),
            s => Err(Error::shape(format!(
                "network expects input [{n_in}] or [batch, {n_in}], got {s:?}"
            ))),
        }
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_size(), l.out_size()))
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.values(), l.bias.values()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let Layer { weight, bias } = l;
                [weight.values_mut(), bias.values_mut()]
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> T {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
struct LayerRepr<T> {
    w: Vec<Vec<T>>,
    b: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
struct MlpRepr<T> {
    spec: MlpSpec,
    layers: Vec<LayerRepr<T>>,
}

impl<T: Real> From<Mlp<T>> for MlpRepr<T> {
    fn from(net: Mlp<T>) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerRepr {
                w: (0..l.out_size()).map(|r| l.weight.row(r).to_vec()).collect(),
                b: l.bias.values().to_vec(),
            })
            .collect();
        Self {
            spec: net.spec,
            layers,
        }
    }
}

impl<T: Real> TryFrom<MlpRepr<T>> for Mlp<T> {
    type Error = Error;

    fn try_from(repr: MlpRepr<T>) -> Result<Self> {
        let layers = repr
            .layers
            .into_iter()
            .map(|l| {
                let rows = l.w.len();
                let cols = l.w.first().map_or(0, Vec::len);
                if l.w.iter().any(|r| r.len() != cols) {
                    return Err(Error::shape("ragged weight matrix"));
                }
                Ok(Layer {
                    weight: Tensor::matrix(rows, cols, l.w.into_iter().flatten().collect())?,
                    bias: Tensor::vector(l.b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(repr.spec, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net() -> Mlp<f64> {
        let spec = MlpSpec::new(vec![2, 2], Activation::Identity, 0);
        let layer = Layer {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::vector(vec![0.0, 0.0]).unwrap(),
        };
        Mlp::from_layers(spec, vec![layer]).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Tanh, 7);
        let a: Mlp<f64> = build_mlp(&spec).unwrap();
        let b: Mlp<f64> = build_mlp(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_shapes() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Tanh, 7);
        let net: Mlp<f64> = build_mlp(&spec).unwrap();
        let shapes: Vec<_> = net
            .layers()
            .iter()
            .map(|l| (l.weight.shape().to_vec(), l.bias.shape().to_vec()))
            .collect();
        assert_eq!(
            shapes,
            vec![(vec![3, 2], vec![3]), (vec![1, 3], vec![1])]
        );
        assert!(net.layers().iter().all(|l| l.bias.values().iter().all(|&b| b == 0.0)));
        let limit = (6.0f64 / 5.0).sqrt();
        assert!(net.layers()[0].weight.values().iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn build_rejects_bad_specs() {
        assert!(build_mlp::<f64>(&MlpSpec::new(vec![2], Activation::Tanh, 0)).is_err());
        assert!(build_mlp::<f64>(&MlpSpec::new(vec![], Activation::Tanh, 0)).is_err());
        assert!(build_mlp::<f64>(&MlpSpec::new(vec![2, 0, 1], Activation::Tanh, 0)).is_err());
    }

    #[test]
    fn identity_forward_and_backward() {
        let net = identity_net();
        let x = Tensor::vector(vec![0.3, -0.7]).unwrap();
        let g = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let fb = net.forward_backward(&x, &g).unwrap();
        assert_eq!(fb.output.values(), &[0.3, -0.7]);
        assert_eq!(fb.input_grad.values(), &[1.0, 0.0]);
        assert_eq!(fb.grads.layers[0].bias.values(), &[1.0, 0.0]);
        assert_eq!(fb.grads.layers[0].weight.values(), &[0.3, -0.7, 0.0, 0.0]);
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let net: Mlp<f64> = build_mlp(&MlpSpec::new(vec![3, 5, 2], Activation::Tanh, 11)).unwrap();
        let rows = [[0.1, -0.2, 0.3], [1.0, 0.5, -0.5]];
        let batch = Tensor::matrix(2, 3, rows.concat()).unwrap();
        let out = net.forward(&batch).unwrap();
        for (r, row) in rows.iter().enumerate() {
            let single = net.forward(&Tensor::vector(row.to_vec()).unwrap()).unwrap();
            assert_eq!(out.row(r), single.values());
        }
    }

    #[test]
    fn input_shape_mismatch() {
        let net = identity_net();
        assert!(net.forward(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).is_err());
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let bad_grad = Tensor::vector(vec![1.0]).unwrap();
        assert!(net.forward_backward(&x, &bad_grad).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net: Mlp<f64> = build_mlp(&MlpSpec::new(vec![3, 4, 2], Activation::Relu, 5)).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(net, back);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["layers"][0]["w"].as_array().unwrap().len(), 4);
        assert_eq!(v["layers"][1]["b"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn json_rejects_inconsistent_layers() {
        let net: Mlp<f64> = build_mlp(&MlpSpec::new(vec![3, 4, 2], Activation::Relu, 5)).unwrap();
        let mut v = serde_json::to_value(&net).unwrap();
        v["spec"]["layer_sizes"] = serde_json::json!([3, 5, 2]);
        assert!(serde_json::from_value::<Mlp<f64>>(v).is_err());
    }
}
