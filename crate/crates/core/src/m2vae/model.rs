//! Multi-modal VAE with one encoder per non-empty modality subset.
//!
//! Every encoder emits `[mean | log_var]` of the latent Gaussian. Every
//! decoder maps a latent point back to one modality. Training makes each
//! subset reconstruct *all* modalities, so a partial view still has to place
//! its belief where the missing modalities are plausible.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::embedding::{LatentEmbedding, ObservationSet};
use crate::diffnet::{
    build_mlp, kl_standard_normal, std_from_log_var, Activation, AdamConfig, AdamState, Grads, Mlp,
    MlpSpec, Tensor, LOG_VAR_LIMIT,
};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::world::{ModalityMask, MAX_MODALITIES};

pub const MAX_VAE_MODALITIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub modalities: usize,
    pub obs_dims: Vec<usize>,
    pub latent_dim: usize,
    /// Weight of the prior KL term.
    pub beta: f64,
    /// Weight of the squared reconstruction error.
    pub recon_weight: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dataset_size: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            modalities: 2,
            obs_dims: vec![2, 2],
            latent_dim: 2,
            beta: 1.0,
            recon_weight: 5.0,
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            lr: 1e-3,
            batch_size: 64,
            epochs: 200,
            dataset_size: 600,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.modalities == 0 || self.modalities > MAX_VAE_MODALITIES {
            return fail(format!("vae.modalities {} outside 1..=3", self.modalities));
        }
        if self.obs_dims.len() != self.modalities {
            return fail(format!(
                "vae.obs_dims has {} entries but vae.modalities is {}",
                self.obs_dims.len(),
                self.modalities
            ));
        }
        if self.obs_dims.iter().any(|&d| d == 0) {
            return fail("vae.obs_dims entries must be positive".into());
        }
        if self.latent_dim == 0 {
            return fail("vae.latent_dim must be positive".into());
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail(format!("vae.beta {} must be positive", self.beta));
        }
        if !(self.recon_weight > 0.0 && self.recon_weight.is_finite()) {
            return fail(format!("vae.recon_weight {} must be positive", self.recon_weight));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return fail("vae.hidden sizes must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("vae.lr {} must be >= 0", self.lr));
        }
        if self.batch_size == 0 {
            return fail("vae.batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return fail("vae.epochs must be positive".into());
        }
        if self.dataset_size == 0 {
            return fail("vae.dataset_size must be positive".into());
        }
        Ok(())
    }

    pub fn subset_count(&self) -> usize {
        (1 << self.modalities) - 1
    }

    /// All non-empty subsets, ordered by bit pattern.
    pub fn subsets(&self) -> impl Iterator<Item = ModalityMask> {
        (1..=self.subset_count()).map(|b| ModalityMask::from_bits(b as u8))
    }

    pub fn subset_input_size(&self, subset: ModalityMask) -> usize {
        subset.iter().map(|m| self.obs_dims[m]).sum()
    }

    pub fn full_subset(&self) -> ModalityMask {
        ModalityMask::full(self.modalities)
    }
}

/// Result of one ELBO evaluation over a batch.
#[derive(Debug, Clone)]
pub struct ElboOutput<T: Real> {
    /// Negative ELBO averaged over the batch.
    pub loss: T,
    pub recon: T,
    pub kl: T,
    /// Batch-mean prior KL per subset, in subset order.
    pub subset_kl: Vec<T>,
    /// Prior KL of every `(sample, subset)` pair, row-major.
    pub kl_terms: Vec<T>,
    pub grads: VaeGrads<T>,
}

#[derive(Debug, Clone)]
pub struct VaeGrads<T> {
    pub encoders: Vec<Grads<T>>,
    pub decoders: Vec<Grads<T>>,
}

impl<T: Real> VaeGrads<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .flat_map(|g| g.slices())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "VaeRepr<T>", try_from = "VaeRepr<T>", bound = "T: Real")]
pub struct M2Vae<T: Real> {
    config: VaeConfig,
    /// Indexed by `subset.bits() - 1`.
    encoders: Vec<Mlp<T>>,
    decoders: Vec<Mlp<T>>,
}

fn encoder_spec(config: &VaeConfig, subset: ModalityMask) -> MlpSpec {
    let mut sizes = vec![config.subset_input_size(subset)];
    sizes.extend(&config.hidden);
    sizes.push(2 * config.latent_dim);
    let seed = config
        .seed
        .wrapping_mul(1_000_003)
        .wrapping_add(subset.bits() as u64);
    MlpSpec::new(sizes, config.activation, seed)
}

fn decoder_spec(config: &VaeConfig, modality: usize) -> MlpSpec {
    let mut sizes = vec![config.latent_dim];
    sizes.extend(&config.hidden);
    sizes.push(config.obs_dims[modality]);
    let seed = config
        .seed
        .wrapping_mul(1_000_003)
        .wrapping_add(100 + modality as u64);
    MlpSpec::new(sizes, config.activation, seed)
}

impl<T: Real> M2Vae<T> {
    pub fn new(config: &VaeConfig) -> Result<Self> {
        config.validate()?;
        let encoders = config
            .subsets()
            .map(|s| build_mlp(&encoder_spec(config, s)))
            .collect::<Result<_>>()?;
        let decoders = (0..config.modalities)
            .map(|m| build_mlp(&decoder_spec(config, m)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            encoders,
            decoders,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn modalities(&self) -> usize {
        self.config.modalities
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn encoder_count(&self) -> usize {
        self.encoders.len()
    }

    pub fn encoder(&self, subset: ModalityMask) -> Result<&Mlp<T>> {
        let idx = self.subset_index(subset)?;
        Ok(&self.encoders[idx])
    }

    pub fn decoder(&self, modality: usize) -> &Mlp<T> {
        &self.decoders[modality]
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .flat_map(|n| n.param_slices())
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.encoders
            .iter_mut()
            .chain(self.decoders.iter_mut())
            .flat_map(|n| n.param_slices_mut())
            .collect()
    }

    /// Adam state covering every encoder and decoder.
    pub fn optimizer(&self, config: AdamConfig) -> AdamState<T> {
        let sizes: Vec<usize> = self.param_slices().iter().map(|s| s.len()).collect();
        AdamState::new(config, &sizes)
    }

    fn subset_index(&self, subset: ModalityMask) -> Result<usize> {
        let bits = subset.bits() as usize;
        if bits == 0 || bits > self.encoders.len() {
            return Err(Error::invalid(format!(
                "no encoder for modality subset {{{subset}}}"
            )));
        }
        Ok(bits - 1)
    }

    fn check_slots(&self, obs: &ObservationSet<T>) -> Result<()> {
        if obs.modalities() != self.config.modalities {
            return Err(Error::shape(format!(
                "observation set has {} slots, model has {} modalities",
                obs.modalities(),
                self.config.modalities
            )));
        }
        for m in obs.present().iter() {
            let got = obs.slot(m).map_or(0, <[T]>::len);
            if got != self.config.obs_dims[m] {
                return Err(Error::shape(format!(
                    "modality {m} observation has length {got}, expected {}",
                    self.config.obs_dims[m]
                )));
            }
        }
        Ok(())
    }

    fn split_output(&self, out: &[T]) -> LatentEmbedding<T> {
        let d = self.config.latent_dim;
        LatentEmbedding {
            mean: out[..d].to_vec(),
            std: out[d..].iter().map(|&lv| std_from_log_var(lv)).collect(),
        }
    }

    /// Deterministic embedding of the present slots through the encoder of
    /// exactly that subset.
    pub fn encode_subset(&self, obs: &ObservationSet<T>) -> Result<LatentEmbedding<T>> {
        self.check_slots(obs)?;
        let subset = obs.present();
        if subset.is_empty() {
            return Err(Error::invalid("cannot encode an empty observation set"));
        }
        let enc = self.encoder(subset)?;
        let out = enc.forward(&Tensor::vector(obs.concat_present())?)?;
        Ok(self.split_output(out.values()))
    }

    /// Decodes the embedding mean into every modality.
    pub fn decode_all(&self, z: &LatentEmbedding<T>) -> Result<ObservationSet<T>> {
        if z.dim() != self.config.latent_dim {
            return Err(Error::shape(format!(
                "embedding of dimension {}, model latent dimension {}",
                z.dim(),
                self.config.latent_dim
            )));
        }
        let input = Tensor::vector(z.mean.clone())?;
        let vectors = self
            .decoders
            .iter()
            .map(|d| d.forward(&input).map(Tensor::into_values))
            .collect::<Result<Vec<_>>>()?;
        Ok(ObservationSet::complete(vectors))
    }

    /// Belief update with a single fresh observation.
    ///
    /// A PoI nobody has looked at yet is encoded from the fresh observation
    /// alone. Otherwise the prior belief is decoded into all modalities, the
    /// fresh slot overwrites its reconstruction and the full-subset encoder
    /// re-encodes the result.
    pub fn fuse(
        &self,
        prior: &LatentEmbedding<T>,
        new_obs: &ObservationSet<T>,
        visited: ModalityMask,
    ) -> Result<LatentEmbedding<T>> {
        self.check_slots(new_obs)?;
        let present = new_obs.present();
        if present.count() != 1 {
            return Err(Error::invalid(format!(
                "fusion expects exactly one fresh modality, got {{{present}}}"
            )));
        }
        if visited.is_empty() {
            return self.encode_subset(new_obs);
        }
        let m = present.iter().next().expect("one present slot");
        let mut merged = self.decode_all(prior)?;
        merged.set(m, new_obs.slot(m).expect("present").to_vec());
        self.encode_subset(&merged)
    }

    /// Negative ELBO and its exact gradient over a batch of complete sets.
    ///
    /// `noise` has shape `[batch, subsets, latent_dim]`. Per sample the loss
    /// is `Σ_s [ w·Σ_m ‖x_m − dec_m(z_s)‖² + β·KL(q_s ‖ N(0, I)) ]` with
    /// `z_s = μ_s + σ_s ⊙ ε_s`.
    pub fn elbo_and_grads(&self, batch: &[ObservationSet<T>], noise: &Tensor<T>) -> Result<ElboOutput<T>> {
        let cfg = &self.config;
        let b = batch.len();
        let d = cfg.latent_dim;
        let n_sub = cfg.subset_count();
        if b == 0 {
            return Err(Error::invalid("empty ELBO batch"));
        }
        for obs in batch {
            self.check_slots(obs)?;
            if !obs.is_complete() {
                return Err(Error::invalid("ELBO training needs complete observation sets"));
            }
        }
        if noise.shape() != [b, n_sub, d] {
            return Err(Error::shape(format!(
                "noise shape {:?}, expected [{b}, {n_sub}, {d}]",
                noise.shape()
            )));
        }

        let inv_b = T::one() / T::from_usize_lossy(b);
        let w = T::lit(cfg.recon_weight);
        let beta = T::lit(cfg.beta);
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let lim = T::lit(LOG_VAR_LIMIT);

        let targets: Vec<Vec<T>> = (0..cfg.modalities)
            .map(|m| batch.iter().flat_map(|o| o.slot(m).expect("complete").iter().copied()).collect())
            .collect();

        let mut enc_grads: Vec<Grads<T>> = self.encoders.iter().map(Grads::zeros_like).collect();
        let mut dec_grads: Vec<Grads<T>> = self.decoders.iter().map(Grads::zeros_like).collect();
        let mut recon_total = T::zero();
        let mut kl_total = T::zero();
        let mut subset_kl = Vec::with_capacity(n_sub);
        let mut kl_terms = vec![T::zero(); b * n_sub];

        for (si, subset) in cfg.subsets().enumerate() {
            let enc = &self.encoders[si];
            let in_size = cfg.subset_input_size(subset);
            let x: Vec<T> = batch
                .iter()
                .flat_map(|o| o.concat_subset(subset).expect("complete"))
                .collect();
            let trace = enc.forward_trace(&Tensor::from_raw(vec![b, in_size], x))?;
            let out = trace.output();

            let mut eps = vec![T::zero(); b * d];
            let mut z = vec![T::zero(); b * d];
            for r in 0..b {
                let row = out.row(r);
                for j in 0..d {
                    let e = noise.values()[(r * n_sub + si) * d + j];
                    eps[r * d + j] = e;
                    z[r * d + j] = row[j] + std_from_log_var(row[d + j]) * e;
                }
            }
            let z = Tensor::from_raw(vec![b, d], z);

            let mut gz = vec![T::zero(); b * d];
            for (m, dec) in self.decoders.iter().enumerate() {
                let dim = cfg.obs_dims[m];
                let dtrace = dec.forward_trace(&z)?;
                let xhat = dtrace.output().values();
                let target = &targets[m];
                let mut g = vec![T::zero(); b * dim];
                for i in 0..b * dim {
                    let diff = xhat[i] - target[i];
                    recon_total = recon_total + w * diff * diff * inv_b;
                    g[i] = w * two * diff * inv_b;
                }
                let bp = dec.backward(&dtrace, &Tensor::from_raw(vec![b, dim], g))?;
                dec_grads[m].add_assign(&bp.grads);
                for (acc, &v) in gz.iter_mut().zip(bp.input_grad.values()) {
                    *acc = *acc + v;
                }
            }

            let mut g_out = vec![T::zero(); b * 2 * d];
            let mut kl_sub = T::zero();
            for r in 0..b {
                let row = out.row(r);
                let (kl, dm, dlv) = kl_standard_normal(&row[..d], &row[d..]);
                if !(kl >= T::zero()) {
                    return Err(Error::Divergence(format!("negative or NaN prior KL {kl}")));
                }
                kl_terms[r * n_sub + si] = kl;
                kl_sub = kl_sub + kl * inv_b;
                for j in 0..d {
                    let gzj = gz[r * d + j];
                    let lv = row[d + j];
                    let d_lv_sample = if lv.abs() > lim {
                        T::zero()
                    } else {
                        gzj * eps[r * d + j] * half * std_from_log_var(lv)
                    };
                    g_out[r * 2 * d + j] = gzj + beta * dm[j] * inv_b;
                    g_out[r * 2 * d + d + j] = d_lv_sample + beta * dlv[j] * inv_b;
                }
            }
            kl_total = kl_total + beta * kl_sub;
            subset_kl.push(kl_sub);
            let bp = enc.backward(&trace, &Tensor::from_raw(vec![b, 2 * d], g_out))?;
            enc_grads[si].add_assign(&bp.grads);
        }

        let loss = recon_total + kl_total;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite ELBO loss {loss}")));
        }
        Ok(ElboOutput {
            loss,
            recon: recon_total,
            kl: kl_total,
            subset_kl,
            kl_terms,
            grads: VaeGrads {
                encoders: enc_grads,
                decoders: dec_grads,
            },
        })
    }

    fn draw_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor<T> {
        let shape = vec![batch, self.config.subset_count(), self.config.latent_dim];
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::from_raw(shape, values)
    }

    fn epoch<R: Rng + ?Sized>(
        &mut self,
        dataset: &[ObservationSet<T>],
        mut optimizer: Option<&mut AdamState<T>>,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<T> {
        if dataset.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(rng);
        let mut total = T::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<ObservationSet<T>> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let noise = self.draw_noise(batch.len(), rng);
            let out = self.elbo_and_grads(&batch, &noise)?;
            total = total + out.loss;
            batches += 1;
            if let Some(opt) = optimizer.as_deref_mut() {
                let grads = out.grads.slices();
                let grads: Vec<Option<&[T]>> = grads.into_iter().map(Some).collect();
                let mut params = self.param_slices_mut();
                opt.update(&mut params, &grads)?;
            }
        }
        Ok(total / T::from_usize_lossy(batches))
    }

    /// One pass of shuffled mini-batch Adam. Returns the mean batch loss.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        dataset: &[ObservationSet<T>],
        optimizer: &mut AdamState<T>,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<T> {
        self.epoch(dataset, Some(optimizer), batch_size, rng)
    }

    /// Same batching and noise draws as [`Self::train_epoch`], no updates.
    pub fn evaluate<R: Rng + ?Sized>(&self, dataset: &[ObservationSet<T>], batch_size: usize, rng: &mut R) -> Result<T> {
        self.clone().epoch(dataset, None, batch_size, rng)
    }

    pub fn cast<U: Real>(&self) -> M2Vae<U> {
        M2Vae {
            config: self.config.clone(),
            encoders: self.encoders.iter().map(Mlp::cast).collect(),
            decoders: self.decoders.iter().map(Mlp::cast).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
struct VaeRepr<T: Real> {
    config: VaeConfig,
    encoders: BTreeMap<String, Mlp<T>>,
    decoders: Vec<Mlp<T>>,
}

impl<T: Real> From<M2Vae<T>> for VaeRepr<T> {
    fn from(vae: M2Vae<T>) -> Self {
        let encoders = vae
            .config
            .subsets()
            .zip(vae.encoders)
            .map(|(s, e)| (s.key(), e))
            .collect();
        Self {
            config: vae.config,
            encoders,
            decoders: vae.decoders,
        }
    }
}

impl<T: Real> TryFrom<VaeRepr<T>> for M2Vae<T> {
    type Error = Error;

    fn try_from(mut repr: VaeRepr<T>) -> Result<Self> {
        let cfg = repr.config;
        cfg.validate()?;
        debug_assert!(cfg.modalities <= MAX_MODALITIES);
        if repr.encoders.len() != cfg.subset_count() {
            return Err(Error::Checkpoint(format!(
                "{} encoders for {} modalities, expected {}",
                repr.encoders.len(),
                cfg.modalities,
                cfg.subset_count()
            )));
        }
        let mut encoders = Vec::with_capacity(cfg.subset_count());
        for s in cfg.subsets() {
            let enc = repr
                .encoders
                .remove(&s.key())
                .ok_or_else(|| Error::Checkpoint(format!("missing encoder {:?}", s.key())))?;
            let (i, o) = (enc.input_size(), enc.output_size());
            if i != cfg.subset_input_size(s) || o != 2 * cfg.latent_dim {
                return Err(Error::Checkpoint(format!(
                    "encoder {:?} maps {i} -> {o}, expected {} -> {}",
                    s.key(),
                    cfg.subset_input_size(s),
                    2 * cfg.latent_dim
                )));
            }
            encoders.push(enc);
        }
        if repr.decoders.len() != cfg.modalities {
            return Err(Error::Checkpoint(format!(
                "{} decoders for {} modalities",
                repr.decoders.len(),
                cfg.modalities
            )));
        }
        for (m, dec) in repr.decoders.iter().enumerate() {
            if dec.input_size() != cfg.latent_dim || dec.output_size() != cfg.obs_dims[m] {
                return Err(Error::Checkpoint(format!(
                    "decoder {m} maps {} -> {}, expected {} -> {}",
                    dec.input_size(),
                    dec.output_size(),
                    cfg.latent_dim,
                    cfg.obs_dims[m]
                )));
            }
        }
        Ok(Self {
            config: cfg,
            encoders,
            decoders: repr.decoders,
        })
    }
}
