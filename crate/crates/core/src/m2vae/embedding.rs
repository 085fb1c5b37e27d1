use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffnet::kl_diag_gaussians;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::world::ModalityMask;

/// Diagonal Gaussian belief `z = (mean, std)` in latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LatentEmbedding<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Real> LatentEmbedding<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::shape(format!(
                "embedding mean/std lengths {} and {}",
                mean.len(),
                std.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || std.iter().any(|s| !(s.is_finite() && *s > T::zero())) {
            return Err(Error::invalid("embedding needs finite mean and positive finite std"));
        }
        Ok(Self { mean, std })
    }

    /// Standard normal `N(0, I)`.
    pub fn prior(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            std: vec![T::one(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `KL(self ‖ other)`.
    pub fn kl_to(&self, other: &Self) -> Result<T> {
        kl_diag_gaussians(&self.mean, &self.std, &other.mean, &other.std)
    }
}

/// One optional observation vector per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> ObservationSet<T> {
    pub fn empty(modalities: usize) -> Self {
        Self {
            slots: vec![None; modalities],
        }
    }

    pub fn complete(vectors: Vec<Vec<T>>) -> Self {
        Self {
            slots: vectors.into_iter().map(Some).collect(),
        }
    }

    pub fn single(modalities: usize, modality: usize, vector: Vec<T>) -> Self {
        let mut set = Self::empty(modalities);
        set.slots[modality] = Some(vector);
        set
    }

    pub fn modalities(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, modality: usize) -> Option<&[T]> {
        self.slots.get(modality).and_then(|s| s.as_deref())
    }

    pub fn set(&mut self, modality: usize, vector: Vec<T>) {
        self.slots[modality] = Some(vector);
    }

    pub fn present(&self) -> ModalityMask {
        let mut mask = ModalityMask::EMPTY;
        for (m, s) in self.slots.iter().enumerate() {
            if s.is_some() {
                mask.insert(m);
            }
        }
        mask
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    /// Present slots concatenated in modality order.
    pub fn concat_present(&self) -> Vec<T> {
        self.slots.iter().flatten().flatten().copied().collect()
    }

    /// Slots restricted to `subset`, concatenated in modality order.
    pub fn concat_subset(&self, subset: ModalityMask) -> Option<Vec<T>> {
        let mut out = Vec::new();
        for m in subset.iter() {
            out.extend_from_slice(self.slot(m)?);
        }
        Some(out)
    }

    /// `{"0": [...], "1": [...]}` form used in dataset files.
    pub fn to_map(&self) -> BTreeMap<String, Vec<T>> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(m, s)| s.as_ref().map(|v| (m.to_string(), v.clone())))
            .collect()
    }

    pub fn from_map(modalities: usize, map: BTreeMap<String, Vec<T>>) -> Result<Self> {
        let mut set = Self::empty(modalities);
        for (k, v) in map {
            let m: usize = k
                .parse()
                .ok()
                .filter(|&m| m < modalities)
                .ok_or_else(|| Error::invalid(format!("unknown modality slot {k:?}")))?;
            set.slots[m] = Some(v);
        }
        Ok(set)
    }

    pub fn cast<U: Real>(&self) -> ObservationSet<U> {
        ObservationSet {
            slots: self
                .slots
                .iter()
                .map(|s| s.as_ref().map(|v| v.iter().map(|x| U::lit(x.as_f64())).collect()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_and_validation() {
        let p = LatentEmbedding::<f64>::prior(2);
        assert_eq!(p.mean, vec![0.0, 0.0]);
        assert_eq!(p.std, vec![1.0, 1.0]);
        assert_eq!(p.kl_to(&p).unwrap(), 0.0);
        assert!(LatentEmbedding::new(vec![0.0], vec![0.0]).is_err());
        assert!(LatentEmbedding::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn observation_slots() {
        let mut o = ObservationSet::<f64>::single(2, 1, vec![1.0, 0.0]);
        assert_eq!(o.present(), ModalityMask::single(1));
        assert!(!o.is_complete());
        assert_eq!(o.concat_subset(ModalityMask::full(2)), None);
        o.set(0, vec![-1.0, 0.5]);
        assert!(o.is_complete());
        assert_eq!(o.concat_present(), vec![-1.0, 0.5, 1.0, 0.0]);
        let back = ObservationSet::from_map(2, o.to_map()).unwrap();
        assert_eq!(back, o);
        let mut bad = o.to_map();
        bad.insert("2".into(), vec![0.0]);
        assert!(ObservationSet::from_map(2, bad).is_err());
    }
}
