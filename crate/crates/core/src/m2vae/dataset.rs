//! Synthetic pre-training data and its JSON Lines format:
//! one `{"class": int, "obs": {"0": [...], "1": [...]}}` record per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::ObservationSet;
use crate::error::{Error, Result};
use crate::world::ObservationModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class: usize,
    pub obs: ObservationSet<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    class: usize,
    obs: BTreeMap<String, Vec<f64>>,
}

/// `n` complete samples with classes assigned round-robin, so every class
/// gets `n / classes` samples (the first `n % classes` get one more).
pub fn generate_dataset(model: &ObservationModel, classes: usize, n: usize, noise: f64, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = i % classes;
            let vectors = (0..model.modalities())
                .map(|m| model.sample(m, class, noise, &mut rng))
                .collect();
            Sample {
                class,
                obs: ObservationSet::complete(vectors),
            }
        })
        .collect()
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let rec = SampleRecord {
            class: s.class,
            obs: s.obs.to_map(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path, modalities: usize) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        samples.push(Sample {
            class: rec.class,
            obs: ObservationSet::from_map(modalities, rec.obs)?,
        });
    }
    Ok(samples)
}
