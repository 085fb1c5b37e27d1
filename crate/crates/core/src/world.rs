//! Ground-truth simulator: an open grid with robots and points of interest.
//!
//! Every PoI carries a hidden class. A robot carries one sensing modality and
//! observes a PoI by driving onto its cell; what it sees is the class mean
//! for its modality plus isotropic Gaussian noise. Class labels only leave
//! this module through observations and [`GridWorld::snapshot`].

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the number of modalities a mask can hold.
pub const MAX_MODALITIES: usize = 8;

/// Set of modalities, one bit each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityMask(u8);

impl ModalityMask {
    pub const EMPTY: Self = Self(0);

    pub fn full(modalities: usize) -> Self {
        debug_assert!(modalities <= MAX_MODALITIES);
        Self(((1u16 << modalities) - 1) as u8)
    }

    pub fn single(modality: usize) -> Self {
        Self(1 << modality)
    }

    pub fn from_bits(bits: u8) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, modality: usize) -> bool {
        modality < MAX_MODALITIES && self.0 & (1 << modality) != 0
    }

    pub fn insert(&mut self, modality: usize) {
        self.0 |= 1 << modality;
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_full(self, modalities: usize) -> bool {
        self == Self::full(modalities)
    }

    /// `true` when every bit of `self` is also set in `other`.
    pub fn is_subset_of(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..MAX_MODALITIES).filter(move |&m| self.contains(m))
    }

    /// Sorted modality indices joined by `+`, e.g. `"0+1"`.
    pub fn key(self) -> String {
        self.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("+")
    }

    pub fn from_key(key: &str) -> Result<Self> {
        let mut mask = Self::EMPTY;
        let mut last = None;
        for part in key.split('+') {
            let m: usize = part
                .parse()
                .map_err(|_| Error::invalid(format!("bad modality subset key {key:?}")))?;
            if m >= MAX_MODALITIES || last.is_some_and(|l| l >= m) {
                return Err(Error::invalid(format!("bad modality subset key {key:?}")));
            }
            last = Some(m);
            mask.insert(m);
        }
        Ok(mask)
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Noise-free observation means per `(modality, class)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    /// `means[modality][class]`
    means: Vec<Vec<Vec<f64>>>,
}

impl ObservationModel {
    pub fn new(means: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if means.is_empty() || means.len() > MAX_MODALITIES {
            return Err(Error::invalid("observation model needs 1..=8 modalities"));
        }
        let classes = means[0].len();
        for (m, per_class) in means.iter().enumerate() {
            if per_class.len() != classes || classes == 0 {
                return Err(Error::invalid(format!("modality {m}: inconsistent class count")));
            }
            let dim = per_class[0].len();
            if dim == 0 || per_class.iter().any(|v| v.len() != dim) {
                return Err(Error::invalid(format!("modality {m}: inconsistent observation size")));
            }
        }
        Ok(Self { means })
    }

    /// Three classes seen through two 2-D modalities:
    ///
    /// | class | modality 0 | modality 1 |
    /// |-------|------------|------------|
    /// | 0     | (-1, 0)    | (-1, 0)    |
    /// | 1     | (-1, 0)    | (+1, 0)    |
    /// | 2     | (+1, 0)    | (+1, 0)    |
    ///
    /// Modality 0 confuses classes 0 and 1, modality 1 confuses 1 and 2; both
    /// together separate all three.
    pub fn ambiguity_triangle() -> Self {
        let neg = vec![-1.0, 0.0];
        let pos = vec![1.0, 0.0];
        Self {
            means: vec![
                vec![neg.clone(), neg.clone(), pos.clone()],
                vec![neg, pos.clone(), pos],
            ],
        }
    }

    pub fn modalities(&self) -> usize {
        self.means.len()
    }

    pub fn classes(&self) -> usize {
        self.means[0].len()
    }

    pub fn obs_dim(&self, modality: usize) -> usize {
        self.means[modality][0].len()
    }

    pub fn obs_dims(&self) -> Vec<usize> {
        (0..self.modalities()).map(|m| self.obs_dim(m)).collect()
    }

    pub fn mean(&self, modality: usize, class: usize) -> &[f64] {
        &self.means[modality][class]
    }

    /// Class mean plus `N(0, noise²)` per component.
    pub fn sample<R: Rng + ?Sized>(&self, modality: usize, class: usize, noise: f64, rng: &mut R) -> Vec<f64> {
        self.mean(modality, class)
            .iter()
            .map(|&mu| {
                let e: f64 = rng.sample(StandardNormal);
                mu + noise * e
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: u32,
    pub y: u32,
}

impl Cell {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub width: u32,
    pub height: u32,
    pub poi_count: usize,
    pub robot_count: usize,
    pub robot_modalities: Vec<usize>,
    pub class_count: usize,
    pub obs_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            poi_count: 4,
            robot_count: 3,
            robot_modalities: vec![0, 1, 0],
            class_count: 3,
            obs_noise: 0.2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self, model: &ObservationModel) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.width == 0 || self.height == 0 {
            return fail(format!("world grid {}x{} is empty", self.width, self.height));
        }
        if self.poi_count == 0 {
            return fail("world.poi_count must be at least 1".into());
        }
        if self.robot_count == 0 {
            return fail("world.robot_count must be at least 1".into());
        }
        if self.robot_modalities.len() != self.robot_count {
            return fail(format!(
                "world.robot_modalities has {} entries but world.robot_count is {}",
                self.robot_modalities.len(),
                self.robot_count
            ));
        }
        if let Some(m) = self.robot_modalities.iter().find(|&&m| m >= model.modalities()) {
            return fail(format!(
                "world.robot_modalities contains {m}, only {} modalities exist",
                model.modalities()
            ));
        }
        if self.class_count == 0 || self.class_count > model.classes() {
            return fail(format!(
                "world.class_count {} outside 1..={}",
                self.class_count,
                model.classes()
            ));
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return fail(format!("world.obs_noise {} must be finite and >= 0", self.obs_noise));
        }
        let cells = self.width as u64 * self.height as u64;
        if (self.poi_count + self.robot_count) as u64 > cells {
            return fail(format!(
                "{} PoIs + {} robots do not fit on {} cells",
                self.poi_count, self.robot_count, cells
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Poi {
    pub cell: Cell,
    class_id: usize,
}

impl Poi {
    pub fn new(cell: Cell, class_id: usize) -> Self {
        Self { cell, class_id }
    }

    /// Ground truth. Reserved for evaluation tooling; the agent never sees it.
    pub fn ground_truth_class(&self) -> usize {
        self.class_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotPose {
    pub cell: Cell,
    pub modality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub modality: usize,
    pub vector: Vec<f64>,
    pub poi_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    config: WorldConfig,
    model: ObservationModel,
    pois: Vec<Poi>,
    robots: Vec<RobotPose>,
}

/// Places PoIs and robots on distinct cells and draws classes uniformly,
/// all from `config.seed`.
pub fn reset_world(config: &WorldConfig) -> Result<GridWorld> {
    GridWorld::reset(config, ObservationModel::ambiguity_triangle())
}

impl GridWorld {
    pub fn reset(config: &WorldConfig, model: ObservationModel) -> Result<Self> {
        config.validate(&model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut cells: Vec<Cell> = (0..config.height)
            .flat_map(|y| (0..config.width).map(move |x| Cell::new(x, y)))
            .collect();
        let occupied = config.poi_count + config.robot_count;
        let (picked, _) = cells.partial_shuffle(&mut rng, occupied);
        let pois = picked[..config.poi_count]
            .iter()
            .map(|&cell| Poi::new(cell, rng.random_range(0..config.class_count)))
            .collect();
        let robots = picked[config.poi_count..]
            .iter()
            .zip(&config.robot_modalities)
            .map(|(&cell, &modality)| RobotPose { cell, modality })
            .collect();
        Ok(Self {
            config: config.clone(),
            model,
            pois,
            robots,
        })
    }

    /// Hand-built world, mostly for tests. Co-located entities are allowed.
    pub fn from_parts(
        config: WorldConfig,
        model: ObservationModel,
        pois: Vec<Poi>,
        robots: Vec<RobotPose>,
    ) -> Result<Self> {
        let inside = |c: Cell| c.x < config.width && c.y < config.height;
        if pois.is_empty() || robots.is_empty() {
            return Err(Error::invalid("world needs at least one PoI and one robot"));
        }
        if !pois.iter().all(|p| inside(p.cell) && p.class_id < model.classes())
            || !robots
                .iter()
                .all(|r| inside(r.cell) && r.modality < model.modalities())
        {
            return Err(Error::invalid("entity outside grid or with unknown class/modality"));
        }
        let config = WorldConfig {
            poi_count: pois.len(),
            robot_count: robots.len(),
            robot_modalities: robots.iter().map(|r| r.modality).collect(),
            ..config
        };
        Ok(Self {
            config,
            model,
            pois,
            robots,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn model(&self) -> &ObservationModel {
        &self.model
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn robots(&self) -> &[RobotPose] {
        &self.robots
    }

    pub fn poi_cells(&self) -> Vec<Cell> {
        self.pois.iter().map(|p| p.cell).collect()
    }

    pub fn modalities(&self) -> usize {
        self.model.modalities()
    }

    /// Noisy reading of PoI `poi` through `modality`.
    pub fn sample_observation<R: Rng + ?Sized>(&self, poi: usize, modality: usize, rng: &mut R) -> Observation {
        let class = self.pois[poi].class_id;
        Observation {
            modality,
            vector: self.model.sample(modality, class, self.config.obs_noise, rng),
            poi_index: poi,
        }
    }

    /// Moves robot `robot` onto PoI `poi` and observes it. Returns the
    /// observation and the Manhattan distance covered.
    pub fn execute_drive<R: Rng + ?Sized>(&mut self, robot: usize, poi: usize, rng: &mut R) -> (Observation, u32) {
        let distance = self.path_distance(robot, poi);
        self.robots[robot].cell = self.pois[poi].cell;
        let modality = self.robots[robot].modality;
        (self.sample_observation(poi, modality, rng), distance)
    }

    pub fn path_distance(&self, robot: usize, poi: usize) -> u32 {
        self.robots[robot].cell.manhattan(self.pois[poi].cell)
    }

    /// Up to `limit` PoIs not yet seen by the robot's modality, nearest
    /// first, ties broken by PoI index.
    pub fn candidate_pois(&self, robot: usize, visits: &[ModalityMask], limit: usize) -> Vec<usize> {
        let modality = self.robots[robot].modality;
        let mut cands: Vec<(u32, usize)> = (0..self.pois.len())
            .filter(|&n| !visits[n].contains(modality))
            .map(|n| (self.path_distance(robot, n), n))
            .collect();
        cands.sort_unstable();
        cands.into_iter().take(limit).map(|(_, n)| n).collect()
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            config: self.config.clone(),
            pois: self
                .pois
                .iter()
                .map(|p| PoiRecord {
                    cell: p.cell,
                    class: p.class_id,
                })
                .collect(),
            robots: self.robots.clone(),
        }
    }
}

/// Debug export of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub config: WorldConfig,
    pub pois: Vec<PoiRecord>,
    pub robots: Vec<RobotPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub cell: Cell,
    pub class: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn world_with(pois: &[(u32, u32, usize)], robots: &[(u32, u32, usize)], noise: f64) -> GridWorld {
        let config = WorldConfig {
            obs_noise: noise,
            ..WorldConfig::default()
        };
        GridWorld::from_parts(
            config,
            ObservationModel::ambiguity_triangle(),
            pois.iter().map(|&(x, y, c)| Poi::new(Cell::new(x, y), c)).collect(),
            robots
                .iter()
                .map(|&(x, y, m)| RobotPose {
                    cell: Cell::new(x, y),
                    modality: m,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mask_keys() {
        assert_eq!(ModalityMask::full(2).key(), "0+1");
        assert_eq!(ModalityMask::single(1).key(), "1");
        assert_eq!(ModalityMask::from_key("0+1").unwrap(), ModalityMask::full(2));
        assert!(ModalityMask::from_key("1+0").is_err());
        assert!(ModalityMask::from_key("").is_err());
        let mut m = ModalityMask::EMPTY;
        m.insert(1);
        assert!(m.contains(1) && !m.contains(0));
        assert!(!m.is_full(2));
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = WorldConfig {
            seed: 3,
            ..WorldConfig::default()
        };
        assert_eq!(reset_world(&cfg).unwrap(), reset_world(&cfg).unwrap());
    }

    #[test]
    fn default_world_occupies_distinct_cells() {
        let w = reset_world(&WorldConfig::default()).unwrap();
        let cells: HashSet<Cell> = w
            .pois()
            .iter()
            .map(|p| p.cell)
            .chain(w.robots().iter().map(|r| r.cell))
            .collect();
        assert_eq!(cells.len(), 7);
        assert_eq!(
            w.robots().iter().map(|r| r.modality).collect::<Vec<_>>(),
            vec![0, 1, 0]
        );
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let cfg = WorldConfig {
            width: 100,
            height: 100,
            poi_count: 3000,
            robot_count: 1,
            robot_modalities: vec![0],
            seed: 17,
            ..WorldConfig::default()
        };
        let w = reset_world(&cfg).unwrap();
        let mut counts = [0usize; 3];
        for p in w.pois() {
            counts[p.ground_truth_class()] += 1;
        }
        for c in counts {
            let f = c as f64 / 3000.0;
            assert!((0.30..=0.37).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let too_small = WorldConfig {
            width: 2,
            height: 3,
            poi_count: 4,
            ..WorldConfig::default()
        };
        assert!(matches!(reset_world(&too_small), Err(Error::Config(_))));
        let bad_modality = WorldConfig {
            robot_modalities: vec![0, 2, 0],
            ..WorldConfig::default()
        };
        assert!(reset_world(&bad_modality).is_err());
        let bad_len = WorldConfig {
            robot_modalities: vec![0, 1],
            ..WorldConfig::default()
        };
        assert!(reset_world(&bad_len).is_err());
    }

    #[test]
    fn noise_free_observations_follow_table() {
        let w = world_with(&[(0, 0, 2), (1, 0, 0), (2, 0, 1)], &[(5, 5, 0)], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(w.sample_observation(0, 0, &mut rng).vector, vec![1.0, 0.0]);
        let a0 = w.sample_observation(1, 0, &mut rng).vector;
        let a1 = w.sample_observation(2, 0, &mut rng).vector;
        assert_eq!(a0, vec![-1.0, 0.0]);
        assert_eq!(a0, a1);
        assert_ne!(w.sample_observation(1, 1, &mut rng).vector, w.sample_observation(2, 1, &mut rng).vector);
    }

    #[test]
    fn noisy_sample_mean_converges() {
        let w = world_with(&[(0, 0, 1)], &[(5, 5, 1)], 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let o = w.sample_observation(0, 1, &mut rng);
            sum[0] += o.vector[0];
            sum[1] += o.vector[1];
        }
        assert!((sum[0] / n as f64 - 1.0).abs() < 0.01);
        assert!((sum[1] / n as f64).abs() < 0.01);
    }

    #[test]
    fn drive_distances() {
        let mut w = world_with(&[(3, 4, 0), (0, 0, 1)], &[(0, 0, 0), (0, 0, 1)], 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(w.path_distance(0, 0), 7);
        let (obs, d) = w.execute_drive(0, 0, &mut rng);
        assert_eq!(d, 7);
        assert_eq!(obs.modality, 0);
        assert_eq!(obs.poi_index, 0);
        assert_eq!(w.robots()[0].cell, Cell::new(3, 4));
        let (_, d) = w.execute_drive(0, 0, &mut rng);
        assert_eq!(d, 0);
        assert_eq!(w.robots()[0].cell, Cell::new(3, 4));
        let (_, d) = w.execute_drive(1, 0, &mut rng);
        assert_eq!(d, 7);
        assert_eq!(w.robots()[0].cell, w.robots()[1].cell);
    }

    #[test]
    fn manhattan_examples() {
        let w = world_with(&[(4, 1, 0), (1, 1, 0)], &[(1, 1, 0)], 0.0);
        assert_eq!(w.path_distance(0, 0), 3);
        assert_eq!(w.path_distance(0, 1), 0);
    }

    #[test]
    fn candidate_order_and_filter() {
        // robot at origin; distances 5, 2, 2, 9
        let w = world_with(
            &[(5, 0, 0), (2, 0, 0), (0, 2, 0), (9, 0, 0)],
            &[(0, 0, 0)],
            0.0,
        );
        let none = vec![ModalityMask::EMPTY; 4];
        assert_eq!(w.candidate_pois(0, &none, 2), vec![1, 2]);
        assert_eq!(w.candidate_pois(0, &none, 10), vec![1, 2, 0, 3]);
        let all = vec![ModalityMask::single(0); 4];
        assert!(w.candidate_pois(0, &all, 2).is_empty());
        let other = vec![ModalityMask::single(1); 4];
        assert_eq!(w.candidate_pois(0, &other, 2), vec![1, 2]);
        let mut mixed = none.clone();
        mixed[1].insert(0);
        assert_eq!(w.candidate_pois(0, &mixed, 2), vec![2, 0]);
    }

    #[test]
    fn snapshot_serializes() {
        let w = reset_world(&WorldConfig::default()).unwrap();
        let json = serde_json::to_value(w.snapshot()).unwrap();
        assert_eq!(json["pois"].as_array().unwrap().len(), 4);
        assert!(json["pois"][0]["class"].is_u64());
        assert_eq!(json["robots"][1]["modality"], 1);
        let back: WorldSnapshot = serde_json::from_value(json).unwrap();
        assert_eq!(back, w.snapshot());
    }
}
