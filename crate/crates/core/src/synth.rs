//! Synthetic bags with planted, spatially scattered tissue prototypes.
//!
//! Each bag is laid out on a square grid. The tumor prototype occupies
//! `dispersion` separate blobs placed far apart on the grid; the remaining
//! instances form Voronoi regions of the other prototypes. Features are the
//! instance's prototype plus isotropic Gaussian noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::bag::{FeatureBag, Label, SubtypeLabel, SurvivalLabel, Task};
use crate::error::{MicoError, Result};
use crate::tensor::Tensor;

/// Bags whose tumor fraction exceeds this are labelled subtype 1.
pub const SUBTYPE_THRESHOLD: f64 = 0.3;
/// Tumor fraction is drawn uniformly from `[0, MAX_TUMOR_FRACTION]`.
pub const MAX_TUMOR_FRACTION: f64 = 0.6;
/// Survival times are exponential with rate `BASE_RATE + RATE_SLOPE * fraction`.
pub const BASE_RATE: f64 = 0.2;
pub const RATE_SLOPE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_bags: usize,
    pub d: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Number of tissue prototypes `T`.
    pub prototypes: usize,
    /// Radius of the sphere the prototypes are drawn on.
    pub prototype_separation: f64,
    pub noise_std: f64,
    pub tumor_prototype_index: usize,
    /// Number of disjoint spatial blobs holding the tumor instances.
    pub dispersion: usize,
    pub task: Task,
    pub censoring_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_bags: 200,
            d: 32,
            min_instances: 40,
            max_instances: 120,
            prototypes: 6,
            prototype_separation: 1.0,
            noise_std: 0.1,
            tumor_prototype_index: 0,
            dispersion: 3,
            task: Task::Subtype,
            censoring_rate: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MicoError::Config(format!("synth config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(MicoError::Config(format!("synth: {m}")));
        if self.n_bags == 0 {
            return fail("n_bags must be positive");
        }
        if self.d == 0 {
            return fail("d must be positive");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return fail("need 1 <= min_instances <= max_instances");
        }
        if self.prototypes < 2 {
            return fail("need at least 2 prototypes");
        }
        if self.tumor_prototype_index >= self.prototypes {
            return fail("tumor_prototype_index out of range");
        }
        if self.dispersion < 2 {
            return fail("dispersion must be at least 2");
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return fail("censoring_rate must lie in [0, 1)");
        }
        if !(self.prototype_separation > 0.0) || !(self.noise_std >= 0.0) {
            return fail("separation must be positive and noise non-negative");
        }
        Ok(())
    }
}

/// Output of [`generate`]: the bags plus the prototypes used to make them.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub bags: Vec<FeatureBag>,
    /// `T x d`.
    pub prototypes: Tensor,
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prototypes = draw_prototypes(config, &mut rng);
    let bags = (0..config.n_bags)
        .map(|i| {
            let bag_seed = rng.random::<u64>();
            make_bag(config, &prototypes, i, bag_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset { bags, prototypes })
}

fn draw_prototypes(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(config.prototypes * config.d);
    for _ in 0..config.prototypes {
        let v: Vec<f64> = loop {
            let v: Vec<f64> = (0..config.d).map(|_| normal.sample(rng)).collect();
            if v.iter().any(|x| *x != 0.0) {
                break v;
            }
        };
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / norm * config.prototype_separation));
    }
    Tensor::from_parts(vec![config.prototypes, config.d], data)
}

fn make_bag(config: &SynthConfig, prototypes: &Tensor, index: usize, seed: u64) -> Result<FeatureBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(config.min_instances..=config.max_instances);
    let rho_target = rng.random::<f64>() * MAX_TUMOR_FRACTION;
    let n_tumor = (rho_target * m as f64).round() as usize;
    let rho = n_tumor as f64 / m as f64;

    let side = ((2 * m) as f64).sqrt().ceil() as usize;
    let cells: Vec<[f64; 2]> = (0..side * side)
        .map(|c| [(c % side) as f64, (c / side) as f64])
        .collect();
    let mut taken = vec![false; cells.len()];

    // Tumor blobs sit evenly spaced on a ring around the grid center.
    let mid = (side as f64 - 1.0) / 2.0;
    let radius = 0.35 * side as f64;
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let blob_centers: Vec<[f64; 2]> = (0..config.dispersion)
        .map(|b| {
            let a = phase + std::f64::consts::TAU * b as f64 / config.dispersion as f64;
            [mid + radius * a.cos(), mid + radius * a.sin()]
        })
        .collect();
    let dist2 = |p: &[f64; 2], q: &[f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);

    let mut placed: Vec<([f64; 2], u32)> = Vec::with_capacity(m);
    for t in 0..n_tumor {
        let center = &blob_centers[t % config.dispersion];
        let cell = (0..cells.len())
            .filter(|&c| !taken[c])
            .min_by(|&a, &b| dist2(&cells[a], center).total_cmp(&dist2(&cells[b], center)))
            .expect("grid has 2M cells");
        taken[cell] = true;
        placed.push((cells[cell], config.tumor_prototype_index as u32));
    }

    // Background tissue: Voronoi regions of the non-tumor prototypes.
    let others: Vec<u32> = (0..config.prototypes as u32)
        .filter(|&p| p as usize != config.tumor_prototype_index)
        .collect();
    let region_seeds: Vec<([f64; 2], u32)> = others
        .iter()
        .map(|&p| {
            let s = [rng.random::<f64>() * side as f64, rng.random::<f64>() * side as f64];
            (s, p)
        })
        .collect();
    let mut free: Vec<usize> = (0..cells.len()).filter(|&c| !taken[c]).collect();
    free.shuffle(&mut rng);
    for &cell in free.iter().take(m - n_tumor) {
        let p = &cells[cell];
        let kind = region_seeds
            .iter()
            .min_by(|a, b| dist2(&a.0, p).total_cmp(&dist2(&b.0, p)))
            .map(|s| s.1)
            .expect("at least one background prototype");
        placed.push((*p, kind));
    }
    placed.shuffle(&mut rng);

    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| MicoError::Config(format!("noise_std: {e}")))?;
    let d = config.d;
    let mut features = Vec::with_capacity(m * d);
    for (_, kind) in &placed {
        let proto = prototypes.row(*kind as usize);
        features.extend(proto.iter().map(|&x| {
            if config.noise_std == 0.0 {
                x
            } else {
                x + noise.sample(&mut rng)
            }
        }));
    }

    let label = match config.task {
        Task::Subtype => Label::Subtype(SubtypeLabel {
            class_index: usize::from(rho > SUBTYPE_THRESHOLD),
        }),
        Task::Survival => {
            let rate = BASE_RATE + RATE_SLOPE * rho;
            let time = Exp::new(rate).expect("positive rate").sample(&mut rng);
            let censored = rng.random::<f64>() < config.censoring_rate;
            let time = if censored { time * rng.random::<f64>() } else { time };
            Label::Survival(SurvivalLabel {
                time,
                event: !censored,
                bin: 0,
            })
        }
    };

    let bag = FeatureBag {
        bag_id: format!("bag_{index:05}"),
        features: Tensor::from_parts(vec![m, d], features),
        coords: Some(placed.iter().map(|p| p.0).collect()),
        label,
        true_type_map: Some(placed.iter().map(|p| p.1).collect()),
    };
    bag.validate()?;
    Ok(bag)
}

/// Fraction of a bag's instances drawn from `prototype`, from the type map.
pub fn prototype_fraction(bag: &FeatureBag, prototype: usize) -> Option<f64> {
    let map = bag.true_type_map.as_ref()?;
    let n = map.iter().filter(|&&t| t as usize == prototype).count();
    Some(n as f64 / map.len() as f64)
}
