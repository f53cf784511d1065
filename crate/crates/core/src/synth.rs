//! Synthetic embedding clusters with temporally correlated frames.
//!
//! Each class gets a center on the unit sphere. Each instance of a class
//! gets a sub-center offset from it, and its frames follow a mean-reverting
//! random walk around that sub-center. Values are rounded to `f32` so a
//! generated dataset survives a trip through the binary file unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetRecord};
use crate::error::{Error, Result};

/// Autocorrelation of consecutive frames.
const FRAME_PERSISTENCE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub instances: usize,
    pub frames: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of instance offsets and frame noise.
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            instances: 3,
            frames: 120,
            dim: 32,
            spread: 0.1,
            seed: 0,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// Generates `classes * instances * frames` records, grouped by class, then
/// instance, then frame.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.instances == 0 || spec.frames == 0 || spec.dim == 0 {
        return Err(Error::InvalidParameter(
            "synthetic classes, instances, frames and dim must be positive".into(),
        ));
    }
    if spec.classes > usize::from(u16::MAX) + 1 || spec.instances > usize::from(u16::MAX) + 1 {
        return Err(Error::InvalidParameter(
            "classes and instances must fit in 16 bits".into(),
        ));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::InvalidParameter("spread must be finite and >= 0".into()));
    }
    let d = spec.dim;
    let s = spec.spread;
    let step = s * (1.0 - FRAME_PERSISTENCE * FRAME_PERSISTENCE).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes).map(|_| unit_vec(&mut rng, d)).collect();
    let mut records = Vec::with_capacity(spec.classes * spec.instances * spec.frames);
    for (y, center) in centers.iter().enumerate() {
        for instance in 0..spec.instances {
            let sub: Vec<f64> = center
                .iter()
                .zip(normal_vec(&mut rng, d))
                .map(|(c, n)| c + s * n)
                .collect();
            let mut x: Vec<f64> = sub
                .iter()
                .zip(normal_vec(&mut rng, d))
                .map(|(m, n)| m + s * n)
                .collect();
            for frame in 0..spec.frames {
                if frame > 0 {
                    let noise = normal_vec(&mut rng, d);
                    for j in 0..d {
                        x[j] = sub[j] + FRAME_PERSISTENCE * (x[j] - sub[j]) + step * noise[j];
                    }
                }
                records.push(DatasetRecord {
                    z: round_f32(&x),
                    y,
                    instance_id: instance as u32,
                    frame_index: frame as u32,
                });
            }
        }
    }
    Dataset::new(d, spec.classes, true, records)
}
