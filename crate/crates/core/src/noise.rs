//! Mask noise for robust prototype learning: scaling about the ego voxel and
//! random class flipping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::ClassMasks;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Scale ratio is drawn uniformly from `[lo, hi]`.
    pub scale_range: [f64; 2],
    /// Per-voxel flip probability.
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { scale_range: [0.8, 1.2], flip_prob: 0.05, seed: 7 }
    }
}

impl NoiseConfig {
    /// No scaling and no flipping.
    pub fn identity() -> Self {
        Self { scale_range: [1.0, 1.0], flip_prob: 0.0, ..Self::default() }
    }

    pub fn is_identity(&self) -> bool {
        self.scale_range == [1.0, 1.0] && self.flip_prob == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability must be in [0, 1], got {}", self.flip_prob)));
        }
        Ok(())
    }

    /// Draw a ratio, scale about `center`, then flip.
    pub fn apply<R: Rng>(&self, masks: &ClassMasks, center: [usize; 3], rng: &mut R) -> Result<ClassMasks> {
        let [lo, hi] = self.scale_range;
        let s = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let scaled = scaling_noise(masks, s, center)?;
        Ok(flipping_noise(&scaled, self.flip_prob, rng))
    }
}

/// Each output voxel takes the class at source coordinate
/// `center + (coord - center) / s`, rounded to the nearest voxel and clamped.
pub fn scaling_noise(masks: &ClassMasks, s: f64, center: [usize; 3]) -> Result<ClassMasks> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale ratio must be positive, got {s}")));
    }
    let e = masks.extents;
    let src_of = |i: usize, axis: usize| -> usize {
        let c = center[axis] as f64;
        let v = (c + (i as f64 - c) / s).round();
        v.clamp(0.0, (e[axis] - 1) as f64) as usize
    };
    let map: [Vec<usize>; 3] = std::array::from_fn(|a| (0..e[a]).map(|i| src_of(i, a)).collect());
    let src = masks.labels();
    let mut out = Vec::with_capacity(src.len());
    for x in 0..e[0] {
        for y in 0..e[1] {
            for z in 0..e[2] {
                out.push(src[(map[0][x] * e[1] + map[1][y]) * e[2] + map[2][z]]);
            }
        }
    }
    ClassMasks::from_labels(out, masks.num_classes, e)
}

/// Each voxel independently, with probability `rho`, moves to a class drawn
/// uniformly from the other `C - 1` classes.
pub fn flipping_noise<R: Rng>(masks: &ClassMasks, rho: f64, rng: &mut R) -> ClassMasks {
    let c = masks.num_classes;
    let labels = masks
        .labels()
        .iter()
        .map(|&l| {
            if rho > 0.0 && c > 1 && rng.gen_bool(rho.min(1.0)) {
                let k = rng.gen_range(0..c - 1) as u8;
                if k >= l {
                    k + 1
                } else {
                    k
                }
            } else {
                l
            }
        })
        .collect();
    ClassMasks::from_labels(labels, c, masks.extents).expect("flipping keeps labels in range")
}
