//! Prototype query decoder.
//!
//! A shallow voxel classifier yields per-class masks; averaging the fused
//! voxel feature under each mask gives scene-adaptive prototypes, an
//! exponential moving average of those gives scene-agnostic prototypes, and
//! their sum is one query per class. Each query is decoded once by two MLP
//! heads into a class distribution and a mask embedding.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, Mlp, ParamStore};
use crate::ops::ConvSpec;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Number of classes `C`, including the empty class at index `C - 1`.
    pub num_classes: usize,
    /// EMA coefficient for the scene-agnostic prototypes.
    pub ema_alpha: f64,
    /// Accepted so configurations written for iterative mask decoders load
    /// unchanged. The prototype decoder always runs exactly one pass.
    pub decode_iterations: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { num_classes: 6, ema_alpha: 0.01, decode_iterations: 1 }
    }
}

impl DecoderConfig {
    pub fn empty_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least one semantic class plus the empty class".into()));
        }
        if self.num_classes > u8::MAX as usize {
            return Err(Error::Config("at most 255 classes are supported".into()));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::Config(format!("ema_alpha must be in (0, 1], got {}", self.ema_alpha)));
        }
        Ok(())
    }
}

/// Two kernel-3 convs producing per-voxel class logits.
#[derive(Clone, Debug)]
pub struct AuxClassifier {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl AuxClassifier {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, channels: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv::new(store, "decoder.aux.conv1", channels, channels, ConvSpec::cube(3), true, rng),
            conv2: Conv::new(store, "decoder.aux.conv2", channels, classes, ConvSpec::cube(3), true, rng),
        }
    }

    /// Returns `(logits, probs)`, both `[C,X,Y,Z]`; probs are softmaxed over classes.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, cvf: Var) -> Result<(Var, Var)> {
        let h = self.conv1.forward(g, p, cvf)?;
        let h = g.relu(h)?;
        let logits = self.conv2.forward(g, p, h)?;
        let probs = g.softmax(logits, 0)?;
        Ok((logits, probs))
    }
}

/// Per-voxel class assignment; every voxel belongs to exactly one class, so
/// the binary masks it induces always partition the grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMasks {
    pub num_classes: usize,
    pub extents: [usize; 3],
    labels: Vec<u8>,
    counts: Vec<usize>,
}

impl ClassMasks {
    pub fn from_labels(labels: Vec<u8>, num_classes: usize, extents: [usize; 3]) -> Result<Self> {
        if labels.len() != extents.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} labels for grid {extents:?}", labels.len())));
        }
        let mut counts = vec![0; num_classes];
        for &l in &labels {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::InvalidArgument(format!("label {l} out of range for {num_classes} classes")));
            }
            counts[l] += 1;
        }
        Ok(Self { num_classes, extents, labels, counts })
    }

    /// Argmax over the class axis of `probs[C,X,Y,Z]`; ties go to the lowest index.
    pub fn from_probs<T: Real>(probs: &Tensor<T>) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("class masks need [C,X,Y,Z], got {s:?}")));
        }
        let c = s[0];
        let n = s[1] * s[2] * s[3];
        let d = probs.data();
        let labels = (0..n)
            .map(|v| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * n + v] > d[best * n + v] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Self::from_labels(labels, c, [s[1], s[2], s[3]])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Binary mask of class `c` as a `[X,Y,Z]` tensor.
    pub fn mask<T: Real>(&self, c: usize) -> Tensor<T> {
        let [x, y, z] = self.extents;
        Tensor::from_fn(&[x, y, z], |i| if self.labels[i] as usize == c { T::one() } else { T::zero() })
    }
}

/// Scene-agnostic prototype state.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T: Real> {
    /// `[C,D]` EMA of scene-adaptive prototypes.
    pub global: Tensor<T>,
    pub alpha: f64,
    pub updates: u64,
}

impl<T: Real> PrototypeBank<T> {
    pub fn new(classes: usize, channels: usize, alpha: f64) -> Self {
        Self { global: Tensor::zeros(&[classes, channels]), alpha, updates: 0 }
    }

    /// `P^g ← α·P^d + (1-α)·P^g`, including rows where `P^d` is zero.
    pub fn ema_update(&mut self, adaptive: &Tensor<T>, mode: Mode) -> Result<()> {
        if mode != Mode::Train {
            return Err(Error::TrainingOnly("ema_update"));
        }
        if adaptive.shape() != self.global.shape() {
            return Err(Error::Shape(format!("ema_update {:?} vs bank {:?}", adaptive.shape(), self.global.shape())));
        }
        let a = T::from_f64_lossy(self.alpha);
        let keep = T::one() - a;
        self.global.data_mut().iter_mut().zip(adaptive.data()).for_each(|(g, &d)| *g = a * d + keep * *g);
        self.updates += 1;
        Ok(())
    }
}

/// Differentiable outputs of one decode.
#[derive(Clone, Debug)]
pub struct OccupancyPrediction {
    /// `[C,C]`: row `c` holds query `c`'s class logits.
    pub class_logits: Var,
    /// `[C,C]`: softmax of `class_logits` along rows.
    pub class_probs: Var,
    /// `[C,D]`.
    pub mask_embed: Var,
    /// `[C,N]` pre-sigmoid mask logits, `N = X·Y·Z`.
    pub mask_logits: Var,
    /// `[C,N]` occupancy masks in (0,1).
    pub masks: Var,
    /// `[C,N]`: `semantic[c'] = Σ_c class_probs[c][c'] · masks[c]`.
    pub semantic: Var,
}

impl OccupancyPrediction {
    /// Argmax over classes of the semantic volume; ties go to the lowest index.
    pub fn hard_labels<T: Real>(&self, g: &Graph<T>) -> Vec<u8> {
        argmax_rows(g.value(self.semantic))
    }
}

/// Column-wise argmax of a `[C,N]` tensor.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let (c, n) = (t.shape()[0], t.len() / t.shape()[0]);
    let d = t.data();
    (0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + v] > d[best * n + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Debug)]
pub struct PrototypeHead {
    pub class_mlp: Mlp,
    pub mask_mlp: Mlp,
    decode_calls: AtomicU64,
}

impl Clone for PrototypeHead {
    fn clone(&self) -> Self {
        Self {
            class_mlp: self.class_mlp.clone(),
            mask_mlp: self.mask_mlp.clone(),
            decode_calls: AtomicU64::new(self.decode_calls()),
        }
    }
}

impl PrototypeHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, channels: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            class_mlp: Mlp::new(store, "decoder.class_mlp", channels, channels, classes, rng),
            mask_mlp: Mlp::new(store, "decoder.mask_mlp", channels, channels, channels, rng),
            decode_calls: AtomicU64::new(0),
        }
    }

    /// Number of `predict` evaluations so far.
    pub fn decode_calls(&self) -> u64 {
        self.decode_calls.load(Ordering::Relaxed)
    }

    pub fn reset_decode_calls(&self) {
        self.decode_calls.store(0, Ordering::Relaxed);
    }

    /// Single-pass decode of `queries[C,D]` against `cvf[D,X,Y,Z]`.
    pub fn predict<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, queries: Var, cvf: Var) -> Result<OccupancyPrediction> {
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        let (sq, sv) = (g.shape(queries).to_vec(), g.shape(cvf).to_vec());
        if sq.len() != 2 || sv.len() != 4 || sq[1] != sv[0] {
            return Err(Error::Shape(format!("predict: queries {sq:?} vs feature {sv:?}")));
        }
        let n = sv[1] * sv[2] * sv[3];
        let class_logits = self.class_mlp.forward(g, p, queries)?;
        let class_probs = g.softmax(class_logits, 1)?;
        let mask_embed = self.mask_mlp.forward(g, p, queries)?;
        let flat = g.reshape(cvf, &[sv[0], n])?;
        let mask_logits = g.matmul(mask_embed, flat)?;
        let masks = g.sigmoid(mask_logits)?;
        let probs_t = g.transpose2d(class_probs)?;
        let semantic = g.matmul(probs_t, masks)?;
        Ok(OccupancyPrediction { class_logits, class_probs, mask_embed, mask_logits, masks, semantic })
    }
}

impl<T: Real> Graph<T> {
    /// Mean of `cvf[D,X,Y,Z]` over each class mask, `[C,D]`; classes with an
    /// empty mask get a zero row.
    pub fn adaptive_prototypes(&mut self, cvf: Var, masks: &ClassMasks) -> Result<Var> {
        let s = self.shape(cvf).to_vec();
        if s.len() != 4 || s[1..] != masks.extents[..] {
            return Err(Error::Shape(format!("prototypes: feature {s:?} vs masks {:?}", masks.extents)));
        }
        let (d, n, c) = (s[0], masks.len(), masks.num_classes);
        let labels = masks.labels.clone();
        let inv: Vec<T> = masks.counts.iter().map(|&k| if k == 0 { T::zero() } else { T::one() / T::from_count(k) }).collect();
        let v = self.value(cvf).data();
        let mut sums = vec![T::zero(); c * d];
        for ch in 0..d {
            let row = &v[ch * n..(ch + 1) * n];
            for (i, &l) in labels.iter().enumerate() {
                sums[l as usize * d + ch] += row[i];
            }
        }
        for k in 0..c {
            sums[k * d..(k + 1) * d].iter_mut().for_each(|x| *x *= inv[k]);
        }
        let out = Tensor::new(&[c, d], sums)?;
        self.record(
            "adaptive_prototypes",
            out,
            &[cvf],
            Box::new(move |cx| {
                let mut dv = vec![T::zero(); d * n];
                for ch in 0..d {
                    for (i, &l) in labels.iter().enumerate() {
                        let l = l as usize;
                        dv[ch * n + i] = cx.grad[l * d + ch] * inv[l];
                    }
                }
                vec![Some(dv)]
            }),
        )
    }
}

/// `Q = P^d + P^g`.
pub fn form_queries<T: Real>(g: &mut Graph<T>, adaptive: Var, global: Var) -> Result<Var> {
    g.add(adaptive, global)
}
