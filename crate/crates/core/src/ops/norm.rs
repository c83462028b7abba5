//! Layer normalization over an arbitrary set of axes.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Group id of every element: elements sharing all non-normalized coordinates
/// share a group.
fn group_ids(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let st = strides(shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let groups: usize = kept.iter().map(|&a| shape[a]).product();
    let n: usize = shape.iter().product();
    let ids = (0..n)
        .map(|flat| kept.iter().fold(0, |acc, &a| acc * shape[a] + (flat / st[a]) % shape[a]))
        .collect();
    (ids, groups)
}

impl<T: Real> Graph<T> {
    /// Standardize over `axes` (zero mean, unit variance, `eps = 1e-5` on the
    /// biased variance). No affine; compose with [`Graph::channel_affine`].
    pub fn layer_norm(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::InvalidArgument(format!("layer_norm axes {axes:?} for {shape:?}")));
        }
        let (ids, groups) = group_ids(&shape, axes);
        let count = T::from_count(ids.len() / groups);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); groups];
        for (&v, &g) in xv.iter().zip(&ids) {
            mean[g] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![T::zero(); groups];
        for (&v, &g) in xv.iter().zip(&ids) {
            let d = v - mean[g];
            var[g] += d * d;
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / count + eps).sqrt()).collect();
        let data = xv.iter().zip(&ids).map(|(&v, &g)| (v - mean[g]) * inv_std[g]).collect();
        let out = Tensor::new(&shape, data)?;
        self.record(
            "layer_norm",
            out,
            &[x],
            Box::new(move |c| {
                // dx = inv_std * (g - mean(g) - y * mean(g*y))
                let y = c.output.data();
                let mut mg = vec![T::zero(); groups];
                let mut mgy = vec![T::zero(); groups];
                for ((&g, &yv), &id) in c.grad.iter().zip(y).zip(&ids) {
                    mg[id] += g;
                    mgy[id] += g * yv;
                }
                let dx = c
                    .grad
                    .iter()
                    .zip(y)
                    .zip(&ids)
                    .map(|((&g, &yv), &id)| inv_std[id] * (g - mg[id] / count - yv * mgy[id] / count))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }
}
