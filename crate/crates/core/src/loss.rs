//! Loss terms: depth cross-entropy, Lovasz-softmax + Dice on the auxiliary
//! classifier, and CE + focal + Dice on the prototype decoder outputs.

use crate::autograd::{Graph, Var};
use crate::decoder::OccupancyPrediction;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const FOCAL_GAMMA: f64 = 2.0;

/// Header of the TSV written by [`LossReport::log_line`].
pub const LOG_HEADER: &str = "step\tl_depth\tl_adapg\tl_occ\tl_rpl\tl_total";

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_rows<T: Real>(g: &Graph<T>, x: Var, labels: &[u8], rows: &[usize], op: &str) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != labels.len() {
        return Err(Error::Shape(format!("{op}: input {s:?} vs {} labels", labels.len())));
    }
    if let Some(r) = rows.iter().find(|&&r| r >= s[0]) {
        return Err(Error::InvalidArgument(format!("{op}: row {r} out of range for {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Rows present in `labels`, ascending.
pub fn present_classes(labels: &[u8], num_classes: usize) -> Vec<usize> {
    let mut seen = vec![false; num_classes];
    for &l in labels {
        seen[l as usize] = true;
    }
    (0..num_classes).filter(|&c| seen[c]).collect()
}

impl<T: Real> Graph<T> {
    /// Mean cross-entropy of `logits[K,M]` (classes on axis 0) over the
    /// columns that have a target. Zero when no column has one.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] != targets.len() {
            return Err(Error::Shape(format!("cross_entropy: logits {s:?} vs {} targets", targets.len())));
        }
        let (k, m) = (s[0], s[1]);
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("cross_entropy: target {t} out of {k} classes")));
        }
        let x = self.value(logits).data();
        let valid = targets.iter().filter(|t| t.is_some()).count();
        let mut total = T::zero();
        let mut lse = vec![T::zero(); m];
        for col in 0..m {
            let mx = (0..k).map(|r| x[r * m + col]).fold(T::neg_infinity(), T::max);
            let z: T = (0..k).map(|r| (x[r * m + col] - mx).exp()).sum();
            lse[col] = mx + z.ln();
            if let Some(t) = targets[col] {
                total += lse[col] - x[t * m + col];
            }
        }
        let norm = if valid == 0 { T::zero() } else { T::one() / T::from_count(valid) };
        let targets = targets.to_vec();
        self.record(
            "cross_entropy",
            Tensor::scalar(total * norm),
            &[logits],
            Box::new(move |c| {
                let x = c.inputs[0].data();
                let scale = c.grad[0] * norm;
                let mut dx = vec![T::zero(); k * m];
                for col in 0..m {
                    let Some(t) = targets[col] else { continue };
                    for r in 0..k {
                        let p = (x[r * m + col] - lse[col]).exp();
                        dx[r * m + col] = scale * (p - if r == t { T::one() } else { T::zero() });
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Lovasz-softmax: per class, the Lovasz extension of the Jaccard loss
    /// evaluated at the absolute errors `|[label = c] - p_c|`, averaged over
    /// `rows`. Errors are sorted descending, ties by voxel index.
    pub fn lovasz_softmax(&mut self, probs: Var, labels: &[u8], rows: &[usize]) -> Result<Var> {
        let (_, n) = check_rows(self, probs, labels, rows, "lovasz_softmax")?;
        let p = self.value(probs).data();
        let mut total = T::zero();
        // per row: (voxel order, lovasz gradient in that order)
        let mut saved: Vec<(usize, Vec<usize>, Vec<T>)> = Vec::with_capacity(rows.len());
        for &c in rows {
            let fg: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
            let err: Vec<T> = (0..n)
                .map(|i| {
                    let pi = p[c * n + i];
                    if fg[i] {
                        T::one() - pi
                    } else {
                        pi
                    }
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| err[b].partial_cmp(&err[a]).unwrap_or(std::cmp::Ordering::Equal));
            let grad = lovasz_grad(order.iter().map(|&i| fg[i]));
            total += order.iter().zip(&grad).map(|(&i, &gr)| err[i] * gr).sum::<T>();
            saved.push((c, order, grad));
        }
        let norm = if rows.is_empty() { T::zero() } else { T::one() / T::from_count(rows.len()) };
        let labels = labels.to_vec();
        let len = self.value(probs).len();
        self.record(
            "lovasz_softmax",
            Tensor::scalar(total * norm),
            &[probs],
            Box::new(move |cx| {
                let scale = cx.grad[0] * norm;
                let mut dp = vec![T::zero(); len];
                for (c, order, grad) in &saved {
                    for (&i, &gr) in order.iter().zip(grad) {
                        let sign = if labels[i] as usize == *c { -T::one() } else { T::one() };
                        dp[c * n + i] += scale * gr * sign;
                    }
                }
                vec![Some(dp)]
            }),
        )
    }

    /// Soft Dice `1 - 2Σpy / (Σp + Σy)` of each row in `rows` of `probs[K,N]`
    /// against `[label = row]`, averaged over `rows`. A row with
    /// `Σp + Σy = 0` contributes zero.
    pub fn soft_dice(&mut self, probs: Var, labels: &[u8], rows: &[usize]) -> Result<Var> {
        let (_, n) = check_rows(self, probs, labels, rows, "soft_dice")?;
        let p = self.value(probs).data();
        let mut total = T::zero();
        let mut stats = Vec::with_capacity(rows.len());
        for &c in rows {
            let (mut inter, mut psum, mut ysum) = (T::zero(), T::zero(), T::zero());
            for i in 0..n {
                let pi = p[c * n + i];
                psum += pi;
                if labels[i] as usize == c {
                    inter += pi;
                    ysum += T::one();
                }
            }
            let denom = psum + ysum;
            if denom > T::zero() {
                total += T::one() - (inter + inter) / denom;
            }
            stats.push((c, inter, denom));
        }
        let norm = if rows.is_empty() { T::zero() } else { T::one() / T::from_count(rows.len()) };
        let labels = labels.to_vec();
        let len = self.value(probs).len();
        self.record(
            "soft_dice",
            Tensor::scalar(total * norm),
            &[probs],
            Box::new(move |cx| {
                let scale = cx.grad[0] * norm;
                let two = T::one() + T::one();
                let mut dp = vec![T::zero(); len];
                for &(c, inter, denom) in &stats {
                    if denom <= T::zero() {
                        continue;
                    }
                    let base = two * inter / (denom * denom);
                    let fg = two / denom;
                    for i in 0..n {
                        let y = if labels[i] as usize == c { fg } else { T::zero() };
                        dp[c * n + i] += scale * (base - y);
                    }
                }
                vec![Some(dp)]
            }),
        )
    }

    /// Binary focal loss on sigmoid logits `[K,N]`: per row in `rows`, the
    /// voxel mean of `-y(1-p)^γ log p - (1-y) p^γ log(1-p)` with
    /// `y = [label = row]`; averaged over `rows`.
    pub fn sigmoid_focal(&mut self, logits: Var, labels: &[u8], rows: &[usize], gamma: f64) -> Result<Var> {
        let (_, n) = check_rows(self, logits, labels, rows, "sigmoid_focal")?;
        if gamma < 0.0 {
            return Err(Error::InvalidArgument("focal gamma must be non-negative".into()));
        }
        let gm = T::from_f64_lossy(gamma);
        let z = self.value(logits).data();
        let mut total = T::zero();
        for &c in rows {
            for i in 0..n {
                let zi = z[c * n + i];
                let p = crate::ops::sigmoid(zi);
                total += if labels[i] as usize == c {
                    (T::one() - p).powf(gm) * softplus(-zi)
                } else {
                    p.powf(gm) * softplus(zi)
                };
            }
        }
        let norm = if rows.is_empty() { T::zero() } else { T::one() / T::from_count(rows.len() * n) };
        let labels = labels.to_vec();
        let rows = rows.to_vec();
        let len = self.value(logits).len();
        self.record(
            "sigmoid_focal",
            Tensor::scalar(total * norm),
            &[logits],
            Box::new(move |cx| {
                let z = cx.inputs[0].data();
                let scale = cx.grad[0] * norm;
                let mut dz = vec![T::zero(); len];
                for &c in &rows {
                    for i in 0..n {
                        let zi = z[c * n + i];
                        let p = crate::ops::sigmoid(zi);
                        let d = if labels[i] as usize == c {
                            // (1-p)^γ [γ p log p - (1-p)]
                            (T::one() - p).powf(gm) * (gm * p * -softplus(-zi) - (T::one() - p))
                        } else {
                            // p^γ [p - γ (1-p) log(1-p)]
                            p.powf(gm) * (p + gm * (T::one() - p) * softplus(zi))
                        };
                        dz[c * n + i] += scale * d;
                    }
                }
                vec![Some(dz)]
            }),
        )
    }
}

/// Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors,
/// given the foreground flags in sorted order.
pub fn lovasz_grad<T: Real>(sorted_fg: impl Iterator<Item = bool>) -> Vec<T> {
    let fg: Vec<bool> = sorted_fg.collect();
    let gts = fg.iter().filter(|&&f| f).count();
    let mut out = Vec::with_capacity(fg.len());
    let (mut cum_fg, mut cum_bg) = (0usize, 0usize);
    let mut prev = T::zero();
    for &f in &fg {
        if f {
            cum_fg += 1;
        } else {
            cum_bg += 1;
        }
        let inter = T::from_count(gts - cum_fg);
        let union = T::from_count(gts + cum_bg);
        let jac = T::one() - inter / union;
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Depth-bin cross-entropy over every valid pixel of every camera.
/// `targets[cam][pixel]` is a bin index or `-1`.
pub fn loss_depth<T: Real>(g: &mut Graph<T>, depth_logits: &[Var], targets: &[Vec<i16>]) -> Result<Var> {
    if depth_logits.len() != targets.len() || depth_logits.is_empty() {
        return Err(Error::Shape(format!("{} depth maps vs {} targets", depth_logits.len(), targets.len())));
    }
    let mut cols = Vec::with_capacity(depth_logits.len());
    let mut flat_targets = Vec::new();
    for (&l, t) in depth_logits.iter().zip(targets) {
        let s = g.shape(l).to_vec();
        let hw = s[1..].iter().product::<usize>();
        if s.len() != 3 || hw != t.len() {
            return Err(Error::Shape(format!("depth logits {s:?} vs {} targets", t.len())));
        }
        let r = g.reshape(l, &[s[0], hw])?;
        cols.push(g.transpose2d(r)?);
        flat_targets.extend(t.iter().map(|&b| usize::try_from(b).ok()));
    }
    let stacked = g.concat0(&cols)?;
    let logits = g.transpose2d(stacked)?;
    g.cross_entropy(logits, &flat_targets)
}

#[derive(Clone, Copy, Debug)]
pub struct AdaPgTerms {
    pub total: Var,
    pub lovasz: Var,
    pub dice: Var,
}

/// Lovasz-softmax + Dice on the auxiliary probabilities `[C,X,Y,Z]`, over
/// the classes present in the ground truth.
pub fn loss_adapg<T: Real>(g: &mut Graph<T>, aux_probs: Var, labels: &[u8]) -> Result<AdaPgTerms> {
    let s = g.shape(aux_probs).to_vec();
    let n: usize = s[1..].iter().product();
    let flat = g.reshape(aux_probs, &[s[0], n])?;
    let rows = present_classes(labels, s[0]);
    let lovasz = g.lovasz_softmax(flat, labels, &rows)?;
    let dice = g.soft_dice(flat, labels, &rows)?;
    let total = g.add(lovasz, dice)?;
    Ok(AdaPgTerms { total, lovasz, dice })
}

#[derive(Clone, Copy, Debug)]
pub struct OccTerms {
    pub total: Var,
    pub ce: Var,
    pub focal: Var,
    pub dice: Var,
}

/// Class target of each query: its own class when present in the ground
/// truth, otherwise the empty class.
pub fn query_targets(labels: &[u8], num_classes: usize) -> Vec<Option<usize>> {
    let present = present_classes(labels, num_classes);
    (0..num_classes).map(|c| Some(if present.contains(&c) { c } else { num_classes - 1 })).collect()
}

/// CE on query class logits plus focal and Dice on the occupancy masks of
/// the present classes and the empty class.
pub fn loss_occ<T: Real>(g: &mut Graph<T>, pred: &OccupancyPrediction, labels: &[u8], gamma: f64) -> Result<OccTerms> {
    let c = g.shape(pred.class_logits)[0];
    let logits_t = g.transpose2d(pred.class_logits)?;
    let ce = g.cross_entropy(logits_t, &query_targets(labels, c))?;
    let mut rows = present_classes(labels, c);
    if !rows.contains(&(c - 1)) {
        rows.push(c - 1);
    }
    let focal = g.sigmoid_focal(pred.mask_logits, labels, &rows, gamma)?;
    let dice = g.soft_dice(pred.masks, labels, &rows)?;
    let total = g.add_n(&[ce, focal, dice])?;
    Ok(OccTerms { total, ce, focal, dice })
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_depth: f64,
    pub l_adapg: f64,
    pub l_occ: f64,
    pub l_rpl: f64,
    pub l_total: f64,
    pub adapg_lovasz: f64,
    pub adapg_dice: f64,
    pub occ_ce: f64,
    pub occ_focal: f64,
    pub occ_dice: f64,
    pub rpl_ce: f64,
    pub rpl_focal: f64,
    pub rpl_dice: f64,
}

impl LossReport {
    /// Unweighted sum of the four terms.
    pub fn from_terms(l_depth: f64, l_adapg: f64, l_occ: f64, l_rpl: f64) -> Self {
        Self { l_depth, l_adapg, l_occ, l_rpl, l_total: l_depth + l_adapg + l_occ + l_rpl, ..Default::default() }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_depth, self.l_adapg, self.l_occ, self.l_rpl, self.l_total].iter().all(|v| v.is_finite())
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.l_depth += r.l_depth / n;
            m.l_adapg += r.l_adapg / n;
            m.l_occ += r.l_occ / n;
            m.l_rpl += r.l_rpl / n;
            m.l_total += r.l_total / n;
            m.adapg_lovasz += r.adapg_lovasz / n;
            m.adapg_dice += r.adapg_dice / n;
            m.occ_ce += r.occ_ce / n;
            m.occ_focal += r.occ_focal / n;
            m.occ_dice += r.occ_dice / n;
            m.rpl_ce += r.rpl_ce / n;
            m.rpl_focal += r.rpl_focal / n;
            m.rpl_dice += r.rpl_dice / n;
        }
        m
    }

    /// `step\tl_depth\tl_adapg\tl_occ\tl_rpl\tl_total`.
    pub fn log_line(&self, step: u64) -> String {
        format!(
            "{step}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.l_depth, self.l_adapg, self.l_occ, self.l_rpl, self.l_total
        )
    }
}
