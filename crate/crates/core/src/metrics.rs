//! Confusion matrices, IoU/mIoU and their text/CSV renderings.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one volume; voxels with `visibility[i] == false` are skipped.
    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8], visibility: Option<&[bool]>) -> Result<()> {
        if gt.len() != pred.len() || visibility.is_some_and(|v| v.len() != gt.len()) {
            return Err(Error::Shape(format!("confusion: {} labels vs {} predictions", gt.len(), pred.len())));
        }
        let c = self.num_classes;
        if let Some(&bad) = gt.iter().chain(pred).find(|&&l| l as usize >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        for (i, (&g, &p)) in gt.iter().zip(pred).enumerate() {
            if visibility.map_or(true, |v| v[i]) {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("merging confusion matrices of different sizes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `(TP, FP, FN)` of class `c`.
    pub fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.num_classes).map(|g| self.get(g, c)).sum();
        let row: u64 = (0..self.num_classes).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    /// IoU of every class in `classes`; `None` when the class is absent from
    /// both ground truth and prediction.
    pub fn iou(&self, classes: &[usize]) -> Vec<Option<f64>> {
        classes
            .iter()
            .map(|&c| {
                let (tp, fp, fnn) = self.tp_fp_fn(c);
                let denom = tp + fp + fnn;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Per-class IoU and their mean over the classes that occur.
    pub fn miou(&self, classes: &[usize]) -> MiouReport {
        let per_class: Vec<(usize, Option<f64>)> = classes.iter().copied().zip(self.iou(classes)).collect();
        let present: Vec<f64> = per_class.iter().filter_map(|(_, v)| *v).collect();
        let miou = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        MiouReport { per_class, miou }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<(usize, Option<f64>)>,
    /// `None` when every evaluated class is absent.
    pub miou: Option<f64>,
}

impl MiouReport {
    /// Semantic classes `0..C-1`, leaving out the empty class `C-1`.
    pub fn semantic_classes(num_classes: usize) -> Vec<usize> {
        (0..num_classes.saturating_sub(1)).collect()
    }

    /// `class,iou` rows plus `mIoU,<value>`; absent classes and an undefined
    /// mean are written as `nan`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (c, v) in &self.per_class {
            let _ = writeln!(s, "{c},{}", fmt_opt(*v));
        }
        let _ = writeln!(s, "mIoU,{}", fmt_opt(self.miou));
        s
    }

    pub fn to_table(&self, names: Option<&[String]>) -> String {
        let label = |c: usize| names.and_then(|n| n.get(c).cloned()).unwrap_or_else(|| format!("class {c}"));
        let width = self.per_class.iter().map(|(c, _)| label(*c).len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}", "class", "IoU");
        for (c, v) in &self.per_class {
            let shown = v.map_or("absent".to_string(), |x| format!("{:.4}", x));
            let _ = writeln!(s, "{:<width$}  {:>8}", label(*c), shown);
        }
        let shown = self.miou.map_or("undefined".to_string(), |x| format!("{:.4}", x));
        let _ = writeln!(s, "{:<width$}  {:>8}", "mIoU", shown);
        let _ = writeln!(s, "(classes absent from both ground truth and prediction are excluded from the mean)");
        s
    }

    /// Parse the `mIoU` row of a CSV written by [`MiouReport::to_csv`].
    pub fn parse_miou(csv: &str) -> Option<f64> {
        csv.lines().find_map(|l| l.strip_prefix("mIoU,")).and_then(|v| v.trim().parse().ok()).filter(|v: &f64| !v.is_nan())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}
