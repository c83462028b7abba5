//! Per-stage wall-clock benchmarking of inference.

use std::fmt::Write as _;
use std::time::Instant;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::OccModel;
use crate::scene::SceneSample;

pub const STAGES: [&str; 4] = ["backbone", "view_transform", "encoder", "decoder"];

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    /// Median milliseconds per stage, in [`STAGES`] order.
    pub stage_ms: [f64; 4],
    pub reps: usize,
    pub warmup: usize,
    /// Decoder invocations observed during the timed repetitions.
    pub decode_calls: u64,
    /// Graph nodes recorded per forward.
    pub graph_nodes: usize,
}

impl LatencyReport {
    pub fn total_ms(&self) -> f64 {
        self.stage_ms.iter().sum()
    }

    pub fn decode_calls_per_forward(&self) -> f64 {
        self.decode_calls as f64 / self.reps as f64
    }

    /// `stage,ms` rows followed by `total,<ms>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,ms\n");
        for (name, ms) in STAGES.iter().zip(self.stage_ms) {
            let _ = writeln!(s, "{name},{ms:.6}");
        }
        let _ = writeln!(s, "total,{:.6}", self.total_ms());
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>12}", "stage", "median ms");
        for (name, ms) in STAGES.iter().zip(self.stage_ms) {
            let _ = writeln!(s, "{name:<16}{ms:>12.3}");
        }
        let _ = writeln!(s, "{:<16}{:>12.3}", "total", self.total_ms());
        let _ = writeln!(
            s,
            "reps {}, warmup {}, decoder calls per forward {}, graph nodes {}",
            self.reps,
            self.warmup,
            self.decode_calls_per_forward(),
            self.graph_nodes
        );
        s
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

/// Time `reps` inference forwards after `warmup` untimed ones.
pub fn bench(model: &OccModel<f32>, sample: &SceneSample, reps: usize, warmup: usize) -> Result<LatencyReport> {
    if reps == 0 {
        return Err(Error::InvalidArgument("bench needs at least one repetition".into()));
    }
    let frustum = model.frustum(sample);
    let mut times: [Vec<f64>; 4] = Default::default();
    let mut graph_nodes = 0;
    let mut decode_calls = 0;
    for rep in 0..warmup + reps {
        let before = model.head.decode_calls();
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let mut lap = Instant::now();
        let mut tick = |i: usize, timed: bool, times: &mut [Vec<f64>; 4]| {
            let now = Instant::now();
            if timed {
                times[i].push((now - lap).as_secs_f64() * 1e3);
            }
            lap = now;
        };
        let timed = rep >= warmup;
        let (feats, depths) = model.backbone_stage(&mut g, &p, sample)?;
        tick(0, timed, &mut times);
        let f_vox = model.view_stage(&mut g, &feats, &depths, &frustum)?;
        tick(1, timed, &mut times);
        let (_, cvf) = model.encoder_stage(&mut g, &p, f_vox, &[])?;
        tick(2, timed, &mut times);
        model.decoder_stage(&mut g, &p, cvf)?;
        tick(3, timed, &mut times);
        if timed {
            decode_calls += model.head.decode_calls() - before;
        }
        graph_nodes = g.len();
    }
    let stage_ms = times.map(|mut t| median(&mut t));
    Ok(LatencyReport { stage_ms, reps, warmup, decode_calls, graph_nodes })
}
