//! Training loops, evaluation and encoder ablations built on the model API.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::RunConfig;
use crate::encoder::{Branches, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::LossReport;
use crate::metrics::{ConfusionMatrix, MiouReport};
use crate::model::{OccModel, Trainer};
use crate::scene::{synthesize_set, SceneSample};

/// Run `steps` training steps with batches drawn from `data`. `on_step` sees
/// the step number (1-based) and its report, and may abort with an error.
pub fn train_steps<F>(model: &mut OccModel<f32>, trainer: &mut Trainer<f32>, data: &[SceneSample], steps: u64, mut on_step: F) -> Result<()>
where
    F: FnMut(u64, &LossReport, &OccModel<f32>, &Trainer<f32>) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    for _ in 0..steps {
        let idx = trainer.sample_batch(data.len());
        let batch: Vec<&SceneSample> = idx.iter().map(|&i| &data[i]).collect();
        let report = trainer.train_step(model, &batch)?;
        on_step(trainer.step_count(), &report, model, trainer)?;
    }
    Ok(())
}

/// Confusion over `samples`, optionally restricted to camera-visible voxels.
pub fn evaluate(model: &OccModel<f32>, samples: &[SceneSample], visible_only: bool) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(model.num_classes());
    for s in samples {
        let pred = model.predict_labels(s)?;
        conf.accumulate(&s.labels, &pred, visible_only.then_some(&s.visibility[..]))?;
    }
    Ok(conf)
}

/// mIoU over the semantic classes (the empty class is not evaluated).
pub fn semantic_miou(model: &OccModel<f32>, samples: &[SceneSample]) -> Result<MiouReport> {
    let conf = evaluate(model, samples, false)?;
    Ok(conf.miou(&MiouReport::semantic_classes(model.num_classes())))
}

/// Training and held-out scenes of a run: `data.samples` scenes from
/// `data.seed`, and as many held-out scenes from a disjoint seed range.
pub fn scene_sets(cfg: &RunConfig) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let scene = cfg.scene_config();
    let n = cfg.data.samples;
    let train = synthesize_set(cfg.data.seed, n, &scene)?;
    let held = synthesize_set(cfg.data.seed + 1_000_000, n, &scene)?;
    Ok((train, held))
}

/// Encoder variants of the kernel-size / branch / fusion ablation.
pub fn ablation_variants(base: &EncoderConfig) -> Vec<(String, EncoderConfig)> {
    let v = |branches, voxel_kernel, bev_kernel, multi_scale_fusion| EncoderConfig {
        branches,
        voxel_kernel,
        bev_kernel,
        multi_scale_fusion,
        ..base.clone()
    };
    vec![
        ("voxel_k3".into(), v(Branches::VoxelOnly, 3, 3, true)),
        ("voxel_k7".into(), v(Branches::VoxelOnly, 7, 3, true)),
        ("bev_k3".into(), v(Branches::BevOnly, 3, 3, true)),
        ("bev_k7".into(), v(Branches::BevOnly, 3, 7, true)),
        ("dual_v3_b3_single_scale".into(), v(Branches::Dual, 3, 3, false)),
        ("dual_v3_b3".into(), v(Branches::Dual, 3, 3, true)),
        ("dual_v3_b7".into(), v(Branches::Dual, 3, 7, true)),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub encoder: EncoderConfig,
    pub final_loss: f64,
    pub train_miou: Option<f64>,
    pub heldout_miou: Option<f64>,
    pub seconds: f64,
}

/// Train every variant from the same seeds for `cfg.train.steps` steps.
pub fn run_ablation(cfg: &RunConfig, train: &[SceneSample], held: &[SceneSample]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, encoder) in ablation_variants(&cfg.model.encoder) {
        let mut c = cfg.clone();
        c.model.encoder = encoder.clone();
        c.validate()?;
        let start = Instant::now();
        let mut model = OccModel::new(c.model_config(), c.model.seed)?;
        let mut trainer = Trainer::new(c.train.clone(), &model)?;
        let mut last = f64::NAN;
        train_steps(&mut model, &mut trainer, train, c.train.steps, |_, r, _, _| {
            last = r.l_total;
            Ok(())
        })?;
        rows.push(AblationRow {
            name,
            encoder,
            final_loss: last,
            train_miou: semantic_miou(&model, train)?.miou,
            heldout_miou: semantic_miou(&model, held)?.miou,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

fn branch_name(b: Branches) -> &'static str {
    match b {
        Branches::Dual => "dual",
        Branches::VoxelOnly => "voxel",
        Branches::BevOnly => "bev",
    }
}

/// `variant,branches,voxel_kernel,bev_kernel,multi_scale_fusion,final_loss,train_miou,heldout_miou,seconds`;
/// kernels of unused branches are written as `-`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,branches,voxel_kernel,bev_kernel,multi_scale_fusion,final_loss,train_miou,heldout_miou,seconds\n");
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
    for r in rows {
        let e = &r.encoder;
        let vk = if e.uses_voxel() { e.voxel_kernel.to_string() } else { "-".into() };
        let bk = if e.uses_bev() { e.bev_kernel.to_string() } else { "-".into() };
        let _ = writeln!(
            s,
            "{},{},{vk},{bk},{},{:.6},{},{},{:.3}",
            r.name,
            branch_name(e.branches),
            e.multi_scale_fusion,
            r.final_loss,
            opt(r.train_miou),
            opt(r.heldout_miou),
            r.seconds
        );
    }
    s
}
