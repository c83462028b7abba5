//! Subcommands of the `occ` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use occ_core::checkpoint::Checkpoint;
use occ_core::config::RunConfig;
use occ_core::dataset::{read_dataset, write_dataset, Dataset};
use occ_core::experiment::{ablation_csv, evaluate, run_ablation, train_steps};
use occ_core::latency::bench;
use occ_core::loss::LOG_HEADER;
use occ_core::metrics::MiouReport;
use occ_core::model::{OccModel, Trainer};
use occ_core::scene::synthesize_set;

#[derive(Debug, Parser)]
#[command(name = "occ", version, about = "Camera-only semantic occupancy on synthetic voxel scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file (POCC).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file (PCKPT).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the data seed (generate) or the model and batch seeds (train).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize scenes and write a dataset file.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of scenes (default: data.samples).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train on a dataset and write a checkpoint; `--ckpt` resumes a run.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override train.steps.
        #[arg(long)]
        steps: Option<u64>,
        /// TSV loss log (default: <out>.log.tsv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-class IoU and mIoU of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Only score voxels seen by at least one camera.
        #[arg(long)]
        visible_only: bool,
    },
    /// Median per-stage inference latency.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Predict one sample's label volume.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Train every encoder ablation variant and write the comparison CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Generate { common, n } => cmd_generate(&common, n, stdout),
        Command::Train { common, steps, log } => cmd_train(&common, steps, log, stdout),
        Command::Eval { common, visible_only } => cmd_eval(&common, visible_only, stdout),
        Command::Bench { common, reps, warmup } => cmd_bench(&common, reps, warmup, stdout),
        Command::Infer { common, index } => cmd_infer(&common, index, stdout),
        Command::Ablate { common, steps } => cmd_ablate(&common, steps, stdout),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    Ok(match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str, cfg: &'a Option<PathBuf>) -> Result<&'a Path> {
    match path.as_deref().or(cfg.as_deref()) {
        Some(p) => Ok(p),
        None => bail!("missing --{flag}"),
    }
}

fn load_data(common: &Common, cfg: &RunConfig) -> Result<Dataset> {
    let path = required(&common.data, "data", &cfg.paths.data)?;
    Ok(read_dataset(path)?)
}

fn load_checkpoint(common: &Common, cfg: &RunConfig) -> Result<Checkpoint> {
    let path = required(&common.ckpt, "ckpt", &cfg.paths.checkpoint)?;
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(Checkpoint::load(path)?)
}

fn check_compatible(ck: &Checkpoint, ds: &Dataset) -> Result<()> {
    let c = &ck.config;
    if c.grid != ds.grid || c.num_classes != ds.num_classes || c.image_size != ds.image_size {
        bail!("dataset (grid {:?}, {} classes, images {:?}) does not match the checkpoint", ds.grid.extents(), ds.num_classes, ds.image_size);
    }
    Ok(())
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_generate(common: &Common, n: Option<usize>, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let out = required(&common.out, "out", &cfg.paths.data)?;
    let n = n.unwrap_or(cfg.data.samples);
    let scene = cfg.scene_config();
    let samples = synthesize_set(cfg.data.seed, n, &scene)?;
    let ds = Dataset {
        grid: scene.grid.clone(),
        num_classes: scene.num_classes,
        depth_bins: scene.depth_bins.clone(),
        cameras: scene.cameras,
        image_size: scene.image_size,
        samples,
    };
    write_dataset(out, &ds)?;
    writeln!(stdout, "wrote {n} scenes to {} ({} bytes)", out.display(), ds.file_bytes())?;
    Ok(())
}

pub fn cmd_train(common: &Common, steps: Option<u64>, log: Option<PathBuf>, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let ds = load_data(common, &cfg)?;
    let out = required(&common.out, "out", &cfg.paths.checkpoint)?.to_path_buf();
    let (mut model, mut trainer, cfg) = match &common.ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let model = ck.model()?;
            let trainer = ck.trainer(&model)?;
            let mut resumed = ck.config.clone();
            resumed.train.steps = steps.unwrap_or(ck.config.train.steps);
            (model, trainer, resumed)
        }
        None => {
            let model = OccModel::new(cfg.model_config(), cfg.model.seed)?;
            let trainer = Trainer::new(cfg.train.clone(), &model)?;
            (model, trainer, cfg)
        }
    };
    let model_cfg = cfg.model_config();
    if ds.grid != model_cfg.grid || ds.num_classes != cfg.num_classes || ds.image_size != model_cfg.image_size {
        bail!("dataset does not match the configured grid, class count or image size");
    }
    let log_path = log.or_else(|| cfg.paths.log.clone()).unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    let resuming = trainer.step_count() > 0;
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if !resuming {
        writeln!(log_file, "{LOG_HEADER}")?;
        writeln!(stdout, "{LOG_HEADER}")?;
    }
    let remaining = cfg.train.steps.saturating_sub(trainer.step_count());
    let every = cfg.train.checkpoint_every;
    train_steps(&mut model, &mut trainer, &ds.samples, remaining, |step, report, m, t| {
        let line = report.log_line(step);
        let io = |source| occ_core::Error::Io { path: log_path.clone(), source };
        writeln!(log_file, "{line}").map_err(io)?;
        writeln!(stdout, "{line}").map_err(io)?;
        if every > 0 && step % every == 0 {
            Checkpoint::capture(&cfg, m, Some(t))?.save(&out)?;
        }
        Ok(())
    })
    .map_err(anyhow::Error::from)?;
    Checkpoint::capture(&cfg, &model, Some(&trainer))?.save(&out)?;
    Ok(())
}

pub fn cmd_eval(common: &Common, visible_only: bool, stdout: &mut dyn Write) -> Result<()> {
    let cfg = load_config(common)?;
    let ck = load_checkpoint(common, &cfg)?;
    let ds = load_data(common, &cfg)?;
    check_compatible(&ck, &ds)?;
    let model = ck.model()?;
    let conf = evaluate(&model, &ds.samples, visible_only)?;
    let report = conf.miou(&MiouReport::semantic_classes(model.num_classes()));
    write!(stdout, "{}", report.to_table(None))?;
    if let Some(out) = common.out.as_deref().or(cfg.paths.out.as_deref()) {
        write_out(out, &report.to_csv())?;
    }
    Ok(())
}

pub fn cmd_bench(common: &Common, reps: Option<usize>, warmup: Option<usize>, stdout: &mut dyn Write) -> Result<()> {
    let cfg = load_config(common)?;
    let ck = load_checkpoint(common, &cfg)?;
    let ds = load_data(common, &cfg)?;
    check_compatible(&ck, &ds)?;
    let sample = ds.samples.first().context("dataset has no samples")?;
    let model = ck.model()?;
    let report = bench(&model, sample, reps.unwrap_or(cfg.bench.reps), warmup.unwrap_or(cfg.bench.warmup))?;
    write!(stdout, "{}", report.to_table())?;
    if let Some(out) = common.out.as_deref().or(cfg.paths.out.as_deref()) {
        write_out(out, &report.to_csv())?;
    }
    Ok(())
}

/// Writes the raw `u8` volume (`X·Y·Z`, z fastest) to `--out` and prints
/// `class,count` rows.
pub fn cmd_infer(common: &Common, index: usize, stdout: &mut dyn Write) -> Result<()> {
    let cfg = load_config(common)?;
    let ck = load_checkpoint(common, &cfg)?;
    let ds = load_data(common, &cfg)?;
    check_compatible(&ck, &ds)?;
    let sample = ds.samples.get(index).with_context(|| format!("sample {index} out of range ({} samples)", ds.samples.len()))?;
    let model = ck.model()?;
    let labels = model.predict_labels(sample)?;
    if let Some(out) = common.out.as_deref() {
        fs::write(out, &labels).with_context(|| format!("writing {}", out.display()))?;
    }
    let mut counts = vec![0usize; model.num_classes()];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    writeln!(stdout, "class,count")?;
    for (c, n) in counts.iter().enumerate() {
        writeln!(stdout, "{c},{n}")?;
    }
    Ok(())
}

pub fn cmd_ablate(common: &Common, steps: Option<u64>, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let ds = load_data(common, &cfg)?;
    if ds.grid != cfg.grid || ds.num_classes != cfg.num_classes || ds.image_size != cfg.image_size {
        bail!("dataset does not match the configured grid, class count or image size");
    }
    let half = ds.samples.len().div_ceil(2);
    let (train, held) = ds.samples.split_at(half);
    let rows = run_ablation(&cfg, train, held)?;
    let csv = ablation_csv(&rows);
    write!(stdout, "{csv}")?;
    if let Some(out) = common.out.as_deref().or(cfg.paths.out.as_deref()) {
        write_out(out, &csv)?;
    }
    Ok(())
}
