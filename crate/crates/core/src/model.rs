//! The full occupancy network and its training step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{form_queries, AuxClassifier, ClassMasks, DecoderConfig, Mode, OccupancyPrediction, PrototypeBank, PrototypeHead};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput, TemporalFuse};
use crate::error::{Error, Result};
use crate::loss::{self, LossReport, FOCAL_GAMMA};
use crate::nn::{Bindings, ParamStore};
use crate::noise::NoiseConfig;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::scene::SceneSample;
use crate::tensor::{Real, Tensor};
use crate::view::{Backbone, DepthBins, FrustumGrid, VoxelGridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: VoxelGridSpec,
    pub depth_bins: DepthBins,
    pub image_size: [usize; 2],
    /// Channel widths of the three stride-2 backbone stages.
    pub backbone_widths: [usize; 3],
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Frames fused by the temporal module; 1 disables it.
    pub frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: VoxelGridSpec::default(),
            depth_bins: DepthBins::default(),
            image_size: [64, 64],
            backbone_widths: [16, 32, 32],
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            frames: 1,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.encoder.channels
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.depth_bins.validate()?;
        self.encoder.validate(self.grid.extents())?;
        self.decoder.validate()?;
        let [h, w] = self.image_size;
        if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be positive multiples of 8")));
        }
        if self.backbone_widths.contains(&0) || self.frames == 0 {
            return Err(Error::Config("backbone widths and frame count must be positive".into()));
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub feats: Vec<Var>,
    pub depth_logits: Vec<Var>,
    pub f_vox: Var,
    pub encoder: EncoderOutput,
    pub cvf: Var,
    pub aux_logits: Var,
    pub aux_probs: Var,
    pub masks: ClassMasks,
    pub adaptive: Var,
    pub queries: Var,
    pub prediction: OccupancyPrediction,
}

#[derive(Clone, Debug)]
pub struct OccModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub temporal: Option<TemporalFuse>,
    pub aux: AuxClassifier,
    pub head: PrototypeHead,
    pub bank: PrototypeBank<T>,
}

impl<T: Real> OccModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.channels();
        let c = config.decoder.num_classes;
        let backbone = Backbone::new(&mut params, config.backbone_widths, d, config.depth_bins.count, &mut rng);
        let encoder = Encoder::new(&mut params, &config.encoder, config.grid.extents(), &mut rng)?;
        let temporal = match config.frames {
            1 => None,
            f => {
                let t = TemporalFuse::new(&mut params, d, f, &mut rng)?;
                t.set_identity(&mut params);
                Some(t)
            }
        };
        let aux = AuxClassifier::new(&mut params, d, c, &mut rng);
        let head = PrototypeHead::new(&mut params, d, c, &mut rng);
        let bank = PrototypeBank::new(c, d, config.decoder.ema_alpha);
        Ok(Self { config, params, backbone, encoder, temporal, aux, head, bank })
    }

    pub fn num_classes(&self) -> usize {
        self.config.decoder.num_classes
    }

    pub fn frustum(&self, sample: &SceneSample) -> FrustumGrid {
        let [h, w] = self.config.image_size;
        FrustumGrid::build(&sample.cameras, &self.config.depth_bins, h / 8, w / 8, &self.config.grid)
    }

    fn check_sample(&self, sample: &SceneSample) -> Result<()> {
        let [h, w] = self.config.image_size;
        if sample.images.is_empty() || sample.images.iter().any(|i| i.shape() != [3, h, w]) {
            return Err(Error::Shape(format!("model expects [3,{h},{w}] images from at least one camera")));
        }
        if sample.cameras.len() != sample.images.len() {
            return Err(Error::Shape("camera and image counts differ".into()));
        }
        Ok(())
    }

    /// Backbone over every camera: `(features, depth logits)`.
    pub fn backbone_stage(&self, g: &mut Graph<T>, p: &Bindings, sample: &SceneSample) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_sample(sample)?;
        let mut feats = Vec::with_capacity(sample.images.len());
        let mut depths = Vec::with_capacity(sample.images.len());
        for img in &sample.images {
            let x = g.constant(img.cast());
            let (f, d) = self.backbone.forward(g, p, x)?;
            feats.push(f);
            depths.push(d);
        }
        Ok((feats, depths))
    }

    /// Lift every camera and pool into `F_vox`.
    pub fn view_stage(&self, g: &mut Graph<T>, feats: &[Var], depths: &[Var], frustum: &FrustumGrid) -> Result<Var> {
        let mut lifted = Vec::with_capacity(feats.len());
        for (&f, &d) in feats.iter().zip(depths) {
            lifted.push(g.lift(f, d)?);
        }
        g.voxel_pool(&lifted, frustum, &self.config.grid)
    }

    /// Encoder, then temporal fusion when the model has it. `history` holds
    /// previous frames' CVFs, most recent first; missing frames repeat the
    /// current one.
    pub fn encoder_stage(&self, g: &mut Graph<T>, p: &Bindings, f_vox: Var, history: &[Var]) -> Result<(EncoderOutput, Var)> {
        let enc = self.encoder.forward(g, p, f_vox)?;
        let cvf = match &self.temporal {
            Some(t) => {
                if history.len() >= t.frames {
                    return Err(Error::Shape(format!("{} history frames for a {}-frame model", history.len(), t.frames)));
                }
                let mut frames = vec![enc.cvf];
                frames.extend_from_slice(history);
                frames.resize(t.frames, enc.cvf);
                t.forward(g, p, &frames)?
            }
            None if history.is_empty() => enc.cvf,
            None => return Err(Error::InvalidArgument("model was built without temporal fusion".into())),
        };
        Ok((enc, cvf))
    }

    /// Auxiliary classifier, class masks, prototypes, queries and the single
    /// decode. Returns `(aux_logits, aux_probs, masks, P^d, Q, prediction)`.
    #[allow(clippy::type_complexity)]
    pub fn decoder_stage(
        &self,
        g: &mut Graph<T>,
        p: &Bindings,
        cvf: Var,
    ) -> Result<(Var, Var, ClassMasks, Var, Var, OccupancyPrediction)> {
        let (aux_logits, aux_probs) = self.aux.forward(g, p, cvf)?;
        let masks = ClassMasks::from_probs(g.value(aux_probs))?;
        let adaptive = g.adaptive_prototypes(cvf, &masks)?;
        let global = g.constant(self.bank.global.clone());
        let queries = form_queries(g, adaptive, global)?;
        let prediction = self.head.predict(g, p, queries, cvf)?;
        Ok((aux_logits, aux_probs, masks, adaptive, queries, prediction))
    }

    /// Full single-frame forward on `g` with parameters bound as `p`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bindings, sample: &SceneSample) -> Result<ForwardPass> {
        let frustum = self.frustum(sample);
        let (feats, depth_logits) = self.backbone_stage(g, p, sample)?;
        let f_vox = self.view_stage(g, &feats, &depth_logits, &frustum)?;
        let (encoder, cvf) = self.encoder_stage(g, p, f_vox, &[])?;
        let (aux_logits, aux_probs, masks, adaptive, queries, prediction) = self.decoder_stage(g, p, cvf)?;
        Ok(ForwardPass { feats, depth_logits, f_vox, encoder, cvf, aux_logits, aux_probs, masks, adaptive, queries, prediction })
    }

    /// Inference: hard labels per voxel, with parameters held constant.
    pub fn predict_labels(&self, sample: &SceneSample) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let fwd = self.forward(&mut g, &p, sample)?;
        Ok(fwd.prediction.hard_labels(&g))
    }

    /// Semantic volume `[C, N]` of one inference pass.
    pub fn predict_semantic(&self, sample: &SceneSample) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let fwd = self.forward(&mut g, &p, sample)?;
        Ok(g.value(fwd.prediction.semantic).clone())
    }

    pub fn cast<U: Real>(&self) -> OccModel<U> {
        OccModel {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            encoder: self.encoder.clone(),
            temporal: self.temporal.clone(),
            aux: self.aux.clone(),
            head: self.head.clone(),
            bank: PrototypeBank { global: self.bank.global.cast(), alpha: self.bank.alpha, updates: self.bank.updates },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub noise: NoiseConfig,
    /// When off, the second decode uses the clean masks, so `l_rpl = l_occ`.
    pub rpl: bool,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            optimizer: OptimizerConfig::default(),
            noise: NoiseConfig::default(),
            rpl: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.noise.validate()
    }
}

/// Mutable training state kept next to the model.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub optimizer: OptimizerState<T>,
    pub noise_rng: ChaCha8Rng,
    pub batch_rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, model: &OccModel<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: OptimizerState::new(config.optimizer.clone(), &model.params),
            noise_rng: ChaCha8Rng::seed_from_u64(config.noise.seed),
            batch_rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    /// Indices of the next batch: `batch_size` distinct samples (all of them
    /// when fewer are available), drawn from the batch RNG.
    pub fn sample_batch(&mut self, available: usize) -> Vec<usize> {
        let k = self.config.batch_size.min(available);
        rand::seq::index::sample(&mut self.batch_rng, available, k).into_vec()
    }

    /// Forward, the four loss terms, backward, AdamW, then one EMA update of
    /// `P^g` with the batch-mean scene-adaptive prototypes. A non-finite loss
    /// aborts before any state changes.
    pub fn train_step(&mut self, model: &mut OccModel<T>, batch: &[&SceneSample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.optimizer.step + 1;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let mut totals = Vec::with_capacity(batch.len());
        let mut reports = Vec::with_capacity(batch.len());
        let (c, d) = (model.num_classes(), model.config.channels());
        let mut mean_adaptive = vec![T::zero(); c * d];
        let center = model.config.grid.voxel_of([0.0; 3]).unwrap_or_else(|| model.config.grid.center_voxel());
        for sample in batch {
            let (terms, report) = sample_losses(model, &mut g, &p, sample, self.config.rpl.then_some((&self.config.noise, center)), &mut self.noise_rng)?;
            let fwd_adaptive = terms.1;
            mean_adaptive.iter_mut().zip(g.value(fwd_adaptive).data()).for_each(|(m, &v)| *m += v);
            totals.push(terms.0);
            reports.push(report);
        }
        let report = LossReport::mean(&reports);
        if !report.is_finite() {
            return Err(Error::Diverged { step, detail: format!("{report:?}") });
        }
        let sum = g.add_n(&totals)?;
        let loss = g.scale(sum, 1.0 / batch.len() as f64)?;
        g.backward(loss)?;
        let grads: Vec<Option<Vec<T>>> = p.vars().iter().map(|&v| g.take_grad(v)).collect();
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, detail: "non-finite gradient".into() });
        }
        drop(g);
        self.optimizer.step(&mut model.params, &grads)?;
        let inv = T::one() / T::from_count(batch.len());
        mean_adaptive.iter_mut().for_each(|v| *v *= inv);
        model.bank.ema_update(&Tensor::new(&[c, d], mean_adaptive)?, Mode::Train)?;
        Ok(report)
    }
}

/// Loss terms of one sample; returns `((total, P^d), report)`.
fn sample_losses<T: Real>(
    model: &OccModel<T>,
    g: &mut Graph<T>,
    p: &Bindings,
    sample: &SceneSample,
    noise: Option<(&NoiseConfig, [usize; 3])>,
    rng: &mut ChaCha8Rng,
) -> Result<((Var, Var), LossReport)> {
    let fwd = model.forward(g, p, sample)?;
    let labels = &sample.labels;
    let l_depth = loss::loss_depth(g, &fwd.depth_logits, &sample.depth_bins)?;
    let adapg = loss::loss_adapg(g, fwd.aux_probs, labels)?;
    let occ = loss::loss_occ(g, &fwd.prediction, labels, FOCAL_GAMMA)?;
    let (noisy_q, _) = rpl_queries(model, g, &fwd, noise, rng)?;
    let noisy = model.head.predict(g, p, noisy_q, fwd.cvf)?;
    let rpl = loss::loss_occ(g, &noisy, labels, FOCAL_GAMMA)?;
    let total = g.add_n(&[l_depth, adapg.total, occ.total, rpl.total])?;
    let v = |g: &Graph<T>, x: Var| g.value(x).item().as_f64();
    let mut report = LossReport::from_terms(v(g, l_depth), v(g, adapg.total), v(g, occ.total), v(g, rpl.total));
    report.adapg_lovasz = v(g, adapg.lovasz);
    report.adapg_dice = v(g, adapg.dice);
    report.occ_ce = v(g, occ.ce);
    report.occ_focal = v(g, occ.focal);
    report.occ_dice = v(g, occ.dice);
    report.rpl_ce = v(g, rpl.ce);
    report.rpl_focal = v(g, rpl.focal);
    report.rpl_dice = v(g, rpl.dice);
    Ok(((total, fwd.adaptive), report))
}

/// Noisy scene-aware queries `Q̂ = P̂^d + P^g`, where `P̂^d` pools the CVF
/// under noised class masks. With `noise = None` the clean masks are used.
pub fn rpl_queries<T: Real>(
    model: &OccModel<T>,
    g: &mut Graph<T>,
    fwd: &ForwardPass,
    noise: Option<(&NoiseConfig, [usize; 3])>,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, ClassMasks)> {
    let masks = match noise {
        Some((cfg, center)) => cfg.apply(&fwd.masks, center, rng)?,
        None => fwd.masks.clone(),
    };
    let adaptive = g.adaptive_prototypes(fwd.cvf, &masks)?;
    let global = g.constant(model.bank.global.clone());
    Ok((form_queries(g, adaptive, global)?, masks))
}
