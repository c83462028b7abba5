//! Dual-branch encoder: a small-kernel 3-D voxel branch and a large-kernel
//! depthwise BEV branch, fused coarse-to-fine into the full-resolution
//! comprehensive voxel feature.
//!
//! Pyramids are indexed coarsest first, so scale `i` is upsampled into
//! scale `i + 1` during fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, ChannelNorm, Conv, ParamStore, ResBlock};
use crate::ops::ConvSpec;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    Dual,
    VoxelOnly,
    BevOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Voxel feature channels `D` (identical at every scale).
    pub channels: usize,
    /// Number of scales `S`.
    pub scales: usize,
    pub voxel_kernel: usize,
    pub bev_kernel: usize,
    pub branches: Branches,
    /// Coarse-to-fine fusion across all scales; when off only the finest
    /// scale of each branch is computed and fused.
    pub multi_scale_fusion: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: 32, scales: 3, voxel_kernel: 3, bev_kernel: 7, branches: Branches::Dual, multi_scale_fusion: true }
    }
}

impl EncoderConfig {
    pub fn active_scales(&self) -> usize {
        if self.multi_scale_fusion {
            self.scales
        } else {
            1
        }
    }

    pub fn uses_voxel(&self) -> bool {
        self.branches != Branches::BevOnly
    }

    pub fn uses_bev(&self) -> bool {
        self.branches != Branches::VoxelOnly
    }

    /// Per-scale extents, coarsest first.
    pub fn pyramid_extents(&self, grid: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let s = self.active_scales();
        let div = 1usize << (s - 1);
        if grid.iter().any(|e| e % div != 0) {
            return Err(Error::Config(format!("grid {grid:?} not divisible by 2^{} for {s} scales", s - 1)));
        }
        Ok((0..s).rev().map(|i| grid.map(|e| e >> i)).collect())
    }

    pub fn validate(&self, grid: [usize; 3]) -> Result<()> {
        if self.channels == 0 || self.scales == 0 {
            return Err(Error::Config("encoder channels and scales must be positive".into()));
        }
        for k in [self.voxel_kernel, self.bev_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("encoder kernels must be odd, got {k}")));
            }
        }
        self.pyramid_extents(grid).map(|_| ())
    }
}

/// Depthwise k×k conv → channel layer norm → 1×1 → relu → 1×1, plus skip.
#[derive(Clone, Debug)]
pub struct LargeKernelBlock {
    pub depthwise: Conv,
    pub norm: ChannelNorm,
    pub expand: Conv,
    pub project: Conv,
}

impl LargeKernelBlock {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, kernel: usize, rng: &mut R) -> Self {
        let dw = ConvSpec::square(kernel).with_groups(channels);
        Self {
            depthwise: Conv::new(store, &format!("{name}.dw"), channels, channels, dw, true, rng),
            norm: ChannelNorm::new(store, &format!("{name}.norm"), channels),
            expand: Conv::new(store, &format!("{name}.pw1"), channels, channels, ConvSpec::square(1), true, rng),
            project: Conv::new(store, &format!("{name}.pw2"), channels, channels, ConvSpec::square(1), true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.depthwise.forward(g, p, x)?;
        let h = self.norm.forward(g, p, h)?;
        let h = self.expand.forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = self.project.forward(g, p, h)?;
        g.add(x, h)
    }

    /// δ depthwise kernel, identity expansion, zero output projection.
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        self.depthwise.set_identity(store);
        self.expand.set_identity(store);
        self.project.set_zero(store);
    }
}

#[derive(Clone, Debug)]
pub struct VoxelBranch {
    pub blocks: Vec<ResBlock>,
    pub downs: Vec<Conv>,
}

impl VoxelBranch {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, channels: usize, scales: usize, kernel: usize, rng: &mut R) -> Self {
        let blocks = (0..scales)
            .map(|s| ResBlock::new(store, &format!("encoder.voxel.block{s}"), channels, ConvSpec::cube(kernel), rng))
            .collect();
        let downs = (0..scales.saturating_sub(1))
            .map(|s| Conv::new(store, &format!("encoder.voxel.down{s}"), channels, channels, ConvSpec::down(&[3, 3, 3]), true, rng))
            .collect();
        Self { blocks, downs }
    }

    /// `F_vox[D,X,Y,Z]` → pyramid, coarsest first.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, f_vox: Var) -> Result<Vec<Var>> {
        let s = g.shape(f_vox).to_vec();
        let div = 1usize << self.downs.len();
        if s.len() != 4 || s[1..].iter().any(|e| e % div != 0) {
            return Err(Error::Shape(format!("voxel branch: {s:?} not divisible by {div}")));
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut x = f_vox;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x)?;
            out.push(x);
            if let Some(down) = self.downs.get(i) {
                x = down.forward(g, p, x)?;
            }
        }
        out.reverse();
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct BevBranch {
    pub blocks: Vec<LargeKernelBlock>,
    pub downs: Vec<Conv>,
    /// `D'_i` per stage, finest first.
    pub widths: Vec<usize>,
}

impl BevBranch {
    /// `channels` is the voxel width `D`; stage `s` runs at `D * Z / 2^s`.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        channels: usize,
        height: usize,
        scales: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(scales);
        for s in 0..scales {
            let z = height >> s;
            if z == 0 || (z << s) != height {
                return Err(Error::Config(format!("height {height} cannot be halved {s} times")));
            }
            widths.push(channels * z);
        }
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(s, &w)| LargeKernelBlock::new(store, &format!("encoder.bev.block{s}"), w, kernel, rng))
            .collect();
        let downs = (0..scales.saturating_sub(1))
            .map(|s| Conv::new(store, &format!("encoder.bev.down{s}"), widths[s], widths[s + 1], ConvSpec::down(&[3, 3]), true, rng))
            .collect();
        Ok(Self { blocks, downs, widths })
    }

    /// `F_BEV[D*Z,X,Y]` → pyramid, coarsest first.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, f_bev: Var) -> Result<Vec<Var>> {
        let s = g.shape(f_bev).to_vec();
        if s.len() != 3 || s[0] != self.widths[0] {
            return Err(Error::Shape(format!("bev branch expects {} channels, got {s:?}", self.widths[0])));
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut x = f_bev;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x)?;
            out.push(x);
            if let Some(down) = self.downs.get(i) {
                x = down.forward(g, p, x)?;
            }
        }
        out.reverse();
        Ok(out)
    }
}

/// Hierarchical fusion convs, one per scale (coarsest first).
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub convs: Vec<Conv>,
}

impl FusionModule {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, channels: usize, scales: usize, rng: &mut R) -> Self {
        let convs = (0..scales)
            .map(|s| Conv::new(store, &format!("encoder.fuse{s}"), channels, channels, ConvSpec::cube(3), true, rng))
            .collect();
        Self { convs }
    }

    /// `fused_1 = Conv(bev_1 + vox_1)`, `fused_i = Conv(Up(fused_{i-1}) + bev_i + vox_i)`.
    /// Either pyramid may be absent (single-branch ablations). BEV maps are
    /// voxelized with heights taken from `heights` (coarsest first).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bindings,
        voxel: Option<&[Var]>,
        bev: Option<&[Var]>,
        heights: &[usize],
    ) -> Result<Var> {
        let scales = self.convs.len();
        for pyr in [voxel, bev].into_iter().flatten() {
            if pyr.len() != scales {
                return Err(Error::Shape(format!("fusion expects {scales} scales, got {}", pyr.len())));
            }
        }
        if voxel.is_none() && bev.is_none() {
            return Err(Error::InvalidArgument("fusion needs at least one pyramid".into()));
        }
        let mut fused: Option<Var> = None;
        for i in 0..scales {
            let mut terms = Vec::with_capacity(3);
            if let Some(prev) = fused {
                terms.push(g.trilinear_upsample(prev, 2)?);
            }
            if let Some(b) = bev {
                terms.push(g.bev_to_voxel(b[i], heights[i])?);
            }
            if let Some(v) = voxel {
                terms.push(v[i]);
            }
            let shape = g.shape(terms[terms.len() - 1]).to_vec();
            if let Some(bad) = terms.iter().find(|&&t| g.shape(t) != shape) {
                return Err(Error::Shape(format!("fusion scale {i}: {:?} vs {shape:?}", g.shape(*bad))));
            }
            let sum = if terms.len() == 1 { terms[0] } else { g.add_n(&terms)? };
            fused = Some(self.convs[i].forward(g, p, sum)?);
        }
        Ok(fused.expect("at least one scale"))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub voxel: Option<VoxelBranch>,
    pub bev: Option<BevBranch>,
    pub fusion: FusionModule,
    /// Channel layer norm on the fused output.
    pub out_norm: ChannelNorm,
    grid: [usize; 3],
}

/// Encoder outputs kept for inspection.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub voxel_pyramid: Option<Vec<Var>>,
    pub bev_pyramid: Option<Vec<Var>>,
    pub cvf: Var,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, config: &EncoderConfig, grid: [usize; 3], rng: &mut R) -> Result<Self> {
        config.validate(grid)?;
        let s = config.active_scales();
        let voxel = config.uses_voxel().then(|| VoxelBranch::new(store, config.channels, s, config.voxel_kernel, rng));
        let bev = match config.uses_bev() {
            true => Some(BevBranch::new(store, config.channels, grid[2], s, config.bev_kernel, rng)?),
            false => None,
        };
        let fusion = FusionModule::new(store, config.channels, s, rng);
        let out_norm = ChannelNorm::new(store, "encoder.out_norm", config.channels);
        Ok(Self { config: config.clone(), voxel, bev, fusion, out_norm, grid })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, f_vox: Var) -> Result<EncoderOutput> {
        let s = g.shape(f_vox).to_vec();
        if s.len() != 4 || s[0] != self.config.channels || s[1..] != self.grid[..] {
            return Err(Error::Shape(format!(
                "encoder expects [{}, {:?}], got {s:?}",
                self.config.channels, self.grid
            )));
        }
        let voxel_pyramid = match &self.voxel {
            Some(b) => Some(b.forward(g, p, f_vox)?),
            None => None,
        };
        let bev_pyramid = match &self.bev {
            Some(b) => {
                let f_bev = g.bev_flatten(f_vox)?;
                Some(b.forward(g, p, f_bev)?)
            }
            None => None,
        };
        let heights: Vec<usize> = self.config.pyramid_extents(self.grid)?.iter().map(|e| e[2]).collect();
        let fused = self.fusion.forward(g, p, voxel_pyramid.as_deref(), bev_pyramid.as_deref(), &heights)?;
        let cvf = self.out_norm.forward(g, p, fused)?;
        Ok(EncoderOutput { voxel_pyramid, bev_pyramid, cvf })
    }
}

/// Multi-frame fusion: channel concat → residual block → 1×1×1 back to `D`.
#[derive(Clone, Debug)]
pub struct TemporalFuse {
    pub frames: usize,
    pub channels: usize,
    pub block: ResBlock,
    pub project: Conv,
}

impl TemporalFuse {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, channels: usize, frames: usize, rng: &mut R) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Config("temporal fusion needs at least one frame".into()));
        }
        let wide = channels * frames;
        Ok(Self {
            frames,
            channels,
            block: ResBlock::new(store, "temporal.block", wide, ConvSpec::cube(3), rng),
            project: Conv::new(store, "temporal.project", wide, channels, ConvSpec::cube(1), true, rng),
        })
    }

    /// `history[0]` is the current frame.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, history: &[Var]) -> Result<Var> {
        if history.len() != self.frames {
            return Err(Error::Shape(format!("temporal fusion built for {} frames, got {}", self.frames, history.len())));
        }
        let shape = g.shape(history[0]).to_vec();
        if shape.first() != Some(&self.channels) || history.iter().any(|&h| g.shape(h) != shape) {
            return Err(Error::Shape("temporal fusion needs identically shaped frames".into()));
        }
        let cat = g.concat0(history)?;
        let h = self.block.forward(g, p, cat)?;
        self.project.forward(g, p, h)
    }

    /// Residual branch zeroed and projection selecting the current frame.
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        self.block.set_identity(store);
        self.project.set_identity(store);
    }
}
