//! Procedural labeled voxel scenes and ray-marched multi-view renderings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::view::{CameraModel, DepthBins, VoxelGridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub grid: VoxelGridSpec,
    pub num_classes: usize,
    pub cameras: usize,
    /// `[H, W]`; both divisible by 8.
    pub image_size: [usize; 2],
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    pub camera_height: f64,
    pub depth_bins: DepthBins,
    /// Inclusive range of box count per scene.
    pub boxes: [usize; 2],
    pub walls: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: VoxelGridSpec::default(),
            num_classes: 6,
            cameras: 4,
            image_size: [64, 64],
            fov_deg: 90.0,
            camera_height: 0.5,
            depth_bins: DepthBins::default(),
            boxes: [2, 6],
            walls: true,
        }
    }
}

impl SceneConfig {
    pub fn feature_size(&self) -> [usize; 2] {
        [self.image_size[0] / 8, self.image_size[1] / 8]
    }

    pub fn empty_class(&self) -> u8 {
        (self.num_classes - 1) as u8
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.depth_bins.validate()?;
        if self.num_classes < 3 || self.num_classes > u8::MAX as usize {
            return Err(Error::Config(format!("scenes need 3..=255 classes, got {}", self.num_classes)));
        }
        if self.cameras == 0 {
            return Err(Error::Config("at least one camera is required".into()));
        }
        let [h, w] = self.image_size;
        if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be positive multiples of 8")));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!("field of view {} out of (0, 180)", self.fov_deg)));
        }
        if self.boxes[0] > self.boxes[1] {
            return Err(Error::Config("box count range is reversed".into()));
        }
        if self.grid.voxel_of([0.0, 0.0, self.camera_height]).is_none() {
            return Err(Error::Config("camera position lies outside the grid".into()));
        }
        Ok(())
    }

    /// Cameras at evenly spaced yaw angles around the ego origin. Matrices
    /// are rounded to f32 so they survive the dataset format unchanged.
    pub fn camera_rig(&self) -> Vec<CameraModel> {
        let [h, w] = self.image_size;
        (0..self.cameras)
            .map(|i| {
                let yaw = std::f64::consts::TAU * i as f64 / self.cameras as f64;
                let mut cam = CameraModel::looking_along(yaw, [0.0, 0.0, self.camera_height], self.fov_deg.to_radians(), h, w);
                cam.intrinsics.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
                cam.extrinsics.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
                cam
            })
            .collect()
    }
}

/// One labeled scene with its renderings.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    /// Flat `X·Y·Z` labels, empty = `C - 1`.
    pub labels: Vec<u8>,
    pub cameras: Vec<CameraModel>,
    /// Per camera `[3, H, W]`.
    pub images: Vec<Tensor<f32>>,
    /// Per camera `h·w` depth-bin indices at feature-pixel centers, `-1` = no hit.
    pub depth_bins: Vec<Vec<i16>>,
    /// Voxels crossed by at least one camera ray before or at its first hit.
    pub visibility: Vec<bool>,
}

impl SceneSample {
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Ground plane of class 0 on the bottom layer, 2–6 boxes and optional wall
/// segments of random semantic classes, everything else empty. The columns
/// around the ego origin stay clear so cameras never start inside an object.
pub fn generate_scene(seed: u64, grid: &VoxelGridSpec, num_classes: usize, boxes: [usize; 2], walls: bool) -> Result<Vec<u8>> {
    grid.validate()?;
    if num_classes < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 classes, got {num_classes}")));
    }
    let [ex, ey, ez] = grid.extents();
    let empty = (num_classes - 1) as u8;
    let mut labels = vec![empty; ex * ey * ez];
    let idx = |x: usize, y: usize, z: usize| (x * ey + y) * ez + z;
    for x in 0..ex {
        for y in 0..ey {
            labels[idx(x, y, 0)] = 0;
        }
    }
    if ez < 2 {
        return Ok(labels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego = grid.voxel_of([0.0, 0.0, 0.0]).unwrap_or_else(|| grid.center_voxel());
    let keep_out = 3usize;
    let clear = |x0: usize, x1: usize, y0: usize, y1: usize| {
        x1 + keep_out <= ego[0] || x0 >= ego[0] + keep_out || y1 + keep_out <= ego[1] || y0 >= ego[1] + keep_out
    };
    let semantic = 1..num_classes - 1;
    let n = rng.gen_range(boxes[0]..=boxes[1]);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < n && attempts < 100 {
        attempts += 1;
        let sx = rng.gen_range(2..=6.min(ex));
        let sy = rng.gen_range(2..=6.min(ey));
        let sz = rng.gen_range(1..=(ez - 1).min(5));
        let x0 = rng.gen_range(0..=ex - sx);
        let y0 = rng.gen_range(0..=ey - sy);
        let class = rng.gen_range(semantic.clone()) as u8;
        if !clear(x0, x0 + sx, y0, y0 + sy) {
            continue;
        }
        for x in x0..x0 + sx {
            for y in y0..y0 + sy {
                for z in 1..=sz {
                    labels[idx(x, y, z)] = class;
                }
            }
        }
        placed += 1;
    }
    if walls && rng.gen_bool(0.5) {
        let class = rng.gen_range(semantic) as u8;
        let len = rng.gen_range(6..=12usize);
        let height = rng.gen_range(2..=4usize).min(ez - 1);
        let along_x = rng.gen_bool(0.5);
        let (span, across) = if along_x { (ex, ey) } else { (ey, ex) };
        let start = rng.gen_range(0..=span.saturating_sub(len));
        let line = rng.gen_range(0..across);
        for s in start..(start + len).min(span) {
            let (x, y) = if along_x { (s, line) } else { (line, s) };
            if !clear(x, x + 1, y, y + 1) {
                continue;
            }
            for z in 1..=height {
                labels[idx(x, y, z)] = class;
            }
        }
    }
    Ok(labels)
}

/// Fixed class colors; the last entry is reused for any extra class.
const PALETTE: [[f32; 3]; 8] = [
    [0.45, 0.40, 0.35],
    [0.90, 0.20, 0.15],
    [0.15, 0.70, 0.25],
    [0.20, 0.30, 0.90],
    [0.95, 0.85, 0.10],
    [0.00, 0.00, 0.00],
    [0.80, 0.20, 0.80],
    [0.10, 0.80, 0.80],
];
const BACKGROUND: [f32; 3] = [0.60, 0.75, 0.95];

pub fn class_color(class: u8) -> [f32; 3] {
    PALETTE[(class as usize).min(PALETTE.len() - 1)]
}

/// Result of marching one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub class: u8,
    pub voxel: [usize; 3],
    /// Distance along the optical axis.
    pub depth: f64,
}

/// March the ray through pixel `(u, v)` in uniform steps of a quarter voxel
/// until it hits a non-empty voxel or leaves the grid. Every voxel visited is
/// reported through `visit`, including the hit voxel.
pub fn march_ray(
    cam: &CameraModel,
    u: f64,
    v: f64,
    grid: &VoxelGridSpec,
    labels: &[u8],
    empty: u8,
    mut visit: impl FnMut(usize),
) -> Option<RayHit> {
    let ray = cam.pixel_ray(u, v);
    let norm = (ray[0] * ray[0] + ray[1] * ray[1] + ray[2] * ray[2]).sqrt();
    let step = grid.voxel_size.iter().cloned().fold(f64::INFINITY, f64::min) / 4.0 / norm;
    let mut depth = 0.0;
    let mut entered = false;
    let mut last = usize::MAX;
    loop {
        let p = cam.cam_to_ego([ray[0] * depth, ray[1] * depth, depth]);
        match grid.voxel_of(p) {
            Some(vx) => {
                entered = true;
                let flat = grid.flat(vx);
                if flat != last {
                    visit(flat);
                    last = flat;
                }
                if labels[flat] != empty {
                    return Some(RayHit { class: labels[flat], voxel: vx, depth });
                }
            }
            None if entered => return None,
            None if depth > 1e3 => return None,
            None => {}
        }
        depth += step;
    }
}

/// Images, depth-bin maps and the visibility mask for `labels`.
pub fn render_views(
    labels: &[u8],
    cameras: &[CameraModel],
    grid: &VoxelGridSpec,
    bins: &DepthBins,
    empty: u8,
) -> Result<(Vec<Tensor<f32>>, Vec<Vec<i16>>, Vec<bool>)> {
    if labels.len() != grid.volume() {
        return Err(Error::Shape(format!("{} labels for grid {:?}", labels.len(), grid.extents())));
    }
    let mut visible = vec![false; labels.len()];
    let mut images = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    for cam in cameras {
        cam.validate()?;
        let (h, w) = (cam.image_height, cam.image_width);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by 8")));
        }
        let mut img = vec![0f32; 3 * h * w];
        for r in 0..h {
            for c in 0..w {
                let hit = march_ray(cam, c as f64 + 0.5, r as f64 + 0.5, grid, labels, empty, |v| visible[v] = true);
                let rgb = match hit {
                    Some(hit) => {
                        let shade = (1.0 / (1.0 + 0.08 * hit.depth)) as f32;
                        class_color(hit.class).map(|v| v * shade)
                    }
                    None => BACKGROUND,
                };
                for ch in 0..3 {
                    img[(ch * h + r) * w + c] = rgb[ch];
                }
            }
        }
        images.push(Tensor::new(&[3, h, w], img)?);
        let (fh, fw) = (h / 8, w / 8);
        let mut d = Vec::with_capacity(fh * fw);
        for i in 0..fh {
            for j in 0..fw {
                let hit = march_ray(cam, (j as f64 + 0.5) * 8.0, (i as f64 + 0.5) * 8.0, grid, labels, empty, |_| {});
                d.push(hit.and_then(|h| bins.bin_of(h.depth)).map_or(-1, |b| b as i16));
            }
        }
        depths.push(d);
    }
    Ok((images, depths, visible))
}

/// Generate and render one sample.
pub fn synthesize(seed: u64, config: &SceneConfig) -> Result<SceneSample> {
    config.validate()?;
    let labels = generate_scene(seed, &config.grid, config.num_classes, config.boxes, config.walls)?;
    let cameras = config.camera_rig();
    let (images, depth_bins, visibility) = render_views(&labels, &cameras, &config.grid, &config.depth_bins, config.empty_class())?;
    Ok(SceneSample { seed, labels, cameras, images, depth_bins, visibility })
}

/// `n` samples with seeds `base, base+1, ...`.
pub fn synthesize_set(base_seed: u64, n: usize, config: &SceneConfig) -> Result<Vec<SceneSample>> {
    (0..n as u64).map(|i| synthesize(base_seed.wrapping_add(i), config)).collect()
}
