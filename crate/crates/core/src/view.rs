//! Lift-splat view transformation: multi-view image features and per-pixel
//! depth distributions become a voxel feature volume and its BEV reshape.
//!
//! Frames: the ego frame is x forward, y left, z up (meters). Camera frames
//! follow the pinhole convention x right, y down, z along the optical axis.
//! Depth means distance along the optical axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, ParamStore};
use crate::ops::ConvSpec;
use crate::tensor::{Real, Tensor};

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Pixel intrinsics.
    pub intrinsics: Mat3,
    /// Camera-to-ego rigid transform.
    pub extrinsics: Mat4,
    pub image_height: usize,
    pub image_width: usize,
}

impl CameraModel {
    /// Horizontal camera at `position` looking along ego yaw `yaw` (radians,
    /// counter-clockwise from +x) with the given horizontal field of view.
    pub fn looking_along(yaw: f64, position: [f64; 3], fov: f64, image_height: usize, image_width: usize) -> Self {
        let f = image_width as f64 / 2.0 / (fov / 2.0).tan();
        let intrinsics = [[f, 0.0, image_width as f64 / 2.0], [0.0, f, image_height as f64 / 2.0], [0.0, 0.0, 1.0]];
        let forward = [yaw.cos(), yaw.sin(), 0.0];
        let right = [yaw.sin(), -yaw.cos(), 0.0];
        let down = [0.0, 0.0, -1.0];
        let mut extrinsics = [[0.0; 4]; 4];
        for r in 0..3 {
            extrinsics[r] = [right[r], down[r], forward[r], position[r]];
        }
        extrinsics[3] = [0.0, 0.0, 0.0, 1.0];
        Self { intrinsics, extrinsics, image_height, image_width }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if det3(k).abs() < 1e-12 {
            return Err(Error::InvalidArgument("camera intrinsics are singular".into()));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|t| r[t][i] * r[t][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
                }
            }
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        let e = &self.extrinsics;
        [[e[0][0], e[0][1], e[0][2]], [e[1][0], e[1][1], e[1][2]], [e[2][0], e[2][1], e[2][2]]]
    }

    pub fn position(&self) -> [f64; 3] {
        [self.extrinsics[0][3], self.extrinsics[1][3], self.extrinsics[2][3]]
    }

    /// Camera-frame ray through pixel `(u, v)` scaled to unit depth.
    pub fn pixel_ray(&self, u: f64, v: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        // Upper-triangular intrinsics: solve K r = [u, v, 1].
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        [x, y, 1.0]
    }

    pub fn cam_to_ego(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        std::array::from_fn(|r| e[r][0] * p[0] + e[r][1] * p[1] + e[r][2] * p[2] + e[r][3])
    }

    pub fn ego_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.position();
        let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
        std::array::from_fn(|i| r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2])
    }

    /// Ego point at depth `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let r = self.pixel_ray(u, v);
        self.cam_to_ego([r[0] * depth, r[1] * depth, r[2] * depth])
    }

    /// Pixel coordinates and depth of an ego point, if in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.ego_to_cam(p);
        if c[2] <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k[0][0] * c[0] + k[0][1] * c[1]) / c[2] + k[0][2];
        let v = k[1][1] * c[1] / c[2] + k[1][2];
        Some((u, v, c[2]))
    }
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGridSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub voxel_size: [f64; 3],
}

impl Default for VoxelGridSpec {
    /// 32×32×8 grid of 0.5 m voxels over [-8,8]²×[-1,3].
    fn default() -> Self {
        Self { min: [-8.0, -8.0, -1.0], max: [8.0, 8.0, 3.0], voxel_size: [0.5; 3] }
    }
}

impl VoxelGridSpec {
    /// Full-scale reference grid: 200×200×16 voxels of 0.4 m.
    pub fn reference() -> Self {
        Self { min: [-40.0, -40.0, -1.0], max: [40.0, 40.0, 5.4], voxel_size: [0.4; 3] }
    }

    pub fn extents(&self) -> [usize; 3] {
        std::array::from_fn(|a| ((self.max[a] - self.min[a]) / self.voxel_size[a]).round() as usize)
    }

    pub fn volume(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.voxel_size[a] > 0.0) || !(self.max[a] > self.min[a]) {
                return Err(Error::Config(format!("grid axis {a}: empty range or non-positive voxel size")));
            }
        }
        if self.extents().iter().any(|&e| e == 0) {
            return Err(Error::Config("grid has a zero extent".into()));
        }
        Ok(())
    }

    /// Voxel containing `p`; lower faces inclusive, upper faces exclusive.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let ext = self.extents();
        let mut idx = [0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.min[a]) / self.voxel_size[a]).floor();
            if !(f >= 0.0 && f < ext[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn flat(&self, idx: [usize; 3]) -> usize {
        let [_, ey, ez] = self.extents();
        (idx[0] * ey + idx[1]) * ez + idx[2]
    }

    pub fn unflat(&self, flat: usize) -> [usize; 3] {
        let [_, ey, ez] = self.extents();
        [flat / (ey * ez), (flat / ez) % ey, flat % ez]
    }

    pub fn center(&self, idx: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.min[a] + (idx[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Index of the voxel containing the grid's geometric center.
    pub fn center_voxel(&self) -> [usize; 3] {
        self.extents().map(|e| e / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthBins {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self { count: 16, min: 1.0, max: 20.0 }
    }
}

impl DepthBins {
    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.count as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        self.min + (k as f64 + 0.5) * self.width()
    }

    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        let f = ((depth - self.min) / self.width()).floor();
        (f >= 0.0 && f < self.count as f64).then_some(f as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || !(self.max > self.min) || !(self.min > 0.0) {
            return Err(Error::Config(format!("invalid depth bins {self:?}")));
        }
        Ok(())
    }
}

/// Precomputed ego coordinates and voxel assignments of every frustum point.
#[derive(Clone, Debug)]
pub struct FrustumGrid {
    pub bins: DepthBins,
    pub feat_height: usize,
    pub feat_width: usize,
    /// Per camera, per point in `(bin, row, col)` order: ego coordinate.
    pub points: Vec<Vec<[f64; 3]>>,
    /// Per camera, per point: flat voxel index or `None` if outside the grid.
    pub voxel_index: Vec<Vec<Option<u32>>>,
}

impl FrustumGrid {
    /// Lattice at feature-pixel centers: feature cell `(i, j)` covers image
    /// pixels `[i*sy, (i+1)*sy) × [j*sx, (j+1)*sx)`.
    pub fn build(cameras: &[CameraModel], bins: &DepthBins, feat_height: usize, feat_width: usize, grid: &VoxelGridSpec) -> Self {
        let mut points = Vec::with_capacity(cameras.len());
        let mut voxel_index = Vec::with_capacity(cameras.len());
        for cam in cameras {
            let (sy, sx) = (cam.image_height as f64 / feat_height as f64, cam.image_width as f64 / feat_width as f64);
            let mut pts = Vec::with_capacity(bins.count * feat_height * feat_width);
            for d in 0..bins.count {
                let depth = bins.center(d);
                for i in 0..feat_height {
                    for j in 0..feat_width {
                        pts.push(cam.unproject((j as f64 + 0.5) * sx, (i as f64 + 0.5) * sy, depth));
                    }
                }
            }
            voxel_index.push(pts.iter().map(|&p| grid.voxel_of(p).map(|v| grid.flat(v) as u32)).collect());
            points.push(pts);
        }
        Self { bins: bins.clone(), feat_height, feat_width, points, voxel_index }
    }

    pub fn num_cameras(&self) -> usize {
        self.points.len()
    }

    pub fn points_per_camera(&self) -> usize {
        self.bins.count * self.feat_height * self.feat_width
    }
}

/// Three stride-2 conv stages followed by 1×1 feature and depth heads.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: [Conv; 3],
    pub feat_head: Conv,
    pub depth_head: Conv,
}

impl Backbone {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        widths: [usize; 3],
        feat_channels: usize,
        depth_bins: usize,
        rng: &mut R,
    ) -> Self {
        let mut in_ch = 3;
        let stages = std::array::from_fn(|i| {
            let c = Conv::new(store, &format!("backbone.stage{i}"), in_ch, widths[i], ConvSpec::down(&[3, 3]), true, rng);
            in_ch = widths[i];
            c
        });
        let feat_head = Conv::new(store, "backbone.feat_head", widths[2], feat_channels, ConvSpec::square(1), true, rng);
        let depth_head = Conv::new(store, "backbone.depth_head", widths[2], depth_bins, ConvSpec::square(1), true, rng);
        Self { stages, feat_head, depth_head }
    }

    /// `image[3,H,W] -> (feat[D,H/8,W/8], depth_logits[bins,H/8,W/8])`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, image: Var) -> Result<(Var, Var)> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("backbone expects [3,H,W], got {s:?}")));
        }
        if s[1] < 8 || s[2] < 8 || s[1] % 8 != 0 || s[2] % 8 != 0 {
            return Err(Error::Shape(format!("image {}x{} too small or not divisible by 8", s[1], s[2])));
        }
        let mut h = image;
        for stage in &self.stages {
            h = stage.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        let feat = self.feat_head.forward(g, p, h)?;
        let depth = self.depth_head.forward(g, p, h)?;
        Ok((feat, depth))
    }
}

impl<T: Real> Graph<T> {
    /// `out[c,d,u,v] = feat[c,u,v] * prob[d,u,v]`.
    pub fn outer_lift(&mut self, feat: Var, prob: Var) -> Result<Var> {
        let (sf, sp) = (self.shape(feat).to_vec(), self.shape(prob).to_vec());
        if sf.len() != 3 || sp.len() != 3 || sf[1..] != sp[1..] {
            return Err(Error::Shape(format!("lift: feat {sf:?} vs depth {sp:?}")));
        }
        let (ch, bins, hw) = (sf[0], sp[0], sf[1] * sf[2]);
        let (fv, pv) = (self.value(feat).data(), self.value(prob).data());
        let mut data = Vec::with_capacity(ch * bins * hw);
        for c in 0..ch {
            let f = &fv[c * hw..(c + 1) * hw];
            for d in 0..bins {
                let q = &pv[d * hw..(d + 1) * hw];
                data.extend(f.iter().zip(q).map(|(&a, &b)| a * b));
            }
        }
        let out = Tensor::new(&[ch, bins, sf[1], sf[2]], data)?;
        self.record(
            "lift",
            out,
            &[feat, prob],
            Box::new(move |cx| {
                let (fv, pv) = (cx.inputs[0].data(), cx.inputs[1].data());
                let mut df = vec![T::zero(); ch * hw];
                let mut dp = vec![T::zero(); bins * hw];
                for c in 0..ch {
                    for d in 0..bins {
                        let go = &cx.grad[(c * bins + d) * hw..(c * bins + d + 1) * hw];
                        for i in 0..hw {
                            df[c * hw + i] += go[i] * pv[d * hw + i];
                            dp[d * hw + i] += go[i] * fv[c * hw + i];
                        }
                    }
                }
                vec![Some(df), Some(dp)]
            }),
        )
    }

    /// Softmax the depth logits over bins, then take the outer product with
    /// the feature map.
    pub fn lift(&mut self, feat: Var, depth_logits: Var) -> Result<Var> {
        let prob = self.softmax(depth_logits, 0)?;
        self.outer_lift(feat, prob)
    }

    /// Sum-pool per-camera frustum features `[D,bins,h,w]` into `[D,X,Y,Z]`.
    /// Points outside the grid are dropped; empty voxels stay zero.
    pub fn voxel_pool(&mut self, frustums: &[Var], frustum: &FrustumGrid, grid: &VoxelGridSpec) -> Result<Var> {
        if frustums.len() != frustum.num_cameras() {
            return Err(Error::Shape(format!(
                "voxel_pool: {} frustum tensors for {} cameras",
                frustums.len(),
                frustum.num_cameras()
            )));
        }
        let npts = frustum.points_per_camera();
        let ch = self.shape(frustums[0])[0];
        for &f in frustums {
            let s = self.shape(f);
            if s[0] != ch || s[1..].iter().product::<usize>() != npts {
                return Err(Error::Shape(format!("voxel_pool: frustum tensor {s:?} vs {npts} points")));
            }
        }
        let ext = grid.extents();
        let nvox = grid.volume();
        let mut out = vec![T::zero(); ch * nvox];
        for (cam, &f) in frustums.iter().enumerate() {
            let src = self.value(f).data();
            let index = &frustum.voxel_index[cam];
            for c in 0..ch {
                let (s, o) = (&src[c * npts..(c + 1) * npts], &mut out[c * nvox..(c + 1) * nvox]);
                for (p, v) in index.iter().enumerate() {
                    if let Some(v) = v {
                        o[*v as usize] += s[p];
                    }
                }
            }
        }
        let out = Tensor::new(&[ch, ext[0], ext[1], ext[2]], out)?;
        let index = frustum.voxel_index.clone();
        self.record(
            "voxel_pool",
            out,
            frustums,
            Box::new(move |cx| {
                index
                    .iter()
                    .enumerate()
                    .map(|(cam, idx)| {
                        cx.needs[cam].then(|| {
                            let mut d = vec![T::zero(); ch * npts];
                            for c in 0..ch {
                                for (p, v) in idx.iter().enumerate() {
                                    if let Some(v) = v {
                                        d[c * npts + p] = cx.grad[c * nvox + *v as usize];
                                    }
                                }
                            }
                            d
                        })
                    })
                    .collect()
            }),
        )
    }

    /// `[D,X,Y,Z] -> [D*Z,X,Y]` with `out[c*Z+z, x, y] = in[c, x, y, z]`.
    pub fn bev_flatten(&mut self, vox: Var) -> Result<Var> {
        let s = self.shape(vox).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("bev_flatten expects [D,X,Y,Z], got {s:?}")));
        }
        let p = self.permute(vox, &[0, 3, 1, 2])?;
        self.reshape(p, &[s[0] * s[3], s[1], s[2]])
    }

    /// Inverse of [`Graph::bev_flatten`] for a known height `z`.
    pub fn bev_to_voxel(&mut self, bev: Var, z: usize) -> Result<Var> {
        let s = self.shape(bev).to_vec();
        if s.len() != 3 || z == 0 || s[0] % z != 0 {
            return Err(Error::Shape(format!("cannot voxelize BEV {s:?} with height {z}")));
        }
        let r = self.reshape(bev, &[s[0] / z, z, s[1], s[2]])?;
        self.permute(r, &[0, 2, 3, 1])
    }
}
