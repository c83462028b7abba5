//! POCC dataset files.
//!
//! Layout (all little-endian): `"POCC"`, `u16` version, then the header
//! `u32 X, Y, Z, C, cameras, H, W, h, w, samples`, `f64 grid min[3], max[3],
//! voxel_size[3]`, `u32 depth bin count`, `f64 depth min, max`. Each sample
//! follows as `u64 seed`, `u8 labels[X·Y·Z]`, `u8 visibility[X·Y·Z]`, per
//! camera `f32 intrinsics[9]` and `f32 extrinsics[16]` (row-major), `f32
//! images[cameras·3·H·W]`, `i16 depth_bins[cameras·h·w]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::SceneSample;
use crate::tensor::Tensor;
use crate::view::{CameraModel, DepthBins, VoxelGridSpec};

pub const MAGIC: &[u8; 4] = b"POCC";
pub const VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 10 * 4 + 9 * 8 + 4 + 2 * 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: VoxelGridSpec,
    pub num_classes: usize,
    pub depth_bins: DepthBins,
    pub cameras: usize,
    pub image_size: [usize; 2],
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn feature_size(&self) -> [usize; 2] {
        [self.image_size[0] / 8, self.image_size[1] / 8]
    }

    fn sample_bytes(&self) -> usize {
        let v = self.grid.volume();
        let [hh, ww] = self.image_size;
        let [fh, fw] = self.feature_size();
        8 + 2 * v + self.cameras * (25 * 4 + 3 * hh * ww * 4 + fh * fw * 2)
    }

    /// Exact file size implied by the header.
    pub fn file_bytes(&self) -> usize {
        HEADER_BYTES + self.samples.len() * self.sample_bytes()
    }

    fn check_sample(&self, s: &SceneSample) -> Result<()> {
        let [hh, ww] = self.image_size;
        let [fh, fw] = self.feature_size();
        let ok = s.labels.len() == self.grid.volume()
            && s.visibility.len() == self.grid.volume()
            && s.cameras.len() == self.cameras
            && s.images.len() == self.cameras
            && s.depth_bins.len() == self.cameras
            && s.images.iter().all(|i| i.shape() == [3, hh, ww])
            && s.depth_bins.iter().all(|d| d.len() == fh * fw)
            && s.labels.iter().all(|&l| (l as usize) < self.num_classes);
        if !ok {
            return Err(Error::Shape(format!("sample {} does not match the dataset header", s.seed)));
        }
        Ok(())
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit the header")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize to bytes.
pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(ds.file_bytes());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let [x, y, z] = ds.grid.extents();
    let [fh, fw] = ds.feature_size();
    for v in [x, y, z, ds.num_classes, ds.cameras, ds.image_size[0], ds.image_size[1], fh, fw, ds.samples.len()] {
        put_u32(&mut buf, v)?;
    }
    for v in ds.grid.min.iter().chain(&ds.grid.max).chain(&ds.grid.voxel_size) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(&mut buf, ds.depth_bins.count)?;
    buf.extend_from_slice(&ds.depth_bins.min.to_le_bytes());
    buf.extend_from_slice(&ds.depth_bins.max.to_le_bytes());
    for s in &ds.samples {
        ds.check_sample(s)?;
        buf.extend_from_slice(&s.seed.to_le_bytes());
        buf.extend_from_slice(&s.labels);
        buf.extend(s.visibility.iter().map(|&v| v as u8));
        for cam in &s.cameras {
            for v in cam.intrinsics.iter().flatten().chain(cam.extrinsics.iter().flatten()) {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        for img in &s.images {
            for v in img.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for d in s.depth_bins.iter().flatten() {
            buf.extend_from_slice(&d.to_le_bytes());
        }
    }
    debug_assert_eq!(buf.len(), ds.file_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (needed {n} more)", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse bytes; `path` is used only for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Dataset> {
    decode_inner(bytes).map_err(|reason| Error::corrupt(path, reason))
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Dataset, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut h = [0usize; 10];
    for v in &mut h {
        *v = r.u32()?;
    }
    let [x, y, z, classes, cams, ih, iw, fh, fw, n] = h;
    let mut g = [0f64; 9];
    for v in &mut g {
        *v = r.f64()?;
    }
    let grid = VoxelGridSpec { min: [g[0], g[1], g[2]], max: [g[3], g[4], g[5]], voxel_size: [g[6], g[7], g[8]] };
    let depth_bins = DepthBins { count: r.u32()?, min: r.f64()?, max: r.f64()? };
    grid.validate().map_err(|e| e.to_string())?;
    if grid.extents() != [x, y, z] {
        return Err(format!("grid extents {:?} disagree with header {:?}", grid.extents(), [x, y, z]));
    }
    if ih % 8 != 0 || iw % 8 != 0 || [fh, fw] != [ih / 8, iw / 8] || classes == 0 || classes > 255 {
        return Err("inconsistent image or class header fields".into());
    }
    let mut ds = Dataset { grid, num_classes: classes, depth_bins, cameras: cams, image_size: [ih, iw], samples: Vec::new() };
    let expected = HEADER_BYTES as u128 + n as u128 * ds.sample_bytes() as u128;
    if bytes.len() as u128 != expected {
        return Err(format!("file has {} bytes, header declares {expected}", bytes.len()));
    }
    let vol = x * y * z;
    for _ in 0..n {
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let labels = r.take(vol)?.to_vec();
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(format!("label {l} out of range"));
        }
        let visibility = r.take(vol)?.iter().map(|&v| v != 0).collect();
        let mut cameras = Vec::with_capacity(cams);
        for _ in 0..cams {
            let raw: Vec<f64> = r.take(25 * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let intrinsics = std::array::from_fn(|i| std::array::from_fn(|j| raw[i * 3 + j]));
            let extrinsics = std::array::from_fn(|i| std::array::from_fn(|j| raw[9 + i * 4 + j]));
            cameras.push(CameraModel { intrinsics, extrinsics, image_height: ih, image_width: iw });
        }
        let mut images = Vec::with_capacity(cams);
        for _ in 0..cams {
            let data = r.take(3 * ih * iw * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            images.push(Tensor::new(&[3, ih, iw], data).map_err(|e| e.to_string())?);
        }
        let mut depth = Vec::with_capacity(cams);
        for _ in 0..cams {
            depth.push(r.take(fh * fw * 2)?.chunks_exact(2).map(|c| i16::from_le_bytes(c.try_into().unwrap())).collect());
        }
        ds.samples.push(SceneSample { seed, labels, cameras, images, depth_bins: depth, visibility });
    }
    Ok(ds)
}

/// Write via a temporary file and rename, so readers never see a partial file.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = encode(ds)?;
    atomic_write(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
