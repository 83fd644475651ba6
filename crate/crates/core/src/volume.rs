//! Volumes, normalization, training-patch sampling, inference tiling and
//! overlap-averaged reconstruction.
//!
//! Voxels are stored row-major with `x` varying fastest:
//! `index = x + dims[0] * (y + dims[1] * z)`. The same layout is used on
//! disk (VOL3) and for the spatial part of every volumetric tensor.
//!
//! A patch is addressed by its center `c`. Along each axis the input region
//! is `[c - input/2, c - input/2 + input)` and the output region is
//! `[c - output/2, c - output/2 + output)`; because `input - output` is even
//! the output region sits exactly in the middle of the input region.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VOL3_MAGIC: [u8; 4] = *b"VOL3";
const VOL3_HEADER_LEN: usize = 4 + 3 * 4 + 3 * 4;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume file not found: {0}")]
    MissingFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:02x?}, expected \"VOL3\"")]
    BadMagic { found: [u8; 4] },
    #[error("truncated volume: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite voxel at linear index {index}")]
    NonFinite { index: usize },
    #[error("invalid dims {0:?}: every axis must be positive")]
    InvalidDims([usize; 3]),
    #[error("invalid spacing {0:?}: every axis must be positive and finite")]
    InvalidSpacing([f32; 3]),
    #[error("voxel count {found} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], found: usize },
    #[error("dims mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("volume {dims:?} is smaller than the {needed}-voxel patch on some axis")]
    TooSmall { dims: [usize; 3], needed: usize },
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("invalid patch spec: {0}")]
    InvalidSpec(String),
    #[error("patch at center {center:?} falls outside a volume of dims {dims:?}")]
    Placement { center: [usize; 3], dims: [usize; 3] },
    #[error("patch has {found} values, expected {expected}")]
    PatchLength { expected: usize, found: usize },
}

/// A dense 3D scalar grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::InvalidDims(dims));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        if voxels.len() != dims[0] * dims[1] * dims[2] {
            return Err(VolumeError::LengthMismatch { dims, found: voxels.len() });
        }
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
        Ok(Self { dims, spacing, voxels })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, vec![0.0; dims.iter().product()])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, VolumeError> {
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Applies `f` to every voxel, rejecting non-finite results.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, VolumeError> {
        Self::new(self.dims, self.spacing, self.voxels.iter().map(|&v| f(v)).collect())
    }

    pub fn ensure_same_dims(&self, other: &Volume) -> Result<(), VolumeError> {
        if self.dims != other.dims {
            return Err(VolumeError::DimMismatch { left: self.dims, right: other.dims });
        }
        Ok(())
    }

    /// Copies the cube of side `size` whose lowest corner is `lo`.
    pub fn crop_cube(&self, lo: [usize; 3], size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size * size);
        self.crop_cube_into(lo, size, &mut out);
        out
    }

    fn crop_cube_into(&self, lo: [usize; 3], size: usize, out: &mut Vec<f32>) {
        for z in lo[2]..lo[2] + size {
            for y in lo[1]..lo[1] + size {
                let start = self.index(lo[0], y, z);
                out.extend_from_slice(&self.voxels[start..start + size]);
            }
        }
    }
}

/// On-disk volume formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VolumeFormat {
    /// Little-endian `VOL3` magic, 3 x u32 dims, 3 x f32 spacing, f32 voxels.
    #[default]
    Vol3,
}

/// Serializes a volume in the VOL3 layout.
pub fn encode_vol3(v: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(VOL3_HEADER_LEN + 4 * v.len());
    buf.extend_from_slice(&VOL3_MAGIC);
    for &d in &v.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &v.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for &x in &v.voxels {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_vol3(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() < 4 {
        return Err(VolumeError::Truncated { expected: VOL3_HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != VOL3_MAGIC {
        return Err(VolumeError::BadMagic { found: magic });
    }
    if bytes.len() < VOL3_HEADER_LEN {
        return Err(VolumeError::Truncated { expected: VOL3_HEADER_LEN, found: bytes.len() });
    }
    let word = |i: usize| -> [u8; 4] { bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap() };
    let dims = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)) as usize);
    let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
    let count = dims.iter().product::<usize>();
    let expected = VOL3_HEADER_LEN + 4 * count;
    if bytes.len() != expected {
        return Err(VolumeError::Truncated { expected, found: bytes.len() });
    }
    let voxels = bytes[VOL3_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, spacing, voxels)
}

pub fn load_volume(path: impl AsRef<Path>, format: VolumeFormat) -> Result<Volume, VolumeError> {
    let path = path.as_ref();
    let VolumeFormat::Vol3 = format;
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => VolumeError::MissingFile(path.display().to_string()),
        _ => VolumeError::Io(e),
    })?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes)?;
    decode_vol3(&bytes)
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume, format: VolumeFormat) -> Result<(), VolumeError> {
    let VolumeFormat::Vol3 = format;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_vol3(v))?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    ZeroMeanUnitVar,
    MinMax,
}

/// Affine normalization `normalized = (raw - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub mode: NormMode,
    pub offset: f64,
    pub scale: f64,
}

impl NormParams {
    /// Min-max parameters mapping `[min, max]` onto `[0, 1]`. A zero range
    /// maps everything to 0.
    pub fn min_max(min: f64, max: f64) -> Self {
        let range = max - min;
        Self {
            mode: NormMode::MinMax,
            offset: min,
            scale: if range > 0.0 { range } else { 1.0 },
        }
    }

    #[inline]
    pub fn apply(&self, raw: f32) -> f32 {
        ((raw as f64 - self.offset) / self.scale) as f32
    }

    #[inline]
    pub fn invert(&self, normalized: f32) -> f32 {
        (normalized as f64 * self.scale + self.offset) as f32
    }

    pub fn apply_volume(&self, v: &Volume) -> Result<Volume, VolumeError> {
        v.map(|x| self.apply(x))
    }

    pub fn invert_volume(&self, v: &Volume) -> Result<Volume, VolumeError> {
        v.map(|x| self.invert(x))
    }
}

/// Normalizes a volume and returns the parameters needed to invert it.
pub fn normalize(v: &Volume, mode: NormMode) -> Result<(Volume, NormParams), VolumeError> {
    let params = match mode {
        NormMode::ZeroMeanUnitVar => {
            let n = v.len() as f64;
            let mean = v.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = v.voxels.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            if var <= 0.0 {
                return Err(VolumeError::Degenerate("constant volume has zero variance"));
            }
            NormParams { mode, offset: mean, scale: var.sqrt() }
        }
        NormMode::MinMax => {
            let (lo, hi) = min_max(v.voxels());
            NormParams::min_max(lo as f64, hi as f64)
        }
    };
    Ok((params.apply_volume(v)?, params))
}

pub fn denormalize(v: &Volume, params: &NormParams) -> Result<Volume, VolumeError> {
    params.invert_volume(v)
}

pub(crate) fn min_max(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Patch geometry for training and tiled inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub input_size: usize,
    pub output_size: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { input_size: 32, output_size: 16, stride: 8 }
    }
}

impl PatchSpec {
    pub fn new(input_size: usize, output_size: usize, stride: usize) -> Result<Self, VolumeError> {
        let spec = Self { input_size, output_size, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let bad = |m: String| Err(VolumeError::InvalidSpec(m));
        if self.input_size == 0 || self.output_size == 0 || self.stride == 0 {
            return bad(format!("sizes must be positive: {self:?}"));
        }
        if self.output_size > self.input_size {
            return bad(format!("output {} exceeds input {}", self.output_size, self.input_size));
        }
        if !(self.input_size - self.output_size).is_multiple_of(2) {
            return bad(format!(
                "input {} - output {} must be even",
                self.input_size, self.output_size
            ));
        }
        if self.stride > self.output_size {
            return bad(format!("stride {} exceeds output {}", self.stride, self.output_size));
        }
        Ok(())
    }

    /// Voxels between the input and output region borders on each side.
    pub fn margin(&self) -> usize {
        (self.input_size - self.output_size) / 2
    }

    pub fn input_lo(&self, center: usize) -> usize {
        center - self.input_size / 2
    }

    pub fn output_lo(&self, center: usize) -> usize {
        center - self.output_size / 2
    }

    /// Inclusive range of centers whose input region fits in `dim` voxels.
    pub fn center_range(&self, dim: usize) -> Option<(usize, usize)> {
        if dim < self.input_size {
            return None;
        }
        let lo = self.input_size / 2;
        Some((lo, dim - self.input_size + lo))
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<(), VolumeError> {
        if dims.iter().any(|&d| d < self.input_size) {
            return Err(VolumeError::TooSmall { dims, needed: self.input_size });
        }
        Ok(())
    }

    pub fn input_voxels(&self) -> usize {
        self.input_size.pow(3)
    }

    pub fn output_voxels(&self) -> usize {
        self.output_size.pow(3)
    }
}

/// A training sample: an input patch (one or two channels) and the
/// co-centered ground-truth output patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// `channels * input_size^3` values, channel-major.
    pub mr_patch: Vec<f32>,
    pub channels: usize,
    /// `output_size^3` values.
    pub ct_patch: Vec<f32>,
    pub center: [usize; 3],
}

/// Draws `count` centers uniformly from the valid center range.
pub fn sample_centers(
    dims: [usize; 3],
    spec: &PatchSpec,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<[usize; 3]>, VolumeError> {
    spec.check_dims(dims)?;
    let ranges = dims.map(|d| spec.center_range(d).unwrap());
    Ok((0..count)
        .map(|_| ranges.map(|(lo, hi)| rng.random_range(lo..=hi)))
        .collect())
}

/// Crops the input (and optional context) and output patches at `center`.
pub fn extract_pair(
    mr: &Volume,
    ct: &Volume,
    context: Option<&Volume>,
    spec: &PatchSpec,
    center: [usize; 3],
) -> PatchPair {
    let in_lo = center.map(|c| spec.input_lo(c));
    let out_lo = center.map(|c| spec.output_lo(c));
    let channels = 1 + usize::from(context.is_some());
    let mut mr_patch = Vec::with_capacity(channels * spec.input_voxels());
    mr.crop_cube_into(in_lo, spec.input_size, &mut mr_patch);
    if let Some(ctx) = context {
        ctx.crop_cube_into(in_lo, spec.input_size, &mut mr_patch);
    }
    PatchPair {
        mr_patch,
        channels,
        ct_patch: ct.crop_cube(out_lo, spec.output_size),
        center,
    }
}

/// Samples `count` co-centered training pairs; a pure function of its
/// arguments. When `context` is given it becomes the second input channel.
pub fn sample_patch_pairs(
    mr: &Volume,
    ct: &Volume,
    spec: &PatchSpec,
    count: usize,
    seed: u64,
    context: Option<&Volume>,
) -> Result<Vec<PatchPair>, VolumeError> {
    spec.validate()?;
    mr.ensure_same_dims(ct)?;
    if let Some(ctx) = context {
        mr.ensure_same_dims(ctx)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = sample_centers(mr.dims(), spec, count, &mut rng)?;
    Ok(centers
        .into_iter()
        .map(|c| extract_pair(mr, ct, context, spec, c))
        .collect())
}

/// Tile centers along one axis: from the first valid center in steps of
/// `stride`, with the last center clamped to the maximal valid position.
pub fn axis_centers(dim: usize, spec: &PatchSpec) -> Option<Vec<usize>> {
    let (lo, hi) = spec.center_range(dim)?;
    let mut out: Vec<usize> = (lo..hi).step_by(spec.stride).collect();
    out.push(hi);
    Some(out)
}

/// Deterministic overlapping tiling of a volume, `x` varying fastest.
pub fn tile_centers(dims: [usize; 3], spec: &PatchSpec) -> Result<Vec<[usize; 3]>, VolumeError> {
    spec.validate()?;
    spec.check_dims(dims)?;
    let axes = dims.map(|d| axis_centers(d, spec).unwrap());
    let mut centers = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                centers.push([x, y, z]);
            }
        }
    }
    Ok(centers)
}

/// Voxels that received at least one patch prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMask {
    dims: [usize; 3],
    covered: Vec<bool>,
}

impl CoverageMask {
    pub fn new(dims: [usize; 3], covered: Vec<bool>) -> Result<Self, VolumeError> {
        if covered.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::LengthMismatch { dims, found: covered.len() });
        }
        Ok(Self { dims, covered })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { dims, covered: vec![true; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.covered
    }

    pub fn is_covered(&self, index: usize) -> bool {
        self.covered[index]
    }

    pub fn count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.covered.len() as f64
    }

    /// Mask as a 0/1 volume, for storage in VOL3.
    pub fn to_volume(&self, spacing: [f32; 3]) -> Volume {
        let voxels = self.covered.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        Volume::new(self.dims, spacing, voxels).expect("mask dims are valid")
    }

    /// Nonzero voxels count as covered.
    pub fn from_volume(v: &Volume) -> Self {
        Self { dims: v.dims(), covered: v.voxels().iter().map(|&x| x != 0.0).collect() }
    }
}

/// Averages overlapping output-patch predictions into a full volume.
///
/// Every voxel covered by at least one prediction receives the arithmetic
/// mean of the predictions covering it; uncovered voxels are 0 and flagged
/// in the returned mask. Sums are accumulated in f64 in prediction order and
/// divided once at the end.
pub fn merge_patches(
    predictions: &[([usize; 3], Vec<f32>)],
    dims: [usize; 3],
    spacing: [f32; 3],
    output_size: usize,
) -> Result<(Volume, CoverageMask), VolumeError> {
    if dims.contains(&0) {
        return Err(VolumeError::InvalidDims(dims));
    }
    let n: usize = dims.iter().product();
    let mut sum = vec![0f64; n];
    let mut count = vec![0u32; n];
    let expected = output_size.pow(3);
    for (center, patch) in predictions {
        if patch.len() != expected {
            return Err(VolumeError::PatchLength { expected, found: patch.len() });
        }
        let half = output_size / 2;
        let fits = (0..3).all(|a| center[a] >= half && center[a] - half + output_size <= dims[a]);
        if !fits {
            return Err(VolumeError::Placement { center: *center, dims });
        }
        let lo = center.map(|c| c - half);
        let mut values = patch.iter();
        for z in lo[2]..lo[2] + output_size {
            for y in lo[1]..lo[1] + output_size {
                let row = lo[0] + dims[0] * (y + dims[1] * z);
                for i in row..row + output_size {
                    sum[i] += *values.next().unwrap() as f64;
                    count[i] += 1;
                }
            }
        }
    }
    let voxels = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 })
        .collect();
    let covered = count.iter().map(|&c| c > 0).collect();
    Ok((Volume::new(dims, spacing, voxels)?, CoverageMask { dims, covered }))
}
