//! Paired synthetic MR/CT volumes.
//!
//! A subject is a label map of overlapping random ellipsoids painted onto a
//! background. CT is a pure function of the label: one constant per class,
//! so boundaries are sharp. MR adds a smooth per-class sinusoidal texture
//! and Gaussian noise on top of a per-class base value, which makes MR the
//! richer-looking modality while keeping MR→CT learnable.
//!
//! Intensity tables (index 0 is the background):
//!
//! | class | 0     | 1    | 2   | 3   | 4   | 5    | 6   | 7    | 8   |
//! |-------|-------|------|-----|-----|-----|------|-----|------|-----|
//! | CT    | -1000 | 1200 | 300 | 40  | 800 | -200 | 100 | 1500 | 550 |
//! | MR    | 0.05  | 0.90 | 0.30| 0.60| 0.75| 0.15 | 0.45| 0.85 | 0.25|

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::training::splitmix64;
use crate::volume::{save_volume, Volume, VolumeError, VolumeFormat};

pub const CT_TABLE: [f32; 9] = [-1000.0, 1200.0, 300.0, 40.0, 800.0, -200.0, 100.0, 1500.0, 550.0];
pub const MR_TABLE: [f32; 9] = [0.05, 0.90, 0.30, 0.60, 0.75, 0.15, 0.45, 0.85, 0.25];
pub const MAX_ELLIPSOIDS: usize = CT_TABLE.len() - 1;
/// Smallest admissible extent per axis.
pub const MIN_DIM: usize = 33;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom configuration: {0}")]
    Config(String),
    #[error("a dataset needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub n_ellipsoids: usize,
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { dims: [48; 3], n_ellipsoids: 6, texture_amplitude: 0.2, noise_sigma: 0.01, seed: 0 }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(PhantomError::Config(format!("dims {:?} must be at least {MIN_DIM} per axis", self.dims)));
        }
        if !(1..=MAX_ELLIPSOIDS).contains(&self.n_ellipsoids) {
            return Err(PhantomError::Config(format!(
                "n_ellipsoids must lie in 1..={MAX_ELLIPSOIDS}, got {}",
                self.n_ellipsoids
            )));
        }
        if !(0.0..1.0).contains(&self.texture_amplitude) {
            return Err(PhantomError::Config(format!(
                "texture_amplitude must lie in [0, 1), got {}",
                self.texture_amplitude
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(PhantomError::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    /// Rows of the rotation into the ellipsoid frame.
    rot: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn random(dims: [usize; 3], rng: &mut impl Rng) -> Self {
        let m = dims.iter().copied().min().unwrap() as f64;
        let center = dims.map(|d| rng.random_range(0.25..0.75) * d as f64);
        let semi = [(); 3].map(|_| rng.random_range(0.10..0.28) * m);
        let [a, b, c] = [(); 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        // z-y-x Euler rotation
        let rot = [
            [cb * cc, cb * sc, -sb],
            [sa * sb * cc - ca * sc, sa * sb * sc + ca * cc, sa * cb],
            [ca * sb * cc + sa * sc, ca * sb * sc - sa * cc, ca * cb],
        ];
        Self { center, semi, rot }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for (row, semi) in self.rot.iter().zip(self.semi) {
            let u = (row[0] * d[0] + row[1] * d[1] + row[2] * d[2]) / semi;
            s += u * u;
        }
        s <= 1.0
    }
}

/// Painter's-order label map; labels `1..=n` in placement order. Redrawn
/// until every class keeps at least one voxel.
fn label_map(cfg: &PhantomConfig, rng: &mut impl Rng) -> Vec<u8> {
    let [nx, ny, nz] = cfg.dims;
    loop {
        let shapes: Vec<Ellipsoid> = (0..cfg.n_ellipsoids).map(|_| Ellipsoid::random(cfg.dims, rng)).collect();
        let mut labels = vec![0u8; nx * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    if let Some(k) = shapes.iter().rposition(|e| e.contains(p)) {
                        labels[x + nx * (y + ny * z)] = (k + 1) as u8;
                    }
                }
            }
        }
        let mut seen = vec![false; cfg.n_ellipsoids + 1];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        if seen.iter().all(|&s| s) {
            return labels;
        }
    }
}

/// One MR/CT subject; a pure function of `cfg`.
pub fn generate_pair(cfg: &PhantomConfig) -> Result<(Volume, Volume), PhantomError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = label_map(cfg, &mut rng);
    let [nx, ny, nz] = cfg.dims;

    // per-class wave vector and phase, 1 to 3 periods across the volume
    let waves: Vec<([f64; 3], [f64; 3])> = (0..=cfg.n_ellipsoids)
        .map(|_| {
            let k = cfg.dims.map(|d| rng.random_range(1.0..3.0) * std::f64::consts::TAU / d as f64);
            let phase = [(); 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
            (k, phase)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");

    let n = nx * ny * nz;
    let mut mr = Vec::with_capacity(n);
    let mut ct = Vec::with_capacity(n);
    for (i, &l) in labels.iter().enumerate() {
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        let (k, ph) = waves[l as usize];
        let tex = (k[0] * x as f64 + ph[0]).sin() * (k[1] * y as f64 + ph[1]).sin() * (k[2] * z as f64 + ph[2]).sin();
        let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        mr.push((MR_TABLE[l as usize] as f64 + 0.5 * cfg.texture_amplitude * tex + eps) as f32);
        ct.push(CT_TABLE[l as usize]);
    }
    let spacing = [1.0; 3];
    Ok((Volume::new(cfg.dims, spacing, mr)?, Volume::new(cfg.dims, spacing, ct)?))
}

/// Seed of subject `k` in a dataset generated from `base`.
pub fn subject_seed(base: u64, k: usize) -> u64 {
    splitmix64(base ^ splitmix64(k as u64 + 1))
}

#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub index: usize,
    pub seed: u64,
    pub mr: Volume,
    pub ct: Volume,
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub config: PhantomConfig,
    pub subjects: Vec<PhantomSubject>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `n_subjects` subjects; the last one is held out.
pub fn generate_dataset(cfg: &PhantomConfig, n_subjects: usize) -> Result<PhantomDataset, PhantomError> {
    if n_subjects < 2 {
        return Err(PhantomError::TooFewSubjects(n_subjects));
    }
    cfg.validate()?;
    let subjects = exec::try_map(n_subjects, |k| {
        let seed = subject_seed(cfg.seed, k);
        let (mr, ct) = generate_pair(&PhantomConfig { seed, ..*cfg })?;
        Ok::<_, PhantomError>(PhantomSubject { index: k, seed, mr, ct })
    })?;
    Ok(PhantomDataset {
        config: *cfg,
        subjects,
        train: (0..n_subjects - 1).collect(),
        test: vec![n_subjects - 1],
    })
}

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn mr_file_name(k: usize) -> String {
    format!("subj_{k}_mr.vol3")
}

pub fn ct_file_name(k: usize) -> String {
    format!("subj_{k}_ct.vol3")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub mr: String,
    pub ct: String,
}

/// Lines `train|test <mr file> <ct file>`; `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn of(dataset: &PhantomDataset) -> Self {
        let entry = |split, k| ManifestEntry { split, mr: mr_file_name(k), ct: ct_file_name(k) };
        let entries = dataset
            .train
            .iter()
            .map(|&k| entry(Split::Train, k))
            .chain(dataset.test.iter().map(|&k| entry(Split::Test, k)))
            .collect();
        Self { entries }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn render(&self, comment: &str) -> String {
        let mut s = String::new();
        for line in comment.lines() {
            let _ = writeln!(s, "# {line}");
        }
        for e in &self.entries {
            let tag = match e.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let _ = writeln!(s, "{tag} {} {}", e.mr, e.ct);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let split = match f.first() {
                Some(&"train") => Split::Train,
                Some(&"test") => Split::Test,
                _ => return Err(format!("line {}: expected `train` or `test`", no + 1)),
            };
            if f.len() != 3 {
                return Err(format!("line {}: expected `<split> <mr> <ct>`", no + 1));
            }
            entries.push(ManifestEntry { split, mr: f[1].into(), ct: f[2].into() });
        }
        Ok(Self { entries })
    }

    pub fn load(dir: &Path) -> Result<Self, PhantomError> {
        let path = dir.join(MANIFEST_NAME);
        let text =
            std::fs::read_to_string(&path).map_err(|e| PhantomError::Io { path: path.clone(), message: e.to_string() })?;
        Self::parse(&text).map_err(|message| PhantomError::Manifest { path, message })
    }
}

/// Writes every subject as VOL3 plus the manifest.
pub fn write_dataset(dir: &Path, dataset: &PhantomDataset) -> Result<(), PhantomError> {
    std::fs::create_dir_all(dir).map_err(|e| PhantomError::Io { path: dir.into(), message: e.to_string() })?;
    for s in &dataset.subjects {
        save_volume(dir.join(mr_file_name(s.index)), &s.mr, VolumeFormat::Vol3)?;
        save_volume(dir.join(ct_file_name(s.index)), &s.ct, VolumeFormat::Vol3)?;
    }
    let c = dataset.config;
    let comment = format!(
        "phantom dataset\nseed = {}\ndims = {}x{}x{}\nn_ellipsoids = {}\ntexture_amplitude = {}\nnoise_sigma = {}",
        c.seed, c.dims[0], c.dims[1], c.dims[2], c.n_ellipsoids, c.texture_amplitude, c.noise_sigma
    );
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, Manifest::of(dataset).render(&comment)).map_err(|e| PhantomError::Io { path, message: e.to_string() })
}
