//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then the config file, then
//! command-line overrides. The merged result is rendered back in the same
//! format so a run directory always records what produced it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ctsynth::autocontext::CascadeConfig;
use ctsynth::losses::LossWeights;
use ctsynth::networks::{FULL_DISCRIMINATOR_DENSE, FULL_DISCRIMINATOR_FILTERS, FULL_GENERATOR_PLAN};
use ctsynth::phantom::PhantomConfig;
use ctsynth::training::TrainConfig;
use ctsynth::volume::PatchSpec;

/// Every accepted key with its one-line description, in render order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for phantoms, initialization and minibatch draws"),
    ("data_dir", "dataset directory holding manifest.txt"),
    ("out_dir", "run directory for checkpoints, logs and the cascade"),
    ("n_subjects", "phantom subjects to generate; the last one is held out"),
    ("phantom_dims", "phantom volume size, XxYxZ"),
    ("n_ellipsoids", "ellipsoidal tissue regions per phantom"),
    ("texture_amplitude", "amplitude of the per-tissue MR texture"),
    ("noise_sigma", "standard deviation of additive MR noise"),
    ("input_size", "generator input patch edge"),
    ("output_size", "generator output patch edge"),
    ("stride", "tiling stride at inference"),
    ("gen_plan", "generator channels per 3x3x3 layer, comma separated"),
    ("disc_filters", "discriminator channels of the four 5x5x5 layers"),
    ("disc_dense", "discriminator hidden dense widths"),
    ("n_stages", "auto-context stages"),
    ("zero_context", "feed zeros instead of the previous estimate (ablation)"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("batch_size", "patches per minibatch"),
    ("iterations", "iterations per stage"),
    ("d_steps", "discriminator updates per generator update"),
    ("checkpoint_every", "iterations between checkpoints"),
    ("lambda_adv", "weight of the adversarial term"),
    ("lambda_l2", "weight of the L2 term"),
    ("lambda_gdl", "weight of the gradient difference term"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub n_subjects: usize,
    pub phantom_dims: [usize; 3],
    pub n_ellipsoids: usize,
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    pub spec: PatchSpec,
    pub gen_plan: Vec<usize>,
    pub disc_filters: Vec<usize>,
    pub disc_dense: Vec<usize>,
    pub n_stages: usize,
    pub zero_context: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ph = PhantomConfig::default();
        Self {
            seed: 0,
            data_dir: "data".into(),
            out_dir: "run".into(),
            n_subjects: 4,
            phantom_dims: ph.dims,
            n_ellipsoids: ph.n_ellipsoids,
            texture_amplitude: ph.texture_amplitude,
            noise_sigma: ph.noise_sigma,
            spec: PatchSpec::default(),
            gen_plan: FULL_GENERATOR_PLAN.to_vec(),
            disc_filters: FULL_DISCRIMINATOR_FILTERS.to_vec(),
            disc_dense: FULL_DISCRIMINATOR_DENSE.to_vec(),
            n_stages: 2,
            zero_context: false,
            train: TrainConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn dims(key: &str, v: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = v.split('x').map(|p| num(key, p.trim())).collect::<Result<_, _>>()?;
    match parts[..] {
        [d] => Ok([d; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("`{key}`: expected N or XxYxZ, got `{v}`")),
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            cfg.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", no + 1))?;
            self.set(k.trim(), v.trim()).map_err(|e| format!("line {}: {e}", no + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let w = &mut self.train.loss_weights;
        match key {
            "seed" => self.seed = num(key, v)?,
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "n_subjects" => self.n_subjects = num(key, v)?,
            "phantom_dims" => self.phantom_dims = dims(key, v)?,
            "n_ellipsoids" => self.n_ellipsoids = num(key, v)?,
            "texture_amplitude" => self.texture_amplitude = num(key, v)?,
            "noise_sigma" => self.noise_sigma = num(key, v)?,
            "input_size" => self.spec.input_size = num(key, v)?,
            "output_size" => self.spec.output_size = num(key, v)?,
            "stride" => self.spec.stride = num(key, v)?,
            "gen_plan" => self.gen_plan = list(key, v)?,
            "disc_filters" => self.disc_filters = list(key, v)?,
            "disc_dense" => self.disc_dense = list(key, v)?,
            "n_stages" => self.n_stages = num(key, v)?,
            "zero_context" => self.zero_context = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "beta1" => self.train.beta1 = num(key, v)?,
            "beta2" => self.train.beta2 = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "iterations" => self.train.iterations = num(key, v)?,
            "d_steps" => self.train.d_steps_per_g_step = num(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "lambda_adv" => w.lambda1 = num(key, v)?,
            "lambda_l2" => w.lambda2 = num(key, v)?,
            "lambda_gdl" => w.lambda3 = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let w = &self.train.loss_weights;
        let d = self.phantom_dims;
        Some(match key {
            "seed" => self.seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "n_subjects" => self.n_subjects.to_string(),
            "phantom_dims" => format!("{}x{}x{}", d[0], d[1], d[2]),
            "n_ellipsoids" => self.n_ellipsoids.to_string(),
            "texture_amplitude" => self.texture_amplitude.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "input_size" => self.spec.input_size.to_string(),
            "output_size" => self.spec.output_size.to_string(),
            "stride" => self.spec.stride.to_string(),
            "gen_plan" => join(&self.gen_plan),
            "disc_filters" => join(&self.disc_filters),
            "disc_dense" => join(&self.disc_dense),
            "n_stages" => self.n_stages.to_string(),
            "zero_context" => self.zero_context.to_string(),
            "lr" => self.train.lr.to_string(),
            "beta1" => self.train.beta1.to_string(),
            "beta2" => self.train.beta2.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "iterations" => self.train.iterations.to_string(),
            "d_steps" => self.train.d_steps_per_g_step.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "lambda_adv" => w.lambda1.to_string(),
            "lambda_l2" => w.lambda2.to_string(),
            "lambda_gdl" => w.lambda3.to_string(),
            _ => return None,
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(s, "# {doc}\n{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            dims: self.phantom_dims,
            n_ellipsoids: self.n_ellipsoids,
            texture_amplitude: self.texture_amplitude,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig {
            train: TrainConfig { seed: self.seed, ..self.train },
            spec: self.spec,
            n_stages: self.n_stages,
            gen_plan: self.gen_plan.clone(),
            disc_filters: self.disc_filters.clone(),
            disc_dense: self.disc_dense.clone(),
            zero_context: self.zero_context,
        }
    }

    pub fn validate_training(&self) -> Result<(), String> {
        self.spec.validate().map_err(|e| e.to_string())?;
        self.cascade().train.validate().map_err(|e| e.to_string())?;
        LossWeights::validate(&self.train.loss_weights).map_err(|e| e.to_string())?;
        if self.n_stages == 0 {
            return Err("n_stages must be at least 1".into());
        }
        Ok(())
    }
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
