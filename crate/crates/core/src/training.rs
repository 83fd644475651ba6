//! Alternating adversarial optimization of one generator/discriminator
//! pair.
//!
//! Each iteration first updates the discriminator (generator frozen) on a
//! fresh real minibatch and a fresh generated minibatch, then updates the
//! generator (discriminator frozen) on another fresh minibatch. Every
//! minibatch is drawn with a seed derived from `(seed, iteration, phase)`,
//! so a run can resume from any checkpoint without saved RNG state.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, Checkpoint, Graph, GraphError, Parameter, Tensor};
use crate::losses::{self, LossError, LossWeights};
use crate::networks::{DiscriminatorNet, GeneratorNet, Mode, NetError};
use crate::volume::{extract_pair, sample_centers, PatchPair, PatchSpec, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { term: String, iteration: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("checkpoint state: {0}")]
    State(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Hook(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 10,
            iterations: 2000,
            d_steps_per_g_step: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.d_steps_per_g_step == 0 {
            return bad("d_steps_per_g_step must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        self.loss_weights.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l2: f64,
    pub g_gdl: f64,
    pub g_total: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub wall_ms: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str = "iteration,d_loss,g_adv,g_l2,g_gdl,g_total,d_real_mean,d_fake_mean,wall_ms";

    fn values(&self) -> [f64; 7] {
        [self.d_loss, self.g_adv, self.g_l2, self.g_gdl, self.g_total, self.d_real_mean, self.d_fake_mean]
    }

    /// Rust's shortest round-trip float formatting, so parsing restores
    /// the row exactly.
    pub fn to_csv(&self) -> String {
        let mut s = self.iteration.to_string();
        for v in self.values().into_iter().chain([self.wall_ms]) {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return None;
        }
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse().ok()).collect::<Option<_>>()?;
        Some(Self {
            iteration: f[0].parse().ok()?,
            d_loss: v[0],
            g_adv: v[1],
            g_l2: v[2],
            g_gdl: v[3],
            g_total: v[4],
            d_real_mean: v[5],
            d_fake_mean: v[6],
            wall_ms: v[7],
        })
    }

    /// Equality on everything except the wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.iteration == other.iteration
            && self.values().iter().zip(other.values()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// A source of training minibatches.
pub trait PatchSource: Sync {
    fn spec(&self) -> &PatchSpec;
    fn in_channels(&self) -> usize;
    /// `count` pairs; a pure function of `seed`.
    fn sample(&self, count: usize, seed: u64) -> Result<Vec<PatchPair>, TrainError>;
}

/// One training subject: normalized MR, normalized CT, optional context.
#[derive(Debug, Clone)]
pub struct Subject {
    pub mr: Volume,
    pub ct: Volume,
    pub context: Option<Volume>,
}

/// Samples patches uniformly over subjects, then over valid centers.
#[derive(Debug, Clone)]
pub struct SubjectPool {
    subjects: Vec<Subject>,
    spec: PatchSpec,
}

impl SubjectPool {
    pub fn new(subjects: Vec<Subject>, spec: PatchSpec) -> Result<Self, TrainError> {
        spec.validate()?;
        let first = subjects.first().ok_or_else(|| TrainError::Data("no training subjects".into()))?;
        let with_ctx = first.context.is_some();
        for (i, s) in subjects.iter().enumerate() {
            s.mr.ensure_same_dims(&s.ct)?;
            spec.check_dims(s.mr.dims())?;
            match &s.context {
                Some(c) => s.mr.ensure_same_dims(c)?,
                None if with_ctx => return Err(TrainError::Data(format!("subject {i} lacks a context volume"))),
                None => {}
            }
            if s.context.is_some() != with_ctx {
                return Err(TrainError::Data(format!("subject {i} has an unexpected context volume")));
            }
        }
        Ok(Self { subjects, spec })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }
}

impl PatchSource for SubjectPool {
    fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    fn in_channels(&self) -> usize {
        1 + usize::from(self.subjects[0].context.is_some())
    }

    fn sample(&self, count: usize, seed: u64) -> Result<Vec<PatchPair>, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let s = &self.subjects[rng.random_range(0..self.subjects.len())];
                let c = sample_centers(s.mr.dims(), &self.spec, 1, &mut rng)?[0];
                Ok(extract_pair(&s.mr, &s.ct, s.context.as_ref(), &self.spec, c))
            })
            .collect()
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Real,
    Fake,
    Generator,
}

fn batch_seed(seed: u64, iteration: usize, d_step: usize, phase: Phase) -> u64 {
    let tag = match phase {
        Phase::Real => 0,
        Phase::Fake => 1,
        Phase::Generator => 2,
    };
    splitmix64(seed ^ splitmix64(((iteration as u64) << 20) ^ ((d_step as u64) << 2) ^ tag))
}

/// Batches a list of pairs into `[N, C, S, S, S]` inputs and
/// `[N, 1, s, s, s]` targets.
pub fn batch_tensors(pairs: &[PatchPair], spec: &PatchSpec) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
    let n = pairs.len();
    let c = pairs.first().map_or(1, |p| p.channels);
    let (s, o) = (spec.input_size, spec.output_size);
    let mut x = Vec::with_capacity(n * c * s * s * s);
    let mut y = Vec::with_capacity(n * o * o * o);
    for p in pairs {
        if p.channels != c {
            return Err(TrainError::Data("mixed channel counts in one batch".into()));
        }
        x.extend_from_slice(&p.mr_patch);
        y.extend_from_slice(&p.ct_patch);
    }
    Ok((Tensor::new(vec![n, c, s, s, s], x)?, Tensor::new(vec![n, 1, o, o, o], y)?))
}

fn finite(term: &str, iteration: usize, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { term: term.into(), iteration })
    }
}

/// Maps a graph-level finiteness failure to a diagnostic naming the phase.
fn in_phase<T>(r: Result<T, impl Into<TrainError>>, phase: &str, iteration: usize) -> Result<T, TrainError> {
    r.map_err(|e| match e.into() {
        TrainError::Graph(GraphError::NonFinite(op))
        | TrainError::Net(NetError::Graph(GraphError::NonFinite(op)))
        | TrainError::Loss(LossError::Graph(GraphError::NonFinite(op))) => {
            TrainError::NonFinite { term: format!("{phase} ({op})"), iteration }
        }
        other => other,
    })
}

fn assign_grads(params: Vec<&mut Parameter<f32>>, grads: &std::collections::BTreeMap<String, Vec<f32>>) -> Result<(), TrainError> {
    for p in params {
        if p.is_frozen() {
            continue;
        }
        match grads.get(p.name()) {
            Some(g) => p.accumulate_grad(g)?,
            None => p.accumulate_grad(&vec![0.0; p.value().len()])?,
        }
    }
    Ok(())
}

/// Discriminator-phase outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DStepStats {
    pub d_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

/// A generator/discriminator pair under training, with its Adam state
/// carried inside the parameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub gen: GeneratorNet<f32>,
    pub disc: DiscriminatorNet<f32>,
    pub cfg: TrainConfig,
    /// Last completed iteration.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(gen: GeneratorNet<f32>, disc: DiscriminatorNet<f32>, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if disc.input_size() != gen.output_size() {
            return Err(TrainError::Config(format!(
                "discriminator input {}³ differs from generator output {}³",
                disc.input_size(),
                gen.output_size()
            )));
        }
        Ok(Self { gen, disc, cfg, iteration: 0 })
    }

    fn check_source(&self, data: &dyn PatchSource) -> Result<(), TrainError> {
        if data.in_channels() != self.gen.in_channels() {
            return Err(TrainError::Data(format!(
                "patches carry {} channels, generator expects {}",
                data.in_channels(),
                self.gen.in_channels()
            )));
        }
        if data.spec().input_size != self.gen.input_size() || data.spec().output_size != self.gen.output_size() {
            return Err(TrainError::Data(format!(
                "patch spec {}³→{}³ does not match generator {}³→{}³",
                data.spec().input_size,
                data.spec().output_size,
                self.gen.input_size(),
                self.gen.output_size()
            )));
        }
        Ok(())
    }

    /// One discriminator update minimizing `bce(D(real), 1) + bce(D(G(x)), 0)`.
    pub fn discriminator_step(&mut self, data: &dyn PatchSource, iteration: usize, d_step: usize) -> Result<DStepStats, TrainError> {
        let spec = *data.spec();
        let n = self.cfg.batch_size;
        let real = data.sample(n, batch_seed(self.cfg.seed, iteration, d_step, Phase::Real))?;
        let src = data.sample(n, batch_seed(self.cfg.seed, iteration, d_step, Phase::Fake))?;
        let (_, real_ct) = batch_tensors(&real, &spec)?;
        let (fake_in, _) = batch_tensors(&src, &spec)?;

        self.gen.freeze();
        self.disc.unfreeze();
        let phase = "discriminator phase";
        let mut g = Graph::<f32>::new().with_finite_checks(false);
        let x = g.constant(fake_in);
        let fake = in_phase(self.gen.forward(&mut g, x, Mode::Train), phase, iteration)?.out;
        let r = g.constant(real_ct);
        let d_real = in_phase(self.disc.forward(&mut g, r, Mode::Train), phase, iteration)?;
        let d_fake = in_phase(self.disc.forward(&mut g, fake, Mode::Train), phase, iteration)?;
        let loss = in_phase(losses::discriminator_loss(&mut g, d_real.out, d_fake.out), phase, iteration)?;
        let d_loss = finite("d_loss", iteration, g.scalar(loss) as f64)?;
        let grads = in_phase(g.backward(loss), phase, iteration)?.param_grads();

        let mean = |v: &[f32]| v.iter().map(|&p| p as f64).sum::<f64>() / v.len() as f64;
        let stats = DStepStats {
            d_loss,
            d_real_mean: finite("d_real_mean", iteration, mean(g.value(d_real.out).data()))?,
            d_fake_mean: finite("d_fake_mean", iteration, mean(g.value(d_fake.out).data()))?,
        };
        assign_grads(self.disc.params_mut(), &grads)?;
        adam_step(self.disc.params_mut(), &self.cfg.adam())?;
        self.disc.update_running_stats(&d_real.stats);
        self.disc.update_running_stats(&d_fake.stats);
        self.gen.unfreeze();
        Ok(stats)
    }

    /// One generator update minimizing the weighted generator loss, with
    /// the adversarial target 1 on generated patches.
    pub fn generator_step(&mut self, data: &dyn PatchSource, iteration: usize) -> Result<losses::LossBreakdown, TrainError> {
        let spec = *data.spec();
        let pairs = data.sample(self.cfg.batch_size, batch_seed(self.cfg.seed, iteration, 0, Phase::Generator))?;
        let (xin, yt) = batch_tensors(&pairs, &spec)?;

        self.disc.freeze();
        self.gen.unfreeze();
        let phase = "generator phase";
        let mut g = Graph::<f32>::new().with_finite_checks(false);
        let x = g.constant(xin);
        let y = g.constant(yt);
        let fwd = in_phase(self.gen.forward(&mut g, x, Mode::Train), phase, iteration)?;
        let d = in_phase(self.disc.forward(&mut g, fwd.out, Mode::Train), phase, iteration)?;
        let (total, parts) =
            in_phase(losses::generator_loss(&mut g, d.out, fwd.out, y, &self.cfg.loss_weights), phase, iteration)?;
        finite("g_adv", iteration, parts.adv)?;
        finite("g_l2", iteration, parts.l2)?;
        finite("g_gdl", iteration, parts.gdl)?;
        finite("g_total", iteration, parts.total)?;
        let grads = in_phase(g.backward(total), phase, iteration)?.param_grads();
        assign_grads(self.gen.params_mut(), &grads)?;
        adam_step(self.gen.params_mut(), &self.cfg.adam())?;
        self.gen.update_running_stats(&fwd.stats);
        self.disc.unfreeze();
        Ok(parts)
    }

    /// Runs iteration `self.iteration + 1`.
    pub fn step(&mut self, data: &dyn PatchSource) -> Result<TrainLogRow, TrainError> {
        let start = Instant::now();
        let it = self.iteration + 1;
        let mut d = None;
        for ds in 0..self.cfg.d_steps_per_g_step {
            d = Some(self.discriminator_step(data, it, ds)?);
        }
        let d = d.expect("at least one discriminator step");
        let gl = self.generator_step(data, it)?;
        self.iteration = it;
        Ok(TrainLogRow {
            iteration: it,
            d_loss: d.d_loss,
            g_adv: gl.adv,
            g_l2: gl.l2,
            g_gdl: gl.gdl,
            g_total: gl.total,
            d_real_mean: d.d_real_mean,
            d_fake_mean: d.d_fake_mean,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Both networks and their optimizer state as one checkpoint.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = self.gen.to_checkpoint();
        for (k, t) in self.disc.to_checkpoint().iter() {
            ck.insert(k, t.clone());
        }
        let params = self.gen.params().into_iter().chain(self.disc.params());
        for p in params {
            let (m, v) = p.moments();
            let shape = p.value().shape().to_vec();
            ck.insert(format!("adam.m.{}", p.name()), Tensor::new(shape.clone(), m.to_vec()).expect("moment shape"));
            ck.insert(format!("adam.v.{}", p.name()), Tensor::new(shape, v.to_vec()).expect("moment shape"));
            ck.insert(format!("adam.step.{}", p.name()), step_tensor(p.step()));
        }
        ck.insert("train.iteration", step_tensor(self.iteration as u64));
        ck
    }

    /// Restores networks, optimizer state and the iteration counter.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<(), TrainError> {
        self.gen.load_weights(ck)?;
        self.disc.load_weights(ck)?;
        let params = self.gen.params_mut().into_iter().chain(self.disc.params_mut());
        for p in params {
            let shape = p.value().shape().to_vec();
            let m = ck.require(&format!("adam.m.{}", p.name()), &shape)?.data().to_vec();
            let v = ck.require(&format!("adam.v.{}", p.name()), &shape)?.data().to_vec();
            let step = read_step(ck, &format!("adam.step.{}", p.name()))?;
            p.set_adam_state(m, v, step)?;
        }
        self.iteration = read_step(ck, "train.iteration")? as usize;
        Ok(())
    }
}

/// Counters are stored as their u32 halves reinterpreted as `f32` bits,
/// so the value survives the float container exactly.
fn step_tensor(v: u64) -> Tensor<f32> {
    let lo = f32::from_bits(v as u32);
    let hi = f32::from_bits((v >> 32) as u32);
    Tensor::new(vec![2], vec![lo, hi]).expect("two values")
}

fn read_step(ck: &Checkpoint, name: &str) -> Result<u64, TrainError> {
    let t = ck.require(name, &[2])?;
    Ok(t.data()[0].to_bits() as u64 | ((t.data()[1].to_bits() as u64) << 32))
}

/// Callbacks invoked by [`train_stage`].
pub trait TrainHooks {
    fn on_row(&mut self, _row: &TrainLogRow) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called after every `checkpoint_every`-th iteration and after the last.
    fn on_checkpoint(&mut self, _trainer: &Trainer) -> Result<(), TrainError> {
        Ok(())
    }

    /// Stop early after the given (completed) iteration.
    fn should_stop(&self, _iteration: usize) -> bool {
        false
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Trains until `cfg.iterations`, starting after `trainer.iteration`.
/// Returns the log rows produced by this call.
pub fn train_stage(trainer: &mut Trainer, data: &dyn PatchSource, hooks: &mut dyn TrainHooks) -> Result<Vec<TrainLogRow>, TrainError> {
    trainer.check_source(data)?;
    let mut log = Vec::new();
    while trainer.iteration < trainer.cfg.iterations {
        let row = trainer.step(data)?;
        hooks.on_row(&row)?;
        log.push(row);
        let it = trainer.iteration;
        if it.is_multiple_of(trainer.cfg.checkpoint_every) || it == trainer.cfg.iterations {
            hooks.on_checkpoint(trainer)?;
        }
        if hooks.should_stop(it) {
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let row = TrainLogRow {
            iteration: 7,
            d_loss: 1.2345678901234567,
            g_adv: 0.1,
            g_l2: 3e-9,
            g_gdl: 12.0,
            g_total: 1e10,
            d_real_mean: 0.5,
            d_fake_mean: 0.25,
            wall_ms: 13.5,
        };
        let back = TrainLogRow::parse_csv(&row.to_csv()).unwrap();
        assert_eq!(back, row);
        assert_eq!(TrainLogRow::CSV_HEADER.split(',').count(), 9);
    }

    #[test]
    fn step_counter_survives_f32_container() {
        for v in [0u64, 1, 123_456_789, u64::MAX - 3] {
            let mut ck = Checkpoint::new();
            ck.insert("s", step_tensor(v));
            assert_eq!(read_step(&ck, "s").unwrap(), v);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn batch_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for it in 1..50 {
            for ds in 0..3 {
                for p in [Phase::Real, Phase::Fake, Phase::Generator] {
                    assert!(seen.insert(batch_seed(9, it, ds, p)));
                }
            }
        }
    }

    fn tiny_pool(seed: u64) -> SubjectPool {
        let vol = |k: u64| {
            Volume::from_fn([14, 13, 12], [1.0; 3], |x, y, z| {
                (((x * 3 + y * 5 + z * 7) as u64 + k * 11 + seed) % 13) as f32 / 12.0
            })
            .unwrap()
        };
        let subjects = (0..2).map(|k| Subject { mr: vol(k), ct: vol(k + 5), context: None }).collect();
        SubjectPool::new(subjects, PatchSpec::new(12, 8, 4).unwrap()).unwrap()
    }

    fn tiny_trainer(seed: u64, weights: LossWeights) -> Trainer {
        let gen = GeneratorNet::new(1, &[2, 2], 12, 8, seed).unwrap();
        let disc = DiscriminatorNet::new(&[2, 2, 2, 2], &[4, 2], 8, seed + 100).unwrap();
        let cfg = TrainConfig { lr: 1e-3, batch_size: 2, iterations: 4, seed, loss_weights: weights, checkpoint_every: 2, ..TrainConfig::default() };
        Trainer::new(gen, disc, cfg).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let pool = tiny_pool(0);
        let mut a = tiny_trainer(3, LossWeights::default());
        let full = train_stage(&mut a, &pool, &mut NoHooks).unwrap();
        assert_eq!(full.len(), 4);
        assert!(full.iter().all(TrainLogRow::all_finite));

        let mut b = tiny_trainer(3, LossWeights::default());
        b.cfg.iterations = 2;
        let head = train_stage(&mut b, &pool, &mut NoHooks).unwrap();
        let ck = b.state_checkpoint();
        let mut c = tiny_trainer(3, LossWeights::default());
        c.restore(&ck).unwrap();
        assert_eq!(c.iteration, 2);
        let tail = train_stage(&mut c, &pool, &mut NoHooks).unwrap();
        let resumed: Vec<_> = head.iter().chain(&tail).collect();
        assert_eq!(resumed.len(), 4);
        for (x, y) in full.iter().zip(resumed) {
            assert!(x.same_values(y), "{x:?} vs {y:?}");
        }
        assert_eq!(a.state_checkpoint(), c.state_checkpoint());
    }

    #[test]
    fn each_phase_touches_only_its_network() {
        let pool = tiny_pool(1);
        let mut t = tiny_trainer(5, LossWeights::default());
        let g0 = t.gen.to_checkpoint();
        let d0 = t.disc.to_checkpoint();
        t.discriminator_step(&pool, 1, 0).unwrap();
        assert_eq!(t.gen.to_checkpoint(), g0);
        let d1 = t.disc.to_checkpoint();
        assert_ne!(d1, d0);
        t.generator_step(&pool, 1).unwrap();
        assert_eq!(t.disc.to_checkpoint(), d1);
        assert_ne!(t.gen.to_checkpoint(), g0);
        assert!(!t.gen.is_frozen() && !t.disc.is_frozen());
    }

    #[test]
    fn zero_adversarial_weight_decouples_generator_from_discriminator() {
        let pool = tiny_pool(2);
        let w = LossWeights::new(0.0, 1.0, 1.0).unwrap();
        let mut a = tiny_trainer(7, w);
        let mut b = tiny_trainer(7, w);
        b.disc = DiscriminatorNet::new(&[2, 2, 2, 2], &[4, 2], 8, 999).unwrap();
        let la = a.generator_step(&pool, 1).unwrap();
        let lb = b.generator_step(&pool, 1).unwrap();
        assert_eq!(la.l2, lb.l2);
        assert_eq!(a.gen.to_checkpoint(), b.gen.to_checkpoint());
    }

    struct Poisoned(PatchSpec);

    impl PatchSource for Poisoned {
        fn spec(&self) -> &PatchSpec {
            &self.0
        }

        fn in_channels(&self) -> usize {
            1
        }

        fn sample(&self, count: usize, _seed: u64) -> Result<Vec<PatchPair>, TrainError> {
            let mut mr = vec![0.5; self.0.input_voxels()];
            mr[3] = f32::NAN;
            let pair = PatchPair { mr_patch: mr, channels: 1, ct_patch: vec![0.5; self.0.output_voxels()], center: [6; 3] };
            Ok(vec![pair; count])
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_term_and_iteration() {
        let mut t = tiny_trainer(1, LossWeights::default());
        let err = train_stage(&mut t, &Poisoned(PatchSpec::new(12, 8, 4).unwrap()), &mut NoHooks).unwrap_err();
        match err {
            TrainError::NonFinite { term, iteration } => {
                assert_eq!(iteration, 1);
                assert!(term.contains("d_"), "{term}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_iterations_leave_nets_untouched() {
        let pool = tiny_pool(0);
        let mut t = tiny_trainer(2, LossWeights::default());
        t.cfg.iterations = 0;
        let before = t.state_checkpoint();
        assert!(train_stage(&mut t, &pool, &mut NoHooks).unwrap().is_empty());
        assert_eq!(t.state_checkpoint(), before);
    }

    #[test]
    fn channel_mismatch_is_a_data_error() {
        let mut t = tiny_trainer(2, LossWeights::default());
        t.gen = GeneratorNet::new(2, &[2, 2], 12, 8, 0).unwrap();
        assert!(matches!(train_stage(&mut t, &tiny_pool(0), &mut NoHooks), Err(TrainError::Data(_))));
    }
}
