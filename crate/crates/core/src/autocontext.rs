//! Auto-context cascade: a chain of generators where every stage after the
//! first receives the previous stage's merged full-volume estimate as a
//! second input channel.
//!
//! All volumes inside a cascade live in normalized units. The context is
//! the merged estimate (zero where uncovered) cropped at the same input
//! region as the MR patch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Parameter, Tensor};
use crate::exec;
use crate::networks::{DiscriminatorNet, GeneratorNet, Mode, NetError, FULL_DISCRIMINATOR_DENSE, FULL_DISCRIMINATOR_FILTERS, FULL_GENERATOR_PLAN};
use crate::training::{splitmix64, train_stage, Subject, SubjectPool, TrainConfig, TrainError, TrainHooks, TrainLogRow, Trainer};
use crate::volume::{merge_patches, tile_centers, CoverageMask, NormParams, PatchSpec, Volume};
use crate::{Error, Result};

/// Tiles evaluated per inference graph.
const INFER_BATCH: usize = 16;

pub const CASCADE_META: &str = "cascade.meta";

pub fn stage_ckpt_name(k: usize) -> String {
    format!("stage_{k}.ckpt")
}

pub fn stage_meta_name(k: usize) -> String {
    format!("stage_{k}.meta")
}

/// Contents of `cascade.meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeMeta {
    pub n_stages: usize,
    pub spec: PatchSpec,
    pub mr_norm: NormParams,
    pub ct_norm: NormParams,
}

/// Trained stages plus the geometry and intensity mappings they assume.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    stages: Vec<GeneratorNet<f32>>,
    spec: PatchSpec,
    pub mr_norm: NormParams,
    pub ct_norm: NormParams,
}

impl Cascade {
    /// Optimizer state of the stages is discarded; a cascade only infers.
    pub fn new(mut stages: Vec<GeneratorNet<f32>>, spec: PatchSpec, mr_norm: NormParams, ct_norm: NormParams) -> Result<Self> {
        spec.validate()?;
        if stages.is_empty() {
            return Err(Error::Config("a cascade needs at least one stage".into()));
        }
        for (k, g) in stages.iter().enumerate() {
            let want = if k == 0 { 1 } else { 2 };
            if g.in_channels() != want {
                return Err(NetError::Channels { expected: want, found: g.in_channels() }.into());
            }
            if g.input_size() != spec.input_size || g.output_size() != spec.output_size {
                return Err(Error::Config(format!(
                    "stage {k} maps {}³→{}³ but the patch spec is {}³→{}³",
                    g.input_size(),
                    g.output_size(),
                    spec.input_size,
                    spec.output_size
                )));
            }
        }
        stages.iter_mut().flat_map(GeneratorNet::params_mut).for_each(Parameter::reset_optimizer);
        Ok(Self { stages, spec, mr_norm, ct_norm })
    }

    pub fn stages(&self) -> &[GeneratorNet<f32>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [GeneratorNet<f32>] {
        &mut self.stages
    }

    pub fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    pub fn meta(&self) -> CascadeMeta {
        CascadeMeta { n_stages: self.stages.len(), spec: self.spec, mr_norm: self.mr_norm, ct_norm: self.ct_norm }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, g) in self.stages.iter().enumerate() {
            g.save(&dir.join(stage_ckpt_name(k)), &dir.join(stage_meta_name(k)))?;
        }
        let path = dir.join(CASCADE_META);
        let json = serde_json::to_string_pretty(&self.meta()).expect("plain data serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CASCADE_META);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CascadeMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Meta { path: path.display().to_string(), message: e.to_string() })?;
        let stages = (0..meta.n_stages)
            .map(|k| GeneratorNet::load(&dir.join(stage_ckpt_name(k)), &dir.join(stage_meta_name(k))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(stages, meta.spec, meta.mr_norm, meta.ct_norm)
    }

    /// Per-stage merged estimates on a normalized MR volume. Element `k` is
    /// the output of stage `k`; all share one coverage mask.
    pub fn infer_stages(&self, mr: &Volume) -> Result<(Vec<Volume>, CoverageMask)> {
        let mut outs: Vec<Volume> = Vec::with_capacity(self.stages.len());
        let mut mask = None;
        for g in &self.stages {
            let (v, m) = infer_stage(g, mr, outs.last(), &self.spec)?;
            outs.push(v);
            mask = Some(m);
        }
        Ok((outs, mask.expect("non-empty cascade")))
    }
}

/// Tiled inference of one generator in infer mode, followed by overlap
/// averaging. `context` (normalized, zero where uncovered) becomes channel
/// 2 when given.
pub fn infer_stage(
    gen: &GeneratorNet<f32>,
    mr: &Volume,
    context: Option<&Volume>,
    spec: &PatchSpec,
) -> Result<(Volume, CoverageMask)> {
    let want = 1 + usize::from(context.is_some());
    if gen.in_channels() != want {
        return Err(NetError::Channels { expected: gen.in_channels(), found: want }.into());
    }
    if let Some(c) = context {
        mr.ensure_same_dims(c)?;
    }
    let centers = tile_centers(mr.dims(), spec)?;
    let s = spec.input_size;
    let mut preds = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(INFER_BATCH) {
        let mut x = Vec::with_capacity(chunk.len() * want * s * s * s);
        for &c in chunk {
            let lo = c.map(|v| spec.input_lo(v));
            x.extend(mr.crop_cube(lo, s));
            if let Some(ctx) = context {
                x.extend(ctx.crop_cube(lo, s));
            }
        }
        let mut g = Graph::<f32>::new().with_finite_checks(false);
        let xv = g.constant(Tensor::new(vec![chunk.len(), want, s, s, s], x)?);
        let out = gen.forward(&mut g, xv, Mode::Infer)?.out;
        let o = spec.output_voxels();
        for (i, &c) in chunk.iter().enumerate() {
            preds.push((c, g.value(out).data()[i * o..(i + 1) * o].to_vec()));
        }
    }
    Ok(merge_patches(&preds, mr.dims(), mr.spacing(), spec.output_size)?)
}

/// Final-stage estimate for a raw MR volume, in raw CT units.
pub fn infer_cascade(cascade: &Cascade, mr: &Volume) -> Result<(Volume, CoverageMask)> {
    let (outs, mask) = cascade.infer_stages(&cascade.mr_norm.apply_volume(mr)?)?;
    Ok((cascade.ct_norm.invert_volume(outs.last().expect("non-empty"))?, mask))
}

/// Everything [`train_cascade`] needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub train: TrainConfig,
    pub spec: PatchSpec,
    pub n_stages: usize,
    pub gen_plan: Vec<usize>,
    pub disc_filters: Vec<usize>,
    pub disc_dense: Vec<usize>,
    /// Ablation: feed zeros instead of the previous estimate.
    pub zero_context: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            spec: PatchSpec::default(),
            n_stages: 2,
            gen_plan: FULL_GENERATOR_PLAN.to_vec(),
            disc_filters: FULL_DISCRIMINATOR_FILTERS.to_vec(),
            disc_dense: FULL_DISCRIMINATOR_DENSE.to_vec(),
            zero_context: false,
        }
    }
}

/// Training seed of stage `k`; stage 0 uses the configured seed unchanged.
pub fn stage_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        splitmix64(seed ^ splitmix64(0xC0_7E47 + k as u64))
    }
}

/// Freshly initialized generator and discriminator for stage `k`.
pub fn stage_nets(cfg: &CascadeConfig, k: usize) -> Result<(GeneratorNet<f32>, DiscriminatorNet<f32>)> {
    let seed = stage_seed(cfg.train.seed, k);
    let in_ch = if k == 0 { 1 } else { 2 };
    let gen = GeneratorNet::new(in_ch, &cfg.gen_plan, cfg.spec.input_size, cfg.spec.output_size, splitmix64(seed ^ 1))?;
    let disc = DiscriminatorNet::new(&cfg.disc_filters, &cfg.disc_dense, cfg.spec.output_size, splitmix64(seed ^ 2))?;
    Ok((gen, disc))
}

/// Global min-max parameters over all subjects, per modality.
pub fn fit_norms(subjects: &[(Volume, Volume)]) -> (NormParams, NormParams) {
    let range = |vols: &mut dyn Iterator<Item = &Volume>| {
        let (lo, hi) = vols
            .flat_map(|v| v.voxels().iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x as f64), hi.max(x as f64)));
        NormParams::min_max(lo, hi)
    };
    (range(&mut subjects.iter().map(|s| &s.0)), range(&mut subjects.iter().map(|s| &s.1)))
}

/// Per-stage callbacks for [`train_cascade`].
pub trait CascadeHooks {
    /// Called with freshly initialized nets; may restore saved state.
    fn begin_stage(&mut self, _stage: usize, _trainer: &mut Trainer) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called with the (normalized) training subjects of a stage, context
    /// included.
    fn stage_data(&mut self, _stage: usize, _subjects: &[Subject]) {}

    fn on_row(&mut self, _stage: usize, _row: &TrainLogRow) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _stage: usize, _trainer: &Trainer) -> Result<(), TrainError> {
        Ok(())
    }

    fn should_stop(&self, _stage: usize, _iteration: usize) -> bool {
        false
    }

    fn end_stage(&mut self, _stage: usize, _trainer: &Trainer) -> Result<(), TrainError> {
        Ok(())
    }
}

pub struct NoCascadeHooks;

impl CascadeHooks for NoCascadeHooks {}

struct StageHooks<'a> {
    stage: usize,
    inner: &'a mut dyn CascadeHooks,
    stopped: bool,
}

impl TrainHooks for StageHooks<'_> {
    fn on_row(&mut self, row: &TrainLogRow) -> Result<(), TrainError> {
        self.inner.on_row(self.stage, row)
    }

    fn on_checkpoint(&mut self, trainer: &Trainer) -> Result<(), TrainError> {
        self.inner.on_checkpoint(self.stage, trainer)
    }

    fn should_stop(&self, iteration: usize) -> bool {
        self.inner.should_stop(self.stage, iteration)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedCascade {
    pub cascade: Cascade,
    /// Log rows produced by this call, per stage.
    pub logs: Vec<Vec<TrainLogRow>>,
    /// A hook requested an early stop; `cascade` holds the stages reached.
    pub stopped: bool,
}

/// Trains `cfg.n_stages` stages on raw `(MR, CT)` subjects.
pub fn train_cascade(subjects: &[(Volume, Volume)], cfg: &CascadeConfig, hooks: &mut dyn CascadeHooks) -> Result<TrainedCascade> {
    if cfg.n_stages == 0 {
        return Err(Error::Config("n_stages must be at least 1".into()));
    }
    if subjects.is_empty() {
        return Err(TrainError::Data("no training subjects".into()).into());
    }
    cfg.spec.validate()?;
    let (mr_norm, ct_norm) = fit_norms(subjects);
    let normalized: Vec<(Volume, Volume)> = subjects
        .iter()
        .map(|(m, c)| Ok((mr_norm.apply_volume(m)?, ct_norm.apply_volume(c)?)))
        .collect::<Result<_>>()?;

    let mut stages: Vec<GeneratorNet<f32>> = Vec::with_capacity(cfg.n_stages);
    let mut logs = Vec::with_capacity(cfg.n_stages);
    let mut contexts: Vec<Option<Volume>> = vec![None; normalized.len()];
    for k in 0..cfg.n_stages {
        if k > 0 {
            let prev = stages.last().expect("stage k-1 trained");
            let prior = &contexts;
            contexts = exec::try_map(normalized.len(), |i| {
                let (mr, _) = &normalized[i];
                if cfg.zero_context {
                    return Ok(Some(Volume::zeros(mr.dims(), mr.spacing())?));
                }
                Ok::<_, Error>(Some(infer_stage(prev, mr, prior[i].as_ref(), &cfg.spec)?.0))
            })?;
        }
        let pool_subjects: Vec<Subject> = normalized
            .iter()
            .zip(&contexts)
            .map(|((mr, ct), ctx)| Subject { mr: mr.clone(), ct: ct.clone(), context: ctx.clone() })
            .collect();
        hooks.stage_data(k, &pool_subjects);
        let pool = SubjectPool::new(pool_subjects, cfg.spec)?;

        let (gen, disc) = stage_nets(cfg, k)?;
        let train = TrainConfig { seed: stage_seed(cfg.train.seed, k), ..cfg.train };
        let mut trainer = Trainer::new(gen, disc, train)?;
        hooks.begin_stage(k, &mut trainer)?;
        let mut sh = StageHooks { stage: k, inner: hooks, stopped: false };
        let log = train_stage(&mut trainer, &pool, &mut sh)?;
        sh.stopped = trainer.iteration < trainer.cfg.iterations;
        let stopped = sh.stopped;
        logs.push(log);
        if !stopped {
            hooks.end_stage(k, &trainer)?;
        }
        stages.push(trainer.gen);
        if stopped {
            let cascade = Cascade::new(stages, cfg.spec, mr_norm, ct_norm)?;
            return Ok(TrainedCascade { cascade, logs, stopped: true });
        }
    }
    let cascade = Cascade::new(stages, cfg.spec, mr_norm, ct_norm)?;
    Ok(TrainedCascade { cascade, logs, stopped: false })
}
