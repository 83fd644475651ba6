use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use ctsynth::autocontext::{infer_cascade, stage_nets, train_cascade, Cascade, CascadeHooks};
use ctsynth::autodiff::{load_checkpoint, save_checkpoint, GraphError};
use ctsynth::metrics::{evaluate, EvalReport};
use ctsynth::phantom::{generate_dataset, write_dataset, Manifest, PhantomError, Split};
use ctsynth::selfcheck::{self, OP_TOL};
use ctsynth::training::{TrainError, TrainLogRow, Trainer};
use ctsynth::volume::{load_volume, save_volume, CoverageMask, Volume, VolumeFormat};

use crate::config::RunConfig;
use crate::pgm;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub const EFFECTIVE_CONFIG: &str = "effective.conf";
pub const CASCADE_DIR: &str = "cascade";
pub const STATE_DIR: &str = "state";

/// Bad invocation or configuration.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A failed numerical check.
#[derive(Debug)]
pub struct Numerical(pub String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn non_finite(e: &(dyn std::error::Error + 'static)) -> bool {
    use ctsynth::networks::NetError;
    if let Some(e) = e.downcast_ref::<ctsynth::Error>() {
        return match e {
            ctsynth::Error::Train(t) => non_finite(t),
            ctsynth::Error::Graph(GraphError::NonFinite(_)) => true,
            ctsynth::Error::Net(NetError::Graph(GraphError::NonFinite(_))) => true,
            _ => false,
        };
    }
    matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. }))
        || matches!(e.downcast_ref::<GraphError>(), Some(GraphError::NonFinite(_)))
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for c in e.chain() {
        if c.is::<Usage>() {
            return EXIT_USAGE;
        }
        if c.is::<Numerical>() || non_finite(c) {
            return EXIT_NUMERIC;
        }
    }
    EXIT_DATA
}

pub fn set_threads(n: Option<usize>) -> Result<()> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        bail!(usage("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    Ok(())
}

fn load_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    RunConfig::load(file, overrides).map_err(usage)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn phantom(file: Option<&Path>, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(file, overrides)?;
    let pc = cfg.phantom();
    pc.validate().map_err(|e| usage(e.to_string()))?;
    let ds = match generate_dataset(&pc, cfg.n_subjects) {
        Err(e @ PhantomError::TooFewSubjects(_)) => bail!(usage(format!("n_subjects: {e}"))),
        r => r?,
    };
    write_dataset(&cfg.data_dir, &ds)?;
    write_file(&cfg.data_dir.join(EFFECTIVE_CONFIG), cfg.render())?;
    println!(
        "wrote {} subjects ({} train, {} test) of {}x{}x{} to {}",
        ds.subjects.len(),
        ds.train.len(),
        ds.test.len(),
        pc.dims[0],
        pc.dims[1],
        pc.dims[2],
        cfg.data_dir.display()
    );
    Ok(())
}

#[derive(Debug, Default)]
pub struct TrainOpts {
    pub resume: bool,
    pub stop_after: Option<usize>,
    pub fault: Option<String>,
}

pub fn stage_log_name(k: usize) -> String {
    format!("stage_{k}_log.csv")
}

pub fn stage_state_name(k: usize) -> String {
    format!("stage_{k}.ckpt")
}

struct CliHooks {
    out: PathBuf,
    resume: bool,
    stop_after: Option<usize>,
    nan_stage: Option<usize>,
    done: usize,
    log: Option<BufWriter<File>>,
    started: Instant,
}

fn hook_err(context: &str, e: impl std::fmt::Display) -> TrainError {
    TrainError::Hook(format!("{context}: {e}"))
}

impl CliHooks {
    fn state_path(&self, k: usize) -> PathBuf {
        self.out.join(STATE_DIR).join(stage_state_name(k))
    }

    /// Rewrites the stage log to the rows at or before `upto`.
    fn open_log(&mut self, k: usize, upto: usize) -> Result<(), TrainError> {
        let path = self.out.join(stage_log_name(k));
        let mut text = format!("{}\n", TrainLogRow::CSV_HEADER);
        if upto > 0 {
            let old = std::fs::read_to_string(&path).map_err(|e| hook_err(&path.display().to_string(), e))?;
            for line in old.lines().skip(1) {
                match TrainLogRow::parse_csv(line) {
                    Some(r) if r.iteration <= upto => text.push_str(&format!("{line}\n")),
                    Some(_) => break,
                    None => return Err(hook_err(&path.display().to_string(), "malformed log row")),
                }
            }
        }
        std::fs::write(&path, text).map_err(|e| hook_err(&path.display().to_string(), e))?;
        let f = OpenOptions::new().append(true).open(&path).map_err(|e| hook_err(&path.display().to_string(), e))?;
        self.log = Some(BufWriter::new(f));
        Ok(())
    }
}

impl CascadeHooks for CliHooks {
    fn begin_stage(&mut self, stage: usize, trainer: &mut Trainer) -> Result<(), TrainError> {
        let state = self.state_path(stage);
        if self.resume && state.exists() {
            let ck = load_checkpoint(&state)?;
            trainer.restore(&ck)?;
            eprintln!("stage {stage}: resumed at iteration {}", trainer.iteration);
        }
        self.open_log(stage, trainer.iteration)?;
        if self.nan_stage == Some(stage) {
            trainer.gen.head_mut().bias.value_mut().data_mut().fill(f32::NAN);
        }
        self.started = Instant::now();
        Ok(())
    }

    fn on_row(&mut self, _stage: usize, row: &TrainLogRow) -> Result<(), TrainError> {
        let log = self.log.as_mut().expect("log opened in begin_stage");
        writeln!(log, "{}", row.to_csv()).and_then(|_| log.flush()).map_err(|e| hook_err("writing log", e))?;
        self.done += 1;
        Ok(())
    }

    fn on_checkpoint(&mut self, stage: usize, trainer: &Trainer) -> Result<(), TrainError> {
        let path = self.state_path(stage);
        let tmp = path.with_extension("tmp");
        save_checkpoint(&tmp, &trainer.state_checkpoint())?;
        std::fs::rename(&tmp, &path).map_err(|e| hook_err(&path.display().to_string(), e))?;
        eprintln!(
            "stage {stage}: iteration {}/{} ({:.1}s)",
            trainer.iteration,
            trainer.cfg.iterations,
            self.started.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn should_stop(&self, _stage: usize, _iteration: usize) -> bool {
        self.stop_after.is_some_and(|n| self.done >= n)
    }

    fn end_stage(&mut self, _stage: usize, _trainer: &Trainer) -> Result<(), TrainError> {
        self.log = None;
        Ok(())
    }
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<(String, Volume, Volume)>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .split(split)
        .map(|e| {
            let mr = load_volume(dir.join(&e.mr), VolumeFormat::Vol3).with_context(|| format!("loading {}", e.mr))?;
            let ct = load_volume(dir.join(&e.ct), VolumeFormat::Vol3).with_context(|| format!("loading {}", e.ct))?;
            Ok((e.mr.clone(), mr, ct))
        })
        .collect()
}

fn parse_fault(fault: Option<&str>) -> Result<Option<usize>> {
    let Some(f) = fault else { return Ok(None) };
    let k = f.strip_prefix("nan-stage=").and_then(|k| k.parse().ok());
    k.map(Some).ok_or_else(|| usage(format!("unknown fault `{f}`")))
}

pub fn train(file: Option<&Path>, overrides: &[(String, String)], opts: &TrainOpts) -> Result<()> {
    let cfg = load_config(file, overrides)?;
    cfg.validate_training().map_err(usage)?;
    let cc = cfg.cascade();
    let (g, d) = stage_nets(&cc, 0).map_err(|e| usage(e.to_string()))?;
    Trainer::new(g, d, cc.train).map_err(|e| usage(e.to_string()))?;
    let nan_stage = parse_fault(opts.fault.as_deref())?;

    let out = &cfg.out_dir;
    create_dir(&out.join(STATE_DIR))?;
    let echo = out.join(EFFECTIVE_CONFIG);
    let rendered = cfg.render();
    if opts.resume {
        if let Ok(old) = std::fs::read_to_string(&echo) {
            if old != rendered {
                bail!(usage(format!("configuration differs from {}; refusing to resume", echo.display())));
            }
        }
    } else if std::fs::read_dir(out.join(STATE_DIR))?.next().is_some() {
        bail!(usage(format!("{} already holds training state; pass --resume or pick another out_dir", out.display())));
    }
    write_file(&echo, &rendered)?;

    let subjects: Vec<(Volume, Volume)> =
        load_split(&cfg.data_dir, Split::Train)?.into_iter().map(|(_, mr, ct)| (mr, ct)).collect();
    if subjects.is_empty() {
        bail!("{} lists no training subjects", cfg.data_dir.display());
    }
    let mut hooks = CliHooks {
        out: out.clone(),
        resume: opts.resume,
        stop_after: opts.stop_after,
        nan_stage,
        done: 0,
        log: None,
        started: Instant::now(),
    };
    let start = Instant::now();
    let res = train_cascade(&subjects, &cc, &mut hooks)?;
    if res.stopped {
        println!("stopped after {} iterations; continue with --resume", hooks.done);
        return Ok(());
    }
    res.cascade.save(&out.join(CASCADE_DIR))?;
    for (k, log) in res.logs.iter().enumerate() {
        if let Some(r) = log.last() {
            println!("stage {k}: iteration {} d_loss {:.4} g_l2 {:.4} g_gdl {:.4}", r.iteration, r.d_loss, r.g_l2, r.g_gdl);
        }
    }
    println!(
        "trained {} stage(s) in {:.1}s; cascade in {}",
        cc.n_stages,
        start.elapsed().as_secs_f64(),
        out.join(CASCADE_DIR).display()
    );
    Ok(())
}

pub fn default_mask_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".mask.vol3");
    PathBuf::from(s)
}

pub fn infer(
    cascade_dir: &Path,
    mr_path: &Path,
    out: &Path,
    mask: Option<&Path>,
    slices: Option<&Path>,
    truth: Option<&Path>,
) -> Result<()> {
    let cascade = Cascade::load(cascade_dir).with_context(|| format!("loading cascade {}", cascade_dir.display()))?;
    let mr = load_volume(mr_path, VolumeFormat::Vol3).with_context(|| format!("loading {}", mr_path.display()))?;
    let (est, cov) = infer_cascade(&cascade, &mr).with_context(|| format!("inferring {}", mr_path.display()))?;
    save_volume(out, &est, VolumeFormat::Vol3).with_context(|| format!("writing {}", out.display()))?;
    let mask_path = mask.map(Path::to_path_buf).unwrap_or_else(|| default_mask_path(out));
    save_volume(&mask_path, &cov.to_volume(mr.spacing()), VolumeFormat::Vol3)
        .with_context(|| format!("writing {}", mask_path.display()))?;
    println!("coverage {:.6} ({} of {} voxels)", cov.fraction(), cov.count(), mr.len());
    if let Some(dir) = slices {
        create_dir(dir)?;
        let z = mr.dims()[2] / 2;
        let (w, h, m) = pgm::axial(&mr, z);
        pgm::write(&dir.join("mr_axial.pgm"), w, h, &m, pgm::range(&m))?;
        let (_, _, e) = pgm::axial(&est, z);
        let mut window = pgm::range(&e);
        if let Some(t) = truth {
            let tv = load_volume(t, VolumeFormat::Vol3).with_context(|| format!("loading {}", t.display()))?;
            mr.ensure_same_dims(&tv)?;
            let (_, _, tz) = pgm::axial(&tv, z);
            window = pgm::range(&tz);
            pgm::write(&dir.join("truth_axial.pgm"), w, h, &tz, window)?;
        }
        pgm::write(&dir.join("estimate_axial.pgm"), w, h, &e, window)?;
    }
    Ok(())
}

pub fn eval(estimates: &[PathBuf], truths: &[PathBuf], masks: &[PathBuf], subjects: &[String], report: Option<&Path>) -> Result<()> {
    if estimates.len() != truths.len() || estimates.len() != masks.len() {
        bail!(usage("--estimate, --truth and --mask must be given the same number of times"));
    }
    if !subjects.is_empty() && subjects.len() != estimates.len() {
        bail!(usage("--subject must be given once per estimate or not at all"));
    }
    let load = |p: &Path| load_volume(p, VolumeFormat::Vol3).with_context(|| format!("loading {}", p.display()));
    let mut rows = Vec::with_capacity(estimates.len());
    for (i, e) in estimates.iter().enumerate() {
        let name = subjects.get(i).cloned().unwrap_or_else(|| {
            e.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("subject_{i}"))
        });
        if name.contains(',') {
            bail!(usage(format!("subject label `{name}` contains a comma")));
        }
        let mask = CoverageMask::from_volume(&load(&masks[i])?);
        let row = evaluate(&name, &load(e)?, &load(&truths[i])?, &mask).with_context(|| format!("evaluating {name}"))?;
        rows.push(row);
    }
    let rep = EvalReport::new(rows)?;
    if let Some(p) = report {
        write_file(p, rep.to_csv())?;
    }
    print!("{}", rep.table());
    Ok(())
}

pub fn gradcheck(seed: u64, fault: Option<&str>) -> Result<()> {
    let start = Instant::now();
    let mut failed = Vec::new();
    println!("{:<18} {:>12} {:>8} {:>8} {:>9}", "op", "max_rel_err", "tol", "result", "time");
    for &name in selfcheck::CASES {
        let r = selfcheck::run_case(name, seed, fault)?;
        let ok = r.report.passed();
        println!(
            "{:<18} {:>12.3e} {:>8.0e} {:>8} {:>8.2}s",
            name,
            r.report.max_rel_err,
            r.report.tol,
            if ok { "PASS" } else { "FAIL" },
            r.elapsed.as_secs_f64()
        );
        if !ok {
            failed.push(name);
        }
    }
    println!("total {:.2}s (op tolerance {OP_TOL:.0e})", start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        return Err(anyhow!(Numerical(format!("gradient check failed for {}", failed.join(", ")))));
    }
    Ok(())
}
