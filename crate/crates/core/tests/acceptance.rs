//! Acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! The phantom convergence runs dominate: three seeds, two stages of 2000
//! iterations each.

use std::time::{Duration, Instant};

use ctsynth::autocontext::*;
use ctsynth::autodiff::{load_checkpoint, save_checkpoint, Graph, Tensor};
use ctsynth::losses::{bce, discriminator_loss, gdl, generator_loss, LossWeights};
use ctsynth::metrics::mae;
use ctsynth::networks::REDUCED_GENERATOR_PLAN;
use ctsynth::phantom::{generate_dataset, PhantomConfig};
use ctsynth::selfcheck::run_suite;
use ctsynth::training::*;
use ctsynth::volume::*;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SEEDS: [u64; 3] = [0, 1, 2];
const STAGE_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    let o = Outcome { id, name, pass, detail };
    println!("{} criterion {} ({}): {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    o
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let results = run_suite(0, None).expect("gradcheck suite");
    let elapsed = t.elapsed();
    for r in &results {
        println!(
            "  {:<16} max_rel_err {:.3e} tol {:.0e} {}",
            r.name,
            r.report.max_rel_err,
            r.report.tol,
            if r.report.passed() { "ok" } else { "FAIL" }
        );
    }
    let all = results.iter().all(|r| r.report.passed() && r.report.checked > 0);
    let pass = all && elapsed <= Duration::from_secs(60);
    report(1, "gradient correctness", pass, format!("{} cases, {:.1}s", results.len(), elapsed.as_secs_f64()))
}

fn scalar(f: impl FnOnce(&mut Graph<f64>) -> ctsynth::autodiff::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.scalar(v)
}

fn loss_values() -> Outcome {
    let half = scalar(|g| {
        let p = g.constant(Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap());
        bce(g, p, &[0.0, 1.0]).unwrap()
    });
    let perfect = scalar(|g| {
        let r = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let f = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        discriminator_loss(g, r, f).unwrap()
    });
    let ramp = scalar(|g| {
        let y = g.constant(Tensor::new(vec![1, 1, 2, 2, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
        let z = g.constant(Tensor::zeros(vec![1, 1, 2, 2, 2]));
        gdl(g, z, y).unwrap()
    });
    let pass = (half - std::f64::consts::LN_2).abs() <= 1e-6 && perfect.abs() <= 1e-6 && (ramp - 4.0).abs() <= 1e-6;
    report(2, "loss unit values", pass, format!("bce {half:.9}, perfect {perfect:.2e}, ramp gdl {ramp:.9}"))
}

/// Independent brute-force coverage: every voxel inside some output cube.
fn brute_coverage(dims: [usize; 3], spec: &PatchSpec) -> Vec<bool> {
    let mut covered = vec![false; dims.iter().product()];
    for c in tile_centers(dims, spec).unwrap() {
        let lo = c.map(|v| spec.output_lo(v));
        for z in lo[2]..lo[2] + spec.output_size {
            for y in lo[1]..lo[1] + spec.output_size {
                for x in lo[0]..lo[0] + spec.output_size {
                    covered[x + dims[0] * (y + dims[1] * z)] = true;
                }
            }
        }
    }
    covered
}

fn tiling() -> Outcome {
    let spec = PatchSpec::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for dims in [[32, 32, 32], [48, 48, 48], [153, 193, 50]] {
        let truth = Volume::from_fn(dims, [1.0; 3], |x, y, z| ((x * 13 + y * 7 + z * 29) % 97) as f32 * 0.37 - 11.0).unwrap();
        let preds: Vec<_> = tile_centers(dims, &spec)
            .unwrap()
            .into_iter()
            .map(|c| (c, truth.crop_cube(c.map(|v| spec.output_lo(v)), spec.output_size)))
            .collect();
        let (merged, mask) = merge_patches(&preds, dims, [1.0; 3], spec.output_size).unwrap();
        let brute = brute_coverage(dims, &spec);
        let m = spec.margin();
        let interior = |i: usize| {
            let p = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            (0..3).all(|a| p[a] >= m && p[a] < dims[a] - m)
        };
        let gaps = (0..truth.len()).filter(|&i| interior(i) && !brute[i]).count();
        let max_err = (0..truth.len())
            .filter(|&i| mask.is_covered(i))
            .map(|i| (merged.voxels()[i] - truth.voxels()[i]).abs())
            .fold(0.0f32, f32::max);
        let ok = mask.as_slice() == &brute[..] && gaps == 0 && max_err <= 1e-6;
        pass &= ok;
        parts.push(format!("{dims:?} err {max_err:.1e} gaps {gaps}"));
    }
    report(3, "tiling round trip", pass, parts.join("; "))
}

fn convergence_config(seed: u64) -> CascadeConfig {
    CascadeConfig {
        train: TrainConfig {
            lr: 1e-4,
            batch_size: 10,
            iterations: 2000,
            seed,
            loss_weights: LossWeights::new(0.5, 1.0, 1.0).unwrap(),
            checkpoint_every: 2000,
            ..TrainConfig::default()
        },
        n_stages: 2,
        gen_plan: REDUCED_GENERATOR_PLAN.to_vec(),
        disc_filters: vec![8, 16, 32, 64],
        disc_dense: vec![64, 32],
        ..CascadeConfig::default()
    }
}

struct Timer {
    start: Option<Instant>,
    stage_time: Vec<Duration>,
}

impl CascadeHooks for Timer {
    fn begin_stage(&mut self, _stage: usize, _trainer: &mut Trainer) -> Result<(), TrainError> {
        self.start = Some(Instant::now());
        Ok(())
    }

    fn end_stage(&mut self, _stage: usize, _trainer: &Trainer) -> Result<(), TrainError> {
        self.stage_time.push(self.start.take().expect("stage started").elapsed());
        Ok(())
    }
}

struct SeedRun {
    untrained: f64,
    stage_mae: Vec<f64>,
    stage_time: Vec<Duration>,
    finite: bool,
}

fn phantom_run(seed: u64) -> SeedRun {
    let ds = generate_dataset(&PhantomConfig { dims: [48; 3], seed, ..PhantomConfig::default() }, 4).unwrap();
    let train: Vec<_> = ds.train.iter().map(|&k| (ds.subjects[k].mr.clone(), ds.subjects[k].ct.clone())).collect();
    let test = &ds.subjects[ds.test[0]];
    let cfg = convergence_config(seed);
    let (mr_norm, ct_norm) = fit_norms(&train);

    let fresh = Cascade::new(vec![stage_nets(&cfg, 0).unwrap().0], cfg.spec, mr_norm, ct_norm).unwrap();
    let (est, mask) = infer_cascade(&fresh, &test.mr).unwrap();
    let untrained = mae(&est, &test.ct, &mask).unwrap();

    let mut timer = Timer { start: None, stage_time: Vec::new() };
    let res = train_cascade(&train, &cfg, &mut timer).unwrap();
    let c = &res.cascade;
    let (outs, mask) = c.infer_stages(&c.mr_norm.apply_volume(&test.mr).unwrap()).unwrap();
    let stage_mae = outs.iter().map(|o| mae(&c.ct_norm.invert_volume(o).unwrap(), &test.ct, &mask).unwrap()).collect();
    let finite = res.logs.iter().flatten().all(TrainLogRow::all_finite) && res.logs.iter().all(|l| l.len() == 2000);
    SeedRun { untrained, stage_mae, stage_time: timer.stage_time, finite }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn convergence(runs: &[SeedRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let ratio = r.stage_mae[0] / r.untrained;
        let t = r.stage_time[0];
        pass &= ratio <= 0.5 && t <= STAGE_BUDGET;
        parts.push(format!("seed {seed}: {:.1} → {:.1} HU ({:.0}%), {:.0}s", r.untrained, r.stage_mae[0], 100.0 * ratio, t.as_secs_f64()));
    }
    report(4, "phantom convergence", pass, parts.join("; "))
}

fn cascade_trend(runs: &[SeedRun]) -> Outcome {
    let m0 = median(runs.iter().map(|r| r.stage_mae[0]).collect());
    let m1 = median(runs.iter().map(|r| r.stage_mae[1]).collect());
    report(5, "cascade trend", m1 <= 1.05 * m0, format!("median MAE stage 0 {m0:.1} HU, stage 1 {m1:.1} HU"))
}

fn tiny_pool(seed: u64) -> SubjectPool {
    let subs = (0..2)
        .map(|k| {
            let f = |x: usize, y: usize, z: usize| ((x * 3 + y * 5 + z * 7 + k as usize * 11 + seed as usize) % 17) as f32 / 17.0;
            let mr = Volume::from_fn([14, 13, 12], [1.0; 3], f).unwrap();
            let ct = mr.map(|v| 1.0 - v * v).unwrap();
            Subject { mr, ct, context: None }
        })
        .collect();
    SubjectPool::new(subs, PatchSpec::new(12, 8, 4).unwrap()).unwrap()
}

fn tiny_trainer(seed: u64, iterations: usize) -> Trainer {
    let cfg = CascadeConfig {
        train: TrainConfig { lr: 1e-3, batch_size: 2, iterations, seed, checkpoint_every: 2, ..TrainConfig::default() },
        spec: PatchSpec::new(12, 8, 4).unwrap(),
        n_stages: 1,
        gen_plan: vec![2, 2],
        disc_filters: vec![2, 2, 2, 2],
        disc_dense: vec![4, 2],
        zero_context: false,
    };
    let (g, d) = stage_nets(&cfg, 0).unwrap();
    Trainer::new(g, d, cfg.train).unwrap()
}

fn values_of(ps: Vec<&ctsynth::autodiff::Parameter<f32>>) -> Vec<Vec<f32>> {
    ps.into_iter().map(|p| p.value().data().to_vec()).collect()
}

fn hygiene(runs: &[SeedRun]) -> Outcome {
    let finite = runs.iter().all(|r| r.finite);

    let pool = tiny_pool(3);
    let mut t = tiny_trainer(3, 4);
    let (g0, d0) = (values_of(t.gen.params()), values_of(t.disc.params()));
    t.discriminator_step(&pool, 1, 0).unwrap();
    let d_only = values_of(t.gen.params()) == g0 && values_of(t.disc.params()) != d0;
    let d1 = values_of(t.disc.params());
    t.generator_step(&pool, 1).unwrap();
    let g_only = values_of(t.disc.params()) == d1 && values_of(t.gen.params()) != g0;

    let run = || {
        let mut t = tiny_trainer(5, 4);
        let log = train_stage(&mut t, &pool, &mut NoHooks).unwrap();
        (log, t.state_checkpoint())
    };
    let (a, b) = (run(), run());
    let deterministic = a.0.len() == b.0.len() && a.0.iter().zip(&b.0).all(|(x, y)| x.same_values(y)) && a.1 == b.1;

    let pass = finite && d_only && g_only && deterministic;
    report(
        6,
        "training hygiene",
        pass,
        format!("finite logs {finite}, phase isolation {}, deterministic {deterministic}", d_only && g_only),
    )
}

fn box_blur(v: &Volume) -> Volume {
    let [dx, dy, dz] = v.dims();
    Volume::from_fn(v.dims(), v.spacing(), |x, y, z| {
        let mut s = 0.0;
        for oz in -1i64..=1 {
            for oy in -1i64..=1 {
                for ox in -1i64..=1 {
                    let c = |p: usize, o: i64, d: usize| (p as i64 + o).clamp(0, d as i64 - 1) as usize;
                    s += v.get(c(x, ox, dx), c(y, oy, dy), c(z, oz, dz));
                }
            }
        }
        s / 27.0
    })
    .unwrap()
}

fn sharpness() -> Outcome {
    let ds = generate_dataset(&PhantomConfig { seed: 4, ..PhantomConfig::default() }, 2).unwrap();
    let ct = &ds.subjects[0].ct;
    let (y, _) = normalize(ct, NormMode::MinMax).unwrap();
    let b = box_blur(&y);
    let shape = {
        let [x, yy, z] = y.dims();
        vec![1, 1, x, yy, z]
    };
    let tensor = |v: &Volume| Tensor::new(shape.clone(), v.voxels().iter().map(|&s| s as f64).collect()).unwrap();
    let (ty, tb) = (tensor(&y), tensor(&b));

    let gdl_of = |a: &Tensor<f64>| scalar(|g| {
        let (a, t) = (g.constant(a.clone()), g.constant(ty.clone()));
        gdl(g, a, t).unwrap()
    });
    let total_of = |a: &Tensor<f64>, w: LossWeights| scalar(|g| {
        let d = g.constant(Tensor::full(vec![1, 1], 0.5));
        let (a, t) = (g.constant(a.clone()), g.constant(ty.clone()));
        generator_loss(g, d, a, t, &w).unwrap().0
    });
    let (g_b, g_y) = (gdl_of(&tb), gdl_of(&ty));
    let w = LossWeights::default();
    let gdl_only = LossWeights::new(0.0, 0.0, 1.0).unwrap();
    let (t_y, t_b) = (total_of(&ty, w), total_of(&tb, w));
    let (o_y, o_b) = (total_of(&ty, gdl_only), total_of(&tb, gdl_only));
    let pass = g_b > 0.0 && g_y == 0.0 && t_y < t_b && o_y < o_b;
    report(
        7,
        "gdl sharpness",
        pass,
        format!("gdl(B,Y) {g_b:.4}, gdl(Y,Y) {g_y}, total Y {t_y:.4} < B {t_b:.4}, gdl-only Y {o_y:.4} < B {o_b:.4}"),
    )
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pool = tiny_pool(8);

    let mut t = tiny_trainer(8, 3);
    train_stage(&mut t, &pool, &mut NoHooks).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&a, &t.state_checkpoint()).unwrap();
    save_checkpoint(&b, &load_checkpoint(&a).unwrap()).unwrap();
    let ckpt = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let v = Volume::from_fn([9, 7, 5], [0.7, 1.1, 2.5], |x, y, z| ((x * y) as f32).cos() * 431.0 - z as f32).unwrap();
    let (p, q) = (dir.path().join("a.vol3"), dir.path().join("b.vol3"));
    save_volume(&p, &v, VolumeFormat::Vol3).unwrap();
    save_volume(&q, &load_volume(&p, VolumeFormat::Vol3).unwrap(), VolumeFormat::Vol3).unwrap();
    let vol3 = std::fs::read(&p).unwrap() == std::fs::read(&q).unwrap();

    let mut whole = tiny_trainer(9, 6);
    let full_log = train_stage(&mut whole, &pool, &mut NoHooks).unwrap();
    let mut first = tiny_trainer(9, 6);
    struct StopAt3;
    impl TrainHooks for StopAt3 {
        fn should_stop(&self, iteration: usize) -> bool {
            iteration >= 3
        }
    }
    let mut log = train_stage(&mut first, &pool, &mut StopAt3).unwrap();
    let state = dir.path().join("state.ckpt");
    save_checkpoint(&state, &first.state_checkpoint()).unwrap();
    let mut resumed = tiny_trainer(9, 6);
    resumed.restore(&load_checkpoint(&state).unwrap()).unwrap();
    log.extend(train_stage(&mut resumed, &pool, &mut NoHooks).unwrap());
    let same_log = log.len() == full_log.len() && log.iter().zip(&full_log).all(|(x, y)| x.same_values(y));
    let resume = same_log && resumed.state_checkpoint() == whole.state_checkpoint();

    report(8, "serialization", ckpt && vol3 && resume, format!("checkpoint bitwise {ckpt}, vol3 bitwise {vol3}, resume identical {resume}"))
}

fn main() {
    let t = Instant::now();
    let mut outcomes = vec![gradients(), loss_values(), tiling()];
    let runs: Vec<SeedRun> = SEEDS
        .iter()
        .map(|&s| {
            let r = phantom_run(s);
            println!(
                "  seed {s}: untrained {:.1} HU, stages {:?} HU, stage time {:?}",
                r.untrained,
                r.stage_mae.iter().map(|m| (m * 10.0).round() / 10.0).collect::<Vec<_>>(),
                r.stage_time.iter().map(|d| d.as_secs_f64().round()).collect::<Vec<_>>()
            );
            r
        })
        .collect();
    outcomes.extend([convergence(&runs), cascade_trend(&runs), hygiene(&runs), sharpness(), serialization()]);
    outcomes.sort_by_key(|o| o.id);
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("{passed}/{} criteria passed in {:.0}s", outcomes.len(), t.elapsed().as_secs_f64());
    for o in outcomes.iter().filter(|o| !o.pass) {
        println!("  open: criterion {} ({}) {}", o.id, o.name, o.detail);
    }
}
