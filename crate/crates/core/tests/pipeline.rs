use ctsynth::autocontext::*;
use ctsynth::autodiff::Parameter;
use ctsynth::metrics::mae;
use ctsynth::phantom::{generate_dataset, PhantomConfig};
use ctsynth::training::{train_stage, NoHooks, Subject, SubjectPool, TrainConfig, TrainLogRow, Trainer};
use ctsynth::volume::{PatchSpec, Volume};

fn tiny_config(seed: u64) -> CascadeConfig {
    CascadeConfig {
        train: TrainConfig { lr: 1e-3, batch_size: 2, iterations: 3, seed, checkpoint_every: 3, ..TrainConfig::default() },
        spec: PatchSpec::new(12, 8, 4).unwrap(),
        n_stages: 2,
        gen_plan: vec![3, 2],
        disc_filters: vec![2, 2, 2, 2],
        disc_dense: vec![4, 2],
        zero_context: false,
    }
}

fn subjects(seed: u64) -> (Vec<(Volume, Volume)>, (Volume, Volume)) {
    let ds = generate_dataset(&PhantomConfig { dims: [36, 34, 33], seed, ..PhantomConfig::default() }, 3).unwrap();
    let pair = |k: usize| (ds.subjects[k].mr.clone(), ds.subjects[k].ct.clone());
    (ds.train.iter().map(|&k| pair(k)).collect(), pair(ds.test[0]))
}

fn same_logs(a: &[Vec<TrainLogRow>], b: &[Vec<TrainLogRow>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(r, s)| r.same_values(s)))
}

#[test]
fn cascade_training_is_deterministic_and_survives_save_load() {
    let (train, (mr, ct)) = subjects(1);
    let cfg = tiny_config(5);
    let a = train_cascade(&train, &cfg, &mut NoCascadeHooks).unwrap();
    let b = train_cascade(&train, &cfg, &mut NoCascadeHooks).unwrap();
    assert!(!a.stopped);
    assert!(same_logs(&a.logs, &b.logs));
    assert!(a.logs.iter().flatten().all(TrainLogRow::all_finite));
    assert_eq!(a.cascade, b.cascade);

    let dir = tempfile::tempdir().unwrap();
    a.cascade.save(dir.path()).unwrap();
    let loaded = Cascade::load(dir.path()).unwrap();
    assert_eq!(loaded, a.cascade);
    let (e1, m1) = infer_cascade(&a.cascade, &mr).unwrap();
    let (e2, m2) = infer_cascade(&loaded, &mr).unwrap();
    assert_eq!((e1.voxels(), &m1), (e2.voxels(), &m2));
    assert!(mae(&e1, &ct, &m1).unwrap().is_finite());
}

#[test]
fn single_stage_cascade_is_one_train_stage() {
    let (train, _) = subjects(2);
    let cfg = CascadeConfig { n_stages: 1, ..tiny_config(9) };
    let res = train_cascade(&train, &cfg, &mut NoCascadeHooks).unwrap();

    let (mn, cn) = fit_norms(&train);
    let subs = train
        .iter()
        .map(|(m, c)| Subject { mr: mn.apply_volume(m).unwrap(), ct: cn.apply_volume(c).unwrap(), context: None })
        .collect();
    let pool = SubjectPool::new(subs, cfg.spec).unwrap();
    let (g, d) = stage_nets(&cfg, 0).unwrap();
    let mut t = Trainer::new(g, d, cfg.train).unwrap();
    let log = train_stage(&mut t, &pool, &mut NoHooks).unwrap();
    assert!(same_logs(&res.logs, &[log]));
    t.gen.params_mut().into_iter().for_each(Parameter::reset_optimizer);
    assert_eq!(res.cascade.stages()[0], t.gen);
}

struct Capture(Vec<Vec<Subject>>);

impl CascadeHooks for Capture {
    fn stage_data(&mut self, _stage: usize, subjects: &[Subject]) {
        self.0.push(subjects.to_vec());
    }
}

#[test]
fn later_stages_see_previous_estimate_as_context() {
    let (train, _) = subjects(3);
    let cfg = tiny_config(4);
    let mut cap = Capture(Vec::new());
    let res = train_cascade(&train, &cfg, &mut cap).unwrap();
    assert_eq!(cap.0.len(), 2);
    assert!(cap.0[0].iter().all(|s| s.context.is_none()));
    assert_eq!(res.cascade.stages()[0].in_channels(), 1);
    assert_eq!(res.cascade.stages()[1].in_channels(), 2);
    let g0 = &res.cascade.stages()[0];
    for s in &cap.0[1] {
        let want = infer_stage(g0, &s.mr, None, &cfg.spec).unwrap().0;
        assert_eq!(s.context.as_ref().unwrap(), &want);
    }

    let mut zero = Capture(Vec::new());
    train_cascade(&train, &CascadeConfig { zero_context: true, ..cfg }, &mut zero).unwrap();
    assert!(zero.0[1].iter().all(|s| s.context.as_ref().unwrap().voxels().iter().all(|&v| v == 0.0)));
}

#[test]
fn thread_count_does_not_change_results() {
    let (train, (mr, _)) = subjects(6);
    let cfg = tiny_config(2);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let r = train_cascade(&train, &cfg, &mut NoCascadeHooks).unwrap();
            let est = infer_cascade(&r.cascade, &mr).unwrap();
            (r, est)
        })
    };
    let (a, ea) = run(1);
    let (b, eb) = run(3);
    assert!(same_logs(&a.logs, &b.logs));
    assert_eq!(a.cascade, b.cascade);
    assert_eq!(ea, eb);
}

#[derive(Default)]
struct StopAt(usize, usize);

impl CascadeHooks for StopAt {
    fn on_row(&mut self, _stage: usize, _row: &TrainLogRow) -> Result<(), ctsynth::training::TrainError> {
        self.1 += 1;
        Ok(())
    }

    fn should_stop(&self, _stage: usize, _iteration: usize) -> bool {
        self.1 >= self.0
    }
}

#[test]
fn early_stop_returns_partial_cascade() {
    let (train, _) = subjects(7);
    let res = train_cascade(&train, &tiny_config(1), &mut StopAt(4, 0)).unwrap();
    assert!(res.stopped);
    assert_eq!(res.logs.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 1]);
}
