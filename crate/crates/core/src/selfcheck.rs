//! The finite-difference gradient suite over every layer op, every loss
//! and a tiny generator + discriminator composite, all at 64-bit.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{central_difference, grad_check_with_fault, GradReport};
use crate::autodiff::{BnMode, Graph, GraphError, Padding, Tensor, Var};
use crate::losses::{self, LossWeights};
use crate::networks::{DiscriminatorNet, GeneratorNet, Mode};
use crate::Result;

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

/// Case names, in run order.
pub const CASES: &[&str] = &[
    "conv3d",
    "conv3d_same",
    "batchnorm3d",
    "batchnorm3d_infer",
    "relu",
    "sigmoid",
    "maxpool3d",
    "dense",
    "bce",
    "gdl",
    "generator_loss",
    "composite",
];

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradReport,
    pub elapsed: Duration,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// `sum(x ⊙ r)` for a fixed random `r`, so no output coordinate cancels.
fn project(g: &mut Graph<f64>, x: Var, r: &Tensor<f64>) -> std::result::Result<Var, GraphError> {
    let r = g.constant(r.clone());
    let p = g.mul(x, r)?;
    g.sum(p)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn op_case(name: &str, rng: &mut ChaCha8Rng, fault: Option<&str>) -> Result<GradReport> {
    let report = match name {
        "conv3d" | "conv3d_same" => {
            let same = name == "conv3d_same";
            let (k, padding) = if same { (rng.random_range(0..2) * 2 + 3, Padding::Same) } else { (3, Padding::Valid) };
            let cin = rng.random_range(1..=2);
            let cout = rng.random_range(2..=4);
            let d = if same { dims(rng, 3, 5) } else { dims(rng, 4, 6) };
            let x = uniform(rng, vec![2, cin, d[0], d[1], d[2]], -1.0, 1.0);
            let w = uniform(rng, vec![cout, cin, k, k, k], -1.0, 1.0);
            let b = uniform(rng, vec![cout], -1.0, 1.0);
            let od = if same { d } else { d.map(|v| v - k + 1) };
            let r = uniform(rng, vec![2, cout, od[0], od[1], od[2]], -1.0, 1.0);
            grad_check_with_fault(
                |g, v| {
                    let y = g.conv3d(v[0], v[1], v[2], padding)?;
                    project(g, y, &r)
                },
                &[x, w, b],
                OP_TOL,
                fault,
            )?
        }
        "batchnorm3d" | "batchnorm3d_infer" => {
            let c = rng.random_range(1..=3);
            let d = dims(rng, 2, 3);
            let x = uniform(rng, vec![2, c, d[0], d[1], d[2]], -2.0, 2.0);
            let gamma = uniform(rng, vec![c], 0.5, 1.5);
            let beta = uniform(rng, vec![c], -0.5, 0.5);
            let r = uniform(rng, vec![2, c, d[0], d[1], d[2]], -1.0, 1.0);
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            let infer = name == "batchnorm3d_infer";
            grad_check_with_fault(
                |g, v| {
                    let mode = if infer {
                        BnMode::Infer { running_mean: &mean, running_var: &var, eps: 1e-5 }
                    } else {
                        BnMode::Train { eps: 1e-5 }
                    };
                    let (y, _) = g.batch_norm(v[0], v[1], v[2], mode)?;
                    project(g, y, &r)
                },
                &[x, gamma, beta],
                OP_TOL,
                fault,
            )?
        }
        "relu" | "sigmoid" => {
            let n = rng.random_range(5..=40);
            let mut x = uniform(rng, vec![n], -3.0, 3.0);
            // keep relu inputs clear of the kink
            for v in x.data_mut() {
                if v.abs() < 1e-2 {
                    *v = if *v < 0.0 { -0.5 } else { 0.5 };
                }
            }
            let r = uniform(rng, vec![n], -1.0, 1.0);
            let relu = name == "relu";
            grad_check_with_fault(
                |g, v| {
                    let y = if relu { g.relu(v[0])? } else { g.sigmoid(v[0])? };
                    project(g, y, &r)
                },
                &[x],
                OP_TOL,
                fault,
            )?
        }
        "maxpool3d" => {
            let c = rng.random_range(1..=2);
            let d = [2, 4, 6][rng.random_range(0..3)];
            let n = 2 * c * d * d * d;
            // distinct values spaced well beyond the finite-difference step
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
            vals.shuffle(rng);
            let x = Tensor::new(vec![2, c, d, d, d], vals)?;
            let r = uniform(rng, vec![2, c, d / 2, d / 2, d / 2], -1.0, 1.0);
            grad_check_with_fault(
                |g, v| {
                    let y = g.max_pool(v[0])?;
                    project(g, y, &r)
                },
                &[x],
                OP_TOL,
                fault,
            )?
        }
        "dense" => {
            let (n, f, o) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=6));
            let x = uniform(rng, vec![n, f], -1.0, 1.0);
            let w = uniform(rng, vec![o, f], -1.0, 1.0);
            let b = uniform(rng, vec![o], -1.0, 1.0);
            let r = uniform(rng, vec![n, o], -1.0, 1.0);
            grad_check_with_fault(
                |g, v| {
                    let y = g.dense(v[0], v[1], v[2])?;
                    project(g, y, &r)
                },
                &[x, w, b],
                OP_TOL,
                fault,
            )?
        }
        "bce" => {
            let n = rng.random_range(1..=10);
            let p = uniform(rng, vec![n, 1], 0.05, 0.95);
            let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
            grad_check_with_fault(|g, v| losses::bce(g, v[0], &labels).map_err(loss_graph), &[p], OP_TOL, fault)?
        }
        "gdl" => {
            let d = dims(rng, 2, 4);
            let a = uniform(rng, vec![2, 1, d[0], d[1], d[2]], 0.0, 1.0);
            let b = uniform(rng, vec![2, 1, d[0], d[1], d[2]], 0.0, 1.0);
            grad_check_with_fault(|g, v| losses::gdl(g, v[0], v[1]).map_err(loss_graph), &[a, b], OP_TOL, fault)?
        }
        "generator_loss" => {
            let d = dims(rng, 2, 4);
            let n = 2;
            let p = uniform(rng, vec![n, 1], 0.05, 0.95);
            let a = uniform(rng, vec![n, 1, d[0], d[1], d[2]], 0.0, 1.0);
            let b = uniform(rng, vec![n, 1, d[0], d[1], d[2]], 0.0, 1.0);
            let w = LossWeights::default();
            grad_check_with_fault(
                |g, v| Ok(losses::generator_loss(g, v[0], v[1], v[2], &w).map_err(loss_graph)?.0),
                &[p, a, b],
                OP_TOL,
                fault,
            )?
        }
        other => unreachable!("unknown case {other}"),
    };
    Ok(report)
}

fn loss_graph(e: losses::LossError) -> GraphError {
    match e {
        losses::LossError::Graph(g) => g,
        other => GraphError::Shape { op: "loss", detail: other.to_string() },
    }
}

/// Tiny generator (12³ → 8³, plan [4, 4]) feeding a tiny discriminator,
/// differentiated through the full weighted generator loss on a 2-sample
/// batch; checks every parameter of both networks.
fn composite(seed: u64, fault: Option<&str>) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
    let mut gen = GeneratorNet::<f64>::new(1, &[4, 4], 12, 8, seed)?;
    let mut disc = DiscriminatorNet::<f64>::new(&[2, 2, 2, 2], &[4], 8, seed.wrapping_add(1))?;
    let x = uniform(&mut rng, vec![2, 1, 12, 12, 12], -1.0, 1.0);
    let y = uniform(&mut rng, vec![2, 1, 8, 8, 8], 0.0, 1.0);
    let w = LossWeights::default();

    let loss = |gen: &GeneratorNet<f64>, disc: &DiscriminatorNet<f64>, g: &mut Graph<f64>| -> Result<Var> {
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let fake = gen.forward(g, xv, Mode::Train)?.out;
        let d = disc.forward(g, fake, Mode::Train)?.out;
        Ok(losses::generator_loss(g, d, fake, yv, &w)?.0)
    };

    let mut g = Graph::new().with_finite_checks(true);
    if let Some(op) = fault {
        g = g.with_fault(op);
    }
    let root = loss(&gen, &disc, &mut g)?;
    let grads = g.backward(root)?.param_grads();
    let sig0 = g.branch_signature();

    let eval = |gen: &GeneratorNet<f64>, disc: &DiscriminatorNet<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new().with_finite_checks(false);
        let r = loss(gen, disc, &mut g)?;
        Ok((g.scalar(r), g.branch_signature()))
    };

    let mut report = GradReport::new(COMPOSITE_TOL);
    let n_gen = gen.params().len();
    let n_disc = disc.params().len();
    for pi in 0..n_gen + n_disc {
        let (name, len) = {
            let p = if pi < n_gen { gen.params()[pi] } else { disc.params()[pi - n_gen] };
            (p.name().to_string(), p.value().len())
        };
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| vec![0.0; len]);
        for (i, &a) in analytic.iter().enumerate() {
            let set = |gen: &mut GeneratorNet<f64>, disc: &mut DiscriminatorNet<f64>, v: Option<f64>| -> f64 {
                let p = if pi < n_gen { gen.params_mut().remove(pi) } else { disc.params_mut().remove(pi - n_gen) };
                let slot = &mut p.value_mut().data_mut()[i];
                let old = *slot;
                if let Some(v) = v {
                    *slot = v;
                }
                old
            };
            let x0 = set(&mut gen, &mut disc, None);
            let d = central_difference(x0, sig0, |xi| {
                set(&mut gen, &mut disc, Some(xi));
                eval(&gen, &disc)
            })?;
            set(&mut gen, &mut disc, Some(x0));
            report.record(a, d);
        }
    }
    Ok(report)
}

/// Runs one named case.
pub fn run_case(name: &'static str, seed: u64, fault: Option<&str>) -> Result<CaseResult> {
    let start = Instant::now();
    let report = if name == "composite" {
        composite(seed, fault)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ name.len() as u64);
        op_case(name, &mut rng, fault)?
    };
    Ok(CaseResult { name, report, elapsed: start.elapsed() })
}

/// Runs every case in [`CASES`].
pub fn run_suite(seed: u64, fault: Option<&str>) -> Result<Vec<CaseResult>> {
    CASES.iter().map(|&c| run_case(c, seed, fault)).collect()
}
