//! Adversarial, reconstruction and gradient-difference losses.
//!
//! Every loss is recorded on a [`Graph`] so it can be differentiated.
//! Reductions sum over voxels and average over the batch (the leading
//! tensor axis), so the relative scale of the weights in [`LossWeights`]
//! does not depend on patch size in the batch direction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, Scalar, Tensor, Var};

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss weight {name} must be finite and non-negative, got {value}")]
    BadWeight { name: &'static str, value: f64 },
    #[error("label {0} is not 0 or 1")]
    BadLabel(f64),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Weights of the adversarial, L2 and gradient-difference terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 1.0, lambda3: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self, LossError> {
        let w = Self { lambda1, lambda2, lambda3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::BadWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Raw (unweighted) generator terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub adv: f64,
    pub l2: f64,
    pub gdl: f64,
    pub total: f64,
}

fn batch<T: Scalar>(g: &Graph<T>, v: Var) -> usize {
    g.shape(v)[0]
}

/// Binary cross-entropy averaged over the batch.
pub fn bce<T: Scalar>(g: &mut Graph<T>, y_hat: Var, labels: &[f64]) -> Result<Var, LossError> {
    let shape = g.shape(y_hat).to_vec();
    if labels.len() != g.value(y_hat).len() {
        return Err(LossError::Shape(format!("bce: {} labels for predictions of shape {shape:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(LossError::BadLabel(bad));
    }
    let n = shape[0];
    let p = g.clamp(y_hat, T::of(BCE_EPS), T::of(1.0 - BCE_EPS))?;
    let one = g.constant(Tensor::full(shape.clone(), T::one()));
    let q = g.sub(one, p)?;
    let lp = g.ln(p)?;
    let lq = g.ln(q)?;
    let y = g.constant(Tensor::new(shape.clone(), labels.iter().map(|&l| T::of(l)).collect())?);
    let ny = g.constant(Tensor::new(shape, labels.iter().map(|&l| T::of(1.0 - l)).collect())?);
    let a = g.mul(y, lp)?;
    let b = g.mul(ny, lq)?;
    let ab = g.add(a, b)?;
    let s = g.sum(ab)?;
    Ok(g.scale(s, T::of(-1.0 / n as f64))?)
}

/// `bce(d_real, 1) + bce(d_fake, 0)`.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var, LossError> {
    let ones = vec![1.0; g.value(d_real).len()];
    let zeros = vec![0.0; g.value(d_fake).len()];
    let r = bce(g, d_real, &ones)?;
    let f = bce(g, d_fake, &zeros)?;
    Ok(g.add(r, f)?)
}

fn check_pair<T: Scalar>(g: &Graph<T>, op: &str, a: Var, b: Var) -> Result<(), LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::Shape(format!("{op}: shapes {:?} and {:?} differ", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Summed squared error divided by the batch size.
pub fn l2<T: Scalar>(g: &mut Graph<T>, y_hat: Var, y: Var) -> Result<Var, LossError> {
    check_pair(g, "l2", y_hat, y)?;
    let n = batch(g, y_hat);
    let d = g.sub(y, y_hat)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, T::of(1.0 / n as f64))?)
}

/// Gradient difference loss on `[N, C, X, Y, Z]` tensors: for each axis,
/// the squared difference of absolute forward differences, summed over
/// valid positions and divided by the batch size.
pub fn gdl<T: Scalar>(g: &mut Graph<T>, y_hat: Var, y: Var) -> Result<Var, LossError> {
    check_pair(g, "gdl", y_hat, y)?;
    let shape = g.shape(y).to_vec();
    if shape.len() != 5 || shape[2..].iter().any(|&d| d < 2) {
        return Err(LossError::Shape(format!("gdl: need [N,C,X,Y,Z] with every axis >= 2, got {shape:?}")));
    }
    let mut total = None;
    for axis in 0..3 {
        let dt = g.diff(y, axis)?;
        let dp = g.diff(y_hat, axis)?;
        let at = g.abs(dt)?;
        let ap = g.abs(dp)?;
        let d = g.sub(at, ap)?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("three axes");
    Ok(g.scale(total, T::of(1.0 / shape[0] as f64))?)
}

/// `λ1·bce(d_fake, 1) + λ2·l2 + λ3·gdl`. Terms with zero weight are
/// evaluated for the breakdown but left out of the differentiated total.
pub fn generator_loss<T: Scalar>(
    g: &mut Graph<T>,
    d_fake: Var,
    y_hat: Var,
    y: Var,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown), LossError> {
    w.validate()?;
    let ones = vec![1.0; g.value(d_fake).len()];
    let adv = bce(g, d_fake, &ones)?;
    let rec = l2(g, y_hat, y)?;
    let grad = gdl(g, y_hat, y)?;
    let mut total: Option<Var> = None;
    for (term, lambda) in [(adv, w.lambda1), (rec, w.lambda2), (grad, w.lambda3)] {
        if lambda == 0.0 {
            continue;
        }
        let t = g.scale(term, T::of(lambda))?;
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    // All weights zero: keep the generator connected with zero gradient.
    let total = match total {
        Some(t) => t,
        None => g.scale(rec, T::zero())?,
    };
    let breakdown = LossBreakdown {
        adv: g.scalar(adv).f64(),
        l2: g.scalar(rec).f64(),
        gdl: g.scalar(grad).f64(),
        total: g.scalar(total).f64(),
    };
    Ok((total, breakdown))
}
