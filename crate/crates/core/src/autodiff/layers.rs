//! Forward and backward rules for batch normalization, max pooling and
//! dense layers.

use super::{GraphError, Scalar};

/// `Σ f(x)` in f64 over eight interleaved partial sums, combined in a fixed
/// order so the result does not depend on scheduling.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> f64) -> f64 {
    let mut acc = [0f64; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f(v);
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|&v| f(v)).sum();
    acc.iter().sum::<f64>() + tail
}

/// `Σ f(a, b)` pairwise, as [`lane_sum`].
fn lane_sum2<T: Scalar>(xs: &[T], ys: &[T], f: impl Fn(T, T) -> f64) -> f64 {
    let mut acc = [0f64; 8];
    let mut cx = xs.chunks_exact(8);
    let mut cy = ys.chunks_exact(8);
    for (a8, b8) in (&mut cx).zip(&mut cy) {
        for i in 0..8 {
            acc[i] += f(a8[i], b8[i]);
        }
    }
    let tail: f64 = cx.remainder().iter().zip(cy.remainder()).map(|(&a, &b)| f(a, b)).sum();
    acc.iter().sum::<f64>() + tail
}

/// Batch-norm evaluation mode.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with stored running statistics.
    Infer { running_mean: &'a [T], running_var: &'a [T], eps: f64 },
}

/// Per-channel batch statistics (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Values saved for the batch-norm backward rule.
#[derive(Debug)]
pub(crate) struct BnSaved<T> {
    /// Normalized input, same layout as the input.
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics were used (train mode).
    pub batch: bool,
}

pub(crate) type BnForward<T> = (Vec<T>, BnSaved<T>, Option<BatchStats>);

/// `x` is `[n, c, s]` flattened. Returns `(y, saved, stats)`.
pub(crate) fn bn_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    beta: &[T],
    mode: BnMode<'_, T>,
) -> Result<BnForward<T>, GraphError> {
    let (mean, inv_std, stats) = match mode {
        BnMode::Train { eps } => {
            let m = n * s;
            if m < 2 {
                return Err(GraphError::BatchTooSmall(m));
            }
            let mut mean = vec![0f64; c];
            let mut var = vec![0f64; c];
            for ch in 0..c {
                let mut sum = 0f64;
                for b in 0..n {
                    sum += lane_sum(&x[(b * c + ch) * s..(b * c + ch + 1) * s], |v| v.f64());
                }
                let mu = sum / m as f64;
                let mut sq = 0f64;
                for b in 0..n {
                    sq += lane_sum(&x[(b * c + ch) * s..(b * c + ch + 1) * s], |v| (v.f64() - mu).powi(2));
                }
                mean[ch] = mu;
                var[ch] = sq / m as f64;
            }
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (mean.clone(), inv, Some(BatchStats { mean, var }))
        }
        BnMode::Infer { running_mean, running_var, eps } => {
            let mean = running_mean.iter().map(|v| v.f64()).collect();
            let inv = running_var.iter().map(|v| 1.0 / (v.f64() + eps).sqrt()).collect();
            (mean, inv, None)
        }
    };
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let mu = T::of(mean[ch]);
            let is = T::of(inv_std[ch]);
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            let (gm, bt) = (gamma[ch], beta[ch]);
            for ((h, o), &v) in xhat[range.clone()].iter_mut().zip(&mut y[range.clone()]).zip(&x[range]) {
                *h = (v - mu) * is;
                *o = gm * *h + bt;
            }
        }
    }
    let saved = BnSaved {
        xhat,
        inv_std: inv_std.into_iter().map(T::of).collect(),
        batch: stats.is_some(),
    };
    Ok((y, saved, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(
    dy: &[T],
    saved: &BnSaved<T>,
    gamma: &[T],
    n: usize,
    c: usize,
    s: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    let m = (n * s) as f64;
    for ch in 0..c {
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        for b in 0..n {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            sum_dy += lane_sum(&dy[r.clone()], |v| v.f64());
            sum_dy_xhat += lane_sum2(&dy[r.clone()], &saved.xhat[r], |a, h| a.f64() * h.f64());
        }
        dgamma[ch] = T::of(sum_dy_xhat);
        dbeta[ch] = T::of(sum_dy);
        let g = gamma[ch] * saved.inv_std[ch];
        let (mdy, mdyh) = (T::of(sum_dy / m), T::of(sum_dy_xhat / m));
        for b in 0..n {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            let out = dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&saved.xhat[r]);
            if saved.batch {
                // dx = γ σ⁻¹ (dy - mean(dy) - x̂ mean(dy x̂))
                out.for_each(|((o, &d), &h)| *o = g * (d - mdy - h * mdyh));
            } else {
                out.for_each(|((o, &d), _)| *o = g * d);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2×2×2 max pooling with stride 2 over `[nc, X, Y, Z]`. Returns the pooled
/// values and, per output, the linear input index of the selected maximum
/// (the lowest index wins ties).
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], nc: usize, dims: [usize; 3]) -> (Vec<T>, Vec<usize>) {
    let [dx, dy, dz] = dims;
    let [ox, oy, oz] = dims.map(|d| d / 2);
    let mut out = Vec::with_capacity(nc * ox * oy * oz);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..nc {
        let base = plane * dx * dy * dz;
        for z in 0..oz {
            for y in 0..oy {
                for xo in 0..ox {
                    let mut best = base + 2 * xo + dx * (2 * y + dy * 2 * z);
                    for wz in 0..2 {
                        for wy in 0..2 {
                            for wx in 0..2 {
                                let i = base + (2 * xo + wx) + dx * ((2 * y + wy) + dy * (2 * z + wz));
                                if x[i] > x[best] || (x[i].is_nan() && !x[best].is_nan()) {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// `y[b, o] = Σ_f w[o, f] x[b, f] + bias[o]`.
pub(crate) fn dense_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], n: usize, f: usize, o: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * o);
    for b in 0..n {
        let xb = &x[b * f..(b + 1) * f];
        for j in 0..o {
            let wr = &w[j * f..(j + 1) * f];
            y.push(wr.iter().zip(xb).fold(bias[j], |acc, (&a, &b)| acc + a * b));
        }
    }
    y
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn dense_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    f: usize,
    o: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * f];
    let mut dw = vec![T::zero(); o * f];
    let mut db = vec![T::zero(); o];
    for b in 0..n {
        let xb = &x[b * f..(b + 1) * f];
        let dxb = &mut dx[b * f..(b + 1) * f];
        for j in 0..o {
            let g = dy[b * o + j];
            db[j] += g;
            let wr = &w[j * f..(j + 1) * f];
            let dwr = &mut dw[j * f..(j + 1) * f];
            for i in 0..f {
                dxb[i] += g * wr[i];
                dwr[i] += g * xb[i];
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_tie_takes_lowest_index() {
        let x = vec![1.0f64; 8];
        let (y, arg) = maxpool_forward(&x, 1, [2, 2, 2]);
        assert_eq!(y, vec![1.0]);
        assert_eq!(arg, vec![0]);
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let (y, arg) = maxpool_forward(&x, 1, [2, 2, 2]);
        assert_eq!((y[0], arg[0]), (7.0, 7));
    }

    #[test]
    fn bn_train_normalizes() {
        let x: Vec<f64> = (0..24).map(|i| (i * i % 7) as f64).collect();
        let (y, _, stats) =
            bn_forward(&x, 2, 3, 4, &[1.0; 3], &[0.0; 3], BnMode::Train { eps: 1e-5 }).unwrap();
        assert!(stats.is_some());
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|b| y[(b * 3 + ch) * 4..(b * 3 + ch + 1) * 4].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 8.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(matches!(
            bn_forward(&[1.0f64], 1, 1, 1, &[1.0], &[0.0], BnMode::Train { eps: 1e-5 }),
            Err(GraphError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn dense_identity() {
        let x = vec![1.0f64, -2.0, 3.0];
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(dense_forward(&x, &w, &[0.0; 3], 1, 3, 3), x);
        assert_eq!(dense_forward(&x, &[0.0; 9], &[4.0, 5.0, 6.0], 1, 3, 3), vec![4.0, 5.0, 6.0]);
    }
}
