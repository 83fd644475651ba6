//! Stride-1 3D cross-correlation on single samples.

use super::{GraphError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; each spatial axis shrinks by `k - 1`.
    Valid,
    /// Zero padding of `(k - 1) / 2`; spatial dims are preserved. Odd `k` only.
    Same,
}

impl Padding {
    pub(crate) fn amount(self, k: usize) -> Result<usize, GraphError> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same if k % 2 == 1 => Ok((k - 1) / 2),
            Padding::Same => Err(GraphError::EvenKernel(k)),
        }
    }
}

/// Geometry of a stride-1 correlation with symmetric zero padding.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, pad: usize, in_dims: [usize; 3]) -> Result<Self, GraphError> {
        for &d in &in_dims {
            if d + 2 * pad < k {
                return Err(GraphError::KernelTooLarge { kernel: k, extent: d + 2 * pad });
            }
        }
        Ok(Self { cin, cout, k, pad, in_dims })
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        self.in_dims.map(|d| d + 2 * self.pad)
    }

    pub fn out_dims(&self) -> [usize; 3] {
        self.padded_dims().map(|d| d + 1 - self.k)
    }

    pub fn taps(&self) -> usize {
        self.k.pow(3)
    }

    fn offsets(&self) -> Vec<usize> {
        let [px, py, _] = self.padded_dims();
        let k = self.k;
        let mut offs = Vec::with_capacity(self.taps());
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    offs.push(kx + px * (ky + py * kz));
                }
            }
        }
        offs
    }

    /// Number of frame positions spanning every valid output.
    fn frame_len(&self) -> usize {
        let [px, py, _] = self.padded_dims();
        let [ox, oy, oz] = self.out_dims();
        (ox - 1) + px * ((oy - 1) + py * (oz - 1)) + 1
    }
}

/// Copies `x` (`channels` blocks of `dims`) into a zero border of width `pad`.
pub(crate) fn pad_input<T: Scalar>(x: &[T], channels: usize, dims: [usize; 3], pad: usize) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let [dx, dy, dz] = dims;
    let [px, py, pz] = dims.map(|d| d + 2 * pad);
    let mut out = vec![T::zero(); channels * px * py * pz];
    for c in 0..channels {
        for z in 0..dz {
            for y in 0..dy {
                let src = c * dx * dy * dz + dx * (y + dy * z);
                let dst = c * px * py * pz + pad + px * ((y + pad) + py * (z + pad));
                out[dst..dst + dx].copy_from_slice(&x[src..src + dx]);
            }
        }
    }
    out
}

/// Forward correlation of one sample. `w` is `[cout, cin, k, k, k]`
/// (`kx` fastest), `bias` is `[cout]`.
pub(crate) fn forward_sample<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let xp = pad_input(x, geom.cin, geom.in_dims, geom.pad);
    let pd = geom.padded_dims();
    let xlen = pd.iter().product::<usize>();
    let offs = geom.offsets();
    let plen = geom.frame_len();
    let mut frame = vec![T::zero(); geom.cout * plen];
    T::corr_frame(&xp, xlen, geom.cin, w, geom.cout, &offs, plen, &mut frame);

    let [ox, oy, oz] = geom.out_dims();
    let mut out = Vec::with_capacity(geom.cout * ox * oy * oz);
    for co in 0..geom.cout {
        let b = bias.map_or(T::zero(), |b| b[co]);
        let row = &frame[co * plen..(co + 1) * plen];
        for z in 0..oz {
            for y in 0..oy {
                let start = pd[0] * (y + pd[1] * z);
                out.extend(row[start..start + ox].iter().map(|&v| v + b));
            }
        }
    }
    out
}

/// Gradients of one sample: `(dx, dw, dbias)`; `dx` only when requested.
pub(crate) fn backward_sample<T: Scalar>(
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let [ox, oy, oz] = geom.out_dims();
    let ovox = ox * oy * oz;
    let dbias: Vec<T> = (0..geom.cout).map(|c| dy[c * ovox..(c + 1) * ovox].iter().copied().sum()).collect();

    let dw = want_dw.then(|| {
        let xp = pad_input(x, geom.cin, geom.in_dims, geom.pad);
        let pd = geom.padded_dims();
        let xlen = pd.iter().product::<usize>();
        let plen = geom.frame_len();
        let mut frame = vec![T::zero(); geom.cout * plen];
        for co in 0..geom.cout {
            let mut src = dy[co * ovox..(co + 1) * ovox].iter();
            for z in 0..oz {
                for y in 0..oy {
                    let start = co * plen + pd[0] * (y + pd[1] * z);
                    for v in &mut frame[start..start + ox] {
                        *v = *src.next().unwrap();
                    }
                }
            }
        }
        let mut dw = vec![T::zero(); geom.cout * geom.cin * geom.taps()];
        T::corr_wgrad_frame(&xp, xlen, geom.cin, &frame, geom.cout, &geom.offsets(), plen, &mut dw);
        dw
    });

    // dx is the valid correlation of dy, padded by k - 1 - pad, with the
    // channel-transposed and spatially flipped kernel.
    let dx = want_dx.then(|| {
        let taps = geom.taps();
        let mut wt = vec![T::zero(); w.len()];
        for co in 0..geom.cout {
            for ci in 0..geom.cin {
                for t in 0..taps {
                    wt[(ci * geom.cout + co) * taps + (taps - 1 - t)] = w[(co * geom.cin + ci) * taps + t];
                }
            }
        }
        let back = ConvGeom {
            cin: geom.cout,
            cout: geom.cin,
            k: geom.k,
            pad: geom.k - 1 - geom.pad,
            in_dims: geom.out_dims(),
        };
        forward_sample(&back, dy, &wt, None)
    });
    (dx, dw, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop correlation.
    fn naive(geom: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let [ix, iy, iz] = geom.in_dims;
        let [ox, oy, oz] = geom.out_dims();
        let k = geom.k;
        let p = geom.pad as isize;
        let mut out = vec![0.0; geom.cout * ox * oy * oz];
        for co in 0..geom.cout {
            for z in 0..oz {
                for y in 0..oy {
                    for xo in 0..ox {
                        let mut s = 0.0;
                        for ci in 0..geom.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let sx = xo as isize + kx as isize - p;
                                        let sy = y as isize + ky as isize - p;
                                        let sz = z as isize + kz as isize - p;
                                        if sx < 0 || sy < 0 || sz < 0 {
                                            continue;
                                        }
                                        let (sx, sy, sz) = (sx as usize, sy as usize, sz as usize);
                                        if sx >= ix || sy >= iy || sz >= iz {
                                            continue;
                                        }
                                        let wi = (co * geom.cin + ci) * k * k * k + kx + k * (ky + k * kz);
                                        s += w[wi] * x[ci * ix * iy * iz + sx + ix * (sy + iy * sz)];
                                    }
                                }
                            }
                        }
                        out[co * ox * oy * oz + xo + ox * (y + oy * z)] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        let mut seed = 1u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for &(cin, cout, k, pad, dims) in &[
            (2usize, 3usize, 3usize, 0usize, [6usize, 5usize, 7usize]),
            (1, 2, 5, 2, [4, 4, 4]),
            (3, 1, 1, 0, [3, 2, 4]),
            (2, 2, 3, 1, [2, 3, 2]),
        ] {
            let geom = ConvGeom::new(cin, cout, k, pad, dims).unwrap();
            let x: Vec<f64> = (0..cin * dims.iter().product::<usize>()).map(|_| next()).collect();
            let w: Vec<f64> = (0..cout * cin * k * k * k).map(|_| next()).collect();
            let a = forward_sample(&geom, &x, &w, None);
            let b = naive(&geom, &x, &w);
            assert_eq!(a.len(), b.len());
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_oversized_kernel() {
        assert!(matches!(
            ConvGeom::new(1, 1, 5, 0, [4, 8, 8]),
            Err(GraphError::KernelTooLarge { .. })
        ));
        assert!(matches!(Padding::Same.amount(4), Err(GraphError::EvenKernel(4))));
    }
}
