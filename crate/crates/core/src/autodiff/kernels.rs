//! Frame-based correlation kernels behind `conv3d`.
//!
//! A valid 3D correlation of a `[cin, X, Y, Z]` input with a `[cout, cin, k³]`
//! kernel is computed on the input's own flattened index space: output
//! position `(ox, oy, oz)` lives at frame index `p = ox + X * (oy + Y * oz)`
//! and tap `t = (kx, ky, kz)` reads input index `p + offs[t]` with
//! `offs[t] = kx + X * (ky + Y * kz)`. Every output row is then a contiguous
//! sum of shifted input rows, which vectorizes without an im2col buffer.
//! Frame positions that do not correspond to a valid output are computed
//! and discarded by the caller.

use super::Scalar;

/// `out[co * plen + p] = Σ_ci Σ_t w[(co * cin + ci) * taps + t] * x[ci * xlen + p + offs[t]]`
#[allow(clippy::too_many_arguments)]
pub fn corr_frame_generic<T: Scalar>(
    x: &[T],
    xlen: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    offs: &[usize],
    plen: usize,
    out: &mut [T],
) {
    let taps = offs.len();
    debug_assert!(out.len() >= cout * plen);
    debug_assert!(w.len() >= cout * cin * taps);
    for co in 0..cout {
        let row = &mut out[co * plen..(co + 1) * plen];
        row.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..cin {
            let xc = &x[ci * xlen..(ci + 1) * xlen];
            for (t, &off) in offs.iter().enumerate() {
                let wv = w[(co * cin + ci) * taps + t];
                if wv == T::zero() {
                    continue;
                }
                for (o, &xv) in row.iter_mut().zip(&xc[off..off + plen]) {
                    *o += wv * xv;
                }
            }
        }
    }
}

/// `dw[(co * cin + ci) * taps + t] = Σ_p dy[co * plen + p] * x[ci * xlen + p + offs[t]]`
#[allow(clippy::too_many_arguments)]
pub fn corr_wgrad_frame_generic<T: Scalar>(
    x: &[T],
    xlen: usize,
    cin: usize,
    dy: &[T],
    cout: usize,
    offs: &[usize],
    plen: usize,
    dw: &mut [T],
) {
    let taps = offs.len();
    for co in 0..cout {
        let g = &dy[co * plen..(co + 1) * plen];
        for ci in 0..cin {
            let xc = &x[ci * xlen..(ci + 1) * xlen];
            for (t, &off) in offs.iter().enumerate() {
                let s = g
                    .iter()
                    .zip(&xc[off..off + plen])
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                dw[(co * cin + ci) * taps + t] = s;
            }
        }
    }
}

/// Instruction set used by the f32 kernels on this machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimdLevel {
    Scalar,
    Avx2,
    Avx512,
}

pub fn simd_level() -> SimdLevel {
    #[cfg(target_arch = "x86_64")]
    {
        static LEVEL: std::sync::OnceLock<SimdLevel> = std::sync::OnceLock::new();
        *LEVEL.get_or_init(|| {
            if std::env::var_os("CTSYNTH_NO_SIMD").is_some() {
                SimdLevel::Scalar
            } else if is_x86_feature_detected!("avx512f") {
                SimdLevel::Avx512
            } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                SimdLevel::Avx2
            } else {
                SimdLevel::Scalar
            }
        })
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        SimdLevel::Scalar
    }
}

/// Frame positions processed per SIMD block.
fn block_len(level: SimdLevel) -> usize {
    match level {
        SimdLevel::Avx512 => 48,
        SimdLevel::Avx2 => 24,
        SimdLevel::Scalar => 1,
    }
}

/// Copies `channels` rows of `len` values (stride `stride`) into rows of
/// `new_stride`, zero-filling the slack.
fn restride(x: &[f32], channels: usize, stride: usize, len: usize, new_stride: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; channels * new_stride];
    for c in 0..channels {
        out[c * new_stride..c * new_stride + len].copy_from_slice(&x[c * stride..c * stride + len]);
    }
    out
}

/// Widths for running `plen` positions as whole SIMD blocks: the rounded
/// frame length and the zero-extended input channel stride.
fn padded_frame(level: SimdLevel, xlen: usize, offs: &[usize], plen: usize) -> (usize, usize) {
    let pr = plen.div_ceil(block_len(level)) * block_len(level);
    let max_off = offs.iter().copied().max().unwrap_or(0);
    (pr, xlen.max(max_off + pr))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn corr_frame_f32(
    x: &[f32],
    xlen: usize,
    cin: usize,
    w: &[f32],
    cout: usize,
    offs: &[usize],
    plen: usize,
    out: &mut [f32],
) {
    assert!(x.len() >= cin * xlen && out.len() >= cout * plen);
    assert!(offs.iter().all(|&o| o + plen <= xlen));
    let level = simd_level();
    if level == SimdLevel::Scalar {
        return corr_frame_generic(x, xlen, cin, w, cout, offs, plen, out);
    }
    let (pr, stride) = padded_frame(level, xlen, offs, plen);
    let xs = if stride == xlen { None } else { Some(restride(x, cin, xlen, xlen, stride)) };
    let xs = xs.as_deref().unwrap_or(x);
    let mut wide = if pr == plen { None } else { Some(vec![0.0f32; cout * pr]) };
    let dst = wide.as_deref_mut().unwrap_or(&mut out[..cout * plen]);
    match level {
        #[cfg(target_arch = "x86_64")]
        SimdLevel::Avx512 => unsafe { x86::corr_frame_avx512(xs, stride, cin, w, cout, offs, pr, dst) },
        #[cfg(target_arch = "x86_64")]
        SimdLevel::Avx2 => unsafe { x86::corr_frame_avx2(xs, stride, cin, w, cout, offs, pr, dst) },
        _ => unreachable!("scalar level handled above"),
    }
    if let Some(wide) = wide {
        for co in 0..cout {
            out[co * plen..(co + 1) * plen].copy_from_slice(&wide[co * pr..co * pr + plen]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn corr_wgrad_frame_f32(
    x: &[f32],
    xlen: usize,
    cin: usize,
    dy: &[f32],
    cout: usize,
    offs: &[usize],
    plen: usize,
    dw: &mut [f32],
) {
    assert!(x.len() >= cin * xlen && dy.len() >= cout * plen);
    assert!(offs.iter().all(|&o| o + plen <= xlen));
    assert!(dw.len() >= cout * cin * offs.len());
    let level = simd_level();
    if level == SimdLevel::Scalar {
        return corr_wgrad_frame_generic(x, xlen, cin, dy, cout, offs, plen, dw);
    }
    // zero-extended dy rows contribute nothing, so the padded sums are exact
    let (pr, stride) = padded_frame(level, xlen, offs, plen);
    let xs = if stride == xlen { None } else { Some(restride(x, cin, xlen, xlen, stride)) };
    let xs = xs.as_deref().unwrap_or(x);
    let ds = if pr == plen { None } else { Some(restride(dy, cout, plen, plen, pr)) };
    let ds = ds.as_deref().unwrap_or(dy);
    match level {
        #[cfg(target_arch = "x86_64")]
        SimdLevel::Avx512 => unsafe { x86::corr_wgrad_avx512(xs, stride, cin, ds, cout, offs, pr, dw) },
        #[cfg(target_arch = "x86_64")]
        SimdLevel::Avx2 => unsafe { x86::corr_wgrad_avx2(xs, stride, cin, ds, cout, offs, pr, dw) },
        _ => unreachable!("scalar level handled above"),
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    /// Packs `w[co][ci][t]` into `[block][ci][t][cb]`, zero-filling the
    /// channels of a partial last block.
    fn pack_weights(w: &[f32], cout: usize, cin: usize, taps: usize, cb: usize) -> Vec<f32> {
        let blocks = cout.div_ceil(cb);
        let mut wp = vec![0.0f32; blocks * cin * taps * cb];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..taps {
                    wp[((co / cb * cin + ci) * taps + t) * cb + co % cb] = w[(co * cin + ci) * taps + t];
                }
            }
        }
        wp
    }

    /// Scalar tail for frame positions `p0..plen`.
    #[allow(clippy::too_many_arguments)]
    fn corr_tail(
        x: &[f32],
        xlen: usize,
        cin: usize,
        w: &[f32],
        cout: usize,
        offs: &[usize],
        p0: usize,
        plen: usize,
        out: &mut [f32],
    ) {
        let taps = offs.len();
        for co in 0..cout {
            for p in p0..plen {
                let mut s = 0.0f32;
                for ci in 0..cin {
                    for (t, &off) in offs.iter().enumerate() {
                        s += w[(co * cin + ci) * taps + t] * x[ci * xlen + p + off];
                    }
                }
                out[co * plen + p] = s;
            }
        }
    }

    macro_rules! corr_frame_impl {
        ($name:ident, $feat:literal, $vec:ty, $lanes:expr, $cb:expr, $nv:expr,
         $zero:ident, $load:ident, $set1:ident, $fmadd:ident, $store:ident) => {
            #[target_feature(enable = $feat)]
            #[allow(clippy::too_many_arguments)]
            pub(super) unsafe fn $name(
                x: &[f32],
                xlen: usize,
                cin: usize,
                w: &[f32],
                cout: usize,
                offs: &[usize],
                plen: usize,
                out: &mut [f32],
            ) {
                const CB: usize = $cb;
                const NV: usize = $nv;
                const PB: usize = $lanes * NV;
                let taps = offs.len();
                let wp = pack_weights(w, cout, cin, taps, CB);
                let full = plen / PB * PB;
                let xp = x.as_ptr();
                let op = offs.as_ptr();
                let mut local = [0.0f32; CB * PB];
                for block in 0..cout.div_ceil(CB) {
                    let wb = wp.as_ptr().add(block * cin * taps * CB);
                    let rows = CB.min(cout - block * CB);
                    let mut p0 = 0;
                    while p0 < full {
                        let mut acc: [[$vec; NV]; CB] = [[$zero(); NV]; CB];
                        for ci in 0..cin {
                            let xc = xp.add(ci * xlen + p0);
                            let wc = wb.add(ci * taps * CB);
                            for t in 0..taps {
                                let src = xc.add(*op.add(t));
                                let mut xv: [$vec; NV] = [$zero(); NV];
                                for v in 0..NV {
                                    xv[v] = $load(src.add(v * $lanes));
                                }
                                let wt = wc.add(t * CB);
                                for c in 0..CB {
                                    let wv = $set1(*wt.add(c));
                                    for v in 0..NV {
                                        acc[c][v] = $fmadd(wv, xv[v], acc[c][v]);
                                    }
                                }
                            }
                        }
                        for c in 0..CB {
                            for v in 0..NV {
                                $store(local.as_mut_ptr().add(c * PB + v * $lanes), acc[c][v]);
                            }
                        }
                        for c in 0..rows {
                            let co = block * CB + c;
                            out[co * plen + p0..co * plen + p0 + PB]
                                .copy_from_slice(&local[c * PB..(c + 1) * PB]);
                        }
                        p0 += PB;
                    }
                }
                corr_tail(x, xlen, cin, w, cout, offs, full, plen, out);
            }
        };
    }

    corr_frame_impl!(
        corr_frame_avx512, "avx512f", __m512, 16, 8, 3,
        _mm512_setzero_ps, _mm512_loadu_ps, _mm512_set1_ps, _mm512_fmadd_ps, _mm512_storeu_ps
    );
    corr_frame_impl!(
        corr_frame_avx2, "avx2,fma", __m256, 8, 4, 3,
        _mm256_setzero_ps, _mm256_loadu_ps, _mm256_set1_ps, _mm256_fmadd_ps, _mm256_storeu_ps
    );

    /// Frame positions per cache block of the weight-gradient sweep.
    const WGRAD_CHUNK: usize = 512;

    macro_rules! corr_wgrad_impl {
        ($name:ident, $block:ident, $feat:literal, $vec:ty, $lanes:expr, $wide:literal,
         $zero:ident, $load:ident, $fmadd:ident, $store:ident) => {
            /// Accumulates dot products for 4 output channels against `TB`
            /// taps of one input channel over positions `p0..p1` into `acc`.
            #[target_feature(enable = $feat)]
            #[allow(clippy::too_many_arguments)]
            unsafe fn $block<const TB: usize>(
                xc: *const f32,
                dy: *const f32,
                plen: usize,
                offs: *const usize,
                p0: usize,
                p1: usize,
                acc: *mut $vec,
                acc_stride: usize,
            ) {
                const CB: usize = 4;
                let mut a: [[$vec; TB]; CB] = [[$zero(); TB]; CB];
                for c in 0..CB {
                    for t in 0..TB {
                        a[c][t] = *acc.add(c * acc_stride + t);
                    }
                }
                let o: [usize; TB] = std::array::from_fn(|t| *offs.add(t));
                let mut p = p0;
                while p < p1 {
                    let mut g: [$vec; CB] = [$zero(); CB];
                    for c in 0..CB {
                        g[c] = $load(dy.add(c * plen + p));
                    }
                    for t in 0..TB {
                        let xv = $load(xc.add(p + o[t]));
                        for c in 0..CB {
                            a[c][t] = $fmadd(g[c], xv, a[c][t]);
                        }
                    }
                    p += $lanes;
                }
                for c in 0..CB {
                    for t in 0..TB {
                        *acc.add(c * acc_stride + t) = a[c][t];
                    }
                }
            }

            #[target_feature(enable = $feat)]
            #[allow(clippy::too_many_arguments)]
            pub(super) unsafe fn $name(
                x: &[f32],
                xlen: usize,
                cin: usize,
                dy: &[f32],
                cout: usize,
                offs: &[usize],
                plen: usize,
                dw: &mut [f32],
            ) {
                let taps = offs.len();
                let full = plen / $lanes * $lanes;
                let blocks = cout / 4;
                let mut acc: Vec<$vec> = vec![$zero(); blocks * 4 * taps];
                let mut lanes = [0.0f32; $lanes];
                for ci in 0..cin {
                    let xc = &x[ci * xlen..(ci + 1) * xlen];
                    acc.iter_mut().for_each(|v| *v = $zero());
                    let mut p0 = 0;
                    while p0 < full {
                        let p1 = (p0 + WGRAD_CHUNK).min(full);
                        for block in 0..blocks {
                            let g = dy.as_ptr().add(block * 4 * plen);
                            let ab = acc.as_mut_ptr().add(block * 4 * taps);
                            let mut t0 = 0;
                            while t0 < taps {
                                let (o, at) = (offs.as_ptr().add(t0), ab.add(t0));
                                if taps - t0 >= $wide {
                                    $block::<$wide>(xc.as_ptr(), g, plen, o, p0, p1, at, taps);
                                    t0 += $wide;
                                } else if taps - t0 >= 3 {
                                    $block::<3>(xc.as_ptr(), g, plen, o, p0, p1, at, taps);
                                    t0 += 3;
                                } else {
                                    $block::<1>(xc.as_ptr(), g, plen, o, p0, p1, at, taps);
                                    t0 += 1;
                                }
                            }
                        }
                        p0 = p1;
                    }
                    for co in 0..blocks * 4 {
                        let grow = &dy[co * plen..(co + 1) * plen];
                        for (t, &off) in offs.iter().enumerate() {
                            $store(lanes.as_mut_ptr(), acc[co * taps + t]);
                            let mut s: f32 = lanes.iter().sum();
                            for p in full..plen {
                                s += grow[p] * xc[p + off];
                            }
                            dw[(co * cin + ci) * taps + t] = s;
                        }
                    }
                    for co in blocks * 4..cout {
                        let grow = &dy[co * plen..(co + 1) * plen];
                        for (t, &off) in offs.iter().enumerate() {
                            let s: f32 = grow.iter().zip(&xc[off..off + plen]).map(|(a, b)| a * b).sum();
                            dw[(co * cin + ci) * taps + t] = s;
                        }
                    }
                }
            }
        };
    }

    corr_wgrad_impl!(
        corr_wgrad_avx512, wgrad_block_avx512, "avx512f", __m512, 16, 6,
        _mm512_setzero_ps, _mm512_loadu_ps, _mm512_fmadd_ps, _mm512_storeu_ps
    );
    corr_wgrad_impl!(
        corr_wgrad_avx2, wgrad_block_avx2, "avx2,fma", __m256, 8, 3,
        _mm256_setzero_ps, _mm256_loadu_ps, _mm256_fmadd_ps, _mm256_storeu_ps
    );
}
