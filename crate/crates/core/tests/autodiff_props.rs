#![allow(clippy::needless_range_loop)]

use ctsynth::autodiff::{adam_step, AdamConfig, Graph, Padding, Parameter, Tensor};
use ctsynth::selfcheck::{run_case, CASES};
use proptest::prelude::*;

#[test]
fn gradient_suite_holds_across_seeds() {
    for &case in CASES {
        let seeds = if case == "composite" { 0..3 } else { 0..20 };
        for seed in seeds {
            let r = run_case(case, seed, None).unwrap();
            assert!(r.report.passed(), "{case} seed {seed}: {:?}", r.report);
            assert!(r.report.checked > 0, "{case} seed {seed} checked nothing");
        }
    }
}

/// Direct nested-loop cross-correlation, `[N,Cin,X,Y,Z]` by
/// `[Cout,Cin,k,k,k]` with zero padding `pad`.
fn conv_oracle(x: &[f64], xs: [usize; 5], w: &[f64], cout: usize, k: usize, pad: usize, b: &[f64]) -> Vec<f64> {
    let [n, cin, dx, dy, dz] = xs;
    let o = [dx + 2 * pad + 1 - k, dy + 2 * pad + 1 - k, dz + 2 * pad + 1 - k];
    let mut out = Vec::with_capacity(n * cout * o.iter().product::<usize>());
    for s in 0..n {
        for co in 0..cout {
            for z in 0..o[2] {
                for y in 0..o[1] {
                    for xo in 0..o[0] {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (ix, iy, iz) = (xo + kx, y + ky, z + kz);
                                        if ix < pad || iy < pad || iz < pad || ix >= dx + pad || iy >= dy + pad || iz >= dz + pad {
                                            continue;
                                        }
                                        let xi = (((s * cin + ci) * dz + iz - pad) * dy + iy - pad) * dx + ix - pad;
                                        let wi = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

fn conv(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], b: &[f64], padding: Padding) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::new(xs.to_vec(), x.to_vec()).unwrap());
    let wv = g.constant(Tensor::new(ws.to_vec(), w.to_vec()).unwrap());
    let bv = g.constant(Tensor::new(vec![ws[0]], b.to_vec()).unwrap());
    let y = g.conv3d(xv, wv, bv, padding).unwrap();
    g.value(y).data().to_vec()
}

#[derive(Debug, Clone)]
struct ConvCase {
    xs: [usize; 5],
    ws: [usize; 5],
    same: bool,
    x1: Vec<f64>,
    x2: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
}

fn arb_conv() -> impl Strategy<Value = ConvCase> {
    (1usize..3, 1usize..4, 1usize..4, prop::sample::select(vec![1usize, 3, 5]), any::<bool>(), prop::array::uniform3(0usize..4))
        .prop_flat_map(|(n, cin, cout, k, same, extra)| {
            let xs = [n, cin, k + extra[0], k + extra[1], k + extra[2]];
            let ws = [cout, cin, k, k, k];
            let xl: usize = xs.iter().product();
            let wl: usize = ws.iter().product();
            (
                Just((xs, ws, same)),
                prop::collection::vec(-1f64..1.0, xl),
                prop::collection::vec(-1f64..1.0, xl),
                prop::collection::vec(-1f64..1.0, wl),
                prop::collection::vec(-1f64..1.0, cout),
            )
        })
        .prop_map(|((xs, ws, same), x1, x2, w, b)| ConvCase { xs, ws, same, x1, x2, w, b })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(c in arb_conv()) {
        let (pad, padding) = if c.same { ((c.ws[2] - 1) / 2, Padding::Same) } else { (0, Padding::Valid) };
        let got = conv(&c.x1, c.xs, &c.w, c.ws, &c.b, padding);
        let want = conv_oracle(&c.x1, c.xs, &c.w, c.ws[0], c.ws[2], pad, &c.b);
        prop_assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn conv_is_linear_in_its_input(c in arb_conv(), alpha in -2f64..2.0, beta in -2f64..2.0) {
        let padding = if c.same { Padding::Same } else { Padding::Valid };
        let zero = vec![0.0; c.b.len()];
        let mix: Vec<f64> = c.x1.iter().zip(&c.x2).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = conv(&mix, c.xs, &c.w, c.ws, &zero, padding);
        let y1 = conv(&c.x1, c.xs, &c.w, c.ws, &zero, padding);
        let y2 = conv(&c.x2, c.xs, &c.w, c.ws, &zero, padding);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (alpha * y1[i] + beta * y2[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn adam_matches_closed_form(g1 in -10f64..10.0, g2 in -10f64..10.0, lr in 1e-6f64..1e-2) {
        prop_assume!(g1.abs() > 1e-3);
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let mut p = Parameter::new("w", Tensor::scalar(1.0f64));
        p.accumulate_grad(&[g1]).unwrap();
        adam_step([&mut p], &cfg).unwrap();
        // a single step moves by lr / (1 + eps / |g|) against the gradient
        let first = 1.0 - lr * g1.signum() * g1.abs() / (g1.abs() + cfg.eps);
        prop_assert!((p.value().data()[0] - first).abs() <= 1e-15);
        p.accumulate_grad(&[g2]).unwrap();
        adam_step([&mut p], &cfg).unwrap();
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let m = b1 * (1.0 - b1) * g1 + (1.0 - b1) * g2;
        let v = b2 * (1.0 - b2) * g1 * g1 + (1.0 - b2) * g2 * g2;
        let second = first - lr * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + cfg.eps);
        prop_assert!((p.value().data()[0] - second).abs() <= 1e-12);
        prop_assert_eq!(p.step(), 2);
    }

    #[test]
    fn gradients_accumulate_over_uses_and_calls(x in prop::collection::vec(-3f64..3.0, 4), y in prop::collection::vec(-3f64..3.0, 4)) {
        let mut p = Parameter::new("w", Tensor::new(vec![4], vec![0.5; 4]).unwrap());
        let mut g = Graph::<f64>::new();
        let a = g.param(&p);
        let b = g.param(&p);
        let xv = g.constant(Tensor::new(vec![4], x.clone()).unwrap());
        let yv = g.constant(Tensor::new(vec![4], y.clone()).unwrap());
        let ax = g.mul(a, xv).unwrap();
        let by = g.mul(b, yv).unwrap();
        let s = g.add(ax, by).unwrap();
        let root = g.sum(s).unwrap();
        let grads = g.backward(root).unwrap().param_grads();
        let gw = &grads["w"];
        for i in 0..4 {
            prop_assert!((gw[i] - (x[i] + y[i])).abs() <= 1e-12);
        }
        p.accumulate_grad(gw).unwrap();
        p.accumulate_grad(gw).unwrap();
        for i in 0..4 {
            prop_assert!((p.grad().unwrap()[i] - 2.0 * gw[i]).abs() <= 1e-12);
        }
    }
}
