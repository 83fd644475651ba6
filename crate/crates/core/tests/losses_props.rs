use ctsynth::autodiff::{Graph, Tensor};
use ctsynth::losses::*;
use proptest::prelude::*;

fn value(f: impl FnOnce(&mut Graph<f64>) -> ctsynth::autodiff::Var) -> f64 {
    let mut g = Graph::<f64>::new();
    let v = f(&mut g);
    g.scalar(v)
}

/// Brute-force gradient difference loss over `[N,1,X,Y,Z]` data.
fn gdl_oracle(a: &[f64], b: &[f64], n: usize, d: [usize; 3]) -> f64 {
    let at = |v: &[f64], s: usize, x: usize, y: usize, z: usize| v[s * d[0] * d[1] * d[2] + x + d[0] * (y + d[1] * z)];
    let mut total = 0.0;
    for s in 0..n {
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let here = |v: &[f64]| at(v, s, x, y, z);
                    let steps = [(x + 1 < d[0]).then(|| (x + 1, y, z)), (y + 1 < d[1]).then(|| (x, y + 1, z)), (z + 1 < d[2]).then(|| (x, y, z + 1))];
                    for (nx, ny, nz) in steps.into_iter().flatten() {
                        let ga = (at(a, s, nx, ny, nz) - here(a)).abs();
                        let gb = (at(b, s, nx, ny, nz) - here(b)).abs();
                        total += (gb - ga).powi(2);
                    }
                }
            }
        }
    }
    total / n as f64
}

fn arb_pair() -> impl Strategy<Value = (usize, [usize; 3], Vec<f64>, Vec<f64>)> {
    (1usize..3, 2usize..5, 2usize..5, 2usize..5).prop_flat_map(|(n, x, y, z)| {
        let len = n * x * y * z;
        (Just(n), Just([x, y, z]), prop::collection::vec(-5f64..5.0, len), prop::collection::vec(-5f64..5.0, len))
    })
}

fn tensor(n: usize, d: [usize; 3], v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![n, 1, d[0], d[1], d[2]], v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gdl_matches_brute_force((n, d, a, b) in arb_pair()) {
        let got = value(|g| {
            let (ya, yb) = (g.constant(tensor(n, d, &a)), g.constant(tensor(n, d, &b)));
            gdl(g, ya, yb).unwrap()
        });
        let want = gdl_oracle(&a, &b, n, d);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn gdl_is_zero_on_self_and_sign_invariant((n, d, a, b) in arb_pair()) {
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let (same, orig, flipped) = (
            value(|g| { let y = g.constant(tensor(n, d, &a)); gdl(g, y, y).unwrap() }),
            value(|g| { let (x, y) = (g.constant(tensor(n, d, &a)), g.constant(tensor(n, d, &b))); gdl(g, x, y).unwrap() }),
            value(|g| { let (x, y) = (g.constant(tensor(n, d, &neg)), g.constant(tensor(n, d, &b))); gdl(g, x, y).unwrap() }),
        );
        prop_assert_eq!(same, 0.0);
        prop_assert!(orig >= 0.0);
        prop_assert!((orig - flipped).abs() <= 1e-12 * orig.max(1.0));
    }

    #[test]
    fn weight_selection_isolates_terms((n, d, a, b) in arb_pair(), p in 0.01f64..0.99) {
        let run = |w: LossWeights| {
            let mut g = Graph::<f64>::new();
            let (yh, y) = (g.constant(tensor(n, d, &a)), g.constant(tensor(n, d, &b)));
            let df = g.constant(Tensor::full(vec![n, 1], p));
            let (t, parts) = generator_loss(&mut g, df, yh, y, &w).unwrap();
            let plain_l2 = l2(&mut g, yh, y).unwrap();
            let plain_gdl = gdl(&mut g, yh, y).unwrap();
            (g.scalar(t), parts, g.scalar(plain_l2), g.scalar(plain_gdl))
        };
        let (t, _, l, _) = run(LossWeights::new(0.0, 1.0, 0.0).unwrap());
        prop_assert_eq!(t, l);
        let (t, _, _, gd) = run(LossWeights::new(0.0, 0.0, 1.0).unwrap());
        prop_assert_eq!(t, gd);
        let (t, parts, _, _) = run(LossWeights::default());
        prop_assert!(t >= 0.0 && parts.adv >= 0.0 && parts.l2 >= 0.0 && parts.gdl >= 0.0);
    }

    #[test]
    fn bce_is_monotone_toward_labels(p in prop::collection::vec(0.0f64..1.0, 1..8), step in 0.0f64..1.0, seed in any::<u64>()) {
        let labels: Vec<f64> = (0..p.len()).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
        let closer: Vec<f64> = p.iter().zip(&labels).map(|(&q, &y)| q + step * (y - q)).collect();
        let eval = |v: &[f64]| value(|g| {
            let x = g.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap());
            bce(g, x, &labels).unwrap()
        });
        let (before, after) = (eval(&p), eval(&closer));
        prop_assert!(after <= before + 1e-12);
        prop_assert!(before >= 0.0);
        prop_assert!(eval(&labels) <= 1e-6);
    }
}

#[test]
fn reference_values() {
    let bce_half = value(|g| {
        let x = g.constant(Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap());
        bce(g, x, &[0.0, 1.0]).unwrap()
    });
    assert!((bce_half - std::f64::consts::LN_2).abs() <= 1e-6);
    let worst = value(|g| {
        let r = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let f = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        discriminator_loss(g, r, f).unwrap()
    });
    assert!((worst - 2.0 * -(BCE_EPS.ln())).abs() < 1e-6);
    let shifted = value(|g| {
        let y = g.constant(Tensor::full(vec![1, 1, 2, 2, 2], 1.0));
        let yh = g.constant(Tensor::full(vec![1, 1, 2, 2, 2], 1.5));
        let d = g.constant(Tensor::full(vec![1, 1], 0.3));
        generator_loss(g, d, yh, y, &LossWeights::new(0.0, 1.0, 0.0).unwrap()).unwrap().0
    });
    assert!((shifted - 2.0).abs() < 1e-12);
}
