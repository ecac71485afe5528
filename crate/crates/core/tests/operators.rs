use pgdag_core::graph::{ActionKind, DType};
use pgdag_core::ops::{clip, eval_primitive, squashing, sum_and_discount, OpId};
use pgdag_core::Value;
use proptest::prelude::*;

/// O(l^2) definition: `v'_i = sum_{k >= i} b^(k-i) v_k`.
fn discount_brute(v: &[f64], b: f64) -> Vec<f64> {
    (0..v.len()).map(|i| (i..v.len()).map(|k| b.powi((k - i) as i32) * v[k]).sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn sum_and_discount_matches_brute_force(
        v in prop::collection::vec(-1.0f64..1.0, 0..=256),
        b in 0.0f64..=1.0,
    ) {
        let fast = sum_and_discount(&v, b);
        let slow = discount_brute(&v, b);
        for (x, y) in fast.iter().zip(&slow) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn clip_bounds_and_idempotence(x in -1e6f64..1e6, lo in -10.0f64..10.0, w in 0.0f64..10.0) {
        let hi = lo + w;
        let c = clip(x, lo, hi).unwrap();
        prop_assert!(lo <= c && c <= hi);
        prop_assert_eq!(clip(c, lo, hi).unwrap(), c);
        if (lo..=hi).contains(&x) {
            prop_assert_eq!(c, x);
        }
    }

    #[test]
    fn clip_rejects_inverted_bounds(x in -1.0f64..1.0, lo in -1.0f64..1.0, w in 1e-6f64..1.0) {
        prop_assert!(clip(x, lo + w, lo).is_err());
    }

    #[test]
    fn squashing_stays_open_interval(mu in -5.0f64..5.0, ls in -3.0f64..1.0, xi in -4.0f64..4.0) {
        let a = squashing(&[mu], &[ls], &[xi])[0];
        let u = mu + ls.exp() * xi;
        prop_assert!(a.abs() <= 1.0);
        // tanh only rounds to +-1 in f64 beyond |u| ~ 19
        if u.abs() < 18.0 {
            prop_assert!(a > -1.0 && a < 1.0, "{u} -> {a}");
        }
    }

    #[test]
    fn categorical_probabilities_sum_to_one(logits in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let n = logits.len();
        let head = Value::new(DType::ListR, Some(1), n, logits);
        let total: f64 = (0..n)
            .map(|i| {
                let a = Value::new(DType::Z, Some(1), 1, vec![i as f64]);
                eval_primitive(OpId::Prob, &[&head, &a], ActionKind::Discrete).unwrap().data[0]
            })
            .sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "{total}");
    }
}

#[test]
fn squashing_moderate_inputs_strictly_inside() {
    for i in -100..=100 {
        let u = i as f64 * 0.1;
        let a = squashing(&[u], &[0.0], &[0.0])[0];
        assert!(a > -1.0 && a < 1.0, "{u} -> {a}");
    }
}

/// Midpoint rule for the squashed Gaussian density over (-1, 1).
fn squashed_mass(mu: f64, logstd: f64) -> f64 {
    let n = 200_000;
    let h = 2.0 / n as f64;
    let head = Value::new(DType::ListR, Some(1), 2, vec![mu, logstd]);
    let mut total = 0.0;
    for k in 0..n {
        let a = -1.0 + (k as f64 + 0.5) * h;
        let act = Value::new(DType::Z, Some(1), 1, vec![a]);
        total += eval_primitive(OpId::SquashedProb, &[&head, &act], ActionKind::Continuous).unwrap().data[0] * h;
    }
    total
}

#[test]
fn squashed_density_integrates_to_one() {
    for (mu, ls) in [(0.0, 0.0), (0.5, -0.5), (-1.0, -1.0), (1.2, 0.3), (0.0, -2.0)] {
        let m = squashed_mass(mu, ls);
        assert!((m - 1.0).abs() < 1e-4, "mu={mu} logstd={ls}: {m}");
    }
}

#[test]
fn gaussian_density_matches_closed_form() {
    // N(0.3; mu=0.1, sigma=e^-0.2)
    let (mu, ls, x) = (0.1f64, -0.2f64, 0.3f64);
    let s = ls.exp();
    let want = (-(x - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    let head = Value::new(DType::ListR, Some(1), 2, vec![mu, ls]);
    let act = Value::new(DType::Z, Some(1), 1, vec![x]);
    let got = eval_primitive(OpId::Prob, &[&head, &act], ActionKind::Continuous).unwrap().data[0];
    assert!((got - want).abs() < 1e-14);
}
