use laser_core::data::FramePredictions;
use laser_core::losses::{asd_loss, consistency_loss, total_loss, LossConfig};
use proptest::prelude::*;

fn dist() -> impl Strategy<Value = [f64; 2]> {
    (0.0f64..=1.0).prop_map(|a| [a, 1.0 - a])
}

fn rows(t: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(dist(), t)
}

fn kl_oracle(p: &[[f64; 2]], q: &[[f64; 2]]) -> f64 {
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        for j in 0..2 {
            if a[j] > 0.0 {
                total += a[j] * (a[j] / b[j].max(1e-8)).ln();
            }
        }
    }
    total / p.len() as f64
}

proptest! {
    #[test]
    fn consistency_is_nonnegative(p in rows(6), q in rows(6)) {
        prop_assert!(consistency_loss(&p, &q) >= -1e-12);
    }

    #[test]
    fn consistency_vanishes_on_equal_inputs(p in rows(5)) {
        prop_assert!(consistency_loss(&p, &p).abs() <= 1e-9);
    }

    #[test]
    fn consistency_matches_direct_kl(p in rows(4), q in prop::collection::vec((0.01f64..0.99).prop_map(|a| [a, 1.0 - a]), 4)) {
        prop_assert!((consistency_loss(&p, &q) - kl_oracle(&p, &q)).abs() <= 1e-9);
    }

    #[test]
    fn asd_total_is_the_weighted_sum(
        av in rows(5), v in rows(5), a in rows(5),
        labels in prop::collection::vec(any::<bool>(), 5),
        w in (0.0f64..3.0, 0.0f64..3.0, 0.0f64..3.0),
    ) {
        let cfg = LossConfig { lambda_av: w.0, lambda_a: w.1, lambda_v: w.2, lambda_c: 1.0 };
        let preds = FramePredictions { probs_av: av, probs_v: v, probs_a: a };
        let l = asd_loss(&preds, &labels, &cfg).unwrap();
        prop_assert!((l.total - (w.0 * l.l_av + w.1 * l.l_a + w.2 * l.l_v)).abs() <= 1e-9);
    }

    #[test]
    fn relabeling_leaves_each_term_unchanged(
        av in rows(4), v in rows(4), a in rows(4),
        labels in prop::collection::vec(any::<bool>(), 4),
    ) {
        let swap = |r: &Vec<[f64; 2]>| r.iter().map(|x| [x[1], x[0]]).collect::<Vec<_>>();
        let cfg = LossConfig::default();
        let preds = FramePredictions { probs_av: av.clone(), probs_v: v.clone(), probs_a: a.clone() };
        let flipped = FramePredictions { probs_av: swap(&av), probs_v: swap(&v), probs_a: swap(&a) };
        let inverted: Vec<bool> = labels.iter().map(|l| !l).collect();
        let x = asd_loss(&preds, &labels, &cfg).unwrap();
        let y = asd_loss(&flipped, &inverted, &cfg).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn total_is_asd_plus_weighted_consistency(asd in 0.0f64..10.0, c in 0.0f64..10.0, lc in 0.0f64..5.0) {
        let cfg = LossConfig { lambda_c: lc, ..LossConfig::default() };
        prop_assert!((total_loss(asd, Some(c), &cfg) - (asd + lc * c)).abs() <= 1e-9);
        prop_assert_eq!(total_loss(asd, None, &cfg), asd);
    }
}

#[test]
fn uniform_heads_cost_weighted_ln2() {
    let u = vec![[0.5, 0.5]; 7];
    let preds = FramePredictions {
        probs_av: u.clone(),
        probs_v: u.clone(),
        probs_a: u,
    };
    let l = asd_loss(&preds, &[true, false, true, true, false, false, true], &LossConfig::default()).unwrap();
    assert!((l.total - 1.8 * std::f64::consts::LN_2).abs() < 1e-9);
    assert!((l.total - 1.2476).abs() < 1e-4);
}

#[test]
fn doubling_av_weight_doubles_only_that_term() {
    let preds = FramePredictions {
        probs_av: vec![[0.3, 0.7], [0.6, 0.4]],
        probs_v: vec![[0.2, 0.8], [0.5, 0.5]],
        probs_a: vec![[0.9, 0.1], [0.1, 0.9]],
    };
    let labels = [true, false];
    let base = LossConfig::default();
    let doubled = LossConfig {
        lambda_av: 2.0,
        ..base
    };
    let a = asd_loss(&preds, &labels, &base).unwrap();
    let b = asd_loss(&preds, &labels, &doubled).unwrap();
    assert!((b.total - a.total - a.l_av).abs() < 1e-12);
}

#[test]
fn kl_hand_values() {
    assert!((consistency_loss(&[[1.0, 0.0]], &[[0.5, 0.5]]) - std::f64::consts::LN_2).abs() < 1e-6);
    let v = consistency_loss(&[[0.8, 0.2]], &[[0.6, 0.4]]);
    assert!((v - (0.8 * (4.0f64 / 3.0).ln() + 0.2 * 0.5f64.ln())).abs() < 1e-12);
    assert!((v - 0.09151).abs() < 1e-5);
}

#[test]
fn zero_consistency_weight_ignores_the_term() {
    let cfg = LossConfig {
        lambda_c: 0.0,
        ..LossConfig::default()
    };
    assert_eq!(total_loss(1.25, Some(123.0), &cfg), 1.25);
    assert_eq!(total_loss(1.0, Some(0.5), &LossConfig::default()), 1.5);
}
