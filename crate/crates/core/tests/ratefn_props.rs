use proptest::prelude::*;

use dta_core::ratefn::{self, Norm, RateFunction};

/// Sorted, disjoint pieces starting at or after `offset`.
fn pieces(offset: f64) -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((0.05..2.0f64, prop_oneof![Just(0.0), 0.0..1.0f64], 0.0..5.0f64), 0..6).prop_map(move |raw| {
        let mut t = offset;
        raw.into_iter()
            .map(|(len, gap, v)| {
                t += gap;
                let piece = (t, t + len, v);
                t += len;
                piece
            })
            .collect()
    })
}

fn rate(offset: f64) -> impl Strategy<Value = RateFunction> {
    pieces(offset).prop_map(|p| RateFunction::from_pieces(&p).unwrap())
}

proptest! {
    #[test]
    fn cumulative_is_monotone_with_rate_as_slope(f in rate(0.0)) {
        let cum = f.cumulative();
        let end = f.support().map_or(1.0, |s| s.1) + 1.0;
        let ts: Vec<f64> = (0..=400).map(|k| end * k as f64 / 400.0).collect();
        for w in ts.windows(2) {
            prop_assert!(cum.evaluate(w[1]) >= cum.evaluate(w[0]));
        }
        for (a, b, v) in f.pieces() {
            let (x, h) = (0.5 * (a + b), 0.25 * (b - a));
            let slope = (cum.evaluate(x + h) - cum.evaluate(x - h)) / (2.0 * h);
            prop_assert!((slope - v).abs() <= 1e-9 * (1.0 + v), "slope {} vs {}", slope, v);
        }
    }

    #[test]
    fn combine_is_exact_on_disjoint_supports(p in pieces(0.0), q in pieces(20.0)) {
        let f = RateFunction::from_pieces(&p).unwrap();
        let g = RateFunction::from_pieces(&q).unwrap();
        let sum = ratefn::combine(&[f.clone(), g.clone()], &[1.0, 1.0]).unwrap();
        let lhs = ratefn::distance(&sum, &g, 0.0, 50.0, Norm::L1);
        let rhs = ratefn::distance(&f, &RateFunction::zero(), 0.0, 50.0, Norm::L1);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
    }

    #[test]
    fn canonicalization_is_idempotent(f in rate(0.0)) {
        let once = f.canonicalized();
        prop_assert_eq!(&once, &f);
        let twice = once.canonicalized();
        prop_assert_eq!(once.breakpoints(), twice.breakpoints());
        prop_assert_eq!(once.values(), twice.values());
    }

    #[test]
    fn restriction_agrees_before_the_cut(f in rate(0.0), cut in 0.0..12.0f64) {
        let r = ratefn::restrict(&f, 0.0, cut);
        for k in 0..=600 {
            let t = 12.0 * k as f64 / 600.0;
            let want = if t < cut { f.evaluate(t) } else { 0.0 };
            prop_assert_eq!(r.evaluate(t), want, "t = {}", t);
        }
    }

    #[test]
    fn json_round_trip(f in rate(0.0)) {
        let back: RateFunction = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        prop_assert_eq!(back, f);
    }
}
