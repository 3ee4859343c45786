use phfit::io::{fmt_f64, Table};
use phfit::objective;
use phfit::reparam::{CoxianParams, GeneralParams, HyperErlangParams, Structure};
use phfit::{FitTarget, MarkovianPH};
use proptest::prelude::*;

fn general_structure() -> impl Strategy<Value = (Structure, Vec<f64>)> {
    (1usize..6).prop_flat_map(|n| {
        (
            Just(Structure::General { n }),
            prop::collection::vec(-3.0..3.0f64, n)
                .prop_flat_map(move |a| {
                    (
                        Just(a),
                        prop::collection::vec(0.2..3.0f64, n),
                        prop::collection::vec(-3.0..3.0f64, n * n),
                    )
                })
                .prop_map(|(a, g, z)| [a, g, z].concat()),
        )
    })
}

fn coxian_structure() -> impl Strategy<Value = (Structure, Vec<f64>)> {
    (1usize..8).prop_flat_map(|n| {
        (
            Just(Structure::Coxian { n }),
            (
                prop::collection::vec(0.2..3.0f64, n),
                prop::collection::vec(-4.0..4.0f64, n - 1),
            )
                .prop_map(|(g, u)| [g, u].concat()),
        )
    })
}

fn hyper_erlang_structure() -> impl Strategy<Value = (Structure, Vec<f64>)> {
    prop::collection::vec(1usize..5, 1..5).prop_flat_map(|blocks| {
        let k = blocks.len();
        (
            Just(Structure::HyperErlang { blocks }),
            (
                prop::collection::vec(-3.0..3.0f64, k),
                prop::collection::vec(0.2..3.0f64, k),
            )
                .prop_map(|(b, d)| [b, d].concat()),
        )
    })
}

fn any_structure() -> impl Strategy<Value = (Structure, Vec<f64>)> {
    prop_oneof![general_structure(), coxian_structure(), hyper_erlang_structure()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn forward_maps_are_valid((s, flat) in any_structure()) {
        let ph = s.unflatten(&flat).to_markovian();
        prop_assert!(ph.is_valid(), "{:?}", ph.validate());
        prop_assert_eq!(ph.n(), s.phases());
    }

    #[test]
    fn flatten_inverts_unflatten((s, flat) in any_structure()) {
        let p = s.unflatten(&flat);
        prop_assert_eq!(p.flatten(), flat);
        prop_assert_eq!(p.structure(), s);
    }

    #[test]
    fn general_round_trip((s, flat) in general_structure()) {
        let ph = s.unflatten(&flat).to_markovian();
        let back = GeneralParams::from_markovian(&ph).unwrap().to_markovian();
        let dev = (ph.t() - back.t()).amax().max((ph.alpha() - back.alpha()).amax());
        prop_assert!(dev <= 1e-10, "deviation {}", dev);
    }

    #[test]
    fn coxian_round_trip(lambda in prop::collection::vec(0.05..20.0f64, 1..8), seed in 0.01..0.99f64) {
        let p: Vec<f64> = (1..lambda.len()).map(|i| (seed * i as f64).fract().clamp(0.01, 0.99)).collect();
        let c = CoxianParams::from_markovian(&lambda, &p).unwrap();
        for (a, b) in c.rates().iter().zip(&lambda) {
            prop_assert!((a - b).abs() <= 1e-10 * b.max(1.0));
        }
        for (a, b) in c.continuation().iter().zip(&p) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn hyper_erlang_round_trip(raw in prop::collection::vec((0.01..1.0f64, 0.05..20.0f64, 1usize..5), 1..5)) {
        let s: f64 = raw.iter().map(|r| r.0).sum();
        let omega: Vec<f64> = raw.iter().map(|r| r.0 / s).collect();
        let lambda: Vec<f64> = raw.iter().map(|r| r.1).collect();
        let blocks: Vec<usize> = raw.iter().map(|r| r.2).collect();
        let h = HyperErlangParams::from_markovian(&omega, &lambda, &blocks).unwrap();
        for (a, b) in h.weights().iter().zip(&omega) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        for (a, b) in h.rates().iter().zip(&lambda) {
            prop_assert!((a - b).abs() <= 1e-10 * b.max(1.0));
        }
    }

    #[test]
    fn loss_is_nonnegative_and_scale_invariant((s, flat) in any_structure(), c in 0.2..5.0f64) {
        let ph = s.unflatten(&flat).to_markovian();
        let other = MarkovianPH::erlang(2, 1.5);
        let target = FitTarget::from_moments(other.moments(4).unwrap()).unwrap();
        let base = objective::markovian_loss(&ph, &target).unwrap();
        prop_assert!(base >= 0.0);
        let scaled = FitTarget::from_moments(other.time_scaled(c).moments(4).unwrap()).unwrap();
        let moved = objective::markovian_loss(&ph.time_scaled(c), &scaled).unwrap();
        prop_assert!((moved - base).abs() <= 1e-9 * base.max(1e-12) + 1e-14);
    }

    #[test]
    fn fast_loss_matches_matrix_route((s, flat) in any_structure()) {
        let target = FitTarget::from_moments(MarkovianPH::erlang(3, 2.0).moments(5).unwrap()).unwrap();
        let fast = objective::evaluate(&s, &flat, &target, None).unwrap();
        let slow = objective::markovian_loss(&s.unflatten(&flat).to_markovian(), &target).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-9 * slow.max(1e-12));
    }

    #[test]
    fn mean_normalization((s, flat) in any_structure(), mean in 0.01..100.0f64) {
        let ph = s.unflatten(&flat).to_markovian().normalize_mean(mean).unwrap();
        prop_assert!((ph.mean().unwrap() / mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cdf_is_monotone_and_bounded((s, flat) in any_structure()) {
        let ph = s.unflatten(&flat).to_markovian();
        let mut prev = 0.0;
        for i in 0..40 {
            let f = ph.cdf(i as f64 * 0.25);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(f >= prev - 1e-12);
            prev = f;
        }
    }

    #[test]
    fn table_cells_round_trip(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..20)) {
        let mut t = Table::new(["v"]);
        for v in &values {
            t.push(vec![fmt_f64(*v)]).unwrap();
        }
        let back = Table::from_csv_str(&t.to_csv_string().unwrap()).unwrap();
        prop_assert_eq!(back.numeric_column("v").unwrap(), values);
    }
}
