use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cgperf::eval::{mae, srcc};
use cgperf::graph::{flop_count, gen_space, node_flops, param_count, parse_cg, serialize_cg, validate, SpaceSpec};
use cgperf::predictor::{Predictor, PredictorConfig};
use cgperf::scaling::{fit_scaling, flops_transform, ScalingSpec};
use cgperf::search::{mutate, replay, search, Rule, SearchConfig};
use cgperf::sim::{BodyPool, SyntheticTask, TaskSpec};

const SPACES: [&str; 5] = ["mbv3-like", "pn-like", "r50-like", "plain-like", "cell-like"];

fn space() -> impl Strategy<Value = SpaceSpec> {
    prop::sample::select(SPACES.to_vec()).prop_map(|s| SpaceSpec::preset(s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn serialization_round_trips(spec in space(), seed in any::<u64>()) {
        let g = gen_space(&spec, seed).unwrap();
        let text = serialize_cg(&g);
        let back = parse_cg(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(serialize_cg(&back), text);
    }

    #[test]
    fn flops_are_additive_and_order_free(spec in space(), seed in any::<u64>(), shuffle in any::<u64>()) {
        let g = gen_space(&spec, seed).unwrap();
        let total = flop_count(&g).unwrap();
        prop_assert_eq!(total, g.nodes.iter().map(node_flops).sum::<u64>());
        let mut h = g.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        h.nodes.shuffle(&mut rng);
        h.edges.shuffle(&mut rng);
        prop_assert!(validate(&h).is_empty());
        prop_assert_eq!(flop_count(&h).unwrap(), total);
        prop_assert_eq!(param_count(&h), param_count(&g));
    }

    #[test]
    fn srcc_ignores_monotone_transforms(
        pairs in prop::collection::vec((-5i32..5, -1e3f64..1e3), 3..40),
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
    ) {
        // integer predictions make ties common
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = srcc(&x, &y);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let affine: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + v).collect();
        prop_assert!((srcc(&affine, &y).unwrap() - r).abs() < 1e-12);
        prop_assert!((srcc(&cubed, &y).unwrap() - r).abs() < 1e-12);
        prop_assert!((srcc(&y, &x).unwrap() - r).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((srcc(&neg, &y).unwrap() + r).abs() < 1e-12);
    }

    #[test]
    fn mae_is_a_symmetric_shift_invariant_distance(
        pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40),
        c in -1e3f64..1e3,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let m = mae(&x, &y).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(m, mae(&y, &x).unwrap());
        let xs: Vec<f64> = x.iter().map(|v| v + c).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
        prop_assert!((mae(&xs, &ys).unwrap() - m).abs() < 1e-9);
        prop_assert_eq!(mae(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn flops_transform_decreases_in_flops(y in 1e-3f64..1e3, f in 0.0f64..1e3, df in 1e-6f64..1e3) {
        prop_assert!(flops_transform(y, f + df).unwrap() < flops_transform(y, f).unwrap());
        prop_assert_eq!(flops_transform(y, 0.0).unwrap(), y);
    }

    #[test]
    fn scaling_round_trips(
        recs in prop::collection::vec((1.0f64..100.0, 0.0f64..20.0), 2..30),
        z in -5.0f64..5.0,
        f in 0.0f64..20.0,
        flag in any::<bool>(),
    ) {
        let s = fit_scaling("t", &recs, flag);
        prop_assume!(s.is_ok());
        let s = s.unwrap();
        let y = s.invert(z, f).unwrap();
        prop_assert!((s.apply(y, f).unwrap() - z).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn round_robin_replacement_is_fair(seed in any::<u64>(), updates in 1usize..20) {
        let space = SpaceSpec::preset("pn-like").unwrap();
        let task = SyntheticTask::from_space(TaskSpec { calibration_samples: 8, ..TaskSpec::default() }, &space).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = BodyPool::filled(&task, &space, 2, &mut rng).unwrap();
        let bins = pool.bins().len();
        let fresh_from = (bins * 2) as u64;
        for _ in 0..updates {
            pool.update(&task, &space, &mut rng).unwrap();
        }
        prop_assert_eq!(pool.len(), bins * 2);
        let replaced: Vec<usize> = (0..bins).map(|b| pool.ages(b).iter().filter(|&&a| a >= fresh_from).count()).collect();
        let lo = *replaced.iter().min().unwrap();
        let hi = *replaced.iter().max().unwrap();
        prop_assert!(hi - lo <= 1, "{:?}", replaced);
        prop_assert_eq!(replaced.iter().sum::<usize>(), updates.min(bins * 2));
    }

    #[test]
    fn mutation_chains_stay_valid_and_replay(spec in space(), seed in any::<u64>()) {
        // 8 cases x 125 steps: up to 1000 mutations
        let g0 = gen_space(&spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
        let mut g = g0.clone();
        let mut history = Vec::new();
        for _ in 0..125 {
            let Ok((next, m)) = mutate(&g, &mut rng, &Rule::ALL) else { break };
            prop_assert!(validate(&next).is_empty(), "{:?}", m);
            prop_assert!(flop_count(&next).unwrap() < flop_count(&g).unwrap(), "{:?}", m);
            history.push(m);
            g = next;
        }
        prop_assert_eq!(replay(&g0, &history).unwrap(), g);
    }

    #[test]
    fn search_trajectory_is_monotone_and_replayable(seed in any::<u64>(), target in 0.01f64..0.3) {
        let mut p = Predictor::new(PredictorConfig::default(), seed).unwrap();
        p.scalings.insert("t".into(), ScalingSpec { task: "t".into(), use_flops_transform: true, mu: 40.0, sigma: 3.0 });
        let g0 = gen_space(&SpaceSpec::preset("mbv3-like").unwrap(), seed).unwrap();
        let cfg = SearchConfig { target_reduction: target, budget: 60, patience: 20, seed, ..SearchConfig::default() };
        let (best, r) = search(&p, "t", &g0, &cfg).unwrap();
        prop_assert!(r.evaluations <= cfg.budget);
        let mut last = r.initial_flops;
        for s in &r.steps {
            prop_assert!(s.flops < last);
            last = s.flops;
        }
        prop_assert_eq!(last, r.final_flops);
        prop_assert_eq!(replay(&g0, &r.history).unwrap(), best);
        prop_assert_eq!(r.target_met, r.final_flops <= r.initial_flops * (1.0 - target));
    }
}
