use domino::context::infonce;
use domino::envs::wrap_angle;
use domino::harness::{silhouette, ExperimentConfig};
use domino::policy::gae;
use proptest::prelude::*;

proptest! {
    #[test]
    fn infonce_never_exceeds_ln_k(pos in -1e4f64..1e4, negs in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let v = infonce(pos, &negs).unwrap();
        let ln_k = ((negs.len() + 1) as f64).ln();
        prop_assert!(v <= ln_k + 1e-9);
    }

    #[test]
    fn wrapped_angles_stay_in_range(theta in -1e3f64..1e3) {
        let w = wrap_angle(theta);
        prop_assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&w));
        prop_assert!(((theta - w) / std::f64::consts::TAU - ((theta - w) / std::f64::consts::TAU).round()).abs() < 1e-9);
    }

    #[test]
    fn full_lambda_gae_is_the_discounted_return_minus_baseline(
        rewards in prop::collection::vec(-10f64..10.0, 1..30),
        seed_values in prop::collection::vec(-10f64..10.0, 31),
        gamma in 0.5f64..1.0,
    ) {
        let values = &seed_values[..=rewards.len()];
        let (adv, targets) = gae(&rewards, values, gamma, 1.0).unwrap();
        let mut ret = values[rewards.len()];
        for t in (0..rewards.len()).rev() {
            ret = rewards[t] + gamma * ret;
            prop_assert!((adv[t] - (ret - values[t])).abs() < 1e-8);
            prop_assert!((targets[t] - ret).abs() < 1e-8);
        }
    }

    #[test]
    fn silhouette_is_bounded(points in prop::collection::vec(prop::collection::vec(-5f64..5.0, 3), 4..20)) {
        let labels: Vec<u64> = (0..points.len() as u64).map(|i| i % 3).collect();
        let s = silhouette(&points, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn config_text_round_trips(seed in 0u64..1_000_000, heads in 1usize..5, tau in 1e-3f64..1.0, mino in any::<bool>()) {
        let mut cfg = ExperimentConfig { seed, n_heads: heads, tau_ctx: tau, ..ExperimentConfig::default() };
        if mino {
            cfg.set("ablation", "mino").unwrap();
        }
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
    }
}
