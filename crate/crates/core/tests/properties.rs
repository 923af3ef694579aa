use atw_core::eval::{random_directions, sliced_wasserstein2_with};
use atw_core::io::RunConfig;
use atw_core::NoiseSchedule;
use proptest::prelude::*;

fn points(dim: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), n)
}

proptest! {
    #[test]
    fn ve_sigma_increases_with_time(t_n in 0.01f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = NoiseSchedule::ve_identity(3.0, t_n).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(s.sigma(3.0 * lo).unwrap() < s.sigma(3.0 * hi).unwrap());
    }

    #[test]
    fn vp_sigma_and_alpha_are_monotone(a in 0.0f64..1000.0, b in 0.0f64..1000.0) {
        let s = NoiseSchedule::vp_reference(500.0).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        prop_assert!(s.sigma(lo).unwrap() < s.sigma(hi).unwrap());
        prop_assert!(s.alpha(lo).unwrap() > s.alpha(hi).unwrap());
        let sig = s.sigma(hi).unwrap();
        let alpha = s.alpha(hi).unwrap();
        prop_assert!((alpha * alpha + sig * sig - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_at_sigma_inverts_sigma(t in 1.0f64..999.0) {
        let s = NoiseSchedule::vp_reference(500.0).unwrap();
        let back = s.time_at_sigma(s.sigma(t).unwrap()).unwrap();
        prop_assert!((back - t).abs() < 1e-6 * t.max(1.0));
    }

    #[test]
    fn bridge_targets_are_finite_above_nature(frac in 0.001f64..1.0) {
        for s in [NoiseSchedule::ve_identity(3.0, 0.5).unwrap(), NoiseSchedule::vp_reference(500.0).unwrap()] {
            let t = s.t_nature() + frac * (s.t_max() - s.t_nature());
            let c = s.target_coefficients(t).unwrap();
            let br = s.bridge_coefficients(t).unwrap();
            prop_assert!(c.c_h.is_finite() && c.c_x.is_finite());
            prop_assert!((c.c_h * br.a - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sliced_w2_is_a_pseudometric(a in points(2, 12), b in points(2, 12), c in points(2, 12), seed in 0u64..1000) {
        let dirs = random_directions(2, 16, seed);
        let ab = sliced_wasserstein2_with(&a, &b, &dirs).unwrap();
        let ba = sliced_wasserstein2_with(&b, &a, &dirs).unwrap();
        let bc = sliced_wasserstein2_with(&b, &c, &dirs).unwrap();
        let ac = sliced_wasserstein2_with(&a, &c, &dirs).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(sliced_wasserstein2_with(&a, &a, &dirs).unwrap(), 0.0);
        // Each projected distance is a metric, so the mean over shared
        // directions satisfies the triangle inequality exactly.
        prop_assert!(ac <= ab + bc + 1e-12);
        let mut shuffled = a.clone();
        shuffled.reverse();
        prop_assert!(sliced_wasserstein2_with(&a, &shuffled, &dirs).unwrap() < 1e-12);
    }

    #[test]
    fn config_echo_is_idempotent(
        t_n in 0.01f64..2.9,
        lambda in 0.0f64..10.0,
        steps in 1u64..100_000,
        hidden in prop::collection::vec(1usize..256, 1..4),
        kind in prop::sample::select(vec!["dsm", "ambient", "ambient+consistency"]),
    ) {
        let mut cfg = RunConfig::default();
        cfg.set("schedule.t_n", &t_n.to_string()).unwrap();
        cfg.set("loss.lambda", &lambda.to_string()).unwrap();
        cfg.set("train.phase1_steps", &steps.to_string()).unwrap();
        let hidden: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
        cfg.set("net.hidden", &hidden.join(",")).unwrap();
        cfg.set("loss.kind", kind).unwrap();
        let once = cfg.echo();
        let twice = RunConfig::parse(&once).unwrap().echo();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(RunConfig::parse(&twice).unwrap().f64("schedule.t_n").unwrap(), t_n);
    }
}
