use proptest::prelude::*;
use rpp_aggregation::coalition::{
    audit_expost_core, audit_expost_no_collusion, competitive_equilibrium, Coalition,
};
use rpp_aggregation::{
    aggregate_payoff, excess_payoff, pam_allocate, separate_payoff, CommitmentProfile,
    GaussianJointModel, PriceSystem, RealizationProfile,
};

fn prices() -> impl Strategy<Value = PriceSystem> {
    (0.0..40.0f64, 0.5..60.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(rs, spread, a, b)| {
        let rb = rs + spread;
        PriceSystem::with_tie(rs + a * spread, rb, rs, rs + b * spread).unwrap()
    })
}

fn profiles(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0..60.0f64, n),
            prop::collection::vec(0.0..60.0f64, n),
        )
    })
}

fn scale(c: &[f64], x: &[f64], p: &PriceSystem) -> f64 {
    p.rt_buy().max(1.0) * (c.iter().map(|v| v.abs()).sum::<f64>() + x.iter().sum::<f64>()).max(1.0)
}

proptest! {
    #[test]
    fn payoffs_sum_to_aggregate((c, x) in profiles(8), p in prices()) {
        let tol = 1e-9 * scale(&c, &x, &p);
        let cp = CommitmentProfile::new(c.clone()).unwrap();
        let xp = RealizationProfile::new(x.clone()).unwrap();
        let alloc = pam_allocate(&cp, &xp, &p).unwrap();
        let agg = aggregate_payoff(cp.total(), xp.total(), &p);
        prop_assert!((alloc.payoffs().iter().sum::<f64>() - agg).abs() <= tol);
    }

    #[test]
    fn excess_is_aggregate_minus_separate((c, x) in profiles(8), p in prices()) {
        let tol = 1e-9 * scale(&c, &x, &p);
        let cp = CommitmentProfile::new(c.clone()).unwrap();
        let xp = RealizationProfile::new(x.clone()).unwrap();
        let sep: f64 = c.iter().zip(&x).map(|(&ci, &xi)| separate_payoff(ci, xi, &p)).sum();
        let e = excess_payoff(&cp, &xp, &p).unwrap();
        prop_assert!((e - (aggregate_payoff(cp.total(), xp.total(), &p) - sep)).abs() <= tol);
        prop_assert!(e >= -tol);
    }

    #[test]
    fn individually_rational((c, x) in profiles(8), p in prices()) {
        let tol = 1e-9 * scale(&c, &x, &p);
        let cp = CommitmentProfile::new(c.clone()).unwrap();
        let xp = RealizationProfile::new(x.clone()).unwrap();
        let alloc = pam_allocate(&cp, &xp, &p).unwrap();
        for (i, (&ci, &xi)) in c.iter().zip(&x).enumerate() {
            prop_assert!(alloc.payoffs()[i] >= separate_payoff(ci, xi, &p) - tol);
        }
    }

    #[test]
    fn core_holds((c, x) in profiles(6), p in prices()) {
        let cp = CommitmentProfile::new(c).unwrap();
        let xp = RealizationProfile::new(x).unwrap();
        let alloc = pam_allocate(&cp, &xp, &p).unwrap();
        let audit = audit_expost_core(&alloc, &cp, &xp, &p).unwrap();
        prop_assert!(audit.passed, "min slack {}", audit.min_slack);
    }

    #[test]
    fn merging_is_payoff_neutral((c, x) in profiles(6), p in prices(), mask in 1u64..64) {
        let n = c.len();
        let mask = mask & ((1u64 << n) - 1);
        prop_assume!(mask != 0);
        let tol = 1e-9 * scale(&c, &x, &p);
        let cp = CommitmentProfile::new(c).unwrap();
        let xp = RealizationProfile::new(x).unwrap();
        let d = audit_expost_no_collusion(&cp, &xp, &p, Coalition::from_mask(mask)).unwrap();
        prop_assert!(d.abs() <= tol, "difference {d}");
    }

    #[test]
    fn competitive_equilibrium_matches((c, x) in profiles(8), p in prices()) {
        let tol = 1e-9 * scale(&c, &x, &p);
        let cp = CommitmentProfile::new(c).unwrap();
        let xp = RealizationProfile::new(x).unwrap();
        let alloc = pam_allocate(&cp, &xp, &p).unwrap();
        let ce = competitive_equilibrium(&cp, &xp, &p).unwrap();
        for (a, b) in ce.payoffs.iter().zip(alloc.payoffs()) {
            prop_assert!((a - b).abs() <= tol);
        }
        prop_assert!(ce.is_individually_optimal(&cp, &p));
    }

    #[test]
    fn gaussian_slopes_sum_to_one(
        n in 2usize..6,
        seed in prop::collection::vec(-1.0..1.0f64, 12),
        sd in prop::collection::vec(0.5..5.0f64, 6),
    ) {
        // Covariance from a two-factor loading plus a diagonal.
        let cov: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let f = seed[2 * i] * seed[2 * j] + seed[2 * i + 1] * seed[2 * j + 1];
                        sd[i] * sd[j] * f + if i == j { sd[i] * sd[i] } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let m = GaussianJointModel::new(vec![10.0; n], cov).unwrap();
        let slopes = m.conditional_mean_slopes().unwrap();
        prop_assert!((slopes.sum() - 1.0).abs() < 1e-9);
        // E[X_i | X_N = a] summed over producers is a itself.
        let a = m.sum_mean() + 0.7 * m.sum_std();
        let total: f64 = (0..n).map(|i| m.conditional_mean(i, a).unwrap()).sum();
        prop_assert!((total - a).abs() < 1e-9 * a.abs().max(1.0));
    }
}
