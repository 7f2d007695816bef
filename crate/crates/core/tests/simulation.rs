use chrono::{Duration, NaiveDateTime};
use rpp_aggregation::simharness::synthetic::{default_error_model, SyntheticSpec};
use rpp_aggregation::simharness::{
    fit_error_model, run_case, CaseId, CaseOptions, HourRecord, MarketHistory,
};
use rpp_aggregation::{GaussianJointModel, JointModel, SamplingMode};

fn history_from_errors(truth: &GaussianJointModel, rows: usize, seed: u64) -> MarketHistory {
    let n = truth.dim();
    let errors = JointModel::from(truth.clone()).sample_rows(rows, seed, SamplingMode::Analysis);
    let start = NaiveDateTime::parse_from_str("2004-01-01 00:00", "%Y-%m-%d %H:%M").unwrap();
    let hours = (0..rows)
        .map(|t| {
            let instant = start + Duration::hours(t as i64);
            let forecasts = vec![100.0; n];
            HourRecord {
                timestamp: instant.format("%Y-%m-%dT%H:%M:%S").to_string(),
                instant,
                actuals: forecasts
                    .iter()
                    .zip(&errors[t * n..(t + 1) * n])
                    .map(|(f, e)| f + e)
                    .collect(),
                forecasts,
                p_da: 30.0,
                p_rt: 30.0,
            }
        })
        .collect();
    MarketHistory::new(hours).unwrap()
}

#[test]
fn fitted_covariance_recovers_truth() {
    let cov = vec![
        vec![4.0, 4.8, 3.2],
        vec![4.8, 9.0, 4.8],
        vec![3.2, 4.8, 4.0],
    ];
    let truth = GaussianJointModel::new(vec![0.0; 3], cov.clone()).unwrap();
    let h = history_from_errors(&truth, 10_000, 11);
    let fitted = fit_error_model(&h).unwrap();
    assert_eq!(fitted.mean(), &[0.0, 0.0, 0.0]);
    for i in 0..3 {
        for j in 0..3 {
            let got = fitted.covariance()[(i, j)];
            assert!(
                (got - cov[i][j]).abs() <= 0.05 * cov[i][j].abs(),
                "({i},{j}): {got} vs {}",
                cov[i][j]
            );
        }
    }
}

#[test]
fn runs_are_bit_identical() {
    let model = default_error_model(4, 0.3).unwrap();
    let h = SyntheticSpec::new(model.clone(), 96).generate(3).unwrap();
    for case in CaseId::ALL {
        let a = run_case(case, &h, &model, &CaseOptions::default()).unwrap();
        let b = run_case(case, &h, &model, &CaseOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grand_total.to_bits(), b.grand_total.to_bits());
    }
}

#[test]
fn totals_are_consistent_and_case3_dominates_case4() {
    let model = default_error_model(5, 0.3).unwrap();
    let h = SyntheticSpec::new(model.clone(), 240).generate(5).unwrap();
    let r3 = run_case(CaseId::Case3, &h, &model, &CaseOptions::default()).unwrap();
    let r4 = run_case(CaseId::Case4, &h, &model, &CaseOptions::default()).unwrap();
    for r in [&r3, &r4] {
        let by_rpp: f64 = r.per_rpp_totals.iter().sum();
        let by_hour: f64 = r.per_hour_totals.iter().sum();
        assert!((by_rpp - r.grand_total).abs() <= 1e-6 * r.grand_total.abs());
        assert!((by_hour - r.grand_total).abs() <= 1e-6 * r.grand_total.abs());
    }
    for (a, b) in r3.hourly.iter().zip(&r4.hourly) {
        for (x, y) in a.iter().zip(b) {
            assert!(*x >= y - 1e-9 * (x.abs() + y.abs()).max(1.0));
        }
    }
}

#[test]
fn fitted_model_drives_a_train_test_split() {
    let model = default_error_model(3, 0.2).unwrap();
    let h = SyntheticSpec::new(model, 200).generate(9).unwrap();
    let (train, test) = h.split_at(100).unwrap();
    let fitted = fit_error_model(&train).unwrap();
    let r = run_case(CaseId::Case2, &test, &fitted, &CaseOptions::default()).unwrap();
    assert_eq!(r.hourly.len(), 100);
    assert_eq!(r.timestamps[0], test.hours()[0].timestamp);
}
