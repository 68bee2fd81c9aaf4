//! Linear sparse-vs-regular classifier checks: closed-form classifiers,
//! margins, max-margin subset fitting and the Monte-Carlo verifier.

use modnet::theory::{
    error_rate, maxmargin_sparse_fit, min_margin, regular_classifier, sample_linear_env,
    sparse_classifier, verify_proposition, LinearDataset, LinearEnvConfig, PropositionConfig,
};
use ndarray::Array2;

fn tiny_dataset(z_inv: Vec<f64>, z_sp: Vec<Vec<f64>>, y: Vec<f64>) -> LinearDataset {
    let n = z_inv.len();
    let d = if n == 0 { 0 } else { z_sp[0].len() };
    let flat: Vec<f64> = z_sp.into_iter().flatten().collect();
    LinearDataset { z_inv, z_sp: Array2::from_shape_vec((n, d), flat).unwrap(), y }
}

#[test]
fn sparse_classifier_reads_only_the_invariant_feature() {
    let clf = sparse_classifier(3);
    let data = tiny_dataset(
        vec![1.0, -1.0, 1.0],
        vec![vec![-9.0, -9.0, -9.0], vec![9.0, 9.0, 9.0], vec![0.0, 0.0, 0.0]],
        vec![1.0, -1.0, 1.0],
    );
    assert_eq!(error_rate(&clf, &data), 0.0);
    assert!((min_margin(&clf, &data).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn ties_count_as_errors() {
    // The classifier reads z_inv only; an item with z_inv = 0 scores 0.
    let clf = sparse_classifier(1);
    let data = tiny_dataset(vec![0.0], vec![vec![5.0]], vec![1.0]);
    assert_eq!(error_rate(&clf, &data), 1.0);
}

#[test]
fn regular_classifier_has_unit_spurious_weights() {
    let clf = regular_classifier(16).unwrap();
    assert_eq!(clf.w_inv, 0.0);
    let norm: f64 = clf.w_sp.iter().map(|w| w * w).sum();
    assert!((norm - 1.0).abs() < 1e-12);
    assert!(regular_classifier(0).is_err());
}

#[test]
fn sampled_environments_match_their_bias() {
    let cfg = LinearEnvConfig { dim_spurious: 8, n: 50_000, p: 0.75, seed: 3 };
    let data = sample_linear_env(&cfg);
    assert_eq!(data.len(), 50_000);
    // Fraction of spurious coordinates agreeing with the label ≈ p.
    let mut agree = 0usize;
    for i in 0..data.len() {
        for j in 0..8 {
            if data.z_sp[[i, j]] == data.y[i] {
                agree += 1;
            }
        }
    }
    let frac = agree as f64 / (data.len() * 8) as f64;
    assert!((frac - 0.75).abs() < 0.01, "agreement {frac}");
    // The invariant feature always equals the label.
    for i in 0..data.len() {
        assert_eq!(data.z_inv[i], data.y[i]);
    }
}

#[test]
fn min_margin_rejects_empty_data() {
    let clf = sparse_classifier(2);
    let data = tiny_dataset(vec![], vec![], vec![]);
    assert!(min_margin(&clf, &data).is_err());
    assert!(maxmargin_sparse_fit(&data, 1).is_err());
}

#[test]
fn maxmargin_fit_finds_a_separator() {
    // Perfectly biased data: every coordinate separates with margin 1, so
    // any 1-sparse answer must achieve it.
    let cfg = LinearEnvConfig { dim_spurious: 4, n: 200, p: 1.0, seed: 5 };
    let data = sample_linear_env(&cfg);
    let clf = maxmargin_sparse_fit(&data, 1).unwrap();
    assert_eq!(error_rate(&clf, &data), 0.0);
    assert!(min_margin(&clf, &data).unwrap() >= 1.0 - 1e-9);

    // Unbiased data: only the invariant coordinate separates.
    let cfg = LinearEnvConfig { dim_spurious: 4, n: 200, p: 0.5, seed: 6 };
    let data = sample_linear_env(&cfg);
    let clf = maxmargin_sparse_fit(&data, 1).unwrap();
    assert!((clf.w_inv - 1.0).abs() < 1e-9, "invariant weight {}", clf.w_inv);
    assert_eq!(error_rate(&clf, &data), 0.0);
}

#[test]
fn maxmargin_zero_budget_gives_zero_classifier() {
    let cfg = LinearEnvConfig { dim_spurious: 3, n: 50, p: 0.8, seed: 7 };
    let data = sample_linear_env(&cfg);
    let clf = maxmargin_sparse_fit(&data, 0).unwrap();
    assert_eq!(clf.w_inv, 0.0);
    assert!(clf.w_sp.iter().all(|&w| w == 0.0));
    assert_eq!(error_rate(&clf, &data), 1.0); // all ties
}

#[test]
fn maxmargin_wider_budget_beats_single_coordinate() {
    // With p = 1 all D+1 coordinates agree; using them all multiplies the
    // margin by √(D+1).
    let cfg = LinearEnvConfig { dim_spurious: 3, n: 100, p: 1.0, seed: 8 };
    let data = sample_linear_env(&cfg);
    let clf = maxmargin_sparse_fit(&data, 4).unwrap();
    let margin = min_margin(&clf, &data).unwrap();
    assert!((margin - 2.0).abs() < 1e-6, "margin {margin}");
}

#[test]
fn proposition_verifier_passes_at_reduced_scale() {
    let cfg = PropositionConfig::new(0.4, 50, 500, 0.1, 20, 42);
    let report = verify_proposition(&cfg).unwrap();
    assert!(report.sparse_error_zero, "sparse classifier made an error");
    assert!(report.regular_seen_within_bound);
    assert!(
        report.regular_unseen_near_half,
        "unseen error {} vs expected {}",
        report.regular_unseen_error, report.regular_unseen_expected
    );
    assert!(report.margin_checked);
    assert!(report.margin_dominates, "{}/20 margin trials", report.margin_trials_passed);
    assert!(report.all_pass());
    assert!((report.margin_sparse - 1.0).abs() < 1e-12);
    // D = 50 is even: the expected unseen error includes half the tie mass
    // C(50,25)/2^50 ≈ 0.1123.
    assert!((report.regular_unseen_expected - 0.5 - 0.1123 / 2.0).abs() < 1e-3);
}

#[test]
fn proposition_verifier_is_deterministic() {
    let cfg = PropositionConfig::new(0.3, 11, 200, 0.2, 5, 9);
    let a = verify_proposition(&cfg).unwrap();
    let b = verify_proposition(&cfg).unwrap();
    assert_eq!(a.regular_unseen_error, b.regular_unseen_error);
    assert_eq!(a.regular_margin_min, b.regular_margin_min);
    // Odd D: no ties, expected unseen error is exactly ½.
    assert_eq!(a.regular_unseen_expected, 0.5);
}

#[test]
fn proposition_verifier_rejects_bad_configs() {
    assert!(verify_proposition(&PropositionConfig::new(1.2, 10, 100, 0.1, 5, 0)).is_err());
    assert!(verify_proposition(&PropositionConfig::new(0.4, 0, 100, 0.1, 5, 0)).is_err());
    assert!(verify_proposition(&PropositionConfig::new(0.4, 10, 100, 1.5, 5, 0)).is_err());
    let mut cfg = PropositionConfig::new(0.4, 10, 100, 0.1, 5, 0);
    cfg.epsilon = -0.1;
    assert!(verify_proposition(&cfg).is_err());
}
