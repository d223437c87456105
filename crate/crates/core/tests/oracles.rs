mod common;

#[test]
fn guided_filter_matches_window_least_squares() {
    for seed in 0..20 {
        let gap = common::guided_oracle_gap(seed);
        assert!(gap < 1e-5, "case {seed}: {gap:e}");
    }
}

#[test]
fn expectation_matches_direct_sum() {
    for seed in 0..10 {
        let gap = common::expectation_gap(seed);
        assert!(gap < 1e-12, "case {seed}: {gap:e}");
    }
}

#[test]
fn brute_force_oracle_keeps_constants() {
    let p = vec![3.5; 36];
    let g: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin()).collect();
    let out = common::brute_force_guided(&p, &g, 6, 6, 2, 1e-3);
    assert!(out.iter().all(|v| (v - 3.5).abs() < 1e-12));
}
