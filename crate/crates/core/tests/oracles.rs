//! Library kernels against brute-force references on random small shapes.

mod common;

use common::checks;

const CASES: usize = 25;
const TOL: f64 = 1e-5;

fn assert_close(name: &str, worst: f64) {
    assert!(worst < TOL, "{name}: worst scaled deviation {worst:e} exceeds {TOL:e}");
}

#[test]
fn conv2d_matches_direct_summation() {
    assert_close("conv2d", checks::conv2d_cases(CASES, 11));
}

#[test]
fn pools_match_window_reductions() {
    assert_close("pool", checks::pool_cases(CASES, 12));
}

#[test]
fn upsample_matches_separable_interpolation() {
    assert_close("upsample", checks::upsample_cases(CASES, 13));
}

#[test]
fn matmul_matches_triple_loop() {
    assert_close("matmul", checks::matmul_cases(CASES, 14));
}

#[test]
fn softmax_matches_naive_exponentials() {
    assert_close("softmax", checks::softmax_cases(CASES, 15));
}

#[test]
fn bilstm_matches_stepwise_recurrence() {
    assert_close("bilstm", checks::bilstm_cases(CASES, 16));
}

#[test]
fn coordinate_pool_matches_loops() {
    assert_close("coordinate_pool", checks::coordinate_pool_cases(CASES, 17));
}

#[test]
fn coattention_matches_loops() {
    assert_close("coattention", checks::coattention_cases(CASES, 18));
}

#[test]
fn conv_fixture_three_by_three_ones() {
    let (out, shape) = common::conv2d(&[1.0; 9], [1, 1, 3, 3], &[1.0; 9], [1, 1, 3, 3], None, (1, 1), (0, 0, 0, 0));
    assert_eq!((out, shape), (vec![9.0], [1, 1, 1, 1]));
}

#[test]
fn avg_pool_ramp_fixture() {
    let x: Vec<f64> = (0..16).map(f64::from).collect();
    let (out, _) = common::avg_pool(&x, [1, 1, 4, 4], (2, 2), (2, 2));
    assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn interpolation_rows_are_stochastic() {
    for (i, o) in [(1, 4), (3, 7), (5, 5), (2, 9)] {
        for row in common::interpolation_matrix(i, o) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
