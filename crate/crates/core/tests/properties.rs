mod common;

use common::checks;

fn run(check: checks::Check) {
    match check {
        Ok(summary) => println!("{summary}"),
        Err(msg) => panic!("{msg}"),
    }
}

#[test]
fn backprop_matches_finite_differences() {
    run(checks::gradient_finite_difference());
}

#[test]
fn conv_matches_sliding_window_reference() {
    run(checks::conv_against_sliding_window());
}

#[test]
fn one_sgd_step_lowers_sample_loss() {
    run(checks::single_step_decreases_loss());
}

#[test]
fn kmeans_is_monotone_and_optimal_on_tiny_instances() {
    run(checks::kmeans_monotone_and_optimal());
}

#[test]
fn rectifiers_are_monotone_and_trelu_zero_is_relu() {
    run(checks::rectifier_grids());
}

#[test]
fn decode_matches_nearest_one_hot() {
    run(checks::decode_is_nearest_one_hot());
}

#[test]
fn sphere_normalization_is_unit_and_scale_free() {
    run(checks::sphere_normalization());
}

#[test]
fn rectification_separates_opposite_inputs() {
    run(checks::sign_disambiguation());
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    run(checks::checkpoint_round_trip());
}

#[test]
fn idx_loader_pads_and_scales() {
    run(checks::idx_loader(None));
}
