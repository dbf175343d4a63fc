mod common;

use common::oracles;

const TOL: f64 = 1e-10;

#[test]
fn mpnn_layer_matches_dense_formula() {
    assert!(oracles::mpnn_layer_error() < TOL);
}

#[test]
fn context_edge_matrix_matches_triple_product() {
    assert!(oracles::context_edge_matrix_error() < TOL);
}

#[test]
fn adjust_matches_projection_oracle() {
    assert!(oracles::adjust_error() < TOL);
}

#[test]
fn route_matches_sort_and_softmax() {
    assert!(oracles::route_error() < TOL);
}

#[test]
fn refinement_weights_match_softmax_of_cosines() {
    assert!(oracles::refinement_weights_error() < TOL);
}

#[test]
fn refine_prototypes_matches_blend() {
    assert!(oracles::refine_prototypes_error() < TOL);
}

#[test]
fn distill_init_matches_factorwise_mix() {
    assert!(oracles::distill_init_error() < TOL);
}
