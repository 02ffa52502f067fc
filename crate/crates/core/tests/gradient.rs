mod common;

use common::grad::{max_relative_error, smooth_config, Problem, WEIGHTS};
use common::{tiny_config, toy_model};
use physkrig::model::{KernelWeights, ModelConfig};

#[test]
fn composite_loss_matches_finite_differences() {
    for seed in [1, 2] {
        let (rel, at) = max_relative_error(smooth_config(), seed);
        assert!(rel < 1e-4, "seed {seed}: relative error {rel:e} at {at}");
    }
}

#[test]
fn separate_kernel_weights_match_finite_differences() {
    let config = ModelConfig {
        kernel_weights: KernelWeights::Separate,
        residual: false,
        ..smooth_config()
    };
    let (rel, at) = max_relative_error(config, 3);
    assert!(rel < 1e-4, "relative error {rel:e} at {at}");
}

#[test]
fn every_parameter_receives_gradient() {
    let problem = Problem::new(5);
    let model = toy_model(tiny_config(), &problem.ds, 5);
    let (_, grads) = problem.eval(&model, &model.params, true);
    assert_eq!(grads.len(), model.params.len());
    for (name, g) in grads {
        assert!(g.iter().any(|x| *x != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn composite_gradient_is_the_weighted_sum_of_components() {
    let problem = Problem::new(6);
    let model = toy_model(smooth_config(), &problem.ds, 6);
    let [infer, init, aod, total] = problem.component_grads(&model);
    for k in 0..total.len() {
        let expected = infer[k] + WEIGHTS.lambda1 * init[k] + WEIGHTS.lambda2 * aod[k];
        assert!((total[k] - expected).abs() <= 1e-12 * expected.abs().max(1.0), "entry {k}");
    }
}
