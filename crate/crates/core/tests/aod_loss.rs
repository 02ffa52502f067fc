mod common;

use std::sync::Arc;

use physkrig::diffcore::{Tape, Tensor};
use physkrig::loss::{aod_gradient_loss, AodField, EdgeList};
use proptest::prelude::*;

const NX: usize = 4;
const NY: usize = 3;
const STEPS: usize = 5;
const N: usize = NX * NY;

fn field(values: Vec<f64>, valid: Vec<bool>) -> AodField<f64> {
    AodField::new(
        Tensor::new(vec![N, STEPS], values).unwrap(),
        Tensor::new(vec![N, STEPS], valid.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()).unwrap(),
    )
    .unwrap()
}

/// Loss value and the gradient with respect to the prediction.
fn loss_and_grad(pred: &[f64], aod: &AodField<f64>) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::new(vec![N, STEPS], pred.to_vec()).unwrap()).unwrap();
    let l = aod_gradient_loss(&mut tape, p, aod, &EdgeList::grid4(NX, NY, 0)).unwrap();
    let g = tape.backward(l).unwrap();
    let grad = g.get(p).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; N * STEPS]);
    (tape.value(l).item(), grad)
}

fn inputs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(0.0..50.0f64, N * STEPS),
        prop::collection::vec(0.0..3.0f64, N * STEPS),
        prop::collection::vec(prop::bool::weighted(0.75), N * STEPS),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn additive_offset_invariance((pred, aod, valid) in inputs(), c in -100.0..100.0f64) {
        let shifted: Vec<f64> = aod.iter().map(|v| v + c).collect();
        let (a, _) = loss_and_grad(&pred, &field(aod, valid.clone()));
        let (b, _) = loss_and_grad(&pred, &field(shifted, valid));
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn non_negative_and_zero_at_affine_match((pred, aod, valid) in inputs(), gain in 0.1..10.0f64, c in -5.0..5.0f64) {
        let f = field(aod.clone(), valid);
        prop_assert!(loss_and_grad(&pred, &f).0 >= 0.0);
        let matched: Vec<f64> = aod.iter().map(|v| gain * v + c).collect();
        prop_assert!(loss_and_grad(&matched, &f).0.abs() < 1e-9);
    }

    /// Dropping edge weights with the references held fixed never raises
    /// the masked sum.
    #[test]
    fn dropping_weights_never_increases((pred, aod, valid) in inputs(), drop in prop::collection::vec(any::<bool>(), 17 * STEPS)) {
        let edges = EdgeList::grid4(NX, NY, 0);
        let e = edges.len();
        prop_assert_eq!(e, 17);
        let reference = Tensor::new(vec![e, STEPS], (0..e * STEPS).map(|k| aod[k % aod.len()]).collect()).unwrap();
        let full: Vec<f64> = (0..e * STEPS).map(|k| if valid[k % valid.len()] { 1.0 } else { 0.0 }).collect();
        let fewer: Vec<f64> = full.iter().zip(&drop).map(|(w, d)| if *d { 0.0 } else { *w }).collect();
        let eval = |w: Vec<f64>| {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::new(vec![N, STEPS], pred.clone()).unwrap()).unwrap();
            let shared = Arc::new(edges.pairs().to_vec());
            let l = tape.edge_diff_l1(p, shared, &reference, &Tensor::new(vec![e, STEPS], w).unwrap()).unwrap();
            tape.value(l).item()
        };
        prop_assert!(eval(fewer) <= eval(full));
    }
}

#[test]
fn fully_masked_gives_zero_loss_and_gradient() {
    let pred: Vec<f64> = (0..N * STEPS).map(|k| (k * 7 % 11) as f64).collect();
    let aod: Vec<f64> = (0..N * STEPS).map(|k| (k * 3 % 5) as f64).collect();
    let (l, g) = loss_and_grad(&pred, &field(aod, vec![false; N * STEPS]));
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|&x| x == 0.0));
}

/// Biased proxy (gain 3, offset 0.5): raw gradients are three times the
/// truth's, and after per-step standardization they agree with the truth's
/// standardized gradients.
#[test]
fn standardization_filters_gain_and_offset() {
    let (raw, rel) = common::oracles::bias_filter_errors();
    assert!(raw < 1e-9, "raw gradient mismatch {raw}");
    assert!(rel < 0.05, "relative gradient error {rel}");
}
