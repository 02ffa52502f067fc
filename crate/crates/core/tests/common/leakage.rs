//! Perturbation probes: held-out pollution values must never reach an
//! output or a loss term.

use super::{tiny_config, toy_dataset, toy_model, toy_operators};
use physkrig::diffcore::Tape;
use physkrig::loss::{aod_gradient_loss, infer_loss, init_loss, EdgeList};
use physkrig::model::{full_forward, ParamVars};
use physkrig::trainer::{infer_nodes, infer_stations, Dataset, MaskPartition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 6;
pub const STEPS: usize = 10;

pub fn perturb(ds: &Dataset<f64>, nodes: &[usize], seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for &i in nodes {
        for t in 0..ds.steps {
            out.pollution[i * ds.steps + t] += rng.random_range(-50.0..50.0);
        }
    }
    out
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Loss terms with inputs taken from `input` and the reference truth from
/// `truth_source`.
pub fn loss_terms(input: &Dataset<f64>, truth_source: &Dataset<f64>, partition: &MaskPartition) -> [u64; 5] {
    let model = toy_model(tiny_config(), truth_source, 11);
    let ops = toy_operators(input);
    let all: Vec<usize> = (0..N).collect();
    let series = input.node_series(&all, &partition.observed_flags(N), 0..STEPS, &model.norm).unwrap();
    let truth = truth_source.gather(&truth_source.pollution, &all, 0..STEPS);
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &model.params, true).unwrap();
    let out = full_forward(&mut tape, &model, &vars, &series, &ops).unwrap();
    let a = infer_loss(&mut tape, out.pred, &truth, partition).unwrap();
    let b = init_loss(&mut tape, out.init, &truth, partition).unwrap();
    let c = aod_gradient_loss(&mut tape, out.pred, input.aod.as_ref().unwrap(), &EdgeList::from_geo(&ops.geo)).unwrap();
    [
        tape.value(a).item().to_bits(),
        tape.value(b).item().to_bits(),
        tape.value(c).item().to_bits(),
        tape.value(out.pred).data().iter().map(|x| x.to_bits()).fold(0, |h, x| h ^ x.rotate_left(7)),
        tape.value(out.init).data().iter().map(|x| x.to_bits()).fold(0, |h, x| h ^ x.rotate_left(7)),
    ]
}

/// Perturbed target inputs whose loss terms or outputs differ from the
/// clean run, out of eight draws.
pub fn loss_probe_mismatches() -> usize {
    let ds = toy_dataset(N, STEPS, 21);
    let partition = MaskPartition::new(vec![0, 2, 5], vec![1, 3, 4], N).unwrap();
    let reference = loss_terms(&ds, &ds, &partition);
    (0..8)
        .filter(|&seed| loss_terms(&perturb(&ds, partition.target(), seed), &ds, &partition) != reference)
        .count()
}

/// Station and node inference runs that change when unobserved pollution is
/// perturbed, out of six.
pub fn inference_probe_mismatches() -> usize {
    let ds = toy_dataset(N, 30, 24);
    let model = toy_model(tiny_config(), &ds, 5);
    let targets = [1, 4];
    let base = bits(infer_stations(&model, &ds, &targets, 0..30).unwrap().data());
    let mut bad = (0..5)
        .filter(|&seed| {
            let noisy = perturb(&ds, &targets, seed);
            bits(infer_stations(&model, &noisy, &targets, 0..30).unwrap().data()) != base
        })
        .count();
    let partial = infer_nodes(&model, &ds, &[0, 2, 3], &targets, 10..30).unwrap();
    let noisy = perturb(&ds, &[1, 4, 5], 99);
    let again = infer_nodes(&model, &noisy, &[0, 2, 3], &targets, 10..30).unwrap();
    if bits(partial.data()) != bits(again.data()) {
        bad += 1;
    }
    bad
}
