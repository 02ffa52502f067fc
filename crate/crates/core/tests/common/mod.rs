#![allow(dead_code)]

pub mod grad;
pub mod graphs;
pub mod leakage;
pub mod oracles;

use physkrig::diffcore::Tensor;
use physkrig::geo_graph::{CoincidentPolicy, GraphOperators, NodeSet, WindSeries};
use physkrig::loss::AodField;
use physkrig::model::{init_params, GraphSettings, Model, ModelConfig, Normalization};
use physkrig::trainer::{advection_scale, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small model that keeps finite-difference and probe tests fast.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 4,
        readout_hidden: 3,
        tcn_layers: 2,
        tcn_kernel_size: 2,
        gnn_layers: 2,
        ..Default::default()
    }
}

/// `n` stations scattered over a 10 km square, every one observed, with
/// random wind, emissions, pollution and a partially valid AOD field.
pub fn toy_dataset(n: usize, steps: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
        .collect();
    let wind: Vec<[f64; 2]> = (0..steps * n)
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
        .collect();
    let emission = (0..n * steps).map(|_| rng.random_range(0.0..5.0)).collect();
    let pollution = (0..n * steps).map(|_| rng.random_range(5.0..40.0)).collect();
    let aod_values: Vec<f64> = (0..n * steps).map(|_| rng.random_range(0.0..2.0)).collect();
    let aod_valid: Vec<f64> = (0..n * steps)
        .map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 })
        .collect();
    Dataset {
        ids: (0..n).map(|i| format!("n{i}")).collect(),
        nodes: NodeSet::new(positions).unwrap(),
        steps,
        wind: WindSeries::new(steps, n, wind).unwrap(),
        emission,
        pollution,
        stations: (0..n).collect(),
        aod: Some(
            AodField::new(
                Tensor::new(vec![n, steps], aod_values).unwrap(),
                Tensor::new(vec![n, steps], aod_valid).unwrap(),
            )
            .unwrap(),
        ),
        grid: None,
    }
}

pub const TOY_THRESHOLD_KM: f64 = 20.0;

pub fn toy_operators(ds: &Dataset<f64>) -> GraphOperators<f64> {
    let all: Vec<usize> = (0..ds.len()).collect();
    ds.operators(&all, 0..ds.steps, TOY_THRESHOLD_KM, None, CoincidentPolicy::Error)
        .unwrap()
}

pub fn toy_model(config: ModelConfig, ds: &Dataset<f64>, seed: u64) -> Model<f64> {
    let ops = toy_operators(ds);
    let all: Vec<usize> = (0..ds.len()).collect();
    Model {
        params: init_params(&config, seed).unwrap(),
        config,
        norm: ds.fit_normalization(&all, 0..ds.steps).unwrap(),
        graph: GraphSettings {
            threshold_km: TOY_THRESHOLD_KM,
            sigma_sq: ops.geo.sigma_sq,
            advection_scale: advection_scale(&ops),
        },
    }
}

/// Identity normalization with `channels` met + emission channels.
pub fn unit_norm(channels: usize) -> Normalization<f64> {
    Normalization::identity(channels)
}

/// A 10 x 10 raster over 120 steps with two sources, 30 stations and an
/// ideal AOD proxy; grid cells appended when `with_grid`.
pub fn small_synth(seed: u64, with_grid: bool) -> physkrig::trainer::SynthData<f64> {
    use physkrig::synth::{make_aod, sample_stations, simulate, ScenarioSpec, Schedule, Source, WindRegime};
    let source = |x_km, y_km, rate| Source {
        x_km,
        y_km,
        rate,
        radius_km: 1.0,
        schedule: Schedule::Diurnal {
            amplitude: 0.5,
            peak_hour: 8.0,
        },
        variability: 0.3,
    };
    let spec = ScenarioSpec {
        nx: 10,
        ny: 10,
        steps: 120,
        wind: WindRegime::Meandering {
            speed: 2.0,
            direction_deg: 0.0,
            swing_deg: 30.0,
            period_hours: 24.0,
        },
        sources: vec![source(4.0, 6.0, 150.0), source(6.0, 14.0, 100.0)],
        stations: 30,
        seed,
        ..Default::default()
    };
    let truth = simulate(&spec).unwrap();
    let stations = sample_stations(&truth, spec.stations, seed, 0.0).unwrap();
    let aod = make_aod(&truth, &spec.aod, seed).unwrap();
    physkrig::trainer::dataset_from_synth(&truth, &stations, Some(&aod), with_grid).unwrap()
}

/// Few, small batches: enough to learn the toy problems in seconds.
pub fn quick_config(epochs: usize) -> physkrig::trainer::RunConfig {
    let mut cfg = physkrig::trainer::RunConfig::default();
    cfg.model.hidden_dim = 12;
    cfg.model.readout_hidden = 12;
    cfg.graph.threshold_km = 8.0;
    cfg.train.epochs = epochs;
    cfg.train.batches_per_epoch = 4;
    cfg.train.patience = epochs;
    cfg
}
