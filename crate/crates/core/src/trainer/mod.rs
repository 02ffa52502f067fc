//! Inductive training by random node masking, and station/grid inference.
//!
//! Every training sample is one window of the training range plus a fresh
//! split of the training stations into observed and target nodes. Targets
//! enter the model with their pollution channel zeroed and are the only rows
//! the reconstruction losses read.

mod config;
mod data;
mod partition;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

pub use config::{GraphConfig, RunConfig, SplitSpec, Task, TrainConfig};
pub use data::{dataset_from_synth, Dataset, GridSpec, Split, SynthData};
pub use partition::{sample_partition, MaskPartition};

use crate::diffcore::{reduce_grads, Adam, ParamGrads, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geo_graph::{CoincidentPolicy, GraphOperators};
use crate::loss::{aod_gradient_loss, composite_loss, infer_loss, init_loss, AodField, EdgeList};
use crate::metrics::Scores;
use crate::model::{forward_with_kernels, init_params, Checkpoint, GraphSettings, Kernels, Model, NodeSeries, ParamVars};
use crate::scalar::Real;

/// Output steps per inference chunk; each chunk is preceded by enough
/// history to fill the receptive field, so chunking never changes results.
const INFERENCE_CHUNK: usize = 48;

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Hold-out scores over the validation range, when there is one.
    pub val: Option<Scores>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best validation MAE (the last epoch
    /// when there is no validation range).
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub split: Split,
    /// Run settings recorded in the checkpoint.
    pub metadata: serde_json::Value,
}

impl<T: Real> TrainOutcome<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            extra: self.metadata.clone(),
        }
    }
}

/// Multiplier bringing the mean advection row sum over all nodes and steps
/// to one; 1 when there is no advection at all.
pub fn advection_scale<T: Real>(ops: &GraphOperators<T>) -> T {
    let total: T = ops.advection.iter().map(|a| a.values().iter().copied().sum::<T>()).sum();
    let cells = T::from_usize_lossy(ops.nodes() * ops.steps().max(1));
    if total > T::zero() {
        cells / total
    } else {
        T::one()
    }
}

struct SampleContext<'a, T> {
    dataset: &'a Dataset<T>,
    cfg: &'a RunConfig,
    /// Training stations first, then grid cells for the grid task.
    nodes: Vec<usize>,
    range: Range<usize>,
    kernels: Kernels<T>,
    aod: Option<(AodField<T>, EdgeList)>,
}

impl<T: Real> SampleContext<'_, T> {
    /// Composite loss and its gradient for the window starting `offset`
    /// steps into the training range.
    fn run(&self, model: &Model<T>, offset: usize, partition: &MaskPartition) -> Result<(T, ParamGrads<T>)> {
        let window = self.cfg.train.window;
        let n = self.nodes.len();
        let start = self.range.start + offset;
        let range = start..start + window;
        let flags = partition.observed_flags(n);
        let series = self.dataset.node_series(&self.nodes, &flags, range.clone(), &model.norm)?;
        let kernels = self.kernels.window(offset, offset + window);
        let truth = self.dataset.gather(&self.dataset.pollution, &self.nodes, range);

        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &model.params, true)?;
        let out = forward_with_kernels(&mut tape, model, &vars, &series, &kernels)?;
        let per_target = T::one() / T::from_usize_lossy(partition.target().len() * window);
        let infer = infer_loss(&mut tape, out.pred, &truth, partition)?;
        let infer = tape.scale(infer, per_target)?;
        let init = init_loss(&mut tape, out.init, &truth, partition)?;
        let init = tape.scale(init, per_target)?;
        let aod = match &self.aod {
            Some((field, edges)) if !edges.is_empty() => {
                let all: Vec<usize> = (0..n).collect();
                let w = field.select(&all, offset, offset + window)?;
                let l = aod_gradient_loss(&mut tape, out.pred, &w, edges)?;
                let per_edge = T::one() / T::from_usize_lossy(edges.len() * window);
                Some(tape.scale(l, per_edge)?)
            }
            _ => None,
        };
        let total = composite_loss(&mut tape, infer, init, aod, &self.cfg.loss)?;
        let mut grads = tape.backward(total)?;
        let mut out_grads = ParamGrads::new();
        for (name, var) in vars.iter() {
            let g = grads
                .take(var)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(var)));
            out_grads.insert(name.to_string(), g);
        }
        Ok((tape.value(total).item(), out_grads))
    }
}

/// Precomputed inputs for scoring hold-out stations on the validation range.
struct Validator<T> {
    chunks: Vec<(NodeSeries<T>, Kernels<T>, usize)>,
    /// Local indices of the hold-out stations within the node list.
    rows: Range<usize>,
    truth: Tensor<T>,
}

impl<T: Real> Validator<T> {
    fn new(dataset: &Dataset<T>, model: &Model<T>, split: &Split, grid: bool) -> Result<Option<Self>> {
        if split.val.is_empty() || split.holdout.is_empty() {
            return Ok(None);
        }
        let mut nodes = split.train_stations.clone();
        nodes.extend(&split.holdout);
        if grid {
            nodes.extend(dataset.grid.expect("grid task checked").node_ids());
        }
        let mut flags = vec![false; nodes.len()];
        flags[..split.train_stations.len()].iter_mut().for_each(|f| *f = true);
        let chunks = chunk_inputs(model, dataset, &nodes, &flags, split.val.clone())?;
        let rows = split.train_stations.len()..split.train_stations.len() + split.holdout.len();
        let truth = dataset.gather(&dataset.pollution, &split.holdout, split.val.clone());
        Ok(Some(Self { chunks, rows, truth }))
    }

    fn score(&self, model: &Model<T>) -> Result<Scores> {
        let pred = run_chunks(model, &self.chunks, self.rows.clone(), self.truth.shape()[1])?;
        Scores::compute(pred.data(), self.truth.data(), None)
    }
}

/// Series and kernels for consecutive output chunks of `range`, each with
/// up to `receptive_field - 1` steps of leading history. The third element
/// is the number of leading history steps to drop.
fn chunk_inputs<T: Real>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    nodes: &[usize],
    observed: &[bool],
    range: Range<usize>,
) -> Result<Vec<(NodeSeries<T>, Kernels<T>, usize)>> {
    let history = model.config.receptive_field() - 1;
    let mut out = Vec::new();
    let mut s = range.start;
    while s < range.end {
        let e = (s + INFERENCE_CHUNK).min(range.end);
        let from = s.saturating_sub(history);
        let series = dataset.node_series(nodes, observed, from..e, &model.norm)?;
        let ops = dataset.operators(
            nodes,
            from..e,
            model.graph.threshold_km,
            Some(model.graph.sigma_sq),
            CoincidentPolicy::Skip,
        )?;
        let kernels = Kernels::new(&ops, model.graph.advection_scale, model.config.kernel_weights)?;
        out.push((series, kernels, s - from));
        s = e;
    }
    Ok(out)
}

/// Predictions `[rows, steps]` stitched from the chunks.
fn run_chunks<T: Real>(
    model: &Model<T>,
    chunks: &[(NodeSeries<T>, Kernels<T>, usize)],
    rows: Range<usize>,
    steps: usize,
) -> Result<Tensor<T>> {
    let mut out = vec![Vec::with_capacity(steps); rows.len()];
    for (series, kernels, skip) in chunks {
        let pred = model.predict_with_kernels(series, kernels)?.pred;
        let w = pred.shape()[1];
        for (r, row) in rows.clone().zip(out.iter_mut()) {
            row.extend_from_slice(&pred.data()[r * w + skip..(r + 1) * w]);
        }
    }
    Tensor::new(vec![rows.len(), steps], out.concat())
}

/// Trains a model. Deterministic for a fixed configuration: samples are
/// drawn sequentially from one seeded generator and gradients are reduced in
/// sample order regardless of thread count.
pub fn train<T: Real>(dataset: &Dataset<T>, cfg: &RunConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    dataset.validate()?;
    let tc = &cfg.train;
    let split = cfg.split.resolve(dataset.steps, &dataset.stations)?;
    if split.train.len() < tc.window {
        return Err(Error::Config(format!(
            "training range of {} steps is shorter than the window {}",
            split.train.len(),
            tc.window
        )));
    }
    let grid = tc.task == Task::Grid;
    let mut nodes = split.train_stations.clone();
    if grid {
        let g = dataset
            .grid
            .ok_or_else(|| Error::Config("the grid task needs a dataset with grid cells".into()))?;
        nodes.extend(g.node_ids());
    }
    let coincident = if grid {
        CoincidentPolicy::Skip
    } else {
        CoincidentPolicy::Error
    };
    let threshold = T::lit(cfg.graph.threshold_km);
    let ops = dataset.operators(&nodes, split.train.clone(), threshold, None, coincident)?;
    let scale = advection_scale(&ops);
    let mut model = Model {
        config: cfg.model.clone(),
        params: init_params(&cfg.model, tc.seed)?,
        norm: dataset.fit_normalization(&nodes, split.train.clone())?,
        graph: GraphSettings {
            threshold_km: threshold,
            sigma_sq: ops.geo.sigma_sq,
            advection_scale: scale,
        },
    };
    let aod = match (&dataset.aod, tc.use_aod) {
        (Some(field), true) => {
            let edges = match dataset.grid {
                Some(g) if grid => EdgeList::grid4(g.nx, g.ny, split.train_stations.len()),
                _ => EdgeList::from_geo(&ops.geo),
            };
            Some((field.select(&nodes, split.train.start, split.train.end)?, edges))
        }
        _ => None,
    };
    let uses_aod = aod.is_some();
    let ctx = SampleContext {
        dataset,
        cfg,
        kernels: Kernels::new(&ops, scale, cfg.model.kernel_weights)?,
        nodes,
        range: split.train.clone(),
        aod,
    };
    drop(ops);
    let validator = Validator::new(dataset, &model, &split, grid)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7a1e_5eed);
    let mut adam = Adam::new(tc.optimizer);
    let locals: Vec<usize> = (0..split.train_stations.len()).collect();
    let max_offset = split.train.len() - tc.window;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, crate::diffcore::ParamStore<T>)> = None;
    for epoch in 0..tc.epochs {
        let mut loss_sum = 0.0;
        for batch in 0..tc.batches_per_epoch {
            let jobs = (0..tc.batch_size)
                .map(|_| {
                    let offset = rng.random_range(0..=max_offset);
                    Ok((offset, sample_partition(&locals, tc.mask_ratio, &mut rng)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let results: Vec<Result<(T, ParamGrads<T>)>> =
                jobs.par_iter().map(|(offset, p)| ctx.run(&model, *offset, p)).collect();
            let mut parts = Vec::with_capacity(results.len());
            for r in results {
                let (loss, grads) = r.map_err(|e| if e.is_numeric() { Error::Diverged { epoch, batch } } else { e })?;
                if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged { epoch, batch });
                }
                loss_sum += loss.as_f64();
                parts.push(grads);
            }
            let g = reduce_grads(&parts, T::one() / T::from_usize_lossy(parts.len()));
            adam.step(&mut model.params, &g);
        }
        let train_loss = loss_sum / (tc.batches_per_epoch * tc.batch_size) as f64;
        let val = validator.as_ref().map(|v| v.score(&model)).transpose()?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val: val.clone(),
        });
        if let Some(s) = val {
            if best.as_ref().is_none_or(|b| s.mae < b.1) {
                best = Some((epoch, s.mae, model.params.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.0) >= tc.patience {
                break;
            }
        }
    }
    let best_epoch = best.as_ref().map(|b| b.0);
    if let Some((_, _, params)) = best {
        model.params = params;
    }
    let metadata = json!({
        "config": cfg,
        "epochs_run": log.len(),
        "best_epoch": best_epoch,
        "aod_loss": uses_aod,
        "holdout": split.holdout.iter().map(|&i| dataset.ids[i].clone()).collect::<Vec<_>>(),
        "train_range": [split.train.start, split.train.end],
        "val_range": [split.val.start, split.val.end],
        "test_range": [split.test.start, split.test.end],
    });
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        split,
        metadata,
    })
}

/// Predictions `[targets, range]` with `observed` nodes as the only inputs
/// carrying pollution. Earlier steps of the dataset fill the receptive field.
pub fn infer_nodes<T: Real>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    observed: &[usize],
    targets: &[usize],
    range: Range<usize>,
) -> Result<Tensor<T>> {
    if range.end > dataset.steps || range.start > range.end {
        return Err(Error::invalid(format!(
            "step range {range:?} outside {} steps",
            dataset.steps
        )));
    }
    if targets.is_empty() {
        return Ok(Tensor::zeros(&[0, range.len()]));
    }
    let partition = MaskPartition::new(observed.to_vec(), targets.to_vec(), dataset.len())?;
    if let Some(&i) = partition.observed().iter().find(|i| dataset.stations.binary_search(i).is_err()) {
        return Err(Error::Data(format!("node {} has no observations", dataset.ids[i])));
    }
    let mut nodes = observed.to_vec();
    nodes.extend_from_slice(targets);
    let mut flags = vec![false; nodes.len()];
    flags[..observed.len()].iter_mut().for_each(|f| *f = true);
    let steps = range.len();
    let chunks = chunk_inputs(model, dataset, &nodes, &flags, range)?;
    run_chunks(model, &chunks, observed.len()..nodes.len(), steps)
}

/// Predictions at `targets` from every other station.
pub fn infer_stations<T: Real>(model: &Model<T>, dataset: &Dataset<T>, targets: &[usize], range: Range<usize>) -> Result<Tensor<T>> {
    if let Some(&t) = targets.iter().find(|&&t| t >= dataset.len()) {
        return Err(Error::UnknownNode(t));
    }
    let observed: Vec<usize> = dataset.stations.iter().copied().filter(|s| !targets.contains(s)).collect();
    infer_nodes(model, dataset, &observed, targets, range)
}

/// The field over every grid cell, `[cells, range]`, from all stations.
pub fn infer_grid<T: Real>(model: &Model<T>, dataset: &Dataset<T>, range: Range<usize>) -> Result<Tensor<T>> {
    let grid = dataset
        .grid
        .ok_or_else(|| Error::Data("dataset has no grid cells".into()))?;
    let cells: Vec<usize> = grid.node_ids().collect();
    infer_nodes(model, dataset, &dataset.stations, &cells, range)
}
