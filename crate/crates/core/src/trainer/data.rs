use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::SplitSpec;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geo_graph::{CoincidentPolicy, GraphOperators, NodeSet, WindSeries};
use crate::loss::AodField;
use crate::model::{NodeSeries, Normalization, RawSeries};
use crate::scalar::Real;
use crate::synth::{AodRaster, StationSample, TruthField};

/// A raster whose cell `k = y * nx + x` is node `offset + k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub cell_km: f64,
    pub offset: usize,
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node_ids(&self) -> Range<usize> {
        self.offset..self.offset + self.cells()
    }
}

/// Inputs over a fixed node set and time axis. Per-node arrays are
/// node-major `[node * steps + t]`.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub ids: Vec<String>,
    pub nodes: NodeSet<T>,
    pub steps: usize,
    pub wind: WindSeries<T>,
    pub emission: Vec<T>,
    /// Observed concentrations; zero for nodes without a station.
    pub pollution: Vec<T>,
    /// Nodes that carry observations, ascending.
    pub stations: Vec<usize>,
    pub aod: Option<AodField<T>>,
    pub grid: Option<GridSpec>,
}

impl<T: Real> Dataset<T> {
    /// Checks array sizes, finiteness and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let data = |m: String| Err(Error::Data(m));
        if self.ids.len() != n {
            return data(format!("{} ids for {n} nodes", self.ids.len()));
        }
        let mut sorted = self.ids.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return data(format!("duplicate node id {}", w[0]));
        }
        if self.wind.nodes() != n || self.wind.steps() != self.steps {
            return data("wind does not cover every node and step".into());
        }
        for (name, v) in [("emission", &self.emission), ("pollution", &self.pollution)] {
            if v.len() != n * self.steps {
                return data(format!("{name} has {} values, expected {}", v.len(), n * self.steps));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return data(format!("{name} contains non-finite values"));
            }
        }
        if self.stations.windows(2).any(|w| w[0] >= w[1]) || self.stations.last().is_some_and(|&s| s >= n) {
            return data("station list must be ascending node indices".into());
        }
        if let Some(a) = &self.aod {
            if a.nodes() != n || a.steps() != self.steps {
                return data("AOD field does not cover every node and step".into());
            }
        }
        if let Some(g) = &self.grid {
            if g.offset + g.cells() > n {
                return data("grid cells exceed the node list".into());
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn series_of<'a>(&self, values: &'a [T], node: usize) -> &'a [T] {
        &values[node * self.steps..(node + 1) * self.steps]
    }

    /// Model input for `ids` over `range`; pollution is read only for nodes
    /// whose flag is set.
    pub fn node_series(&self, ids: &[usize], observed: &[bool], range: Range<usize>, norm: &Normalization<T>) -> Result<NodeSeries<T>> {
        let w = range.len();
        let mut met = Vec::with_capacity(ids.len() * w * 2);
        let mut emission = Vec::with_capacity(ids.len() * w);
        let mut pollution = Vec::with_capacity(ids.len() * w);
        for (&i, &obs) in ids.iter().zip(observed) {
            if i >= self.len() {
                return Err(Error::UnknownNode(i));
            }
            for t in range.clone() {
                let v = self.wind.at(t, i);
                met.extend_from_slice(&v);
            }
            emission.extend_from_slice(&self.series_of(&self.emission, i)[range.clone()]);
            if obs {
                pollution.extend_from_slice(&self.series_of(&self.pollution, i)[range.clone()]);
            } else {
                pollution.extend(std::iter::repeat_n(T::zero(), w));
            }
        }
        NodeSeries::assemble(
            &RawSeries {
                nodes: ids.len(),
                steps: w,
                met: &met,
                emission: &emission,
                pollution: &pollution,
                observed,
            },
            norm,
            2,
            1,
        )
    }

    pub fn operators(
        &self,
        ids: &[usize],
        range: Range<usize>,
        threshold_km: T,
        sigma_sq: Option<T>,
        coincident: CoincidentPolicy,
    ) -> Result<GraphOperators<T>> {
        let nodes = self.nodes.select(ids)?;
        let wind = self.wind.slice_steps(range.start, range.end).select_nodes(ids);
        GraphOperators::build(&nodes, &wind, threshold_km, sigma_sq, coincident)
    }

    /// `values` restricted to `ids` over `range`, as `[ids, steps]`.
    pub fn gather(&self, values: &[T], ids: &[usize], range: Range<usize>) -> Tensor<T> {
        let mut out = Vec::with_capacity(ids.len() * range.len());
        for &i in ids {
            out.extend_from_slice(&self.series_of(values, i)[range.clone()]);
        }
        Tensor::new(vec![ids.len(), range.len()], out).expect("sizes agree")
    }

    /// Per-channel statistics of wind and emissions over `ids` x `range`,
    /// and of pollution over the stations among `ids`.
    pub fn fit_normalization(&self, ids: &[usize], range: Range<usize>) -> Result<Normalization<T>> {
        fn moments<T: Real>(xs: impl Iterator<Item = T> + Clone) -> (T, T) {
            let n = T::from_usize_lossy(xs.clone().count().max(1));
            let mean = xs.clone().sum::<T>() / n;
            let var = xs.map(|x| (x - mean) * (x - mean)).sum::<T>() / n;
            let std = var.sqrt();
            (mean, if std > T::lit(1e-12) { std } else { T::one() })
        }
        if ids.is_empty() || range.is_empty() {
            return Err(Error::invalid("normalization needs nodes and steps"));
        }
        let stations: Vec<usize> = ids.iter().copied().filter(|i| self.stations.binary_search(i).is_ok()).collect();
        if stations.is_empty() {
            return Err(Error::Data("no station observations in the training set".into()));
        }
        let r = range.clone();
        let u = moments(ids.iter().flat_map(|&i| r.clone().map(move |t| (i, t))).map(|(i, t)| self.wind.at(t, i)[0]));
        let v = moments(ids.iter().flat_map(|&i| r.clone().map(move |t| (i, t))).map(|(i, t)| self.wind.at(t, i)[1]));
        let e = moments(ids.iter().flat_map(|&i| self.series_of(&self.emission, i)[r.clone()].iter().copied()));
        let p = moments(stations.iter().flat_map(|&i| self.series_of(&self.pollution, i)[r.clone()].iter().copied()));
        Ok(Normalization {
            channel_mean: vec![u.0, v.0, e.0],
            channel_std: vec![u.1, v.1, e.1],
            target_mean: p.0,
            target_std: p.1,
        })
    }
}

/// A resolved [`SplitSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub train_stations: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl SplitSpec {
    /// Chronological ranges from the fractions and a seeded station hold-out
    /// of `round(stations * holdout_fraction)`.
    pub fn resolve(&self, steps: usize, stations: &[usize]) -> Result<Split> {
        let train_end = (steps as f64 * self.train_fraction).round() as usize;
        let val_end = (steps as f64 * (self.train_fraction + self.val_fraction)).round() as usize;
        let val_end = val_end.clamp(train_end, steps);
        if train_end == 0 {
            return Err(Error::Config("training range is empty".into()));
        }
        let k = (stations.len() as f64 * self.holdout_fraction).round() as usize;
        if stations.len() < k + 2 {
            return Err(Error::Data(format!(
                "{} stations leave fewer than 2 for training after holding out {k}",
                stations.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut shuffled = stations.to_vec();
        shuffled.shuffle(&mut rng);
        let mut holdout = shuffled.split_off(stations.len() - k);
        shuffled.sort_unstable();
        holdout.sort_unstable();
        let split = Split {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..steps,
            train_stations: shuffled,
            holdout,
        };
        debug_assert!(split.train.end <= split.val.start && split.val.end <= split.test.start);
        Ok(split)
    }
}

/// A dataset built from a simulation, with the truth for every node.
#[derive(Clone, Debug)]
pub struct SynthData<T> {
    pub dataset: Dataset<T>,
    /// `[nodes, steps]`
    pub truth: Vec<T>,
    /// Raster cell of each node.
    pub cells: Vec<usize>,
}

/// Stations first (ids `s000`, ...), then, when `with_grid`, every raster
/// cell (ids `g0000`, ...).
pub fn dataset_from_synth<T: Real>(
    truth: &TruthField,
    stations: &StationSample,
    aod: Option<&AodRaster>,
    with_grid: bool,
) -> Result<SynthData<T>> {
    let steps = truth.steps;
    let mut cells = stations.cells.clone();
    let mut ids: Vec<String> = (0..cells.len()).map(|i| format!("s{i:03}")).collect();
    let grid = with_grid.then(|| GridSpec {
        nx: truth.nx,
        ny: truth.ny,
        cell_km: truth.cell_km,
        offset: cells.len(),
    });
    if with_grid {
        ids.extend((0..truth.cells()).map(|k| format!("g{k:04}")));
        cells.extend(0..truth.cells());
    }
    let n = cells.len();
    let center = |k: usize| {
        [
            T::lit(((k % truth.nx) as f64 + 0.5) * truth.cell_km),
            T::lit(((k / truth.nx) as f64 + 0.5) * truth.cell_km),
        ]
    };
    let nodes = NodeSet::new(cells.iter().map(|&k| center(k)).collect())?;
    let mut wind = Vec::with_capacity(n * steps);
    for t in 0..steps {
        for &k in &cells {
            let w = truth.wind_at(k, t);
            wind.push([T::lit(w[0]), T::lit(w[1])]);
        }
    }
    let lift = |xs: &[f64]| xs.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
    let emission: Vec<T> = cells.iter().flat_map(|&k| lift(truth.emission_series(k))).collect();
    let truth_nodes: Vec<T> = cells.iter().flat_map(|&k| lift(truth.series(k))).collect();
    let mut pollution = lift(&stations.observed);
    pollution.resize(n * steps, T::zero());
    let aod = aod
        .map(|a| {
            let mut values = Vec::with_capacity(n * steps);
            let mut valid = Vec::with_capacity(n * steps);
            for &k in &cells {
                for t in 0..steps {
                    let ok = a.valid[k * steps + t];
                    values.push(if ok { T::lit(a.values[k * steps + t]) } else { T::zero() });
                    valid.push(if ok { T::one() } else { T::zero() });
                }
            }
            AodField::new(Tensor::new(vec![n, steps], values)?, Tensor::new(vec![n, steps], valid)?)
        })
        .transpose()?;
    let dataset = Dataset {
        ids,
        nodes,
        steps,
        wind: WindSeries::new(steps, n, wind)?,
        emission,
        pollution,
        stations: (0..stations.cells.len()).collect(),
        aod,
        grid,
    };
    dataset.validate()?;
    Ok(SynthData {
        dataset,
        truth: truth_nodes,
        cells,
    })
}
