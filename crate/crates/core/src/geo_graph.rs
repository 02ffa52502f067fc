//! Graph operators built from node coordinates and wind: the thresholded
//! Gaussian geospatial adjacency, its symmetric normalization (diffusion), and
//! the per-timestep wind-projection operator (advection).
//!
//! Coordinates are planar kilometres. Row `i` of every operator aggregates
//! messages *into* node `i`, so an advection entry `(i, j)` is the transport
//! weight from upwind node `j` to node `i`.

use std::sync::Arc;

use crate::diffcore::SparseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default neighbourhood threshold in kilometres.
pub const DEFAULT_THRESHOLD_KM: f64 = 200.0;

/// (m/s) / km expressed in 1/hour.
const MS_PER_KM_TO_PER_HOUR: f64 = 3.6;

/// Distance between two planar positions. Swap in a geodesic metric here.
pub trait Distance<T>: Sync {
    fn distance(&self, a: [T; 2], b: [T; 2]) -> T;
}

/// Euclidean distance on planar km coordinates.
#[derive(Clone, Copy, Debug, Default)]
pub struct Planar;

impl<T: Real> Distance<T> for Planar {
    fn distance(&self, a: [T; 2], b: [T; 2]) -> T {
        (a[0] - b[0]).hypot(a[1] - b[1])
    }
}

/// Node positions; the node id is the index.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSet<T> {
    positions: Vec<[T; 2]>,
}

impl<T: Real> NodeSet<T> {
    pub fn new(positions: Vec<[T; 2]>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::invalid(format!(
                "a node set needs at least 2 nodes, got {}",
                positions.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::invalid(format!("node {i} has a non-finite position")));
        }
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, id: usize) -> [T; 2] {
        self.positions[id]
    }

    pub fn positions(&self) -> &[[T; 2]] {
        &self.positions
    }

    /// Node set with `other` appended; ids of `other` are shifted by `self.len()`.
    pub fn concat(&self, other: &Self) -> Self {
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&other.positions);
        Self { positions }
    }

    /// Subset in the given order; new id `k` is old id `ids[k]`.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let positions = ids
            .iter()
            .map(|&i| self.positions.get(i).copied().ok_or(Error::UnknownNode(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(positions)
    }

    /// Every unordered pair `(i < j)` closer than `threshold`, with its distance.
    fn pairs_within<D: Distance<T>>(&self, threshold: T, metric: &D) -> Vec<(usize, usize, T)> {
        let n = self.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let d = metric.distance(self.positions[i], self.positions[j]);
                if d < threshold {
                    out.push((i, j, d));
                }
            }
        }
        out
    }
}

/// Per-node wind `(u, v)` in m/s over a sequence of timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct WindSeries<T> {
    steps: usize,
    nodes: usize,
    data: Vec<[T; 2]>,
}

impl<T: Real> WindSeries<T> {
    /// `data` is step-major: `data[t * nodes + i]`.
    pub fn new(steps: usize, nodes: usize, data: Vec<[T; 2]>) -> Result<Self> {
        if data.len() != steps * nodes {
            return Err(Error::invalid(format!(
                "wind series has {} entries, expected {steps} steps x {nodes} nodes",
                data.len()
            )));
        }
        if data.iter().any(|w| !w[0].is_finite() || !w[1].is_finite()) {
            return Err(Error::invalid("wind series contains non-finite values"));
        }
        Ok(Self { steps, nodes, data })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn at(&self, t: usize, node: usize) -> [T; 2] {
        self.data[t * self.nodes + node]
    }

    pub fn step(&self, t: usize) -> &[[T; 2]] {
        &self.data[t * self.nodes..(t + 1) * self.nodes]
    }

    /// Same steps with the node axis restricted to `ids`.
    pub fn select_nodes(&self, ids: &[usize]) -> Self {
        let data = (0..self.steps)
            .flat_map(|t| ids.iter().map(move |&i| self.at(t, i)))
            .collect();
        Self {
            steps: self.steps,
            nodes: ids.len(),
            data,
        }
    }

    pub fn concat_nodes(&self, other: &Self) -> Result<Self> {
        if self.steps != other.steps {
            return Err(Error::invalid(format!(
                "cannot join wind series of {} and {} steps",
                self.steps, other.steps
            )));
        }
        let data = (0..self.steps)
            .flat_map(|t| self.step(t).iter().chain(other.step(t)).copied())
            .collect();
        Ok(Self {
            steps: self.steps,
            nodes: self.nodes + other.nodes,
            data,
        })
    }

    pub fn slice_steps(&self, start: usize, end: usize) -> Self {
        Self {
            steps: end - start,
            nodes: self.nodes,
            data: self.data[start * self.nodes..end * self.nodes].to_vec(),
        }
    }
}

/// Thresholded Gaussian kernel `exp(-d^2 / sigma^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoAdjacency<T> {
    pub weights: SparseMatrix<T>,
    pub threshold_km: T,
    pub sigma_sq: T,
}

impl<T: Real> GeoAdjacency<T> {
    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }

    /// Undirected edges `(i, j)` with `i < j` and positive weight.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.weights
            .triplets()
            .filter(|&(i, j, _)| i < j)
            .map(|(i, j, _)| (i, j))
            .collect()
    }
}

/// `D^-1/2 A D^-1/2` of the geospatial adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionOperator<T> {
    pub weights: SparseMatrix<T>,
}

/// Wind-projection weights for one timestep, in 1/hour.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvectionOperator<T> {
    pub weights: SparseMatrix<T>,
}

/// How the advection builder treats two nodes at the same position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CoincidentPolicy {
    /// Report [`Error::CoincidentNodes`].
    #[default]
    Error,
    /// Leave the pair without an advection edge. Used when grid cells are
    /// laid over station locations.
    Skip,
}

/// Kernel width from the distances of connected pairs: their variance, else
/// their mean square, else 1.
pub fn kernel_variance<T: Real>(distances: &[T]) -> T {
    if distances.is_empty() {
        return T::one();
    }
    let n = T::from_usize_lossy(distances.len());
    let mean = distances.iter().copied().sum::<T>() / n;
    let var = distances.iter().map(|&d| (d - mean) * (d - mean)).sum::<T>() / n;
    if var > T::zero() {
        return var;
    }
    let msq = distances.iter().map(|&d| d * d).sum::<T>() / n;
    if msq > T::zero() {
        msq
    } else {
        T::one()
    }
}

pub fn build_geo_adjacency<T: Real>(nodes: &NodeSet<T>, threshold_km: T) -> Result<GeoAdjacency<T>> {
    build_geo_adjacency_with(nodes, threshold_km, None, &Planar)
}

/// Geospatial adjacency with an optional fixed kernel variance (a trained
/// model reuses its training graph's value) and a pluggable metric.
pub fn build_geo_adjacency_with<T: Real, D: Distance<T>>(
    nodes: &NodeSet<T>,
    threshold_km: T,
    sigma_sq: Option<T>,
    metric: &D,
) -> Result<GeoAdjacency<T>> {
    if !(threshold_km > T::zero()) || !threshold_km.is_finite() {
        return Err(Error::invalid(format!("threshold must be positive, got {threshold_km}")));
    }
    let pairs = nodes.pairs_within(threshold_km, metric);
    if pairs.is_empty() {
        return Err(Error::IsolatedGraph {
            threshold_km: threshold_km.as_f64(),
        });
    }
    let sigma_sq = match sigma_sq {
        Some(s) if s > T::zero() && s.is_finite() => s,
        Some(s) => return Err(Error::invalid(format!("kernel variance must be positive, got {s}"))),
        None => kernel_variance(&pairs.iter().map(|p| p.2).collect::<Vec<_>>()),
    };
    let mut trip = Vec::with_capacity(2 * pairs.len());
    for (i, j, d) in pairs {
        let w = (-(d * d) / sigma_sq).exp();
        trip.push((i, j, w));
        trip.push((j, i, w));
    }
    let n = nodes.len();
    Ok(GeoAdjacency {
        weights: SparseMatrix::from_triplets(n, n, trip)?,
        threshold_km,
        sigma_sq,
    })
}

pub fn build_diffusion_operator<T: Real>(geo: &GeoAdjacency<T>) -> DiffusionOperator<T> {
    let a = &geo.weights;
    let deg: Vec<T> = (0..a.rows()).map(|i| a.row(i).map(|(_, v)| v).sum()).collect();
    let trip = a.triplets().filter_map(|(i, j, v)| {
        let prod = deg[i] * deg[j];
        (prod > T::zero()).then(|| (i, j, v / prod.sqrt()))
    });
    DiffusionOperator {
        weights: SparseMatrix::from_triplets(a.rows(), a.cols(), trip).expect("same pattern"),
    }
}

pub fn build_advection_operator<T: Real>(
    nodes: &NodeSet<T>,
    wind: &[[T; 2]],
    threshold_km: T,
) -> Result<AdvectionOperator<T>> {
    build_advection_operator_with(nodes, wind, threshold_km, CoincidentPolicy::Error, &Planar)
}

/// Advection weight for the directed pair `j -> i`:
/// `ReLU(|v| / d_ij * cos(alpha))` where `v` is the mean of the two nodes'
/// winds and `alpha` its angle to the unit vector from `j` to `i`.
pub fn build_advection_operator_with<T: Real, D: Distance<T>>(
    nodes: &NodeSet<T>,
    wind: &[[T; 2]],
    threshold_km: T,
    coincident: CoincidentPolicy,
    metric: &D,
) -> Result<AdvectionOperator<T>> {
    let n = nodes.len();
    if wind.len() != n {
        return Err(Error::invalid(format!("{} wind vectors for {n} nodes", wind.len())));
    }
    if wind.iter().any(|w| !w[0].is_finite() || !w[1].is_finite()) {
        return Err(Error::invalid("non-finite wind"));
    }
    advection_from_pairs(nodes, wind, &nodes.pairs_within(threshold_km, metric), coincident)
}

fn advection_from_pairs<T: Real>(
    nodes: &NodeSet<T>,
    wind: &[[T; 2]],
    pairs: &[(usize, usize, T)],
    coincident: CoincidentPolicy,
) -> Result<AdvectionOperator<T>> {
    let n = nodes.len();
    let half = T::lit(0.5);
    let unit = T::lit(MS_PER_KM_TO_PER_HOUR);
    let mut trip = Vec::new();
    for &(a, b, d) in pairs {
        if d == T::zero() {
            match coincident {
                CoincidentPolicy::Error => return Err(Error::CoincidentNodes { i: a, j: b }),
                CoincidentPolicy::Skip => continue,
            }
        }
        let v = [(wind[a][0] + wind[b][0]) * half, (wind[a][1] + wind[b][1]) * half];
        let (pa, pb) = (nodes.position(a), nodes.position(b));
        // unit vector from a to b
        let e = [(pb[0] - pa[0]) / d, (pb[1] - pa[1]) / d];
        // |v| cos(alpha) is the projection v . e
        let along = v[0] * e[0] + v[1] * e[1];
        let w = along / d * unit;
        if w > T::zero() {
            // a is upwind of b: b receives from a
            trip.push((b, a, w));
        } else if w < T::zero() {
            trip.push((a, b, -w));
        }
    }
    Ok(AdvectionOperator {
        weights: SparseMatrix::from_triplets(n, n, trip)?,
    })
}

pub fn advection_sequence<T: Real>(
    nodes: &NodeSet<T>,
    wind: &WindSeries<T>,
    threshold_km: T,
) -> Result<Vec<AdvectionOperator<T>>> {
    advection_sequence_with(nodes, wind, threshold_km, CoincidentPolicy::Error)
}

pub fn advection_sequence_with<T: Real>(
    nodes: &NodeSet<T>,
    wind: &WindSeries<T>,
    threshold_km: T,
    coincident: CoincidentPolicy,
) -> Result<Vec<AdvectionOperator<T>>> {
    if wind.steps() == 0 {
        return Err(Error::invalid("wind series has no timesteps"));
    }
    if wind.nodes() != nodes.len() {
        return Err(Error::invalid(format!(
            "wind series covers {} nodes, graph has {}",
            wind.nodes(),
            nodes.len()
        )));
    }
    let pairs = nodes.pairs_within(threshold_km, &Planar);
    (0..wind.steps())
        .map(|t| {
            let w = wind.step(t);
            if w.iter().any(|w| !w[0].is_finite() || !w[1].is_finite()) {
                return Err(Error::invalid(format!("non-finite wind at step {t}")));
            }
            advection_from_pairs(nodes, w, &pairs, coincident)
        })
        .collect()
}

/// The operators a model run needs for one node set and time window.
#[derive(Clone, Debug)]
pub struct GraphOperators<T> {
    pub geo: GeoAdjacency<T>,
    pub diffusion: Arc<SparseMatrix<T>>,
    pub advection: Vec<Arc<SparseMatrix<T>>>,
}

impl<T: Real> GraphOperators<T> {
    /// All operators for `nodes` over every step of `wind`. A fixed
    /// `sigma_sq` reproduces a trained model's kernel width.
    pub fn build(
        nodes: &NodeSet<T>,
        wind: &WindSeries<T>,
        threshold_km: T,
        sigma_sq: Option<T>,
        coincident: CoincidentPolicy,
    ) -> Result<Self> {
        let geo = build_geo_adjacency_with(nodes, threshold_km, sigma_sq, &Planar)?;
        let diffusion = Arc::new(build_diffusion_operator(&geo).weights);
        let advection = advection_sequence_with(nodes, wind, threshold_km, coincident)?
            .into_iter()
            .map(|a| Arc::new(a.weights))
            .collect();
        Ok(Self {
            geo,
            diffusion,
            advection,
        })
    }

    /// Steps `start..end`; operators are shared, not copied.
    pub fn window(&self, start: usize, end: usize) -> Self {
        Self {
            geo: self.geo.clone(),
            diffusion: self.diffusion.clone(),
            advection: self.advection[start..end].to_vec(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.diffusion.rows()
    }

    pub fn steps(&self) -> usize {
        self.advection.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodes(p: &[[f64; 2]]) -> NodeSet<f64> {
        NodeSet::new(p.to_vec()).unwrap()
    }

    #[test]
    fn coincident_nodes_get_unit_weight() {
        let g = build_geo_adjacency(&nodes(&[[0.0, 0.0], [0.0, 0.0]]), 10.0).unwrap();
        assert_eq!(g.weights.get(0, 1), 1.0);
        assert_eq!(g.weights.get(0, 0), 0.0);
    }

    #[test]
    fn pairs_beyond_threshold_are_disconnected() {
        let ns = nodes(&[[0.0, 0.0], [10.0, 0.0], [0.0, 1.0]]);
        let g = build_geo_adjacency(&ns, 10.0).unwrap();
        assert_eq!(g.weights.get(0, 1), 0.0);
        assert!(g.weights.get(0, 2) > 0.0);
    }

    #[test]
    fn collinear_triple_uses_mean_square_fallback() {
        let ns = nodes(&[[0.0, 0.0], [100.0, 0.0], [200.0, 0.0]]);
        let g = build_geo_adjacency(&ns, 150.0).unwrap();
        // distances {100, 100}: variance 0, mean square 1e4
        assert_eq!(g.sigma_sq, 10_000.0);
        let expected = (-(100.0f64 * 100.0) / 10_000.0).exp();
        assert_eq!(g.weights.get(0, 1), expected);
        assert_eq!(g.weights.get(1, 2), expected);
        assert_eq!(g.weights.get(0, 2), 0.0);
    }

    #[test]
    fn isolated_graph_names_threshold() {
        let err = build_geo_adjacency(&nodes(&[[0.0, 0.0], [50.0, 0.0]]), 20.0).unwrap_err();
        assert!(err.to_string().contains("20"), "{err}");
    }

    #[test]
    fn two_node_diffusion_is_one() {
        let g = build_geo_adjacency(&nodes(&[[0.0, 0.0], [3.0, 4.0]]), 10.0).unwrap();
        let d = build_diffusion_operator(&g);
        assert_eq!(d.weights.get(0, 1), 1.0);
        assert_eq!(d.weights.get(1, 0), 1.0);
    }

    #[test]
    fn star_graph_normalization() {
        let a = SparseMatrix::from_triplets(
            4,
            4,
            (1..4).flat_map(|l| [(0, l, 1.0), (l, 0, 1.0)]),
        )
        .unwrap();
        let geo = GeoAdjacency {
            weights: a,
            threshold_km: 1.0,
            sigma_sq: 1.0,
        };
        let d = build_diffusion_operator(&geo);
        let expected = 1.0 / (3.0f64 * 1.0).sqrt();
        for l in 1..4 {
            assert_eq!(d.weights.get(0, l), expected);
            assert_eq!(d.weights.get(l, 0), expected);
        }
    }

    #[test]
    fn empty_adjacency_gives_zero_diffusion() {
        let geo = GeoAdjacency {
            weights: SparseMatrix::<f64>::zeros(3, 3),
            threshold_km: 1.0,
            sigma_sq: 1.0,
        };
        assert_eq!(build_diffusion_operator(&geo).weights.nnz(), 0);
    }

    #[test]
    fn aligned_wind_weight_is_speed_over_distance() {
        // j = 0 at origin, i = 1 to the east; eastward wind of 5 m/s
        let ns = nodes(&[[0.0, 0.0], [2.0, 0.0]]);
        let a = build_advection_operator(&ns, &[[5.0, 0.0], [5.0, 0.0]], 10.0).unwrap();
        assert!((a.weights.get(1, 0) - 5.0 / 2.0 * 3.6).abs() < 1e-12);
        // opposed direction is clipped
        assert_eq!(a.weights.get(0, 1), 0.0);
    }

    #[test]
    fn perpendicular_wind_gives_no_edge() {
        let ns = nodes(&[[0.0, 0.0], [2.0, 0.0]]);
        let a = build_advection_operator(&ns, &[[0.0, 3.0], [0.0, 3.0]], 10.0).unwrap();
        assert_eq!(a.weights.nnz(), 0);
    }

    #[test]
    fn reversed_wind_reverses_edge() {
        let ns = nodes(&[[0.0, 0.0], [2.0, 0.0]]);
        let a = build_advection_operator(&ns, &[[-4.0, 0.0], [-4.0, 0.0]], 10.0).unwrap();
        assert_eq!(a.weights.get(1, 0), 0.0);
        assert!((a.weights.get(0, 1) - 4.0 / 2.0 * 3.6).abs() < 1e-12);
    }

    #[test]
    fn coincident_pair_is_an_advection_error_unless_skipped() {
        let ns = nodes(&[[1.0, 1.0], [1.0, 1.0], [2.0, 1.0]]);
        let wind = [[1.0, 0.0]; 3];
        assert!(matches!(
            build_advection_operator(&ns, &wind, 5.0),
            Err(Error::CoincidentNodes { .. })
        ));
        let a = build_advection_operator_with(&ns, &wind, 5.0, CoincidentPolicy::Skip, &Planar).unwrap();
        assert_eq!(a.weights.get(0, 1) + a.weights.get(1, 0), 0.0);
        assert!(a.weights.get(2, 0) > 0.0);
    }

    #[test]
    fn mirrored_wind_gives_transposed_operators() {
        let ns = nodes(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0], [1.5, 1.5]]);
        let (steps, n) = (6, 5);
        let half: Vec<[f64; 2]> = (0..steps / 2 * n)
            .map(|k| [2.0 - 0.3 * k as f64, 0.2 * (k % 4) as f64 + 0.5])
            .collect();
        let mut data = half.clone();
        for t in (0..steps / 2).rev() {
            data.extend(half[t * n..(t + 1) * n].iter().map(|w| [-w[0], -w[1]]));
        }
        let seq = advection_sequence(&ns, &WindSeries::new(steps, n, data).unwrap(), 10.0).unwrap();
        for t in 0..steps {
            let (a, b) = (&seq[t].weights, &seq[steps - 1 - t].weights.transpose());
            assert!(a.nnz() > 0);
            for i in 0..n {
                for j in 0..n {
                    assert!((a.get(i, j) - b.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sequence_checks_lengths() {
        let ns = nodes(&[[0.0, 0.0], [1.0, 0.0]]);
        let wind = WindSeries::new(2, 3, vec![[0.0, 0.0]; 6]).unwrap();
        assert!(advection_sequence(&ns, &wind, 5.0).is_err());
        let zero = WindSeries::new(3, 2, vec![[0.0, 0.0]; 6]).unwrap();
        let seq = advection_sequence(&ns, &zero, 5.0).unwrap();
        assert_eq!(seq.len(), 3);
        assert!(seq.iter().all(|a| a.weights.nnz() == 0));
    }
}
