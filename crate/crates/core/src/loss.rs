//! Training objectives: L1 on held-out targets for the final estimate and for
//! the initial proposal, and the masked spatial-gradient term that aligns
//! predicted inter-node differences with a satellite proxy field.
//!
//! All three return *sums*; callers choose the normalization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo_graph::GeoAdjacency;
use crate::trainer::MaskPartition;
use crate::scalar::Real;

/// Standard-deviation floor below which a step is only mean-centred.
pub const STD_GUARD: f64 = 1e-6;

/// Satellite proxy values `[nodes, steps]` with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AodField<T> {
    values: Tensor<T>,
    valid: Tensor<T>,
}

impl<T: Real> AodField<T> {
    /// Invalid entries may hold anything (including NaN); they are zeroed.
    pub fn new(mut values: Tensor<T>, valid: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 || values.shape() != valid.shape() {
            return Err(Error::Shape {
                op: "aod field",
                left: values.shape().to_vec(),
                right: valid.shape().to_vec(),
            });
        }
        for (k, (v, &m)) in values.data_mut().iter_mut().zip(valid.data()).enumerate() {
            if m == T::one() {
                if !v.is_finite() {
                    return Err(Error::invalid(format!("valid AOD entry {k} is not finite")));
                }
            } else if m == T::zero() {
                *v = T::zero();
            } else {
                return Err(Error::invalid(format!("AOD mask entry {k} is {m}, expected 0 or 1")));
            }
        }
        Ok(Self { values, valid })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn valid(&self) -> &Tensor<T> {
        &self.valid
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn valid_fraction(&self) -> f64 {
        let n = self.valid.numel().max(1) as f64;
        self.valid.data().iter().filter(|&&m| m == T::one()).count() as f64 / n
    }

    /// Restricts to the given nodes and steps `start..end`.
    pub fn select(&self, ids: &[usize], start: usize, end: usize) -> Result<Self> {
        let steps = self.steps();
        if end > steps || start > end {
            return Err(Error::invalid(format!("step range {start}..{end} outside {steps} steps")));
        }
        let w = end - start;
        let mut v = Vec::with_capacity(ids.len() * w);
        let mut m = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            if i >= self.nodes() {
                return Err(Error::UnknownNode(i));
            }
            v.extend_from_slice(&self.values.data()[i * steps + start..i * steps + end]);
            m.extend_from_slice(&self.valid.data()[i * steps + start..i * steps + end]);
        }
        Self::new(Tensor::new(vec![ids.len(), w], v)?, Tensor::new(vec![ids.len(), w], m)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Node pairs the gradient term compares.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList(Arc<Vec<(usize, usize)>>);

impl EdgeList {
    /// Checks `i != j` and, when an adjacency is supplied, that every pair is
    /// one of its edges.
    pub fn new<T: Real>(edges: Vec<(usize, usize)>, geo: Option<&GeoAdjacency<T>>) -> Result<Self> {
        for &(i, j) in &edges {
            if i == j {
                return Err(Error::invalid(format!("self edge ({i}, {i})")));
            }
            if let Some(g) = geo {
                if i >= g.len() || j >= g.len() || g.weights.get(i, j) == T::zero() {
                    return Err(Error::invalid(format!("edge ({i}, {j}) is not in the geospatial adjacency")));
                }
            }
        }
        Ok(Self(Arc::new(edges)))
    }

    pub fn from_geo<T: Real>(geo: &GeoAdjacency<T>) -> Self {
        Self(Arc::new(geo.edges()))
    }

    /// 4-neighbour edges of a row-major `nx x ny` raster whose cell `k` is
    /// node `offset + k`.
    pub fn grid4(nx: usize, ny: usize, offset: usize) -> Self {
        let mut e = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                let k = offset + y * nx + x;
                if x + 1 < nx {
                    e.push((k, k + 1));
                }
                if y + 1 < ny {
                    e.push((k, k + nx));
                }
            }
        }
        Self(Arc::new(e))
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn shared(&self) -> Arc<Vec<(usize, usize)>> {
        self.0.clone()
    }
}

fn target_mask<T: Real>(shape: &[usize], partition: &MaskPartition) -> Result<Tensor<T>> {
    let (n, steps) = (shape[0], shape[1]);
    if partition.target().is_empty() {
        return Err(Error::invalid("loss needs at least one target node"));
    }
    let mut mask = Tensor::zeros(&[n, steps]);
    for &i in partition.target() {
        if i >= n {
            return Err(Error::UnknownNode(i));
        }
        mask.data_mut()[i * steps..(i + 1) * steps].iter_mut().for_each(|m| *m = T::one());
    }
    Ok(mask)
}

fn target_l1<T: Real>(tape: &mut Tape<T>, pred: Var, truth: &Tensor<T>, partition: &MaskPartition) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || truth.shape() != shape.as_slice() {
        return Err(Error::Shape {
            op: "target l1",
            left: shape,
            right: truth.shape().to_vec(),
        });
    }
    let mask = target_mask(&shape, partition)?;
    tape.l1_loss(pred, truth, &mask)
}

/// `sum_t sum_{i in targets} |pred - truth|`. Only target rows of `truth` are read.
pub fn infer_loss<T: Real>(tape: &mut Tape<T>, pred: Var, truth: &Tensor<T>, partition: &MaskPartition) -> Result<Var> {
    target_l1(tape, pred, truth, partition)
}

/// Same objective applied to the initial proposal.
pub fn init_loss<T: Real>(tape: &mut Tape<T>, init: Var, truth: &Tensor<T>, partition: &MaskPartition) -> Result<Var> {
    target_l1(tape, init, truth, partition)
}

/// Per-step z-scores of `values [nodes, steps]` over entries with `mask == 1`.
/// Masked-out entries are 0; steps with std below `eps` are only centred.
pub fn standardize_field<T: Real>(values: &Tensor<T>, mask: &Tensor<T>, eps: T) -> Tensor<T> {
    let (n, steps) = (values.shape()[0], values.shape()[1]);
    let (v, m) = (values.data(), mask.data());
    let mut out = Tensor::zeros(&[n, steps]);
    for t in 0..steps {
        let idx: Vec<usize> = (0..n).map(|i| i * steps + t).filter(|&k| m[k] == T::one()).collect();
        if idx.is_empty() {
            continue;
        }
        let c = T::from_usize_lossy(idx.len());
        let mean = idx.iter().map(|&k| v[k]).sum::<T>() / c;
        let var = idx.iter().map(|&k| (v[k] - mean) * (v[k] - mean)).sum::<T>() / c;
        let std = var.sqrt();
        let inv = if std >= eps { T::one() / std } else { T::one() };
        for k in idx {
            out.data_mut()[k] = (v[k] - mean) * inv;
        }
    }
    out
}

/// `sum_t sum_{(i,j)} |grad_ij(z(pred)) - grad_ij(z(aod))| * M_ij^t` with
/// `grad_ij(x) = x_j - x_i`, `M_ij^t = valid_i^t * valid_j^t` and `z` the
/// per-step standardization over valid entries.
pub fn aod_gradient_loss<T: Real>(tape: &mut Tape<T>, pred: Var, aod: &AodField<T>, edges: &EdgeList) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != aod.values().shape() {
        return Err(Error::Shape {
            op: "aod_gradient_loss",
            left: shape,
            right: aod.values().shape().to_vec(),
        });
    }
    let (n, steps) = (shape[0], shape[1]);
    if let Some(&(i, j)) = edges.pairs().iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(Error::invalid(format!("edge ({i}, {j}) outside {n} nodes")));
    }
    let eps = T::lit(STD_GUARD);
    let z_pred = tape.standardize_steps(pred, aod.valid(), eps)?;
    let z_aod = standardize_field(aod.values(), aod.valid(), eps);
    let valid = aod.valid().data();
    let e = edges.len();
    let mut reference = Tensor::zeros(&[e, steps]);
    let mut weight = Tensor::zeros(&[e, steps]);
    for (k, &(i, j)) in edges.pairs().iter().enumerate() {
        for t in 0..steps {
            let w = valid[i * steps + t] * valid[j * steps + t];
            if w != T::zero() {
                weight.data_mut()[k * steps + t] = w;
                reference.data_mut()[k * steps + t] = z_aod.data()[j * steps + t] - z_aod.data()[i * steps + t];
            }
        }
    }
    tape.edge_diff_l1(z_pred, edges.shared(), &reference, &weight)
}

/// `infer + lambda1 * init + lambda2 * aod`.
pub fn composite_loss<T: Real>(tape: &mut Tape<T>, infer: Var, init: Var, aod: Option<Var>, weights: &LossWeights) -> Result<Var> {
    let scaled_init = tape.scale(init, T::lit(weights.lambda1))?;
    let mut total = tape.add(infer, scaled_init)?;
    if let Some(a) = aod {
        let scaled = tape.scale(a, T::lit(weights.lambda2))?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}
