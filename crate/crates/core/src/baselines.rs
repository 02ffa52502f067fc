//! Classical per-timestep interpolators used as benchmark references.

use crate::error::{Error, Result};
use crate::geo_graph::GeoAdjacency;
use crate::scalar::Real;

pub const DEFAULT_IDW_POWER: f64 = 2.0;

fn dist<T: Real>(a: [T; 2], b: [T; 2]) -> T {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_observed<T>(values: &[T], positions: &[[T; 2]]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid("interpolation needs at least one observed node"));
    }
    if values.len() != positions.len() {
        return Err(Error::invalid(format!(
            "{} observed values for {} positions",
            values.len(),
            positions.len()
        )));
    }
    Ok(())
}

/// Inverse-distance weighting `sum w_i x_i / sum w_i`, `w_i = d_i^-p`, for
/// one timestep. A target on top of an observed node takes its value.
pub fn idw<T: Real>(values: &[T], positions: &[[T; 2]], targets: &[[T; 2]], power: T) -> Result<Vec<T>> {
    check_observed(values, positions)?;
    if !(power > T::zero()) {
        return Err(Error::invalid(format!("IDW power must be positive, got {power}")));
    }
    Ok(targets
        .iter()
        .map(|&q| {
            let (mut num, mut den) = (T::zero(), T::zero());
            for (&x, &p) in values.iter().zip(positions) {
                let d = dist(q, p);
                if d == T::zero() {
                    return x;
                }
                let w = d.powf(-power);
                num += w * x;
                den += w;
            }
            num / den
        })
        .collect())
}

/// Value of the closest observed node (lowest index on ties).
pub fn nearest<T: Real>(values: &[T], positions: &[[T; 2]], targets: &[[T; 2]]) -> Result<Vec<T>> {
    check_observed(values, positions)?;
    Ok(targets
        .iter()
        .map(|&q| {
            let mut best = (dist(q, positions[0]), values[0]);
            for (&x, &p) in values.iter().zip(positions).skip(1) {
                let d = dist(q, p);
                if d < best.0 {
                    best = (d, x);
                }
            }
            best.1
        })
        .collect())
}

/// Adjacency-weighted mean of each target's observed neighbours, falling
/// back to the mean of all observed values for targets with none.
///
/// `values[k]` belongs to node `observed[k]` of the adjacency.
pub fn graph_mean<T: Real>(values: &[T], observed: &[usize], geo: &GeoAdjacency<T>, targets: &[usize]) -> Result<Vec<T>> {
    if values.is_empty() {
        return Err(Error::invalid("interpolation needs at least one observed node"));
    }
    if values.len() != observed.len() {
        return Err(Error::invalid("one value per observed node required"));
    }
    let n = geo.len();
    let mut value_of = vec![None; n];
    for (&i, &x) in observed.iter().zip(values) {
        *value_of.get_mut(i).ok_or(Error::UnknownNode(i))? = Some(x);
    }
    let global = values.iter().copied().sum::<T>() / T::from_usize_lossy(values.len());
    targets
        .iter()
        .map(|&t| {
            if t >= n {
                return Err(Error::UnknownNode(t));
            }
            let (mut num, mut den) = (T::zero(), T::zero());
            for (j, w) in geo.weights.row(t) {
                if let Some(x) = value_of[j] {
                    num += w * x;
                    den += w;
                }
            }
            Ok(if den > T::zero() { num / den } else { global })
        })
        .collect()
}
