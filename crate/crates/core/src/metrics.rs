//! MAE, RMSE and R^2 over masked elements, per node and pooled.

use crate::error::{Error, Result};
use crate::scalar::Real;

fn masked<'a, T: Real>(pred: &'a [T], truth: &'a [T], mask: Option<&'a [bool]>) -> Result<Vec<(T, T)>> {
    if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::Shape {
            op: "metric",
            left: vec![pred.len()],
            right: vec![truth.len(), mask.map_or(pred.len(), <[bool]>::len)],
        });
    }
    let pairs: Vec<(T, T)> = pred
        .iter()
        .zip(truth)
        .enumerate()
        .filter(|(k, _)| mask.is_none_or(|m| m[*k]))
        .map(|(_, (&p, &t))| (p, t))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("metric over an empty mask"));
    }
    Ok(pairs)
}

pub fn mae<T: Real>(pred: &[T], truth: &[T], mask: Option<&[bool]>) -> Result<T> {
    let pairs = masked(pred, truth, mask)?;
    let n = T::from_usize_lossy(pairs.len());
    Ok(pairs.iter().map(|&(p, t)| (p - t).abs()).sum::<T>() / n)
}

pub fn rmse<T: Real>(pred: &[T], truth: &[T], mask: Option<&[bool]>) -> Result<T> {
    let pairs = masked(pred, truth, mask)?;
    let n = T::from_usize_lossy(pairs.len());
    Ok((pairs.iter().map(|&(p, t)| (p - t) * (p - t)).sum::<T>() / n).sqrt())
}

/// `1 - SS_res / SS_tot`; errors when the truth has no variance.
pub fn r2<T: Real>(pred: &[T], truth: &[T], mask: Option<&[bool]>) -> Result<T> {
    let pairs = masked(pred, truth, mask)?;
    let n = T::from_usize_lossy(pairs.len());
    let mean = pairs.iter().map(|p| p.1).sum::<T>() / n;
    let ss_tot = pairs.iter().map(|&(_, t)| (t - mean) * (t - mean)).sum::<T>();
    if ss_tot == T::zero() {
        return Err(Error::invalid("r2 undefined: truth has zero variance"));
    }
    let ss_res = pairs.iter().map(|&(p, t)| (p - t) * (p - t)).sum::<T>();
    Ok(T::one() - ss_res / ss_tot)
}

/// One report row. `r2` is `None` when the truth is constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
}

impl Scores {
    pub fn compute<T: Real>(pred: &[T], truth: &[T], mask: Option<&[bool]>) -> Result<Self> {
        let r2 = match r2(pred, truth, mask) {
            Ok(v) => Some(v.as_f64()),
            Err(Error::InvalidArgument(m)) if m.contains("zero variance") => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            mae: mae(pred, truth, mask)?.as_f64(),
            rmse: rmse(pred, truth, mask)?.as_f64(),
            r2,
        })
    }
}

/// Per-node scores plus the pooled row.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub nodes: Vec<(String, Scores)>,
    pub pooled: Scores,
}

/// `pred` and `truth` are node-major `[nodes, steps]`.
pub fn report<T: Real>(ids: &[String], pred: &[T], truth: &[T], steps: usize) -> Result<Report> {
    if pred.len() != ids.len() * steps || truth.len() != pred.len() {
        return Err(Error::Shape {
            op: "report",
            left: vec![ids.len(), steps],
            right: vec![pred.len(), truth.len()],
        });
    }
    let nodes = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let r = i * steps..(i + 1) * steps;
            Ok((id.clone(), Scores::compute(&pred[r.clone()], &truth[r], None)?))
        })
        .collect::<Result<_>>()?;
    Ok(Report {
        nodes,
        pooled: Scores::compute(pred, truth, None)?,
    })
}
