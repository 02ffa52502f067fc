use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TruthField;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AodKind {
    /// `gain * C + offset + noise`.
    #[default]
    Linear,
    /// The linear proxy of the east-west mirrored field.
    Mirrored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AodSpec {
    pub kind: AodKind,
    pub gain: f64,
    pub offset: f64,
    pub noise: f64,
    /// Fraction of cells hidden at every step.
    pub cloud_fraction: f64,
    /// Gaussian smoothing width of the cloud field, in cells.
    pub cloud_scale_cells: f64,
    /// Step-to-step correlation of the cloud field.
    pub cloud_persistence: f64,
}

impl Default for AodSpec {
    fn default() -> Self {
        Self {
            kind: AodKind::Linear,
            gain: 1.0,
            offset: 0.0,
            noise: 0.0,
            cloud_fraction: 0.2,
            cloud_scale_cells: 2.0,
            cloud_persistence: 0.8,
        }
    }
}

impl AodSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cloud_fraction) {
            return Err(Error::invalid(format!(
                "cloud fraction must lie in [0, 1], got {}",
                self.cloud_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.cloud_persistence) {
            return Err(Error::invalid("cloud persistence must lie in [0, 1)"));
        }
        if !(self.noise >= 0.0) || !(self.cloud_scale_cells >= 0.0) {
            return Err(Error::invalid("AOD noise and cloud scale must be non-negative"));
        }
        if !self.gain.is_finite() || !self.offset.is_finite() {
            return Err(Error::invalid("AOD gain and offset must be finite"));
        }
        Ok(())
    }
}

fn gaussian_kernel(scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * scale).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * scale * scale)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with truncated, renormalized edges.
fn blur(field: &[f64], nx: usize, ny: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let pass = |src: &[f64], along_x: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..ny {
            for x in 0..nx {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (o, &w) in kernel.iter().enumerate() {
                    let d = o as i64 - r;
                    let (xx, yy) = if along_x { (x as i64 + d, y as i64) } else { (x as i64, y as i64 + d) };
                    if xx >= 0 && yy >= 0 && (xx as usize) < nx && (yy as usize) < ny {
                        acc += w * src[yy as usize * nx + xx as usize];
                        wsum += w;
                    }
                }
                out[y * nx + x] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Cloud cover, cell-major `[cell * steps + t]`, `true` where hidden. Each
/// step hides exactly `round(fraction * cells)` cells: the largest values of
/// a smoothed, temporally persistent random field.
pub fn cloud_mask(nx: usize, ny: usize, steps: usize, spec: &AodSpec, seed: u64) -> Result<Vec<bool>> {
    spec.validate()?;
    let cells = nx * ny;
    let mut mask = vec![false; cells * steps];
    let hidden = (spec.cloud_fraction * cells as f64).round() as usize;
    if hidden == 0 {
        return Ok(mask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0003);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let kernel = gaussian_kernel(spec.cloud_scale_cells);
    let rho = spec.cloud_persistence;
    let mut field = vec![0.0; cells];
    let mut order: Vec<usize> = (0..cells).collect();
    for t in 0..steps {
        let noise: Vec<f64> = (0..cells).map(|_| normal.sample(&mut rng)).collect();
        let smooth = blur(&noise, nx, ny, &kernel);
        for (f, s) in field.iter_mut().zip(&smooth) {
            *f = if t == 0 { *s } else { rho * *f + (1.0 - rho * rho).sqrt() * s };
        }
        order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
        for &k in &order[..hidden] {
            mask[k * steps + t] = true;
        }
    }
    Ok(mask)
}

/// Satellite proxy over every cell, cell-major, with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AodRaster {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn make_aod(truth: &TruthField, spec: &AodSpec, seed: u64) -> Result<AodRaster> {
    let clouds = cloud_mask(truth.nx, truth.ny, truth.steps, spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0004);
    let normal = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("positive std"));
    let (nx, steps) = (truth.nx, truth.steps);
    let mut values = Vec::with_capacity(truth.conc.len());
    for k in 0..truth.cells() {
        let src = match spec.kind {
            AodKind::Linear => k,
            AodKind::Mirrored => (k / nx) * nx + (nx - 1 - k % nx),
        };
        for t in 0..steps {
            let mut v = spec.gain * truth.at(src, t) + spec.offset;
            if let Some(n) = &normal {
                v += n.sample(&mut rng);
            }
            values.push(v);
        }
    }
    let valid = clouds.into_iter().map(|c| !c).collect();
    Ok(AodRaster { values, valid })
}
