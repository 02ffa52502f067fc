//! Synthetic advection-diffusion testbed on a regular raster.
//!
//! The transport step is explicit and flux-form: upwind advective fluxes and
//! centred diffusive fluxes are evaluated once per cell face, so whatever
//! leaves one cell enters its neighbour and mass is conserved up to the
//! boundary fluxes, sources and decay.
//!
//! Cell `k = y * nx + x` has its centre at `((x + 0.5) * cell_km, (y + 0.5) * cell_km)`.
//! Positive `u` blows towards increasing `x` (east), positive `v` towards
//! increasing `y` (north).

mod aod;
mod presets;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use aod::{cloud_mask, make_aod, AodKind, AodRaster, AodSpec};
pub use presets::{preset, PRESETS};

use crate::error::{Error, Result};

/// Wind speed conversion, m/s to km/h.
pub const KMH_PER_MS: f64 = 3.6;
const MAX_COURANT: f64 = 0.9;
const MAX_DIFFUSION_NUMBER: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindRegime {
    Constant { u: f64, v: f64 },
    /// Direction turns counter-clockwise through a full circle every period.
    Rotating { speed: f64, period_hours: f64 },
    /// `(u, v) * cos(2 pi t / period)`.
    Reversing { u: f64, v: f64, period_hours: f64 },
    /// Mean direction with a sinusoidal swing of `swing_deg` either side.
    Meandering {
        speed: f64,
        direction_deg: f64,
        swing_deg: f64,
        period_hours: f64,
    },
}

impl WindRegime {
    /// Wind in m/s at time `t_hours`.
    pub fn at(&self, t_hours: f64) -> [f64; 2] {
        use std::f64::consts::TAU;
        match *self {
            WindRegime::Constant { u, v } => [u, v],
            WindRegime::Rotating { speed, period_hours } => {
                let a = TAU * t_hours / period_hours;
                [speed * a.cos(), speed * a.sin()]
            }
            WindRegime::Reversing { u, v, period_hours } => {
                let c = (TAU * t_hours / period_hours).cos();
                [u * c, v * c]
            }
            WindRegime::Meandering {
                speed,
                direction_deg,
                swing_deg,
                period_hours,
            } => {
                let a = (direction_deg + swing_deg * (TAU * t_hours / period_hours).sin()).to_radians();
                [speed * a.cos(), speed * a.sin()]
            }
        }
    }

    /// Upper bound of the wind speed over all times.
    pub fn max_speed(&self) -> f64 {
        match *self {
            WindRegime::Constant { u, v } | WindRegime::Reversing { u, v, .. } => u.hypot(v),
            WindRegime::Rotating { speed, .. } | WindRegime::Meandering { speed, .. } => speed.abs(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// `1 + amplitude * cos(2 pi (t - peak_hour) / 24)`.
    Diurnal { amplitude: f64, peak_hour: f64 },
    /// On for recorded steps `start..end`, off otherwise.
    Pulse { start: i64, end: i64 },
}

impl Schedule {
    fn factor(&self, step: i64, t_hours: f64) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Diurnal { amplitude, peak_hour } => {
                1.0 + amplitude * (std::f64::consts::TAU * (t_hours - peak_hour) / 24.0).cos()
            }
            Schedule::Pulse { start, end } => f64::from(u8::from(step >= start && step < end)),
        }
    }
}

/// An area source: `rate` concentration-cells per hour spread over a Gaussian
/// footprint of width `radius_km` (a single cell when zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub x_km: f64,
    pub y_km: f64,
    pub rate: f64,
    #[serde(default)]
    pub radius_km: f64,
    #[serde(default)]
    pub schedule: Schedule,
    /// Standard deviation of an hourly AR(1) log-rate perturbation.
    #[serde(default)]
    pub variability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Zero-gradient: boundary cells see a ghost copy of themselves.
    #[default]
    Open,
    /// No flux through the outer faces.
    Closed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub nx: usize,
    pub ny: usize,
    pub cell_km: f64,
    /// Recorded steps.
    pub steps: usize,
    /// Steps simulated before recording starts.
    pub spinup_steps: usize,
    pub dt_hours: f64,
    /// Transport substeps per recorded step.
    pub substeps: usize,
    pub wind: WindRegime,
    /// km^2 / h
    pub kappa: f64,
    /// 1 / h
    pub decay: f64,
    /// Initial concentration, held in equilibrium by a uniform source of
    /// `decay * background`.
    pub background: f64,
    pub boundary: Boundary,
    pub sources: Vec<Source>,
    pub stations: usize,
    /// Standard deviation of Gaussian noise on station observations.
    pub observation_noise: f64,
    pub aod: AodSpec,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            nx: 20,
            ny: 20,
            cell_km: 2.0,
            steps: 240,
            spinup_steps: 24,
            dt_hours: 1.0,
            substeps: 8,
            wind: WindRegime::Constant { u: 2.0, v: 0.0 },
            kappa: 1.0,
            decay: 0.05,
            background: 10.0,
            boundary: Boundary::Open,
            sources: Vec::new(),
            stations: 40,
            observation_noise: 0.0,
            aod: AodSpec::default(),
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_center(&self, k: usize) -> [f64; 2] {
        let (x, y) = (k % self.nx, k / self.nx);
        [(x as f64 + 0.5) * self.cell_km, (y as f64 + 0.5) * self.cell_km]
    }

    fn substep_hours(&self) -> f64 {
        self.dt_hours / self.substeps as f64
    }

    /// Structural checks plus the explicit-scheme stability bounds.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.nx == 0 || self.ny == 0 || self.steps == 0 || self.substeps == 0 {
            return bad("grid size, steps and substeps must be positive".into());
        }
        for (name, v) in [("cell_km", self.cell_km), ("dt_hours", self.dt_hours)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("kappa", self.kappa),
            ("decay", self.decay),
            ("background", self.background),
            ("observation_noise", self.observation_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (i, s) in self.sources.iter().enumerate() {
            if !(s.rate >= 0.0) || !(s.radius_km >= 0.0) || !(s.variability >= 0.0) {
                return bad(format!("source {i} has a negative rate, radius or variability"));
            }
        }
        self.aod.validate()?;
        let dt = self.substep_hours();
        let h = self.cell_km;
        let courant = self.wind.max_speed() * KMH_PER_MS * dt / h;
        if courant > MAX_COURANT {
            return Err(Error::Cfl(format!(
                "advective Courant number {courant:.3} exceeds {MAX_COURANT}; raise substeps"
            )));
        }
        let diff = self.kappa * dt / (h * h);
        if diff > MAX_DIFFUSION_NUMBER {
            return Err(Error::Cfl(format!(
                "diffusion number {diff:.3} exceeds {MAX_DIFFUSION_NUMBER}; raise substeps"
            )));
        }
        Ok(())
    }
}

/// Simulated ground truth. Per-cell arrays are cell-major (`[cell * steps + t]`),
/// wind is step-major (`[t * cells + cell]`).
#[derive(Clone, Debug, PartialEq)]
pub struct TruthField {
    pub nx: usize,
    pub ny: usize,
    pub cell_km: f64,
    pub steps: usize,
    pub dt_hours: f64,
    /// Concentration after each recorded step.
    pub conc: Vec<f64>,
    /// State at the start of the first recorded step.
    pub initial: Vec<f64>,
    /// Wind (m/s) used during each step.
    pub wind: Vec<[f64; 2]>,
    /// Source term (concentration / h) applied during each step.
    pub emission: Vec<f64>,
}

impl TruthField {
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn at(&self, cell: usize, t: usize) -> f64 {
        self.conc[cell * self.steps + t]
    }

    /// Field over all cells at step `t`.
    pub fn snapshot(&self, t: usize) -> Vec<f64> {
        (0..self.cells()).map(|k| self.at(k, t)).collect()
    }

    pub fn series(&self, cell: usize) -> &[f64] {
        &self.conc[cell * self.steps..(cell + 1) * self.steps]
    }

    pub fn emission_series(&self, cell: usize) -> &[f64] {
        &self.emission[cell * self.steps..(cell + 1) * self.steps]
    }

    pub fn wind_at(&self, cell: usize, t: usize) -> [f64; 2] {
        self.wind[t * self.cells() + cell]
    }
}

fn footprints(spec: &ScenarioSpec) -> Vec<Vec<(usize, f64)>> {
    spec.sources
        .iter()
        .map(|s| {
            let nearest = (0..spec.cells())
                .min_by(|&a, &b| {
                    let da = dist2(spec.cell_center(a), [s.x_km, s.y_km]);
                    let db = dist2(spec.cell_center(b), [s.x_km, s.y_km]);
                    da.total_cmp(&db)
                })
                .expect("grid is non-empty");
            if s.radius_km == 0.0 {
                return vec![(nearest, 1.0)];
            }
            let two_r2 = 2.0 * s.radius_km * s.radius_km;
            let w: Vec<(usize, f64)> = (0..spec.cells())
                .map(|k| (k, (-dist2(spec.cell_center(k), [s.x_km, s.y_km]) / two_r2).exp()))
                .filter(|&(_, w)| w > 1e-12)
                .collect();
            let total: f64 = w.iter().map(|p| p.1).sum();
            if total > 0.0 {
                w.into_iter().map(|(k, v)| (k, v / total)).collect()
            } else {
                vec![(nearest, 1.0)]
            }
        })
        .collect()
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// One explicit transport substep of length `dt` hours with uniform wind.
fn transport_step(spec: &ScenarioSpec, c: &[f64], wind_kmh: [f64; 2], source: &[f64], dt: f64, out: &mut [f64]) {
    let (nx, ny, h) = (spec.nx, spec.ny, spec.cell_km);
    let kappa = spec.kappa;
    let closed = spec.boundary == Boundary::Closed;
    let mut div = vec![0.0; c.len()];
    // flux through the face between `l` and `r`, positive from l to r
    let face = |l: f64, r: f64, vel: f64| {
        let adv = if vel > 0.0 { vel * l } else { vel * r };
        adv - kappa * (r - l) / h
    };
    for y in 0..ny {
        for x in 0..nx {
            let k = y * nx + x;
            if x + 1 < nx {
                let f = face(c[k], c[k + 1], wind_kmh[0]);
                div[k] += f;
                div[k + 1] -= f;
            }
            if y + 1 < ny {
                let f = face(c[k], c[k + nx], wind_kmh[1]);
                div[k] += f;
                div[k + nx] -= f;
            }
        }
    }
    if !closed {
        // zero-gradient ghost cells: no diffusive flux, advective flux carries
        // the boundary cell's own value in or out
        let (u, v) = (wind_kmh[0], wind_kmh[1]);
        for y in 0..ny {
            div[y * nx] -= u * c[y * nx];
            div[y * nx + nx - 1] += u * c[y * nx + nx - 1];
        }
        for x in 0..nx {
            div[x] -= v * c[x];
            div[(ny - 1) * nx + x] += v * c[(ny - 1) * nx + x];
        }
    }
    for k in 0..c.len() {
        let next = c[k] + dt * (source[k] - div[k] / h - spec.decay * c[k]);
        out[k] = next.max(0.0);
    }
}

/// Runs the scenario. Fails before stepping if the stability bounds are
/// violated.
pub fn simulate(spec: &ScenarioSpec) -> Result<TruthField> {
    spec.validate()?;
    let cells = spec.cells();
    let steps = spec.steps;
    let prints = footprints(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0001);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut log_rates = vec![0.0; spec.sources.len()];
    let dt_sub = spec.substep_hours();
    let uniform = spec.decay * spec.background;

    let mut c = vec![spec.background; cells];
    let mut scratch = vec![0.0; cells];
    let mut initial = c.clone();
    let mut conc = vec![0.0; cells * steps];
    let mut emission = vec![0.0; cells * steps];
    let mut wind = Vec::with_capacity(cells * steps);
    let mut source = vec![0.0; cells];

    let total = spec.spinup_steps + steps;
    for s in 0..total {
        let step = s as i64 - spec.spinup_steps as i64;
        let t_hours = step as f64 * spec.dt_hours;
        source.iter_mut().for_each(|v| *v = uniform);
        for (i, (src, print)) in spec.sources.iter().zip(&prints).enumerate() {
            if src.variability > 0.0 {
                // AR(1) with unit-hour persistence 0.9, stationary std = variability
                let rho: f64 = 0.9;
                log_rates[i] = rho * log_rates[i] + (1.0 - rho * rho).sqrt() * src.variability * normal.sample(&mut rng);
            }
            let rate = src.rate * src.schedule.factor(step, t_hours) * log_rates[i].exp();
            for &(k, w) in print {
                source[k] += rate * w;
            }
        }
        let w = spec.wind.at(t_hours);
        let w_kmh = [w[0] * KMH_PER_MS, w[1] * KMH_PER_MS];
        if step == 0 {
            initial.copy_from_slice(&c);
        }
        for _ in 0..spec.substeps {
            transport_step(spec, &c, w_kmh, &source, dt_sub, &mut scratch);
            std::mem::swap(&mut c, &mut scratch);
        }
        if step >= 0 {
            let t = step as usize;
            for k in 0..cells {
                conc[k * steps + t] = c[k];
                emission[k * steps + t] = source[k];
            }
            wind.extend(std::iter::repeat_n(w, cells));
        }
    }
    if conc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "simulate".into() });
    }
    Ok(TruthField {
        nx: spec.nx,
        ny: spec.ny,
        cell_km: spec.cell_km,
        steps,
        dt_hours: spec.dt_hours,
        conc,
        initial,
        wind,
        emission,
    })
}

/// Stations at distinct cells, with their observed series.
#[derive(Clone, Debug, PartialEq)]
pub struct StationSample {
    /// Cell index of each station.
    pub cells: Vec<usize>,
    pub positions: Vec<[f64; 2]>,
    /// `[station, steps]`; truth plus any observation noise.
    pub observed: Vec<f64>,
}

/// Draws `count` distinct cells uniformly. With `noise_std > 0` a Gaussian
/// perturbation (clamped at zero) is added to the observed series.
pub fn sample_stations(truth: &TruthField, count: usize, seed: u64, noise_std: f64) -> Result<StationSample> {
    let cells = truth.cells();
    if count > cells {
        return Err(Error::invalid(format!("{count} stations requested on {cells} cells")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut picked = index::sample(&mut rng, cells, count).into_vec();
    picked.sort_unstable();
    let nx = truth.nx;
    let positions = picked
        .iter()
        .map(|&k| [((k % nx) as f64 + 0.5) * truth.cell_km, ((k / nx) as f64 + 0.5) * truth.cell_km])
        .collect();
    let mut observed = Vec::with_capacity(count * truth.steps);
    let normal = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("positive std"));
    for &k in &picked {
        for &v in truth.series(k) {
            observed.push(match &normal {
                Some(n) => (v + n.sample(&mut rng)).max(0.0),
                None => v,
            });
        }
    }
    Ok(StationSample {
        cells: picked,
        positions,
        observed,
    })
}
