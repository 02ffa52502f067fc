//! Independent checks on the transport simulator and the AOD proxy. Each
//! returns the measured quantity so callers can print it.

use physkrig::diffcore::Tensor;
use physkrig::loss::{standardize_field, EdgeList, STD_GUARD};
use physkrig::synth::{
    cloud_mask, make_aod, preset, simulate, AodSpec, Boundary, ScenarioSpec, Schedule, Source, TruthField, WindRegime,
    KMH_PER_MS,
};

fn point_source(x_km: f64, y_km: f64, rate: f64, schedule: Schedule) -> Source {
    Source {
        x_km,
        y_km,
        rate,
        radius_km: 0.0,
        schedule,
        variability: 0.0,
    }
}

fn total(truth: &TruthField, t: usize) -> f64 {
    (0..truth.cells()).map(|k| truth.at(k, t)).sum()
}

/// Zero wind, no sources, uniform start: largest departure from the start
/// value over every cell and step.
pub fn equilibrium_drift() -> f64 {
    let spec = ScenarioSpec {
        wind: WindRegime::Constant { u: 0.0, v: 0.0 },
        decay: 0.0,
        spinup_steps: 0,
        steps: 48,
        ..Default::default()
    };
    let truth = simulate(&spec).unwrap();
    truth.conc.iter().map(|v| (v - spec.background).abs()).fold(0.0, f64::max)
}

/// Zero wind and a single-cell source in the middle of a 21 x 21 grid:
/// largest difference between the field and its reflections and transpose.
pub fn radial_asymmetry() -> f64 {
    let n = 21;
    let spec = ScenarioSpec {
        nx: n,
        ny: n,
        steps: 30,
        spinup_steps: 0,
        wind: WindRegime::Constant { u: 0.0, v: 0.0 },
        kappa: 2.0,
        background: 0.0,
        sources: vec![point_source(21.0, 21.0, 100.0, Schedule::Constant)],
        ..Default::default()
    };
    let truth = simulate(&spec).unwrap();
    let mut worst = 0.0f64;
    for t in 0..spec.steps {
        for y in 0..n {
            for x in 0..n {
                let c = truth.at(y * n + x, t);
                for (mx, my) in [(n - 1 - x, y), (x, n - 1 - y), (y, x)] {
                    worst = worst.max((c - truth.at(my * n + mx, t)).abs());
                }
            }
        }
    }
    worst
}

/// Constant eastward wind carrying a one-step release: worst ratio of the
/// centroid's error (in cells) to the allowance of one cell per ten steps.
pub fn centroid_drift() -> (f64, String) {
    let (nx, ny, cell) = (40, 9, 5.0);
    let u = 1.0;
    let x0 = 12.5;
    let spec = ScenarioSpec {
        nx,
        ny,
        cell_km: cell,
        steps: 40,
        spinup_steps: 0,
        wind: WindRegime::Constant { u, v: 0.0 },
        kappa: 0.5,
        decay: 0.0,
        background: 0.0,
        sources: vec![point_source(x0, 22.5, 100.0, Schedule::Pulse { start: 0, end: 1 })],
        ..Default::default()
    };
    let truth = simulate(&spec).unwrap();
    let speed = u * KMH_PER_MS * spec.dt_hours;
    let mut worst = (0.0, String::new());
    for t in 0..spec.steps {
        let mass = total(&truth, t);
        let cx: f64 = (0..truth.cells())
            .map(|k| truth.at(k, t) * spec.cell_center(k)[0])
            .sum::<f64>()
            / mass;
        // released during step 0, so the puff has travelled t + 1/2 steps
        let expected = x0 + speed * (t as f64 + 0.5);
        let elapsed = (t + 1) as f64;
        let ratio = (cx - expected).abs() / cell / (elapsed / 10.0);
        if ratio > worst.0 {
            worst = (ratio, format!("step {t}: centroid {cx:.3} km, expected {expected:.3} km"));
        }
    }
    worst
}

/// Closed boundaries, zero decay, varying sources: worst relative gap
/// between the total mass and the initial mass plus cumulative injection.
pub fn mass_conservation_error() -> f64 {
    let spec = ScenarioSpec {
        boundary: Boundary::Closed,
        decay: 0.0,
        spinup_steps: 0,
        steps: 60,
        wind: WindRegime::Rotating {
            speed: 3.0,
            period_hours: 20.0,
        },
        sources: vec![
            Source {
                variability: 0.5,
                radius_km: 3.0,
                ..point_source(9.0, 13.0, 200.0, Schedule::Diurnal { amplitude: 0.8, peak_hour: 5.0 })
            },
            point_source(31.0, 27.0, 150.0, Schedule::Pulse { start: 10, end: 30 }),
        ],
        ..Default::default()
    };
    let truth = simulate(&spec).unwrap();
    let mut expected: f64 = truth.initial.iter().sum();
    let mut worst = 0.0f64;
    for t in 0..spec.steps {
        expected += (0..truth.cells()).map(|k| truth.emission_series(k)[t]).sum::<f64>() * spec.dt_hours;
        worst = worst.max((total(&truth, t) - expected).abs() / expected);
    }
    worst
}

/// Constant wind without diffusion after a one-step release: the largest
/// increase of the field maximum between consecutive steps.
pub fn delta_amplification() -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (u, v) in [(2.0, 0.0), (-1.5, 1.0), (1.0, 1.0)] {
        let spec = ScenarioSpec {
            steps: 20,
            spinup_steps: 0,
            wind: WindRegime::Constant { u, v },
            kappa: 0.0,
            decay: 0.0,
            background: 0.0,
            sources: vec![point_source(21.0, 19.0, 50.0, Schedule::Pulse { start: 0, end: 1 })],
            ..Default::default()
        };
        let truth = simulate(&spec).unwrap();
        let max_at = |t: usize| truth.snapshot(t).into_iter().fold(0.0, f64::max);
        for t in 1..spec.steps {
            worst = worst.max(max_at(t) - max_at(t - 1));
        }
    }
    worst
}

/// Largest gap between the requested and realized cloud fraction on a
/// 60 x 60 grid, over several fractions and steps.
pub fn cloud_fraction_error() -> f64 {
    let mut worst = 0.0f64;
    for frac in [0.05, 0.2, 0.5, 0.85] {
        let spec = AodSpec {
            cloud_fraction: frac,
            ..Default::default()
        };
        let steps = 30;
        let mask = cloud_mask(60, 60, steps, &spec, 17).unwrap();
        for t in 0..steps {
            let cloudy = (0..3600).filter(|&k| mask[k * steps + t]).count();
            worst = worst.max((cloudy as f64 / 3600.0 - frac).abs());
        }
    }
    worst
}

/// Smallest concentration over the bundled presets.
pub fn preset_minimum() -> f64 {
    physkrig::synth::PRESETS
        .iter()
        .map(|name| {
            let truth = simulate(&preset(name).unwrap()).unwrap();
            truth.conc.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

/// For the biased proxy: worst raw-gradient gap against `gain x` truth, and
/// the relative L2 error between standardized proxy and truth gradients
/// over valid edges.
pub fn bias_filter_errors() -> (f64, f64) {
    let spec = preset("aod-biased").unwrap();
    let truth = simulate(&spec).unwrap();
    let raster = make_aod(&truth, &spec.aod, spec.seed).unwrap();
    let (cells, steps) = (truth.cells(), truth.steps);
    let mask = Tensor::new(
        vec![cells, steps],
        raster.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let aod = Tensor::new(vec![cells, steps], raster.values.clone()).unwrap();
    let conc = Tensor::new(vec![cells, steps], truth.conc.clone()).unwrap();
    let edges = EdgeList::grid4(truth.nx, truth.ny, 0);

    let mut raw = 0.0f64;
    for &(i, j) in edges.pairs() {
        for t in 0..steps {
            let g_truth = conc.data()[j * steps + t] - conc.data()[i * steps + t];
            let g_aod = aod.data()[j * steps + t] - aod.data()[i * steps + t];
            raw = raw.max((g_aod - spec.aod.gain * g_truth).abs());
        }
    }
    let za = standardize_field(&aod, &mask, STD_GUARD);
    let zt = standardize_field(&conc, &mask, STD_GUARD);
    let (mut num, mut den) = (0.0, 0.0);
    for &(i, j) in edges.pairs() {
        for t in 0..steps {
            if mask.data()[i * steps + t] * mask.data()[j * steps + t] == 0.0 {
                continue;
            }
            let ga = za.data()[j * steps + t] - za.data()[i * steps + t];
            let gt = zt.data()[j * steps + t] - zt.data()[i * steps + t];
            num += (ga - gt).powi(2);
            den += gt.powi(2);
        }
    }
    (raw, if den > 0.0 { (num / den).sqrt() } else { f64::INFINITY })
}
