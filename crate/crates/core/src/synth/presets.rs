use super::{AodKind, AodSpec, ScenarioSpec, Schedule, Source, WindRegime};
use crate::error::{Error, Result};

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "s1-advection",
    "aod-ideal",
    "aod-missing",
    "aod-conflict",
    "aod-biased",
    "uniform",
    "rotating",
    "reversing",
];

fn source(x_km: f64, y_km: f64, rate: f64, radius_km: f64, peak_hour: f64) -> Source {
    Source {
        x_km,
        y_km,
        rate,
        radius_km,
        schedule: Schedule::Diurnal {
            amplitude: 0.5,
            peak_hour,
        },
        variability: 0.4,
    }
}

/// Advection-dominant benchmark: a meandering westerly carries plumes from
/// five sources in the western half across a 20 x 20 raster of 2 km cells.
fn s1() -> ScenarioSpec {
    ScenarioSpec {
        nx: 20,
        ny: 20,
        cell_km: 2.0,
        steps: 240,
        spinup_steps: 24,
        dt_hours: 1.0,
        substeps: 8,
        wind: WindRegime::Meandering {
            speed: 2.5,
            direction_deg: 0.0,
            swing_deg: 25.0,
            period_hours: 30.0,
        },
        kappa: 1.0,
        decay: 0.05,
        background: 10.0,
        sources: vec![
            source(5.0, 7.0, 300.0, 1.0, 8.0),
            source(7.0, 21.0, 400.0, 1.5, 18.0),
            source(4.0, 33.0, 250.0, 1.0, 12.0),
            source(15.0, 14.0, 200.0, 1.0, 20.0),
            source(13.0, 28.0, 300.0, 1.0, 6.0),
        ],
        stations: 40,
        aod: AodSpec::default(),
        seed: 1,
        ..Default::default()
    }
}

/// Scenario by name; see [`PRESETS`].
pub fn preset(name: &str) -> Result<ScenarioSpec> {
    let base = s1();
    let spec = match name {
        "s1-advection" | "aod-ideal" => base,
        "aod-missing" => ScenarioSpec {
            aod: AodSpec {
                cloud_fraction: 1.0,
                ..AodSpec::default()
            },
            ..base
        },
        "aod-conflict" => ScenarioSpec {
            aod: AodSpec {
                kind: AodKind::Mirrored,
                ..AodSpec::default()
            },
            ..base
        },
        "aod-biased" => ScenarioSpec {
            aod: AodSpec {
                gain: 3.0,
                offset: 0.5,
                ..AodSpec::default()
            },
            ..base
        },
        "uniform" => ScenarioSpec {
            wind: WindRegime::Constant { u: 0.0, v: 0.0 },
            sources: Vec::new(),
            ..base
        },
        "rotating" => ScenarioSpec {
            wind: WindRegime::Rotating {
                speed: 2.5,
                period_hours: 48.0,
            },
            ..base
        },
        "reversing" => ScenarioSpec {
            wind: WindRegime::Reversing {
                u: 2.5,
                v: 0.0,
                period_hours: 48.0,
            },
            ..base
        },
        other => {
            return Err(Error::invalid(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_stable() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(preset("nope").is_err());
    }
}
