use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use physkrig::baselines::{graph_mean, idw, nearest, DEFAULT_IDW_POWER};
use physkrig::geo_graph::build_geo_adjacency;
use physkrig::io::{self as pio, FieldTable, GridFile, SynthBundle};
use physkrig::metrics::report;
use physkrig::model::{load_checkpoint, save_checkpoint};
use physkrig::synth::{make_aod, preset, sample_stations, simulate, ScenarioSpec};
use physkrig::trainer::{infer_grid, infer_nodes, train, RunConfig};
use physkrig::{Checkpoint, Dataset, Error, Tensor};

#[derive(Parser)]
#[command(name = "physkrig", version, about = "Physics-guided inductive spatiotemporal kriging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic data directory.
    Simulate {
        /// Preset name or path to a scenario TOML file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "PHYSKRIG_DATA")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides both the training and the split seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict held-out stations or the full grid.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "PHYSKRIG_DATA")]
        data: PathBuf,
        /// Comma-separated node ids, or `holdout` for the checkpoint's
        /// held-out stations.
        #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
        targets: Option<String>,
        #[arg(long)]
        grid: bool,
        #[arg(long, value_enum, default_value = "all")]
        range: RangeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against a truth file.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one step of a field as an 8-bit grayscale PGM.
    Render {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, env = "PHYSKRIG_DATA")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        time: usize,
        /// Value mapped to black; defaults to the field minimum.
        #[arg(long)]
        min: Option<f64>,
        /// Value mapped to white; defaults to the field maximum.
        #[arg(long)]
        max: Option<f64>,
    },
    /// Classical interpolation from the observed stations.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, env = "PHYSKRIG_DATA")]
        data: PathBuf,
        /// Comma-separated node ids, or `holdout` together with `--ckpt`.
        #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
        targets: Option<String>,
        #[arg(long)]
        grid: bool,
        /// Checkpoint whose hold-out list resolves `--targets holdout`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_IDW_POWER)]
        power: f64,
        /// Adjacency threshold for `graph-mean`.
        #[arg(long, default_value_t = physkrig::geo_graph::DEFAULT_THRESHOLD_KM)]
        threshold_km: f64,
        #[arg(long, value_enum, default_value = "all")]
        range: RangeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per AOD weight and tabulate validation and test MAE.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "PHYSKRIG_DATA")]
        data: PathBuf,
        /// Comma-separated lambda2 values.
        #[arg(long, default_value = "0,0.05,0.1,0.5")]
        lambda2: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RangeArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Idw,
    Nearest,
    GraphMean,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn run(cmd: Command) -> physkrig::Result<()> {
    match cmd {
        Command::Simulate { scenario, out, seed } => cmd_simulate(&scenario, &out, seed),
        Command::Train {
            config,
            data,
            out,
            log,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let dataset: Dataset = pio::load_dataset(&data)?;
            let outcome = train(&dataset, &cfg)?;
            save_checkpoint(&out, &outcome.checkpoint())?;
            let log_path = log.unwrap_or_else(|| with_suffix(&out, ".log.csv"));
            pio::write_train_log(&log_path, &outcome.log)?;
            let best = outcome.log.iter().filter_map(|e| e.val.as_ref().map(|v| v.mae)).fold(f64::INFINITY, f64::min);
            println!(
                "trained {} epochs; best validation MAE {}; checkpoint {}",
                outcome.log.len(),
                if best.is_finite() { format!("{best:.4}") } else { "n/a".into() },
                out.display()
            );
            Ok(())
        }
        Command::Infer {
            ckpt,
            data,
            targets,
            grid,
            range,
            out,
        } => {
            let ck: Checkpoint = load_checkpoint(&ckpt)?;
            let dataset: Dataset = pio::load_dataset(&data)?;
            let steps = resolve_range(range, &ck, dataset.steps)?;
            let (ids, pred) = if grid {
                let g = dataset.grid.ok_or_else(|| Error::Data("data directory has no grid".into()))?;
                let pred = infer_grid(&ck.model, &dataset, steps.clone())?;
                (g.node_ids().map(|i| dataset.ids[i].clone()).collect::<Vec<_>>(), pred)
            } else {
                let targets = resolve_targets(targets.as_deref().unwrap_or(""), Some(&ck), &dataset)?;
                let observed: Vec<usize> = dataset.stations.iter().copied().filter(|s| !targets.contains(s)).collect();
                let pred = infer_nodes(&ck.model, &dataset, &observed, &targets, steps.clone())?;
                (targets.iter().map(|&i| dataset.ids[i].clone()).collect(), pred)
            };
            pio::write_field(&out, "prediction", &ids, steps.start, &pred)?;
            println!("wrote {} nodes x {} steps to {}", ids.len(), steps.len(), out.display());
            Ok(())
        }
        Command::Eval { pred, truth, out } => cmd_eval(&pred, &truth, out.as_deref()),
        Command::Render {
            field,
            data,
            out,
            time,
            min,
            max,
        } => cmd_render(&field, &data, &out, time, min, max),
        Command::Baseline {
            method,
            data,
            targets,
            grid,
            ckpt,
            power,
            threshold_km,
            range,
            out,
        } => {
            let dataset: Dataset = pio::load_dataset(&data)?;
            let ck = ckpt.as_deref().map(load_checkpoint::<f64>).transpose()?;
            let targets = if grid {
                dataset
                    .grid
                    .ok_or_else(|| Error::Data("data directory has no grid".into()))?
                    .node_ids()
                    .collect()
            } else {
                resolve_targets(targets.as_deref().unwrap_or(""), ck.as_ref(), &dataset)?
            };
            let steps = match &ck {
                Some(c) => resolve_range(range, c, dataset.steps)?,
                None if matches!(range, RangeArg::All) => 0..dataset.steps,
                None => return Err(Error::Config("--range other than all needs --ckpt".into())),
            };
            let pred = run_baseline(method, &dataset, &targets, steps.clone(), power, threshold_km)?;
            let ids: Vec<String> = targets.iter().map(|&i| dataset.ids[i].clone()).collect();
            pio::write_field(&out, "prediction", &ids, steps.start, &pred)?;
            println!("wrote {} nodes x {} steps to {}", ids.len(), steps.len(), out.display());
            Ok(())
        }
        Command::Sweep {
            config,
            data,
            lambda2,
            out,
            seed,
        } => cmd_sweep(config.as_deref(), &data, &lambda2, &out, seed),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> physkrig::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.split.seed = s;
    }
    Ok(cfg)
}

fn cmd_simulate(scenario: &str, out: &Path, seed: Option<u64>) -> physkrig::Result<()> {
    let mut spec = if Path::new(scenario).is_file() {
        let text = fs::read_to_string(scenario)?;
        toml::from_str::<ScenarioSpec>(&text).map_err(|e| Error::Config(format!("{scenario}: {e}")))?
    } else {
        preset(scenario).map_err(|e| Error::Config(e.to_string()))?
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let truth = simulate(&spec)?;
    let stations = sample_stations(&truth, spec.stations, spec.seed, spec.observation_noise)?;
    let aod = make_aod(&truth, &spec.aod, spec.seed)?;
    let files = pio::write_synth(
        out,
        &SynthBundle {
            spec: &spec,
            truth: &truth,
            stations: &stations,
            aod: &aod,
        },
    )?;
    println!(
        "simulated {} x {} cells, {} steps, {} stations; wrote {} files to {}",
        spec.nx,
        spec.ny,
        spec.steps,
        spec.stations,
        files.len(),
        out.display()
    );
    Ok(())
}

fn resolve_range(range: RangeArg, ck: &Checkpoint, steps: usize) -> physkrig::Result<std::ops::Range<usize>> {
    let key = match range {
        RangeArg::All => return Ok(0..steps),
        RangeArg::Train => "train_range",
        RangeArg::Val => "val_range",
        RangeArg::Test => "test_range",
    };
    let pair = ck.extra[key]
        .as_array()
        .and_then(|a| Some((a.first()?.as_u64()? as usize, a.get(1)?.as_u64()? as usize)))
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {key}")))?;
    if pair.1 > steps || pair.0 > pair.1 {
        return Err(Error::Data(format!("{key} {pair:?} exceeds the {steps} steps of the data")));
    }
    Ok(pair.0..pair.1)
}

fn resolve_targets(spec: &str, ck: Option<&Checkpoint>, dataset: &Dataset) -> physkrig::Result<Vec<usize>> {
    let names: Vec<String> = if spec == "holdout" {
        let ck = ck.ok_or_else(|| Error::Config("--targets holdout needs a checkpoint".into()))?;
        ck.extra["holdout"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no holdout list".into()))?
            .iter()
            .filter_map(|v| v.as_str().map(str::to_string))
            .collect()
    } else {
        spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
    };
    let mut ids: Vec<usize> = names
        .iter()
        .map(|n| dataset.index_of(n).ok_or_else(|| Error::Data(format!("unknown node id {n:?}"))))
        .collect::<physkrig::Result<_>>()?;
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

fn run_baseline(
    method: Method,
    dataset: &Dataset,
    targets: &[usize],
    steps: std::ops::Range<usize>,
    power: f64,
    threshold_km: f64,
) -> physkrig::Result<Tensor> {
    let observed: Vec<usize> = dataset.stations.iter().copied().filter(|s| !targets.contains(s)).collect();
    let pos = |ids: &[usize]| ids.iter().map(|&i| dataset.nodes.position(i)).collect::<Vec<_>>();
    let (opos, tpos) = (pos(&observed), pos(targets));
    let geo = match method {
        Method::GraphMean => Some(build_geo_adjacency(&dataset.nodes, threshold_km)?),
        _ => None,
    };
    let len = steps.len();
    let mut out = vec![0.0; targets.len() * len];
    for (k, t) in steps.enumerate() {
        let values: Vec<f64> = observed.iter().map(|&i| dataset.pollution[i * dataset.steps + t]).collect();
        let est = match method {
            Method::Idw => idw(&values, &opos, &tpos, power)?,
            Method::Nearest => nearest(&values, &opos, &tpos)?,
            Method::GraphMean => graph_mean(&values, &observed, geo.as_ref().expect("built above"), targets)?,
        };
        for (j, e) in est.into_iter().enumerate() {
            out[j * len + k] = e;
        }
    }
    Tensor::new(vec![targets.len(), len], out)
}

fn cmd_eval(pred: &Path, truth: &Path, out: Option<&Path>) -> physkrig::Result<()> {
    let p = FieldTable::read(pred, "prediction")?;
    let t = FieldTable::read(truth, "truth")?;
    let steps = p.series.first().map_or(0, Vec::len);
    let mut pv = Vec::new();
    let mut tv = Vec::new();
    for (id, series) in p.ids.iter().zip(&p.series) {
        if series.len() != steps {
            return Err(Error::Data(format!("node {id:?} has {} steps, expected {steps}", series.len())));
        }
        let truth_series = t.get(id).ok_or_else(|| Error::Data(format!("no truth for node {id:?}")))?;
        for &(time, v) in series {
            let k = truth_series
                .binary_search_by_key(&time, |x| x.0)
                .map_err(|_| Error::Data(format!("no truth for node {id:?} at time {time}")))?;
            pv.push(v);
            tv.push(truth_series[k].1);
        }
    }
    let rep = report(&p.ids, &pv, &tv, steps)?;
    let mut buf = Vec::new();
    pio::write_report(&mut buf, &rep)?;
    io::stdout().write_all(&buf)?;
    if let Some(o) = out {
        fs::write(o, &buf)?;
    }
    Ok(())
}

/// Raster of a field at one step: each node's value is written to the grid
/// cell containing it; cells without a node stay black.
fn cmd_render(field: &Path, data: &Path, out: &Path, time: usize, min: Option<f64>, max: Option<f64>) -> physkrig::Result<()> {
    let table = FieldTable::read(field, "prediction").or_else(|_| FieldTable::read(field, "truth"))?;
    let gpath = data.join(pio::GRID_FILE);
    let text = fs::read_to_string(&gpath).map_err(|e| Error::Data(format!("{}: {e}", gpath.display())))?;
    let grid: GridFile = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", gpath.display())))?;
    let dataset: Dataset = pio::load_dataset(data)?;
    let snap = table.snapshot(time);
    if snap.is_empty() {
        return Err(Error::Data(format!("field has no values at time {time}")));
    }
    let lo = min.unwrap_or_else(|| snap.iter().map(|p| p.1).fold(f64::INFINITY, f64::min));
    let hi = max.unwrap_or_else(|| snap.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max));
    if !(hi >= lo) {
        return Err(Error::Config(format!("--max {hi} is below --min {lo}")));
    }
    let mut pixels = vec![0u8; grid.nx * grid.ny];
    for (id, v) in snap {
        let i = dataset.index_of(&id).ok_or_else(|| Error::Data(format!("unknown node id {id:?}")))?;
        let [x, y] = dataset.nodes.position(i);
        let (cx, cy) = ((x / grid.cell_km).floor(), (y / grid.cell_km).floor());
        if cx < 0.0 || cy < 0.0 || cx as usize >= grid.nx || cy as usize >= grid.ny {
            continue;
        }
        let level = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
        // image rows run north to south
        let row = grid.ny - 1 - cy as usize;
        pixels[row * grid.nx + cx as usize] = (level * 255.0).round() as u8;
    }
    let mut bytes = format!("P5\n# physkrig render v{} time={time} min={lo} max={hi}\n{} {}\n255\n", pio::SCHEMA_VERSION, grid.nx, grid.ny).into_bytes();
    bytes.extend_from_slice(&pixels);
    fs::write(out, bytes)?;
    println!("rendered {} x {} image to {}", grid.nx, grid.ny, out.display());
    Ok(())
}

fn cmd_sweep(config: Option<&Path>, data: &Path, lambda2: &str, out: &Path, seed: Option<u64>) -> physkrig::Result<()> {
    let base = load_config(config, seed)?;
    let values: Vec<f64> = lambda2
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("lambda2 {s:?}: {e}"))))
        .collect::<physkrig::Result<_>>()?;
    let dataset: Dataset = pio::load_dataset(data)?;
    let mut w = pio::csv_writer(out, "sweep")?;
    w.write_record(["lambda1", "lambda2", "epochs", "val_mae", "test_mae"]).map_err(|e| Error::Data(e.to_string()))?;
    for l2 in values {
        let mut cfg = base.clone();
        cfg.loss.lambda2 = l2;
        cfg.validate()?;
        let outcome = train(&dataset, &cfg)?;
        let best_val = outcome.log.iter().filter_map(|e| e.val.as_ref().map(|v| v.mae)).fold(f64::INFINITY, f64::min);
        let split = &outcome.split;
        let test_mae = if split.test.is_empty() || split.holdout.is_empty() {
            f64::NAN
        } else {
            let pred = infer_nodes(&outcome.model, &dataset, &split.train_stations, &split.holdout, split.test.clone())?;
            let truth = dataset.gather(&dataset.pollution, &split.holdout, split.test.clone());
            physkrig::metrics::mae(pred.data(), truth.data(), None)?
        };
        w.write_record([
            cfg.loss.lambda1.to_string(),
            l2.to_string(),
            outcome.log.len().to_string(),
            best_val.to_string(),
            test_mae.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
        println!("lambda2 {l2}: val MAE {best_val:.4}, test MAE {test_mae:.4}");
    }
    w.flush()?;
    Ok(())
}
