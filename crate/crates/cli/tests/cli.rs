use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_SCENARIO: &str = r#"
nx = 6
ny = 5
cell_km = 2.0
steps = 60
spinup_steps = 12
stations = 8
seed = 3

[wind]
kind = "constant"
u = 1.5
v = 0.5

[[sources]]
x_km = 4.0
y_km = 5.0
rate = 200.0
radius_km = 1.0
variability = 0.2
schedule = { kind = "diurnal", amplitude = 0.5, peak_hour = 8.0 }
"#;

const SMALL_CONFIG: &str = r#"
[model]
hidden_dim = 8
readout_hidden = 8

[train]
epochs = 2
batches_per_epoch = 2

[graph]
threshold_km = 6.0
"#;

fn physkrig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physkrig"))
        .args(args)
        .env_remove("PHYSKRIG_DATA")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = physkrig(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    physkrig(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a CSV: everything after the schema line and the header.
fn rows(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# physkrig "), "{} lacks a schema line", path.display());
    lines.skip(1).map(str::to_string).collect()
}

fn simulate_small(dir: &Path) -> std::path::PathBuf {
    let scenario = dir.join("small.toml");
    fs::write(&scenario, SMALL_SCENARIO).unwrap();
    let data = dir.join("data");
    ok(&["simulate", "--scenario", s(&scenario), "--out", s(&data)]);
    data
}

#[test]
fn simulate_writes_one_row_per_station_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s1");
    ok(&["simulate", "--scenario", "s1-advection", "--out", s(&data)]);
    let (stations, cells, steps) = (40, 400, 240);
    assert_eq!(rows(&data.join("observations.csv")).len(), stations * steps);
    assert_eq!(rows(&data.join("nodes.csv")).len(), stations + cells);
    for f in ["wind.csv", "emissions.csv", "truth.csv", "aod.csv"] {
        assert_eq!(rows(&data.join(f)).len(), (stations + cells) * steps, "{f}");
    }
    let grid = fs::read_to_string(data.join("grid.toml")).unwrap();
    assert!(grid.contains("schema_version = 1"));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("small.toml");
    fs::write(&scenario, SMALL_SCENARIO).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        ok(&["simulate", "--scenario", s(&scenario), "--out", s(out), "--seed", "11"]);
    }
    ok(&["simulate", "--scenario", s(&scenario), "--out", s(&c), "--seed", "12"]);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?}");
    }
    assert_ne!(fs::read(a.join("observations.csv")).unwrap(), fs::read(c.join("observations.csv")).unwrap());
}

#[test]
fn missing_aod_preset_masks_everything() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("b");
    ok(&["simulate", "--scenario", "aod-missing", "--out", s(&data)]);
    let aod = rows(&data.join("aod.csv"));
    assert!(!aod.is_empty());
    assert!(aod.iter().all(|r| r.ends_with(",,0")), "{:?}", aod.iter().find(|r| !r.ends_with(",,0")));
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_small(dir.path());
    let truth = data.join("truth.csv");
    let pred = dir.path().join("pred.csv");
    let text = fs::read_to_string(&truth).unwrap();
    fs::write(&pred, text.replacen("# physkrig truth v1", "# physkrig prediction v1", 1)).unwrap();
    let report = ok(&["eval", "--pred", s(&pred), "--truth", s(&truth)]);
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("# physkrig report v1"));
    assert_eq!(lines.next(), Some("node_id,mae,rmse,r2"));
    let all = report.lines().find(|l| l.starts_with("ALL,")).unwrap();
    let fields: Vec<&str> = all.split(',').collect();
    assert_eq!(fields[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(fields[2].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn constant_field_renders_uniform_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_small(dir.path());
    let field = dir.path().join("const.csv");
    let mut text = String::from("# physkrig prediction v1\ntime,node_id,pm25\n");
    for k in 0..30 {
        text.push_str(&format!("4,g{k:04},17.5\n"));
    }
    fs::write(&field, text).unwrap();
    let image = dir.path().join("const.pgm");
    ok(&["render", "--field", s(&field), "--data", s(&data), "--out", s(&image), "--time", "4"]);
    let bytes = fs::read(&image).unwrap();
    let header = b"P5\n# physkrig render v1 time=4 min=17.5 max=17.5\n6 5\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), 30);
    assert!(pixels.iter().all(|&p| p == pixels[0]));

    // fixed scaling flags map the same field to the same grey level
    ok(&[
        "render", "--field", s(&field), "--data", s(&data), "--out", s(&image), "--time", "4", "--min", "0", "--max", "35",
    ]);
    let bytes = fs::read(&image).unwrap();
    assert!(bytes.ends_with(&[128; 30]));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let data = simulate_small(dir.path());
    fs::write(p("config.toml"), SMALL_CONFIG).unwrap();
    ok(&["train", "--config", s(&p("config.toml")), "--data", s(&data), "--out", s(&p("model.ckpt"))]);
    assert_eq!(&fs::read(p("model.ckpt")).unwrap()[..8], b"PKCKPT\0\0");
    assert_eq!(rows(&p("model.ckpt.log.csv")).len(), 2);

    ok(&["infer", "--ckpt", s(&p("model.ckpt")), "--data", s(&data), "--grid", "--range", "test", "--out", s(&p("grid.csv"))]);
    assert_eq!(rows(&p("grid.csv")).len(), 30 * 12);
    let report = ok(&["eval", "--pred", s(&p("grid.csv")), "--truth", s(&data.join("truth.csv")), "--out", s(&p("report.csv"))]);
    assert_eq!(report.lines().count(), 2 + 30 + 1);
    assert_eq!(fs::read_to_string(p("report.csv")).unwrap(), report);

    ok(&["infer", "--ckpt", s(&p("model.ckpt")), "--data", s(&data), "--targets", "holdout", "--range", "test", "--out", s(&p("holdout.csv"))]);
    assert_eq!(rows(&p("holdout.csv")).len(), 2 * 12);
    ok(&[
        "baseline", "--method", "idw", "--data", s(&data), "--targets", "holdout", "--ckpt", s(&p("model.ckpt")), "--range", "test",
        "--out", s(&p("idw.csv")),
    ]);
    assert_eq!(rows(&p("idw.csv")).len(), 2 * 12);
    ok(&["render", "--field", s(&p("grid.csv")), "--data", s(&data), "--out", s(&p("grid.pgm")), "--time", "50"]);
    assert!(fs::read(p("grid.pgm")).unwrap().starts_with(b"P5\n"));
}

#[test]
fn data_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_small(dir.path());
    let out = dir.path().join("nearest.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_physkrig"))
        .args(["baseline", "--method", "nearest", "--grid", "--out", s(&out)])
        .env("PHYSKRIG_DATA", &data)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(rows(&out).len(), 30 * 60);
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    // usage
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["simulate", "--out", s(&p("x"))]), 1);
    assert_eq!(code(&["simulate", "--scenario", "no-such-preset", "--out", s(&p("x"))]), 1);
    // data
    assert_eq!(code(&["train", "--data", s(&p("missing")), "--out", s(&p("m.ckpt"))]), 2);
    let data = simulate_small(dir.path());
    let obs = data.join("observations.csv");
    let broken = fs::read_to_string(&obs).unwrap().replacen(",s000,", ",s000x,", 1);
    fs::write(&obs, broken).unwrap();
    let out = physkrig(&["train", "--data", s(&data), "--out", s(&p("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("observations.csv:3:") && stderr.contains("s000x"), "{stderr}");
    // numeric: transport too fast for one substep
    let scenario = p("fast.toml");
    fs::write(&scenario, SMALL_SCENARIO.replace("u = 1.5", "u = 20.0").replace("nx = 6", "nx = 6\nsubsteps = 1")).unwrap();
    assert_eq!(code(&["simulate", "--scenario", s(&scenario), "--out", s(&p("fast"))]), 3);
    // ok
    assert_eq!(code(&["--help"]), 0);
}
