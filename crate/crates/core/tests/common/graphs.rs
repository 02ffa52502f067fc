use nalgebra::DMatrix;
use physkrig::geo_graph::{build_advection_operator, build_diffusion_operator, build_geo_adjacency, NodeSet};
use physkrig::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Positions in a 100 km square, winds up to 15 m/s per component and a
/// threshold between 10 and 150 km, for `2..=10` nodes.
pub fn random_graph(seed: u64) -> (Vec<[f64; 2]>, Vec<[f64; 2]>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=10);
    let pos = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
    let wind = (0..n).map(|_| [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)]).collect();
    (pos, wind, rng.random_range(10.0..150.0))
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Symmetry, locality, weight range, diffusion normalization and spectral
/// radius, advection sign, locality and anisotropy. Returns the spectral
/// radius of the diffusion operator (0 for an all-isolated graph).
pub fn kernel_invariants(pos: &[[f64; 2]], wind: &[[f64; 2]], xi: f64) -> Result<f64, String> {
    let n = pos.len();
    let nodes = NodeSet::new(pos.to_vec()).map_err(|e| e.to_string())?;
    let geo = match build_geo_adjacency(&nodes, xi) {
        Err(Error::IsolatedGraph { .. }) => {
            let connected = (0..n).any(|i| (0..i).any(|j| dist(pos[i], pos[j]) < xi));
            ensure!(!connected, "isolated-graph error on a connected layout");
            return Ok(0.0);
        }
        other => other.map_err(|e| e.to_string())?,
    };
    let a = geo.weights.to_dense();
    for i in 0..n {
        ensure!(a[i * n + i] == 0.0, "nonzero diagonal at {i}");
        for j in 0..n {
            let w = a[i * n + j];
            ensure!(w.to_bits() == a[j * n + i].to_bits(), "geo asymmetric at ({i}, {j})");
            ensure!((0.0..=1.0).contains(&w), "geo weight {w} outside [0, 1]");
            ensure!(w == 0.0 || dist(pos[i], pos[j]) < xi, "geo edge ({i}, {j}) beyond threshold");
        }
    }

    let d = build_diffusion_operator(&geo).weights.to_dense();
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j]).sum()).collect();
    for i in 0..n {
        for j in 0..n {
            ensure!(d[i * n + j].to_bits() == d[j * n + i].to_bits(), "diffusion asymmetric at ({i}, {j})");
            let want = if deg[i] > 0.0 && deg[j] > 0.0 {
                a[i * n + j] / (deg[i] * deg[j]).sqrt()
            } else {
                0.0
            };
            ensure!((d[i * n + j] - want).abs() <= 1e-12, "diffusion entry ({i}, {j}) {} vs {want}", d[i * n + j]);
        }
    }
    let eig = DMatrix::from_row_slice(n, n, &d).symmetric_eigen();
    let radius = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure!(radius <= 1.0 + 1e-9, "spectral radius {radius}");

    let adv = build_advection_operator(&nodes, wind, xi).map_err(|e| e.to_string())?.weights.to_dense();
    for i in 0..n {
        for j in 0..n {
            let w = adv[i * n + j];
            ensure!(w >= 0.0, "negative advection weight at ({i}, {j})");
            if i == j {
                ensure!(w == 0.0, "advection self-loop at {i}");
                continue;
            }
            let mean = [(wind[i][0] + wind[j][0]) / 2.0, (wind[i][1] + wind[j][1]) / 2.0];
            let along = mean[0] * (pos[i][0] - pos[j][0]) + mean[1] * (pos[i][1] - pos[j][1]);
            if w > 0.0 {
                ensure!(a[i * n + j] > 0.0, "advection edge ({i}, {j}) outside the geo pattern");
                ensure!(along > 0.0, "advection edge ({i}, {j}) against the wind");
            }
            if i < j && dist(pos[i], pos[j]) < xi && along.abs() > 1e-9 {
                let (f, b) = (adv[i * n + j] > 0.0, adv[j * n + i] > 0.0);
                ensure!(f != b, "pair ({i}, {j}) not anisotropic");
            }
        }
    }
    Ok(radius)
}
