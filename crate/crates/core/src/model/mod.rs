//! The kriging network: a per-node dilated causal TCN encoder, a stack of
//! diffusion + advection propagation layers, and node-wise MLP readouts for
//! the initial proposal and the final estimate.

mod checkpoint;
mod series;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use series::{Normalization, NodeSeries, RawSeries};

use crate::diffcore::{ParamStore, SparseMatrix, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo_graph::GraphOperators;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Whether the diffusion and advection messages share one weight matrix per
/// layer or get one each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelWeights {
    #[default]
    Shared,
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Meteorology channels, in fixed order (the synthetic data uses u, v).
    pub met_channels: usize,
    pub emission_channels: usize,
    pub hidden_dim: usize,
    pub tcn_layers: usize,
    pub tcn_kernel_size: usize,
    pub dilation_base: usize,
    pub gnn_layers: usize,
    pub readout_hidden: usize,
    pub activation: Activation,
    pub kernel_weights: KernelWeights,
    /// Add each propagation layer's input to its output.
    pub residual: bool,
    /// Softplus on the final estimate, keeping concentrations positive.
    pub output_softplus: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            met_channels: 2,
            emission_channels: 1,
            hidden_dim: 32,
            tcn_layers: 3,
            tcn_kernel_size: 3,
            dilation_base: 2,
            gnn_layers: 2,
            readout_hidden: 32,
            activation: Activation::Relu,
            kernel_weights: KernelWeights::Shared,
            residual: true,
            output_softplus: false,
        }
    }
}

impl ModelConfig {
    /// Meteorology, emissions, masked pollution and the observed flag.
    pub fn in_channels(&self) -> usize {
        self.met_channels + self.emission_channels + 2
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.tcn_layers).map(|l| self.dilation_base.pow(l as u32)).collect()
    }

    /// Number of input steps that can influence one output step.
    pub fn receptive_field(&self) -> usize {
        1 + (self.tcn_kernel_size - 1) * self.dilations().iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("tcn_layers", self.tcn_layers),
            ("tcn_kernel_size", self.tcn_kernel_size),
            ("dilation_base", self.dilation_base),
            ("readout_hidden", self.readout_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        Ok(())
    }
}

/// Graph construction constants a model was trained with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphSettings<T> {
    pub threshold_km: T,
    pub sigma_sq: T,
    /// Fixed multiplier on advection weights (1/hour) so that their typical
    /// row sum is order one on the training graph.
    pub advection_scale: T,
}

/// Everything needed to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub norm: Normalization<T>,
    pub graph: GraphSettings<T>,
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn mlp_params<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize) -> Result<()> {
    store.insert(format!("{prefix}.0.weight"), glorot(rng, &[input, hidden], input, hidden))?;
    store.insert(format!("{prefix}.0.bias"), Tensor::zeros(&[hidden]))?;
    store.insert(format!("{prefix}.1.weight"), glorot(rng, &[hidden, 1], hidden, 1))?;
    store.insert(format!("{prefix}.1.bias"), Tensor::zeros(&[1]))?;
    Ok(())
}

/// Seeded parameter initialization. No shape depends on the node count.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let h = config.hidden_dim;
    let k = config.tcn_kernel_size;
    let mut cin = config.in_channels();
    for l in 0..config.tcn_layers {
        store.insert(format!("tcn.{l}.weight"), glorot(&mut rng, &[k, cin, h], k * cin, h))?;
        store.insert(format!("tcn.{l}.bias"), Tensor::zeros(&[h]))?;
        cin = h;
    }
    for l in 0..config.gnn_layers {
        store.insert(format!("prop.{l}.weight"), glorot(&mut rng, &[h, h], h, h))?;
        if config.kernel_weights == KernelWeights::Separate {
            store.insert(format!("prop.{l}.weight_adv"), glorot(&mut rng, &[h, h], h, h))?;
        }
    }
    mlp_params(&mut store, &mut rng, "readout", h, config.readout_hidden)?;
    mlp_params(&mut store, &mut rng, "init_readout", h, config.readout_hidden)?;
    Ok(store)
}

/// Tape handles for every parameter.
#[derive(Clone, Debug)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    /// Records each parameter as a differentiable leaf (`trainable`) or as a
    /// constant.
    pub fn register<T: Real>(tape: &mut Tape<T>, params: &ParamStore<T>, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, value) in params.iter() {
            let v = if trainable {
                tape.param(value.clone())?
            } else {
                tape.constant(value.clone())?
            };
            vars.insert(name.to_string(), v);
        }
        Ok(Self(vars))
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn activate<T: Real>(tape: &mut Tape<T>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// Per-node TCN encoding `[n, steps, channels] -> [n, steps, hidden]`.
pub fn encode<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, params: &ParamVars, input: Var) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 3 || shape[2] != config.in_channels() {
        return Err(Error::Shape {
            op: "encode",
            left: shape,
            right: vec![config.in_channels()],
        });
    }
    let mut h = input;
    for (l, dilation) in config.dilations().into_iter().enumerate() {
        let w = params.get(&format!("tcn.{l}.weight"))?;
        let b = params.get(&format!("tcn.{l}.bias"))?;
        let z = tape.conv1d_causal_dilated(h, w, Some(b), dilation)?;
        h = activate(tape, z, config.activation)?;
    }
    Ok(h)
}

/// Message-passing operators for one window, in the form each propagation
/// layer consumes.
#[derive(Clone, Debug)]
pub enum Kernels<T> {
    /// `diffusion + scale * advection[t]` per step.
    Shared(Vec<Arc<SparseMatrix<T>>>),
    Separate {
        diffusion: Arc<SparseMatrix<T>>,
        advection: Vec<Arc<SparseMatrix<T>>>,
    },
}

impl<T: Real> Kernels<T> {
    pub fn new(ops: &GraphOperators<T>, advection_scale: T, mode: KernelWeights) -> Result<Self> {
        match mode {
            KernelWeights::Shared => {
                let combined = ops
                    .advection
                    .iter()
                    .map(|a| ops.diffusion.add_scaled(a, advection_scale).map(Arc::new))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Kernels::Shared(combined))
            }
            KernelWeights::Separate => Ok(Kernels::Separate {
                diffusion: ops.diffusion.clone(),
                advection: ops.advection.iter().map(|a| Arc::new(a.scaled(advection_scale))).collect(),
            }),
        }
    }

    /// Steps `start..end`; operators are shared, not copied.
    pub fn window(&self, start: usize, end: usize) -> Self {
        match self {
            Kernels::Shared(ops) => Kernels::Shared(ops[start..end].to_vec()),
            Kernels::Separate { diffusion, advection } => Kernels::Separate {
                diffusion: diffusion.clone(),
                advection: advection[start..end].to_vec(),
            },
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Kernels::Shared(ops) => ops.len(),
            Kernels::Separate { advection, .. } => advection.len(),
        }
    }

    pub fn nodes(&self) -> usize {
        match self {
            Kernels::Shared(ops) => ops.first().map_or(0, |a| a.rows()),
            Kernels::Separate { diffusion, .. } => diffusion.rows(),
        }
    }
}

fn step_linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var) -> Result<Var> {
    tape.linear(x, w, None)
}

/// One propagation layer, `act((D H + A_t H) W)` at every step `t`.
pub fn propagate<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &ParamVars,
    h: Var,
    kernels: &Kernels<T>,
    layer: usize,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 3 || shape[0] != kernels.nodes() {
        return Err(Error::Shape {
            op: "propagate",
            left: shape,
            right: vec![kernels.nodes()],
        });
    }
    let w = params.get(&format!("prop.{layer}.weight"))?;
    let z = match kernels {
        Kernels::Shared(ops) => {
            let msg = tape.sparse_step_matmul(ops.clone(), h)?;
            step_linear(tape, msg, w)?
        }
        Kernels::Separate { diffusion, advection } => {
            let w_adv = params.get(&format!("prop.{layer}.weight_adv"))?;
            let md = tape.sparse_step_matmul(vec![diffusion.clone()], h)?;
            let ma = tape.sparse_step_matmul(advection.clone(), h)?;
            let zd = step_linear(tape, md, w)?;
            let za = step_linear(tape, ma, w_adv)?;
            tape.add(zd, za)?
        }
    };
    activate(tape, z, config.activation)
}

/// Shared MLP `[n, steps, hidden] -> [n, steps]` in standardized units.
pub fn mlp_readout<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &ParamVars,
    h: Var,
    prefix: &str,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 3 || shape[2] != config.hidden_dim {
        return Err(Error::Shape {
            op: "readout",
            left: shape,
            right: vec![config.hidden_dim],
        });
    }
    let w0 = params.get(&format!("{prefix}.0.weight"))?;
    let b0 = params.get(&format!("{prefix}.0.bias"))?;
    let w1 = params.get(&format!("{prefix}.1.weight"))?;
    let b1 = params.get(&format!("{prefix}.1.bias"))?;
    let z = tape.linear(h, w0, Some(b0))?;
    let a = activate(tape, z, config.activation)?;
    let y = tape.linear(a, w1, Some(b1))?;
    tape.reshape(y, &shape[..2])
}

/// Final readout on the propagated representation.
pub fn readout<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, params: &ParamVars, h: Var) -> Result<Var> {
    mlp_readout(tape, config, params, h, "readout")
}

/// Initial proposal from the TCN encoding alone.
pub fn init_readout<T: Real>(tape: &mut Tape<T>, config: &ModelConfig, params: &ParamVars, h0: Var) -> Result<Var> {
    mlp_readout(tape, config, params, h0, "init_readout")
}

/// Tape handles produced by [`full_forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub input: Var,
    pub h0: Var,
    pub hidden: Var,
    /// Initial proposal, concentration units, `[n, steps]`.
    pub init: Var,
    /// Final estimate, concentration units, `[n, steps]`.
    pub pred: Var,
}

/// encode -> init_readout, and encode -> propagate x L -> readout.
pub fn full_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    params: &ParamVars,
    series: &NodeSeries<T>,
    ops: &GraphOperators<T>,
) -> Result<ForwardVars> {
    let kernels = Kernels::new(ops, model.graph.advection_scale, model.config.kernel_weights)?;
    forward_with_kernels(tape, model, params, series, &kernels)
}

/// [`full_forward`] with prebuilt (possibly windowed) kernels.
pub fn forward_with_kernels<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    params: &ParamVars,
    series: &NodeSeries<T>,
    kernels: &Kernels<T>,
) -> Result<ForwardVars> {
    let config = &model.config;
    if kernels.nodes() != series.nodes() || kernels.steps() != series.steps() {
        return Err(Error::Shape {
            op: "full_forward",
            left: vec![series.nodes(), series.steps()],
            right: vec![kernels.nodes(), kernels.steps()],
        });
    }
    let input = tape.constant(series.values().clone())?;
    let h0 = encode(tape, config, params, input)?;
    let mut h = h0;
    for layer in 0..config.gnn_layers {
        let next = propagate(tape, config, params, h, kernels, layer)?;
        h = if config.residual { tape.add(next, h)? } else { next };
    }
    let (mean, std) = (model.norm.target_mean, model.norm.target_std);
    let init_z = init_readout(tape, config, params, h0)?;
    let init = tape.affine(init_z, std, mean)?;
    let pred_z = readout(tape, config, params, h)?;
    let mut pred = tape.affine(pred_z, std, mean)?;
    if config.output_softplus {
        pred = tape.softplus(pred)?;
    }
    Ok(ForwardVars {
        input,
        h0,
        hidden: h,
        init,
        pred,
    })
}

/// Inference outputs in concentration units, `[n, steps]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub init: Tensor<T>,
    pub pred: Tensor<T>,
}

impl<T: Real> Model<T> {
    pub fn predict(&self, series: &NodeSeries<T>, ops: &GraphOperators<T>) -> Result<Prediction<T>> {
        let kernels = Kernels::new(ops, self.graph.advection_scale, self.config.kernel_weights)?;
        self.predict_with_kernels(series, &kernels)
    }

    pub fn predict_with_kernels(&self, series: &NodeSeries<T>, kernels: &Kernels<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false)?;
        let out = forward_with_kernels(&mut tape, self, &vars, series, kernels)?;
        Ok(Prediction {
            init: tape.value(out.init).clone(),
            pred: tape.value(out.pred).clone(),
        })
    }

    /// TCN encoding only, `[n, steps, hidden]`.
    pub fn encode(&self, series: &NodeSeries<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false)?;
        let input = tape.constant(series.values().clone())?;
        let h0 = encode(&mut tape, &self.config, &vars, input)?;
        Ok(tape.value(h0).clone())
    }
}
