use super::{tiny_config, toy_dataset, toy_model, toy_operators};
use physkrig::diffcore::{ParamStore, Tape, Var};
use physkrig::geo_graph::GraphOperators;
use physkrig::loss::{aod_gradient_loss, composite_loss, infer_loss, init_loss, EdgeList, LossWeights};
use physkrig::model::{full_forward, Activation, Model, ModelConfig, ParamVars};
use physkrig::trainer::{Dataset, MaskPartition};

pub struct Problem {
    pub ds: Dataset<f64>,
    ops: GraphOperators<f64>,
    partition: MaskPartition,
    edges: EdgeList,
}

impl Problem {
    pub fn new(seed: u64) -> Self {
        let ds = toy_dataset(4, 8, seed);
        let ops = toy_operators(&ds);
        let edges = EdgeList::from_geo(&ops.geo);
        assert!(!edges.is_empty());
        Self {
            ds,
            ops,
            partition: MaskPartition::new(vec![0, 2], vec![1, 3], 4).unwrap(),
            edges,
        }
    }

    /// Records the normalized components and their composite.
    fn record(&self, tape: &mut Tape<f64>, model: &Model<f64>, params: &ParamStore<f64>) -> (ParamVars, [Var; 4]) {
        let all: Vec<usize> = (0..4).collect();
        let flags = self.partition.observed_flags(4);
        let series = self.ds.node_series(&all, &flags, 0..8, &model.norm).unwrap();
        let truth = self.ds.gather(&self.ds.pollution, &all, 0..8);
        let vars = ParamVars::register(tape, params, true).unwrap();
        let out = full_forward(tape, model, &vars, &series, &self.ops).unwrap();
        let scale = 1.0 / (2.0 * 8.0);
        let infer = infer_loss(tape, out.pred, &truth, &self.partition).unwrap();
        let infer = tape.scale(infer, scale).unwrap();
        let init = init_loss(tape, out.init, &truth, &self.partition).unwrap();
        let init = tape.scale(init, scale).unwrap();
        let aod = self.ds.aod.as_ref().unwrap();
        let a = aod_gradient_loss(tape, out.pred, aod, &self.edges).unwrap();
        let a = tape.scale(a, 1.0 / (self.edges.len() * 8) as f64).unwrap();
        let total = composite_loss(tape, infer, init, Some(a), &WEIGHTS).unwrap();
        (vars, [infer, init, a, total])
    }

    fn grads_of(tape: &Tape<f64>, vars: &ParamVars, loss: Var) -> Vec<(String, Vec<f64>)> {
        let g = tape.backward(loss).unwrap();
        vars.iter()
            .map(|(name, v)| {
                let data = g.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]);
                (name.to_string(), data)
            })
            .collect()
    }

    /// Normalized composite loss; gradients per parameter when `grads`.
    pub fn eval(&self, model: &Model<f64>, params: &ParamStore<f64>, grads: bool) -> (f64, Vec<(String, Vec<f64>)>) {
        let mut tape = Tape::new();
        let (vars, [.., total]) = self.record(&mut tape, model, params);
        let value = tape.value(total).item();
        if !grads {
            return (value, Vec::new());
        }
        (value, Self::grads_of(&tape, &vars, total))
    }

    /// Gradients of the infer, init, AOD and composite terms, flattened over
    /// every parameter in a fixed order.
    pub fn component_grads(&self, model: &Model<f64>) -> [Vec<f64>; 4] {
        let mut tape = Tape::new();
        let (vars, terms) = self.record(&mut tape, model, &model.params);
        terms.map(|l| Self::grads_of(&tape, &vars, l).into_iter().flat_map(|(_, g)| g).collect())
    }
}

pub const WEIGHTS: LossWeights = LossWeights { lambda1: 0.7, lambda2: 0.3 };

/// Largest relative error between the analytic gradient and a central
/// difference with step 1e-5, over every scalar of every parameter.
/// Differences below 1e-9 in absolute terms count as agreement.
pub fn max_relative_error(config: ModelConfig, seed: u64) -> (f64, String) {
    let problem = Problem::new(seed);
    let model = toy_model(config, &problem.ds, seed);
    let (_, analytic) = problem.eval(&model, &model.params, true);
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (name, grad) in &analytic {
        for (k, &a) in grad.iter().enumerate() {
            let mut plus = model.params.clone();
            let mut minus = model.params.clone();
            let mut t = plus.get(name).unwrap().clone();
            t.data_mut()[k] += h;
            plus.assign(name, t).unwrap();
            let mut t = minus.get(name).unwrap().clone();
            t.data_mut()[k] -= h;
            minus.assign(name, t).unwrap();
            let fd = (problem.eval(&model, &plus, false).0 - problem.eval(&model, &minus, false).0) / (2.0 * h);
            let diff = (a - fd).abs();
            let rel = if diff < 1e-9 { 0.0 } else { diff / a.abs().max(fd.abs()) };
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}] analytic {a:e} fd {fd:e}"));
            }
        }
    }
    worst
}

pub fn smooth_config() -> ModelConfig {
    ModelConfig {
        activation: Activation::Tanh,
        ..tiny_config()
    }
}

