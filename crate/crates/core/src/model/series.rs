use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Per-channel z-scoring constants, taken from the training range.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization<T> {
    /// Meteorology then emission channels.
    pub channel_mean: Vec<T>,
    pub channel_std: Vec<T>,
    /// Pollution statistics; used for the masked input channel and to map
    /// readouts back to concentration units.
    pub target_mean: T,
    pub target_std: T,
}

impl<T: Real> Normalization<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            channel_mean: vec![T::zero(); channels],
            channel_std: vec![T::one(); channels],
            target_mean: T::zero(),
            target_std: T::one(),
        }
    }
}

/// Unnormalized inputs for a node set over a window, node-major.
#[derive(Clone, Copy, Debug)]
pub struct RawSeries<'a, T> {
    pub nodes: usize,
    pub steps: usize,
    /// `[nodes, steps, met_channels]`
    pub met: &'a [T],
    /// `[nodes, steps, emission_channels]`
    pub emission: &'a [T],
    /// `[nodes, steps]`; read only where `observed` is set.
    pub pollution: &'a [T],
    pub observed: &'a [bool],
}

/// Model input `[nodes, steps, channels]` with channel layout
/// `[meteorology.., emissions.., masked pollution, observed flag]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSeries<T> {
    values: Tensor<T>,
}

impl<T: Real> NodeSeries<T> {
    /// Wraps an already assembled tensor after checking the flag/pollution
    /// invariants.
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 3 || values.shape()[2] < 2 {
            return Err(Error::invalid(format!(
                "node series must be [nodes, steps, channels>=2], got {:?}",
                values.shape()
            )));
        }
        let c = values.shape()[2];
        for (k, row) in values.data().chunks(c).enumerate() {
            let (pol, flag) = (row[c - 2], row[c - 1]);
            if flag != T::zero() && flag != T::one() {
                return Err(Error::invalid(format!("observed flag {flag} at entry {k} is not 0/1")));
            }
            if flag == T::zero() && pol != T::zero() {
                return Err(Error::invalid(format!("unobserved entry {k} carries pollution {pol}")));
            }
        }
        Ok(Self { values })
    }

    pub fn assemble(raw: &RawSeries<'_, T>, norm: &Normalization<T>, met_channels: usize, emission_channels: usize) -> Result<Self> {
        let (n, steps) = (raw.nodes, raw.steps);
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} has {got} values, expected {want}")))
            }
        };
        check("meteorology", raw.met.len(), n * steps * met_channels)?;
        check("emissions", raw.emission.len(), n * steps * emission_channels)?;
        check("pollution", raw.pollution.len(), n * steps)?;
        check("observed flags", raw.observed.len(), n)?;
        check("normalization", norm.channel_mean.len(), met_channels + emission_channels)?;
        let c = met_channels + emission_channels + 2;
        let mut data = Vec::with_capacity(n * steps * c);
        for i in 0..n {
            for t in 0..steps {
                let k = i * steps + t;
                for p in 0..met_channels {
                    let v = raw.met[k * met_channels + p];
                    data.push((v - norm.channel_mean[p]) / norm.channel_std[p]);
                }
                for q in 0..emission_channels {
                    let v = raw.emission[k * emission_channels + q];
                    let ch = met_channels + q;
                    data.push((v - norm.channel_mean[ch]) / norm.channel_std[ch]);
                }
                if raw.observed[i] {
                    data.push((raw.pollution[k] - norm.target_mean) / norm.target_std);
                    data.push(T::one());
                } else {
                    data.push(T::zero());
                    data.push(T::zero());
                }
            }
        }
        let values = Tensor::new(vec![n, steps, c], data)?;
        if !values.is_finite() {
            return Err(Error::NonFinite {
                op: "input standardization".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_observed(&self, node: usize) -> bool {
        let c = self.channels();
        self.values.at(&[node, 0, c - 1]) == T::one()
    }
}
