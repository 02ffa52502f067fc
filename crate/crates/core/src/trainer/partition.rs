use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Disjoint observed/target node sets for one training sample or one
/// inference run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPartition {
    observed: Vec<usize>,
    target: Vec<usize>,
}

impl MaskPartition {
    /// Both sets are sorted; ids must be below `nodes` and appear once.
    pub fn new(mut observed: Vec<usize>, mut target: Vec<usize>, nodes: usize) -> Result<Self> {
        observed.sort_unstable();
        target.sort_unstable();
        let mut seen = vec![false; nodes];
        for &i in observed.iter().chain(&target) {
            match seen.get_mut(i) {
                None => return Err(Error::UnknownNode(i)),
                Some(true) => return Err(Error::invalid(format!("node {i} listed twice in a partition"))),
                Some(s) => *s = true,
            }
        }
        Ok(Self { observed, target })
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    /// Per-node observed flags over `nodes` nodes.
    pub fn observed_flags(&self, nodes: usize) -> Vec<bool> {
        let mut flags = vec![false; nodes];
        for &i in &self.observed {
            flags[i] = true;
        }
        flags
    }
}

/// Uniform random split of `nodes` with `floor(len * ratio)` targets.
pub fn sample_partition<R: Rng + ?Sized>(nodes: &[usize], mask_ratio: f64, rng: &mut R) -> Result<MaskPartition> {
    if nodes.len() < 2 {
        return Err(Error::invalid(format!(
            "masking needs at least 2 nodes, got {}",
            nodes.len()
        )));
    }
    let k = (nodes.len() as f64 * mask_ratio).floor() as usize;
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) || k == 0 || k == nodes.len() {
        return Err(Error::invalid(format!(
            "mask ratio {mask_ratio} leaves an empty side on {} nodes",
            nodes.len()
        )));
    }
    let mut shuffled = nodes.to_vec();
    shuffled.shuffle(rng);
    let target = shuffled.split_off(nodes.len() - k);
    let bound = nodes.iter().max().map_or(0, |m| m + 1);
    MaskPartition::new(shuffled, target, bound)
}
