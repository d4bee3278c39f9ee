//! Stochastic-block-model graph pairs with Gaussian block features and a
//! tunable shift between the two graphs.
//!
//! Graph A is drawn from `(p_in, p_out)` with features `μ_b + σ·ε`. Graph B
//! applies the shift `δ`:
//!
//! * `p_in_B = p_in / (1 + δ)`, `p_out_B = min(1, p_out·(1 + δ))`;
//! * block mean `μ_b` moves to `μ_b + δ·s·√f·u_b`, with `u_b` an independent
//!   random unit vector per block and `s = mean_scale`. Since `√f·s` is the
//!   typical norm of a block mean, `δ` is the displacement relative to it.
//!
//! A shift shared by every block would be cheap to undo (a common offset in
//! embedding space is penalized by the negative-sampling loss), so each block
//! moves on its own; transfer degrades steadily as `δ` grows.
//!
//! With `δ = 0` both graphs are independent draws from one distribution.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compute::Tensor2;
use crate::error::{Error, Result};
use crate::eval::LabelSet;
use crate::graph::{Graph, GraphPair, GraphTag};
use crate::seed::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Per-coordinate standard deviation of block means.
    pub mean_scale: f64,
    /// Per-coordinate noise around the block mean.
    pub sigma: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            nodes_per_block: 100,
            p_in: 0.15,
            p_out: 0.02,
            feature_dim: 16,
            mean_scale: 1.0,
            sigma: 1.0,
            delta: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::InvalidConfig("num_blocks must be positive".into()));
        }
        if self.nodes_per_block == 0 {
            return Err(Error::EmptyBlock { block: 0 });
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("mean_scale", self.mean_scale),
            ("delta", self.delta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_blocks * self.nodes_per_block
    }

    /// `(p_in, p_out)` used for graph `tag`.
    pub fn probabilities(&self, tag: GraphTag) -> (f64, f64) {
        match tag {
            GraphTag::A => (self.p_in, self.p_out),
            GraphTag::B => (
                self.p_in / (1.0 + self.delta),
                (self.p_out * (1.0 + self.delta)).clamp(0.0, 1.0),
            ),
        }
    }

    pub fn block_of(&self, node: usize) -> usize {
        node / self.nodes_per_block
    }
}

/// A generated pair with ground-truth block labels for both graphs.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub pair: GraphPair,
    pub labels: [LabelSet; 2],
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Block means (rows) for graph `tag`.
pub fn block_means(spec: &SynthSpec, tag: GraphTag) -> Tensor2 {
    let f = spec.feature_dim;
    let mut rng = seed::rng(seed::derive(spec.seed, 100), Stream::Synth);
    let mut means = Tensor2::from_fn(spec.num_blocks, f, |_, _| spec.mean_scale * gaussian(&mut rng));
    if tag == GraphTag::B {
        let step = spec.delta * spec.mean_scale * (f as f64).sqrt();
        for b in 0..spec.num_blocks {
            let mut u: Vec<f64> = (0..f).map(|_| gaussian(&mut rng)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.iter_mut().for_each(|x| *x *= step / norm);
            for (m, d) in means.row_mut(b).iter_mut().zip(&u) {
                *m += d;
            }
        }
    }
    means
}

fn generate_graph(spec: &SynthSpec, tag: GraphTag) -> Result<Graph> {
    let salt = match tag {
        GraphTag::A => 10,
        GraphTag::B => 11,
    };
    let mut rng = seed::rng(seed::derive(spec.seed, salt), Stream::Synth);
    let n = spec.num_nodes();
    let (p_in, p_out) = spec.probabilities(tag);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if spec.block_of(i) == spec.block_of(j) {
                p_in
            } else {
                p_out
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let means = block_means(spec, tag);
    let features = Tensor2::from_fn(n, spec.feature_dim, |node, k| {
        means.get(spec.block_of(node), k) + spec.sigma * gaussian(&mut rng)
    });
    Graph::new(edges, features)
}

/// Draws graph A, graph B and their block labels. Output is a pure function of `spec`.
pub fn generate_pair(spec: &SynthSpec) -> Result<SynthPair> {
    spec.validate()?;
    let a = generate_graph(spec, GraphTag::A)?;
    let b = generate_graph(spec, GraphTag::B)?;
    let blocks: Vec<usize> = (0..spec.num_nodes()).map(|n| spec.block_of(n)).collect();
    Ok(SynthPair {
        pair: GraphPair::new(a, b)?,
        labels: [
            LabelSet::single(GraphTag::A, &blocks),
            LabelSet::single(GraphTag::B, &blocks),
        ],
    })
}

/// A node relabeling: `forward[old] = new`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    pub forward: Vec<usize>,
}

impl Permutation {
    pub fn random(n: usize, seed: u64) -> Self {
        let mut forward: Vec<usize> = (0..n).collect();
        forward.shuffle(&mut seed::rng(seed, Stream::Permutation));
        Self { forward }
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.forward.len()];
        for (old, &new) in self.forward.iter().enumerate() {
            inv[new] = old;
        }
        Self { forward: inv }
    }

    pub fn apply_graph(&self, g: &Graph) -> Result<Graph> {
        let n = g.num_nodes();
        if self.forward.len() != n {
            return Err(Error::shape("permutation", (self.forward.len(), 0), (n, 0)));
        }
        let inv = self.inverse();
        let x = g.features();
        let features = Tensor2::from_fn(n, x.cols(), |new, k| x.get(inv.forward[new], k));
        Graph::new(
            g.edges().iter().map(|&(i, j)| (self.forward[i], self.forward[j])),
            features,
        )
    }

    pub fn apply_labels(&self, labels: &LabelSet) -> LabelSet {
        let mut out = labels.clone();
        for (old, &new) in self.forward.iter().enumerate() {
            out.assignments[new] = labels.assignments[old].clone();
        }
        out
    }
}

/// Relabels nodes by a seeded random permutation, keeping features and labels attached.
pub fn shuffle_node_ids(g: &Graph, labels: &LabelSet, seed: u64) -> Result<(Graph, LabelSet, Permutation)> {
    let perm = Permutation::random(g.num_nodes(), seed);
    Ok((perm.apply_graph(g)?, perm.apply_labels(labels), perm))
}
