//! Shared-weight GCN encoder, least-squares discriminator, and the losses that
//! tie them together.
//!
//! Every loss comes in two forms: a plain function returning `f64` and an
//! `*_on` variant that records onto a [`GradTape`] for training.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{log_sigmoid_scalar, GradTape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphTag, NegativeSampler, PropagationMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// Uniform Glorot initialization for a `fan_in × fan_out` matrix.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor2::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit))
}

/// The single parameter set used to encode both graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub weights: Vec<Tensor2>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl EncoderParams {
    pub fn new(weights: Vec<Tensor2>, hidden_activation: Activation, output_activation: Activation) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        for w in weights.windows(2) {
            if w[0].cols() != w[1].rows() {
                return Err(Error::shape("encoder layers", w[0].shape(), w[1].shape()));
            }
        }
        Ok(Self {
            weights,
            hidden_activation,
            output_activation,
        })
    }

    /// `widths = [f, h_1, ..., d]`; hidden ReLU, linear output.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad encoder widths {widths:?}")));
        }
        let weights = widths.windows(2).map(|w| glorot(w[0], w[1], rng)).collect();
        Self::new(weights, Activation::Relu, Activation::Linear)
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().cols()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn validate(&self) -> Result<()> {
        Self::new(self.weights.clone(), self.hidden_activation, self.output_activation).map(|_| ())?;
        if self
            .weights
            .iter()
            .any(|w| !w.is_finite() || w.data().len() != w.rows() * w.cols())
        {
            return Err(Error::NonFinite("encoder weights"));
        }
        Ok(())
    }

    /// Records the weights as tape leaves.
    pub fn leaves(&self, tape: &mut GradTape<'_>) -> Result<Vec<Var>> {
        self.weights.iter().map(|w| tape.leaf(w.clone())).collect()
    }
}

/// Embedding rows for one graph, tagged with the graph they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub tag: GraphTag,
    pub values: Tensor2,
}

impl EmbeddingMatrix {
    pub fn new(tag: GraphTag, values: Tensor2) -> Self {
        Self { tag, values }
    }

    pub fn num_nodes(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.values.row(n)
    }

    /// `node_id,v_1,...,v_d` header plus one row per node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_id");
        for k in 1..=self.dim() {
            out.push_str(&format!(",v_{k}"));
        }
        out.push('\n');
        for n in 0..self.num_nodes() {
            out.push_str(&n.to_string());
            for v in self.row(n) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Records the encoder forward pass: `H ← σ(P·H·W)` per layer.
pub fn encode_on<'a>(
    tape: &mut GradTape<'a>,
    params: &EncoderParams,
    weights: &[Var],
    p: &'a PropagationMatrix,
    x: Var,
) -> Result<Var> {
    let (rows, cols) = tape.value(x).shape();
    if rows != p.num_nodes() || cols != params.input_dim() {
        return Err(Error::shape(
            "encode",
            (p.num_nodes(), params.input_dim()),
            (rows, cols),
        ));
    }
    let mut h = x;
    let last = weights.len() - 1;
    for (l, &w) in weights.iter().enumerate() {
        let (fan_in, fan_out) = tape.value(w).shape();
        // associate the product so the sparse multiply runs on the narrower side
        h = if fan_in <= fan_out {
            let ph = tape.spmm(p.as_csr(), h)?;
            tape.matmul(ph, w)?
        } else {
            let hw = tape.matmul(h, w)?;
            tape.spmm(p.as_csr(), hw)?
        };
        let act = if l == last {
            params.output_activation
        } else {
            params.hidden_activation
        };
        if act == Activation::Relu {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub fn encode(params: &EncoderParams, tag: GraphTag, p: &PropagationMatrix, x: &Tensor2) -> Result<EmbeddingMatrix> {
    let mut tape = GradTape::new();
    let w = params.leaves(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let out = encode_on(&mut tape, params, &w, p, xv)?;
    Ok(EmbeddingMatrix::new(tag, tape.value(out).clone()))
}

/// MLP with ReLU hidden layers and a bare affine scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub weights: Vec<Tensor2>,
    pub biases: Vec<Tensor2>,
}

impl DiscriminatorParams {
    pub fn new(weights: Vec<Tensor2>, biases: Vec<Tensor2>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidConfig("discriminator layer/bias count mismatch".into()));
        }
        for (w, b) in weights.iter().zip(&biases) {
            if b.shape() != (1, w.cols()) {
                return Err(Error::shape("discriminator bias", w.shape(), b.shape()));
            }
        }
        for w in weights.windows(2) {
            if w[0].cols() != w[1].rows() {
                return Err(Error::shape("discriminator layers", w[0].shape(), w[1].shape()));
            }
        }
        if weights.last().unwrap().cols() != 1 {
            return Err(Error::InvalidConfig("discriminator output width must be 1".into()));
        }
        Ok(Self { weights, biases })
    }

    /// `hidden` lists hidden widths; the output layer is appended.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        if widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad discriminator widths {widths:?}")));
        }
        let weights = widths.windows(2).map(|w| glorot(w[0], w[1], rng)).collect::<Vec<_>>();
        let biases = widths[1..].iter().map(|&w| Tensor2::zeros(1, w)).collect();
        Self::new(weights, biases)
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    fn validate(&self) -> Result<()> {
        Self::new(self.weights.clone(), self.biases.clone())?;
        if self
            .weights
            .iter()
            .chain(&self.biases)
            .any(|w| !w.is_finite() || w.data().len() != w.rows() * w.cols())
        {
            return Err(Error::NonFinite("discriminator weights"));
        }
        Ok(())
    }

    /// Records weights then biases as leaves, interleaved per layer.
    pub fn leaves(&self, tape: &mut GradTape<'_>) -> Result<Vec<(Var, Var)>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| Ok((tape.leaf(w.clone())?, tape.leaf(b.clone())?)))
            .collect()
    }
}

/// Records the discriminator; returns an `n × 1` column of raw scores.
pub fn discriminator_on(
    tape: &mut GradTape<'_>,
    dp: &DiscriminatorParams,
    layers: &[(Var, Var)],
    v: Var,
) -> Result<Var> {
    let (_, width) = tape.value(v).shape();
    if width != dp.input_dim() {
        return Err(Error::shape(
            "discriminator",
            (0, dp.input_dim()),
            tape.value(v).shape(),
        ));
    }
    let mut h = v;
    let last = layers.len() - 1;
    for (l, &(w, b)) in layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row_bias(h, b)?;
        if l != last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub fn discriminator_forward(dp: &DiscriminatorParams, v: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let layers = dp.leaves(&mut tape)?;
    let x = tape.leaf(v.values.clone())?;
    let s = discriminator_on(&mut tape, dp, &layers, x)?;
    Ok(tape.value(s).data().to_vec())
}

/// Positive edges plus `q` negatives per edge, tied to the edge's first endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBatch {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<usize>,
    pub q: usize,
}

impl EdgeBatch {
    pub fn new(positives: Vec<(usize, usize)>, negatives: Vec<usize>, q: usize) -> Result<Self> {
        if negatives.len() != positives.len() * q {
            return Err(Error::InvalidConfig(format!(
                "{} negatives for {} edges at q = {q}",
                negatives.len(),
                positives.len()
            )));
        }
        Ok(Self {
            positives,
            negatives,
            q,
        })
    }

    pub fn empty(q: usize) -> Self {
        Self {
            positives: Vec::new(),
            negatives: Vec::new(),
            q,
        }
    }

    /// Draws `q` fresh negatives per edge. Each undirected edge is oriented by a
    /// coin flip so that neither endpoint is systematically the anchor.
    pub fn sample<R: Rng + ?Sized>(edges: &[(usize, usize)], sampler: &NegativeSampler, q: usize, rng: &mut R) -> Self {
        let mut positives = Vec::with_capacity(edges.len());
        let mut negatives = Vec::with_capacity(edges.len() * q);
        for &(u, v) in edges {
            positives.push(if rng.random::<bool>() { (u, v) } else { (v, u) });
            for _ in 0..q {
                negatives.push(sampler.sample(rng));
            }
        }
        Self {
            positives,
            negatives,
            q,
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    fn negative_pairs(&self) -> Vec<(usize, usize)> {
        self.positives
            .iter()
            .enumerate()
            .flat_map(|(e, &(i, _))| {
                self.negatives[e * self.q..(e + 1) * self.q]
                    .iter()
                    .map(move |&k| (i, k))
            })
            .collect()
    }

    fn check(&self, n: usize) -> Result<()> {
        let bad = self
            .positives
            .iter()
            .flat_map(|&(i, j)| [i, j])
            .chain(self.negatives.iter().copied())
            .find(|&k| k >= n);
        match bad {
            Some(index) => Err(Error::IndexOutOfRange { index, len: n }),
            None => Ok(()),
        }
    }
}

/// First-order proximity loss with sampled negatives:
/// `−Σ log σ(v_i·v_j) − Σ Σ_q log σ(−v_i·v_k)`.
pub fn edge_loss(v: &EmbeddingMatrix, batch: &EdgeBatch) -> Result<f64> {
    batch.check(v.num_nodes())?;
    let dot = |i: usize, j: usize| crate::compute::dot(v.row(i), v.row(j));
    let pos: f64 = batch
        .positives
        .iter()
        .map(|&(i, j)| log_sigmoid_scalar(dot(i, j)))
        .sum();
    let neg: f64 = batch
        .negative_pairs()
        .iter()
        .map(|&(i, k)| log_sigmoid_scalar(-dot(i, k)))
        .sum();
    Ok(-(pos + neg))
}

/// Records [`edge_loss`]; `None` for an empty batch.
pub fn edge_loss_on(tape: &mut GradTape<'_>, v: Var, batch: &EdgeBatch) -> Result<Option<Var>> {
    if batch.is_empty() {
        return Ok(None);
    }
    batch.check(tape.value(v).rows())?;
    let pos = tape.pair_dots(v, batch.positives.clone())?;
    let pos = tape.log_sigmoid(pos);
    let pos = tape.sum(pos);
    let neg = tape.pair_dots(v, batch.negative_pairs())?;
    let neg = tape.scale(neg, -1.0);
    let neg = tape.log_sigmoid(neg);
    let neg = tape.sum(neg);
    let both = tape.add(pos, neg)?;
    Ok(Some(tape.scale(both, -1.0)))
}

/// Multi-task structure loss over both graphs: an unweighted sum.
pub fn gcn_loss(v_src: &EmbeddingMatrix, v_tgt: &EmbeddingMatrix, b_src: &EdgeBatch, b_tgt: &EdgeBatch) -> Result<f64> {
    Ok(edge_loss(v_src, b_src)? + edge_loss(v_tgt, b_tgt)?)
}

fn mean_sq_to(scores: &[f64], target: f64) -> f64 {
    scores.iter().map(|s| (s - target).powi(2)).sum::<f64>() / scores.len() as f64
}

fn check_scores(src: &[f64], tgt: &[f64], what: &'static str) -> Result<()> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    Ok(())
}

/// Discriminator objective: source scores pulled to 0, target scores to 1.
pub fn discriminator_loss(scores_src: &[f64], scores_tgt: &[f64]) -> Result<f64> {
    check_scores(scores_src, scores_tgt, "discriminator_loss")?;
    Ok(mean_sq_to(scores_src, 0.0) + mean_sq_to(scores_tgt, 1.0))
}

/// Encoder-side adversarial objective: the label-swapped counterpart.
pub fn adversarial_loss(scores_src: &[f64], scores_tgt: &[f64]) -> Result<f64> {
    check_scores(scores_src, scores_tgt, "adversarial_loss")?;
    Ok(mean_sq_to(scores_src, 1.0) + mean_sq_to(scores_tgt, 0.0))
}

/// Records `mean((s_src − a)²) + mean((s_tgt − b)²)`.
pub fn least_squares_on(
    tape: &mut GradTape<'_>,
    s_src: Var,
    s_tgt: Var,
    src_target: f64,
    tgt_target: f64,
) -> Result<Var> {
    if tape.value(s_src).rows() == 0 || tape.value(s_tgt).rows() == 0 {
        return Err(Error::EmptyInput("least_squares"));
    }
    let mut term = |s: Var, t: f64| {
        let d = tape.add_scalar(s, -t);
        let sq = tape.square(d);
        tape.mean(sq)
    };
    let a = term(s_src, src_target);
    let b = term(s_tgt, tgt_target);
    tape.add(a, b)
}

pub fn total_loss(l_gcn: f64, l_adv: f64, lambda: f64) -> f64 {
    l_gcn + lambda * l_adv
}

pub const CHECKPOINT_FORMAT: &str = "dane-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable snapshot of both parameter sets.
///
/// JSON layout (version 1):
/// `{"format":"dane-checkpoint","version":1,"epoch":E,"seed":S,"lambda":L,
///   "encoder":{"weights":[{"rows":r,"cols":c,"data":[...]},...],
///              "hidden_activation":"relu","output_activation":"linear"},
///   "discriminator":{"weights":[...],"biases":[...]}}`
/// with every matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub seed: u64,
    pub lambda: f64,
    pub encoder: EncoderParams,
    pub discriminator: DiscriminatorParams,
}

impl Checkpoint {
    pub fn new(
        epoch: usize,
        seed: u64,
        lambda: f64,
        encoder: EncoderParams,
        discriminator: DiscriminatorParams,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            epoch,
            seed,
            lambda,
            encoder,
            discriminator,
        }
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        ck.encoder.validate()?;
        ck.discriminator.validate()?;
        Ok(ck)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
