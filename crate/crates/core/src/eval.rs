//! Transfer evaluation: a classifier fit on source embeddings only, scored on
//! the target graph, plus alignment diagnostics (MMD², PCA projection).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::compute::{dot, log_sigmoid_scalar, sigmoid_scalar, Tensor2};
use crate::error::{Error, Result};
use crate::graph::GraphTag;
use crate::model::EmbeddingMatrix;
use crate::seed::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Single,
    Multi,
}

/// Per-node labels for one graph. Unlabeled nodes hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub tag: GraphTag,
    pub mode: LabelMode,
    /// Class names, sorted; assignments index into this list.
    pub classes: Vec<String>,
    pub assignments: Vec<Option<Vec<usize>>>,
}

impl LabelSet {
    /// Builds from per-node class names. Every named class joins the vocabulary.
    pub fn from_names(tag: GraphTag, mode: LabelMode, names: &[Option<Vec<String>>]) -> Result<Self> {
        let classes: Vec<String> = names
            .iter()
            .flatten()
            .flatten()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let lookup: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut assignments = Vec::with_capacity(names.len());
        for (node, n) in names.iter().enumerate() {
            assignments.push(match n {
                None => None,
                Some(ls) => {
                    if ls.is_empty() {
                        return Err(Error::LabelVocabularyMismatch(format!(
                            "node {node} has an empty label set"
                        )));
                    }
                    if mode == LabelMode::Single && ls.len() != 1 {
                        return Err(Error::LabelVocabularyMismatch(format!(
                            "node {node} has {} labels in single-label mode",
                            ls.len()
                        )));
                    }
                    let mut ids: Vec<usize> = ls.iter().map(|l| lookup[l.as_str()]).collect();
                    ids.sort_unstable();
                    ids.dedup();
                    Some(ids)
                }
            });
        }
        Ok(Self {
            tag,
            mode,
            classes,
            assignments,
        })
    }

    pub fn single(tag: GraphTag, labels: &[usize]) -> Self {
        let names: Vec<_> = labels.iter().map(|l| Some(vec![l.to_string()])).collect();
        Self::from_names(tag, LabelMode::Single, &names).expect("one label per node")
    }

    pub fn num_nodes(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labeled_nodes(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(n, a)| a.as_deref().map(|a| (n, a)))
    }

    /// Single-label class id of node `n`.
    pub fn class_of(&self, n: usize) -> Option<usize> {
        self.assignments[n].as_ref().map(|a| a[0])
    }

    /// Reads `node_id<TAB>label` or `node_id<TAB>l1,l2,...` lines.
    pub fn load(path: &Path, tag: GraphTag, num_nodes: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut names: Vec<Option<Vec<String>>> = vec![None; num_nodes];
        let mut multi = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = |reason: String| Error::MalformedLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason,
            };
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| malformed("expected node_id<TAB>labels".into()))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| malformed(format!("bad node id {id:?}")))?;
            if id >= num_nodes {
                return Err(Error::NodeIdOutOfRange { id, num_nodes });
            }
            let ls: Vec<String> = rest
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if ls.is_empty() {
                return Err(malformed("empty label list".into()));
            }
            multi |= ls.len() > 1 || rest.contains(',');
            if names[id].replace(ls).is_some() {
                return Err(malformed(format!("duplicate labels for node {id}")));
            }
        }
        let mode = if multi { LabelMode::Multi } else { LabelMode::Single };
        Self::from_names(tag, mode, &names)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (n, ids) in self.labeled_nodes() {
            let names: Vec<&str> = ids.iter().map(|&i| self.classes[i].as_str()).collect();
            let _ = writeln!(out, "{n}\t{}", names.join(","));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Splits labeled nodes into `(train, holdout)` with roughly `fraction` held out.
pub fn split_holdout(labels: &LabelSet, fraction: f64, seed: u64) -> (LabelSet, LabelSet) {
    let mut nodes: Vec<usize> = labels.labeled_nodes().map(|(n, _)| n).collect();
    nodes.shuffle(&mut seed::rng(seed::derive(seed, 1), Stream::Classifier));
    let held = ((nodes.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut train = labels.clone();
    let mut hold = labels.clone();
    hold.assignments.iter_mut().for_each(|a| *a = None);
    for &n in &nodes[..held] {
        hold.assignments[n] = train.assignments[n].take();
    }
    (train, hold)
}

/// Options for [`train_classifier`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub l2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            epochs: 100,
            learning_rate: 0.5,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// L2-regularized logistic regression: softmax over classes in single-label
/// mode, independent one-vs-rest heads in multi-label mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub mode: LabelMode,
    pub classes: Vec<String>,
    /// `num_classes × d`.
    pub weights: Tensor2,
    pub bias: Vec<f64>,
    pub l2: f64,
    /// Per-feature standardization fitted on the training embeddings.
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub trained_on: GraphTag,
}

impl Classifier {
    fn standardize(&self, row: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = (row[k] - self.feature_mean[k]) / self.feature_scale[k];
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes.len())
            .map(|c| dot(self.weights.row(c), x) + self.bias[c])
            .collect()
    }

    /// Class scores per row: softmax probabilities or per-head sigmoids.
    pub fn predict_proba(&self, v: &EmbeddingMatrix) -> Result<Tensor2> {
        if v.dim() != self.weights.cols() {
            return Err(Error::shape("classifier", self.weights.shape(), v.values.shape()));
        }
        let k = self.classes.len();
        let mut out = Tensor2::zeros(v.num_nodes(), k);
        let mut x = vec![0.0; v.dim()];
        for n in 0..v.num_nodes() {
            self.standardize(v.row(n), &mut x);
            let z = self.logits(&x);
            let row = out.row_mut(n);
            match self.mode {
                LabelMode::Single => row.copy_from_slice(&softmax(&z)),
                LabelMode::Multi => {
                    for (r, zc) in row.iter_mut().zip(&z) {
                        *r = sigmoid_scalar(*zc);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Predicted class-id sets: argmax (single-label) or threshold 0.5 per head.
    pub fn predict(&self, v: &EmbeddingMatrix) -> Result<Vec<Vec<usize>>> {
        let p = self.predict_proba(v)?;
        Ok((0..p.rows())
            .map(|n| {
                let row = p.row(n);
                match self.mode {
                    LabelMode::Single => vec![argmax(row)],
                    LabelMode::Multi => (0..row.len()).filter(|&c| row[c] > MULTI_LABEL_THRESHOLD).collect(),
                }
            })
            .collect())
    }

    /// Within-graph F1 on the labeled nodes of `labels` (e.g. a source holdout).
    pub fn score(&self, v: &EmbeddingMatrix, labels: &LabelSet) -> Result<(f64, f64)> {
        check_pairing(v, labels)?;
        let map = self.class_map(labels)?;
        let pred = self.predict(v)?;
        let (truth, pred): (Vec<Vec<usize>>, Vec<Vec<usize>>) = labels
            .labeled_nodes()
            .map(|(n, ids)| {
                let mut t: Vec<usize> = ids.iter().map(|&i| map[i]).collect();
                t.sort_unstable();
                (t, pred[n].clone())
            })
            .unzip();
        let (micro, macro_f1, _) = f1_scores(&truth, &pred, self.classes.len());
        Ok((micro, macro_f1))
    }

    /// Sends each label id of `labels` to this classifier's class id, by name.
    fn class_map(&self, labels: &LabelSet) -> Result<Vec<usize>> {
        if labels.mode != self.mode {
            return Err(Error::LabelVocabularyMismatch(format!(
                "labels are {:?}, classifier is {:?}",
                labels.mode, self.mode
            )));
        }
        labels
            .classes
            .iter()
            .map(|name| {
                self.classes
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::LabelVocabularyMismatch(format!("label {name:?} unknown to the classifier")))
            })
            .collect()
    }

    /// Mean cross-entropy over labeled nodes (binary cross-entropy averaged over
    /// heads in multi-label mode). `class_map` sends label ids to classifier ids.
    fn cross_entropy(&self, v: &EmbeddingMatrix, labels: &LabelSet, class_map: &[usize]) -> Result<f64> {
        let mut x = vec![0.0; v.dim()];
        let mut total = 0.0;
        let mut count = 0usize;
        for (n, ids) in labels.labeled_nodes() {
            self.standardize(v.row(n), &mut x);
            let z = self.logits(&x);
            total += match self.mode {
                LabelMode::Single => -log_softmax(&z)[class_map[ids[0]]],
                LabelMode::Multi => {
                    let truth: BTreeSet<usize> = ids.iter().map(|&i| class_map[i]).collect();
                    let s: f64 = z
                        .iter()
                        .enumerate()
                        .map(|(c, &zc)| {
                            if truth.contains(&c) {
                                -log_sigmoid_scalar(zc)
                            } else {
                                -log_sigmoid_scalar(-zc)
                            }
                        })
                        .sum();
                    s / z.len() as f64
                }
            };
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyInput("cross_entropy"));
        }
        Ok(total / count as f64)
    }
}

pub const MULTI_LABEL_THRESHOLD: f64 = 0.5;

fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_pairing(v: &EmbeddingMatrix, labels: &LabelSet) -> Result<()> {
    if v.tag != labels.tag {
        return Err(Error::ProtocolViolation(format!(
            "embeddings of graph {} paired with labels of graph {}",
            v.tag, labels.tag
        )));
    }
    if v.num_nodes() != labels.num_nodes() {
        return Err(Error::shape("labels", (v.num_nodes(), 0), (labels.num_nodes(), 0)));
    }
    Ok(())
}

/// Fits the classifier by seeded minibatch SGD on `mean loss + l2/2·‖W‖²`.
///
/// The labels must belong to the same graph as the embeddings.
pub fn train_classifier(v: &EmbeddingMatrix, labels: &LabelSet, cfg: &ClassifierConfig) -> Result<Classifier> {
    check_pairing(v, labels)?;
    let rows: Vec<(usize, &[usize])> = labels.labeled_nodes().collect();
    let present: BTreeSet<usize> = rows.iter().flat_map(|(_, ids)| ids.iter().copied()).collect();
    if present.len() < 2 && labels.mode == LabelMode::Single {
        return Err(Error::SingleClassDegenerate);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("train_classifier"));
    }
    let d = v.dim();
    let k = labels.num_classes();

    let n = rows.len() as f64;
    let mut feature_mean = vec![0.0; d];
    for (node, _) in &rows {
        for (m, x) in feature_mean.iter_mut().zip(v.row(*node)) {
            *m += x / n;
        }
    }
    let mut feature_scale = vec![0.0; d];
    for (node, _) in &rows {
        for ((s, x), m) in feature_scale.iter_mut().zip(v.row(*node)).zip(&feature_mean) {
            *s += (x - m).powi(2) / n;
        }
    }
    for s in &mut feature_scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }

    let mut clf = Classifier {
        mode: labels.mode,
        classes: labels.classes.clone(),
        weights: Tensor2::zeros(k, d),
        bias: vec![0.0; k],
        l2: cfg.l2,
        feature_mean,
        feature_scale,
        trained_on: v.tag,
    };

    let xs: Vec<Vec<f64>> = rows
        .iter()
        .map(|(node, _)| {
            let mut x = vec![0.0; d];
            clf.standardize(v.row(*node), &mut x);
            x
        })
        .collect();
    let mut rng = seed::rng(cfg.seed, Stream::Classifier);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let batch = cfg.batch_size.max(1);
    let mut grad_w = Tensor2::zeros(k, d);
    let mut grad_b = vec![0.0; k];
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad_w.data_mut().fill(0.0);
            grad_b.fill(0.0);
            for &i in chunk {
                let x = &xs[i];
                let z = clf.logits(x);
                let ids = rows[i].1;
                let resid: Vec<f64> = match clf.mode {
                    LabelMode::Single => {
                        let mut p = softmax(&z);
                        p[ids[0]] -= 1.0;
                        p
                    }
                    LabelMode::Multi => z
                        .iter()
                        .enumerate()
                        .map(|(c, &zc)| sigmoid_scalar(zc) - if ids.contains(&c) { 1.0 } else { 0.0 })
                        .collect(),
                };
                for (c, r) in resid.iter().enumerate() {
                    grad_b[c] += r;
                    for (g, xv) in grad_w.row_mut(c).iter_mut().zip(x) {
                        *g += r * xv;
                    }
                }
            }
            // decaying step settles the iterate near the unique regularized minimizer
            let lr = cfg.learning_rate / (1.0 + t as f64 / 50.0).sqrt();
            let m = chunk.len() as f64;
            for (w, g) in clf.weights.data_mut().iter_mut().zip(grad_w.data()) {
                *w -= lr * (g / m + cfg.l2 * *w);
            }
            for (b, g) in clf.bias.iter_mut().zip(&grad_b) {
                *b -= lr * g / m;
            }
            t += 1;
        }
    }
    Ok(clf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Outcome of applying a source-trained classifier to the target graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferReport {
    pub direction: String,
    pub mode: LabelMode,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassF1>,
    pub loss_src: f64,
    pub loss_tgt: f64,
    pub gap: f64,
    pub mmd2: Option<f64>,
}

impl TransferReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Json {
            path: "<report>".into(),
            source: e,
        })
    }
}

/// Per-class `(precision, recall, f1, support)`.
pub type ClassScores = (f64, f64, f64, usize);

/// Micro and macro F1 plus per-class scores from predicted and true class-id sets.
///
/// Macro F1 averages over classes that appear in either the truth or the
/// predictions.
pub fn f1_scores(truth: &[Vec<usize>], pred: &[Vec<usize>], num_classes: usize) -> (f64, f64, Vec<ClassScores>) {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (t, p) in truth.iter().zip(pred) {
        for &c in p {
            if t.contains(&c) {
                tp[c] += 1;
            } else {
                fp[c] += 1;
            }
        }
        for &c in t {
            if !p.contains(&c) {
                fn_[c] += 1;
            }
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per: Vec<_> = (0..num_classes)
        .map(|c| {
            (
                ratio(tp[c], tp[c] + fp[c]),
                ratio(tp[c], tp[c] + fn_[c]),
                f1(tp[c], fp[c], fn_[c]),
                tp[c] + fn_[c],
            )
        })
        .collect();
    let active: Vec<usize> = (0..num_classes).filter(|&c| tp[c] + fp[c] + fn_[c] > 0).collect();
    let macro_f1 = if active.is_empty() {
        0.0
    } else {
        active.iter().map(|&c| per[c].2).sum::<f64>() / active.len() as f64
    };
    let micro = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    (micro, macro_f1, per)
}

/// Scores a classifier on target embeddings.
///
/// `source` supplies the classifier's own training set, used only for the
/// source-side cross-entropy of the gap diagnostic.
pub fn evaluate_transfer(
    clf: &Classifier,
    source: (&EmbeddingMatrix, &LabelSet),
    target: (&EmbeddingMatrix, &LabelSet),
) -> Result<TransferReport> {
    let (v_src, l_src) = source;
    let (v_tgt, l_tgt) = target;
    check_pairing(v_src, l_src)?;
    check_pairing(v_tgt, l_tgt)?;
    if v_src.tag != clf.trained_on {
        return Err(Error::ProtocolViolation(format!(
            "classifier was trained on graph {}, not {}",
            clf.trained_on, v_src.tag
        )));
    }
    if v_tgt.tag == clf.trained_on {
        return Err(Error::ProtocolViolation(format!(
            "target graph {} is the classifier's training graph",
            v_tgt.tag
        )));
    }
    let tgt_map = clf.class_map(l_tgt)?;
    let src_map = clf.class_map(l_src)?;

    let pred = clf.predict(v_tgt)?;
    let (truth, pred): (Vec<Vec<usize>>, Vec<Vec<usize>>) = l_tgt
        .labeled_nodes()
        .map(|(n, ids)| {
            let mut t: Vec<usize> = ids.iter().map(|&i| tgt_map[i]).collect();
            t.sort_unstable();
            (t, pred[n].clone())
        })
        .unzip();
    let (micro_f1, macro_f1, per) = f1_scores(&truth, &pred, clf.classes.len());
    let loss_src = clf.cross_entropy(v_src, l_src, &src_map)?;
    let loss_tgt = clf.cross_entropy(v_tgt, l_tgt, &tgt_map)?;
    Ok(TransferReport {
        direction: format!("{}->{}", v_src.tag, v_tgt.tag),
        mode: clf.mode,
        micro_f1,
        macro_f1,
        per_class: per
            .into_iter()
            .zip(&clf.classes)
            .map(|((precision, recall, f1, support), class)| ClassF1 {
                class: class.clone(),
                precision,
                recall,
                f1,
                support,
            })
            .collect(),
        loss_src,
        loss_tgt,
        gap: loss_tgt - loss_src,
        mmd2: None,
    })
}

/// Fits on one side's labels and evaluates on the other side.
pub fn transfer(
    source: (&EmbeddingMatrix, &LabelSet),
    target: (&EmbeddingMatrix, &LabelSet),
    cfg: &ClassifierConfig,
) -> Result<TransferReport> {
    let clf = train_classifier(source.0, source.1, cfg)?;
    let mut report = evaluate_transfer(&clf, source, target)?;
    report.mmd2 = Some(distribution_distance(source.0, target.0)?);
    Ok(report)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared MMD (biased V-statistic) under an RBF kernel
/// `k(x, y) = exp(−‖x − y‖² / (2h²))`, with `h` the median pairwise distance
/// of the pooled sample.
pub fn distribution_distance(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<f64> {
    mmd2(&a.values, &b.values)
}

pub fn mmd2(a: &Tensor2, b: &Tensor2) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptyInput("distribution_distance"));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("distribution_distance", a.shape(), b.shape()));
    }
    let pooled: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let mut d2: Vec<f64> = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d2.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    let median_sq = median(&mut d2);
    if median_sq <= 0.0 {
        // more than half of all pairs coincide; fall back to unit bandwidth
        log::debug!("median pairwise distance is zero; using unit bandwidth");
    }
    let gamma = 1.0 / (2.0 * if median_sq > 0.0 { median_sq } else { 1.0 });
    let mean_k = |x: &Tensor2, y: &Tensor2| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                s += (-gamma * sq_dist(x.row(i), y.row(j))).exp();
            }
        }
        s / (x.rows() * y.rows()) as f64
    };
    // both groupings are commutative sums, so swapping (a, b) is bit-exact
    let within = mean_k(a, a) + mean_k(b, b);
    let cross = mean_k(a, b) + mean_k(b, a);
    Ok((within - cross).max(0.0))
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Coordinates on the top two principal axes of a pooled embedding set.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Tensor2,
    /// Set when the pooled data has rank < 2 and the second axis is zero-padded.
    pub degenerate: bool,
}

/// PCA projection of the pooled rows of `sets` onto shared axes. Output rows
/// follow the input order, set by set.
pub fn project_2d(sets: &[&EmbeddingMatrix]) -> Result<Projection> {
    let d = sets.first().map_or(0, |s| s.dim());
    if d < 2 {
        return Err(Error::InvalidConfig(format!("projection needs d >= 2, got {d}")));
    }
    let mut pooled = Tensor2::zeros(0, d);
    for s in sets {
        pooled = pooled.vstack(&s.values)?;
    }
    let n = pooled.rows();
    if n == 0 {
        return Err(Error::EmptyInput("project_2d"));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(pooled.row(r)) {
            *m += x / n as f64;
        }
    }
    let centered = Tensor2::from_fn(n, d, |r, c| pooled.get(r, c) - mean[c]);
    let cov = centered.t_matmul(&centered)?.scale(1.0 / n as f64);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.data()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-12 * top.max(1e-300) * d as f64;
    let mut coords = Tensor2::zeros(n, 2);
    let mut degenerate = false;
    for (axis, &k) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[k] <= tol {
            degenerate = true;
            continue;
        }
        let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        for r in 0..n {
            coords.set(r, axis, dot(centered.row(r), &v));
        }
    }
    if degenerate {
        log::warn!("pooled embeddings have rank < 2; padding projection with zeros");
    }
    Ok(Projection { coords, degenerate })
}

/// CSV rows `node_id,x,y,graph_tag,label` for each embedding set.
pub fn projection_csv(proj: &Projection, sets: &[(&EmbeddingMatrix, Option<&LabelSet>)]) -> String {
    let mut out = String::from("node_id,x,y,graph_tag,label\n");
    let mut r = 0;
    for (v, labels) in sets {
        for n in 0..v.num_nodes() {
            let label = labels
                .and_then(|l| l.assignments[n].as_ref())
                .map(|ids| {
                    let l = labels.unwrap();
                    ids.iter().map(|&i| l.classes[i].as_str()).collect::<Vec<_>>().join(";")
                })
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{n},{},{},{},{label}",
                proj.coords.get(r, 0),
                proj.coords.get(r, 1),
                v.tag
            );
            r += 1;
        }
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, center: &[f64]) -> Tensor2 {
        Tensor2::from_fn(n, d, |_, k| center[k] + rng.sample::<f64, _>(StandardNormal))
    }

    fn names(ls: &[&str]) -> Option<Vec<String>> {
        Some(ls.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn labels_round_trip_through_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let single =
            LabelSet::from_names(GraphTag::A, LabelMode::Single, &[names(&["x"]), None, names(&["y"])]).unwrap();
        let multi = LabelSet::from_names(
            GraphTag::B,
            LabelMode::Multi,
            &[names(&["x", "z"]), names(&["y"]), None],
        )
        .unwrap();
        for (set, file) in [(single, "s.tsv"), (multi, "m.tsv")] {
            let path = dir.path().join(file);
            set.write(&path).unwrap();
            assert_eq!(LabelSet::load(&path, set.tag, 3).unwrap(), set);
        }
    }

    #[test]
    fn label_loading_rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.tsv");
        fs::write(&path, "0\ta\n5\tb\n").unwrap();
        assert!(matches!(
            LabelSet::load(&path, GraphTag::A, 3),
            Err(Error::NodeIdOutOfRange { id: 5, .. })
        ));
        fs::write(&path, "0 a\n").unwrap();
        assert!(matches!(
            LabelSet::load(&path, GraphTag::A, 3),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = vec![vec![0], vec![1], vec![2], vec![1]];
        let (micro, macro_f1, _) = f1_scores(&truth, &truth, 3);
        assert_eq!((micro, macro_f1), (1.0, 1.0));
    }

    #[test]
    fn constant_prediction_on_balanced_binary_task() {
        let truth: Vec<Vec<usize>> = (0..10).map(|i| vec![i % 2]).collect();
        let pred = vec![vec![0]; 10];
        let (micro, macro_f1, per) = f1_scores(&truth, &pred, 2);
        assert!((micro - 0.5).abs() < 1e-15);
        assert!((macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((per[0].2 - 2.0 / 3.0).abs() < 1e-15 && per[1].2 == 0.0);
    }

    fn two_clouds(seed: u64) -> (EmbeddingMatrix, LabelSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian_cloud(&mut rng, 40, 2, &[-4.0, 0.0]).map(|x| x * 0.5);
        let b = gaussian_cloud(&mut rng, 40, 2, &[4.0, 1.0]).map(|x| x * 0.5);
        let v = EmbeddingMatrix::new(GraphTag::A, a.vstack(&b).unwrap());
        let y: Vec<usize> = (0..80).map(|i| i / 40).collect();
        (v, LabelSet::single(GraphTag::A, &y))
    }

    #[test]
    fn separable_clouds_are_fit_exactly() {
        let (v, y) = two_clouds(1);
        let clf = train_classifier(&v, &y, &ClassifierConfig::default()).unwrap();
        assert_eq!(clf.score(&v, &y).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn duplicated_training_set_keeps_decision_function() {
        let (v, y) = two_clouds(2);
        let doubled = EmbeddingMatrix::new(GraphTag::A, v.values.vstack(&v.values).unwrap());
        let yy: Vec<usize> = (0..160).map(|i| (i % 80) / 40).collect();
        let cfg = ClassifierConfig {
            epochs: 400,
            ..ClassifierConfig::default()
        };
        let c1 = train_classifier(&v, &y, &cfg).unwrap();
        let c2 = train_classifier(&doubled, &LabelSet::single(GraphTag::A, &yy), &cfg).unwrap();
        assert_eq!(c1.predict(&v).unwrap(), c2.predict(&v).unwrap());
        assert_eq!(c1.predict(&doubled).unwrap(), c2.predict(&doubled).unwrap());
    }

    #[test]
    fn random_labels_give_chance_level_holdout() {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let v = EmbeddingMatrix::new(GraphTag::A, gaussian_cloud(&mut rng, 300, 8, &[0.0; 8]));
            let y: Vec<usize> = (0..300).map(|_| rng.random_range(0..3)).collect();
            let (train, hold) = split_holdout(&LabelSet::single(GraphTag::A, &y), 0.5, seed);
            let clf = train_classifier(
                &v,
                &train,
                &ClassifierConfig {
                    seed,
                    ..ClassifierConfig::default()
                },
            )
            .unwrap();
            total += clf.score(&v, &hold).unwrap().1;
        }
        let mean = total / 20.0;
        assert!((mean - 1.0 / 3.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn single_class_training_is_rejected() {
        let (v, _) = two_clouds(3);
        let y = LabelSet::single(GraphTag::A, &[0; 80]);
        assert!(matches!(
            train_classifier(&v, &y, &ClassifierConfig::default()),
            Err(Error::SingleClassDegenerate)
        ));
    }

    #[test]
    fn transfer_protocol_is_enforced() {
        let (va, ya) = two_clouds(4);
        let vb = EmbeddingMatrix::new(GraphTag::B, va.values.clone());
        let yb = LabelSet {
            tag: GraphTag::B,
            ..ya.clone()
        };
        let cfg = ClassifierConfig::default();
        // labels from the other graph cannot train on these embeddings
        assert!(matches!(
            train_classifier(&va, &yb, &cfg),
            Err(Error::ProtocolViolation(_))
        ));
        let clf = train_classifier(&va, &ya, &cfg).unwrap();
        // evaluating on the training graph is not a transfer
        assert!(matches!(
            evaluate_transfer(&clf, (&va, &ya), (&va, &ya)),
            Err(Error::ProtocolViolation(_))
        ));
        // a classifier fit on B cannot be reported as A's
        let clf_b = train_classifier(&vb, &yb, &cfg).unwrap();
        assert!(matches!(
            evaluate_transfer(&clf_b, (&va, &ya), (&vb, &yb)),
            Err(Error::ProtocolViolation(_))
        ));
        let report = evaluate_transfer(&clf, (&va, &ya), (&vb, &yb)).unwrap();
        assert_eq!(report.direction, "A->B");
        assert_eq!(report.gap, report.loss_tgt - report.loss_src);
    }

    #[test]
    fn unknown_target_label_is_a_vocabulary_mismatch() {
        let (va, ya) = two_clouds(5);
        let vb = EmbeddingMatrix::new(GraphTag::B, va.values.clone());
        let y: Vec<usize> = (0..80).map(|i| 7 * (i / 40)).collect();
        let yb = LabelSet::single(GraphTag::B, &y);
        let clf = train_classifier(&va, &ya, &ClassifierConfig::default()).unwrap();
        assert!(matches!(
            evaluate_transfer(&clf, (&va, &ya), (&vb, &yb)),
            Err(Error::LabelVocabularyMismatch(_))
        ));
    }

    #[test]
    fn multi_label_heads_threshold_at_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = gaussian_cloud(&mut rng, 200, 2, &[0.0, 0.0]);
        let v = EmbeddingMatrix::new(GraphTag::A, x.clone());
        // label "p" iff x0 > 0, label "q" iff x1 > 0; nodes with neither stay unlabeled
        let n: Vec<_> = (0..200)
            .map(|r| {
                let mut ls = Vec::new();
                if x.get(r, 0) > 0.0 {
                    ls.push("p".to_string());
                }
                if x.get(r, 1) > 0.0 {
                    ls.push("q".to_string());
                }
                (!ls.is_empty()).then_some(ls)
            })
            .collect();
        let y = LabelSet::from_names(GraphTag::A, LabelMode::Multi, &n).unwrap();
        let clf = train_classifier(&v, &y, &ClassifierConfig::default()).unwrap();
        let (micro, macro_f1) = clf.score(&v, &y).unwrap();
        assert!(micro > 0.9 && macro_f1 > 0.9, "{micro} {macro_f1}");
    }

    #[test]
    fn report_json_round_trips() {
        let (va, ya) = two_clouds(7);
        let vb = EmbeddingMatrix::new(GraphTag::B, va.values.map(|x| x + 0.1));
        let yb = LabelSet {
            tag: GraphTag::B,
            ..ya.clone()
        };
        let report = transfer((&va, &ya), (&vb, &yb), &ClassifierConfig::default()).unwrap();
        let text = report.to_json();
        let back = TransferReport::from_json(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_json(), text);
        assert!(TransferReport::from_json(&text.replacen("\"gap\"", "\"gapp\"", 1)).is_err());
    }

    #[test]
    fn mmd_is_zero_on_identical_samples_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = gaussian_cloud(&mut rng, 50, 3, &[0.0; 3]);
        let b = gaussian_cloud(&mut rng, 70, 3, &[0.5, 0.0, 0.0]);
        assert!(mmd2(&a, &a).unwrap() < 1e-12);
        assert_eq!(mmd2(&a, &b).unwrap().to_bits(), mmd2(&b, &a).unwrap().to_bits());
        assert!(matches!(mmd2(&Tensor2::zeros(0, 3), &a), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mmd_detects_well_separated_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = gaussian_cloud(&mut rng, 500, 2, &[0.0, 0.0]);
        let b = gaussian_cloud(&mut rng, 500, 2, &[10.0, 0.0]);
        assert!(mmd2(&a, &b).unwrap() > 0.5);
    }

    fn emb(tag: GraphTag, t: Tensor2) -> EmbeddingMatrix {
        EmbeddingMatrix::new(tag, t)
    }

    #[test]
    fn projection_of_centered_2d_data_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut x = gaussian_cloud(&mut rng, 30, 2, &[0.0, 0.0]).map(|v| v * 3.0);
        for c in 0..2 {
            let m = (0..30).map(|r| x.get(r, c)).sum::<f64>() / 30.0;
            for r in 0..30 {
                x.set(r, c, x.get(r, c) - m);
            }
        }
        let p = project_2d(&[&emb(GraphTag::A, x.clone())]).unwrap();
        assert!(!p.degenerate);
        for i in 0..30 {
            for j in 0..30 {
                let d0 = sq_dist(x.row(i), x.row(j)).sqrt();
                let d1 = sq_dist(p.coords.row(i), p.coords.row(j)).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rank_one_data_pads_second_axis() {
        let x = Tensor2::from_fn(10, 3, |r, c| r as f64 * [1.0, -2.0, 0.5][c]);
        let p = project_2d(&[&emb(GraphTag::A, x)]).unwrap();
        assert!(p.degenerate);
        assert!((0..10).all(|r| p.coords.get(r, 1) == 0.0));
        assert!((0..10).any(|r| p.coords.get(r, 0) != 0.0));
    }

    #[test]
    fn leading_axes_capture_the_most_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scales = [3.0, 0.5, 2.0, 1.0, 0.2];
        let x = Tensor2::from_fn(200, 5, |_, c| scales[c] * rng.sample::<f64, _>(StandardNormal));
        let p = project_2d(&[&emb(GraphTag::A, x.clone())]).unwrap();
        let var = |col: &dyn Fn(usize) -> f64| (0..200).map(|r| col(r).powi(2)).sum::<f64>();
        let v1 = var(&|r| p.coords.get(r, 0));
        let v2 = var(&|r| p.coords.get(r, 1));
        assert!(v1 >= v2);
        let mean: Vec<f64> = (0..5)
            .map(|c| (0..200).map(|r| x.get(r, c)).sum::<f64>() / 200.0)
            .collect();
        for _ in 0..100 {
            let mut u: Vec<f64> = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            u.iter_mut().for_each(|a| *a /= n);
            let vu = var(&|r| (0..5).map(|c| (x.get(r, c) - mean[c]) * u[c]).sum());
            assert!(v1 >= vu - 1e-9);
        }
    }

    #[test]
    fn projection_csv_lists_both_graphs() {
        let a = emb(GraphTag::A, Tensor2::from_fn(2, 3, |r, c| (r + c) as f64));
        let b = emb(GraphTag::B, Tensor2::from_fn(1, 3, |r, c| (r * c) as f64 - 1.0));
        let p = project_2d(&[&a, &b]).unwrap();
        let ya = LabelSet::single(GraphTag::A, &[0, 1]);
        let csv = projection_csv(&p, &[(&a, Some(&ya)), (&b, None)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "node_id,x,y,graph_tag,label");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("1,") && lines[2].ends_with(",A,1"));
        assert!(lines[3].ends_with(",B,"));
    }

    #[test]
    fn spearman_matches_hand_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // ranks [1.5, 1.5, 3] vs [1, 2, 3]
        let r = spearman(&[5.0, 5.0, 7.0], &[1.0, 2.0, 3.0]);
        assert!((r - 0.75f64.sqrt() * 1.0).abs() < 1e-12, "{r}");
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn f1_is_bounded_and_micro_equals_accuracy(
                pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)
            ) {
                let truth: Vec<Vec<usize>> = pairs.iter().map(|p| vec![p.0]).collect();
                let pred: Vec<Vec<usize>> = pairs.iter().map(|p| vec![p.1]).collect();
                let (micro, macro_f1, _) = f1_scores(&truth, &pred, 4);
                prop_assert!((0.0..=1.0).contains(&micro) && (0.0..=1.0).contains(&macro_f1));
                let acc = pairs.iter().filter(|p| p.0 == p.1).count() as f64 / pairs.len() as f64;
                prop_assert!((micro - acc).abs() < 1e-12);
            }
        }
    }
}
