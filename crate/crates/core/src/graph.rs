//! Graph data model, file ingestion, the normalized propagation operator and
//! the degree-based negative sampler.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{CsrMatrix, Tensor2};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Which of the two networks a value belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GraphTag {
    A,
    B,
}

impl GraphTag {
    pub fn other(self) -> Self {
        match self {
            GraphTag::A => GraphTag::B,
            GraphTag::B => GraphTag::A,
        }
    }
}

impl fmt::Display for GraphTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphTag::A => "A",
            GraphTag::B => "B",
        })
    }
}

/// An undirected, unweighted graph with dense node features.
///
/// Edges are stored once each as `(lo, hi)` with `lo < hi`, sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor2,
    degrees: Vec<usize>,
}

impl Graph {
    /// Validates and normalizes an edge list. Reversed duplicates collapse into
    /// one undirected edge; self-loops are dropped (normalization adds them back).
    pub fn new(edges: impl IntoIterator<Item = (usize, usize)>, features: Tensor2) -> Result<Self> {
        let num_nodes = features.rows();
        let mut set = BTreeSet::new();
        let mut loops = 0usize;
        for (u, v) in edges {
            for id in [u, v] {
                if id >= num_nodes {
                    return Err(Error::NodeIdOutOfRange { id, num_nodes });
                }
            }
            if u == v {
                loops += 1;
                continue;
            }
            set.insert((u.min(v), u.max(v)));
        }
        if loops > 0 {
            log::warn!("dropped {loops} self-loop edge(s)");
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut degrees = vec![0usize; num_nodes];
        for &(u, v) in &edges {
            degrees[u] += 1;
            degrees[v] += 1;
        }
        Ok(Self {
            num_nodes,
            edges,
            features,
            degrees,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Writes the edge list as `u<TAB>v` lines.
    pub fn write_edges(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.edges.len() * 10);
        for &(u, v) in &self.edges {
            out.push_str(&format!("{u}\t{v}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes features as `node_id,f1,...,fk` rows with a header line.
    pub fn write_features(&self, path: &Path) -> Result<()> {
        let f = self.features.cols();
        let mut out = String::from("node_id");
        for k in 1..=f {
            out.push_str(&format!(",f{k}"));
        }
        out.push('\n');
        for n in 0..self.num_nodes {
            out.push_str(&n.to_string());
            for v in self.features.row(n) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Two domain-compatible graphs: same feature columns, same meaning.
#[derive(Clone, Debug)]
pub struct GraphPair {
    pub source: Graph,
    pub target: Graph,
}

impl GraphPair {
    pub fn new(source: Graph, target: Graph) -> Result<Self> {
        if source.feature_dim() != target.feature_dim() {
            return Err(Error::IncompatibleGraphs {
                source_width: source.feature_dim(),
                target_width: target.feature_dim(),
            });
        }
        Ok(Self { source, target })
    }

    pub fn get(&self, tag: GraphTag) -> &Graph {
        match tag {
            GraphTag::A => &self.source,
            GraphTag::B => &self.target,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.source.feature_dim()
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationMatrix(CsrMatrix);

impl PropagationMatrix {
    pub fn as_csr(&self) -> &CsrMatrix {
        &self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.get(r, c)
    }
}

pub fn build_propagation(g: &Graph) -> PropagationMatrix {
    let inv_sqrt: Vec<f64> = g.degrees.iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
    let mut triplets = Vec::with_capacity(g.num_nodes + 2 * g.edges.len());
    for (n, &d) in g.degrees.iter().enumerate() {
        triplets.push((n, n, 1.0 / (d + 1) as f64));
    }
    for &(u, v) in &g.edges {
        // one value for both triangles keeps the matrix exactly symmetric
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    PropagationMatrix(
        CsrMatrix::from_triplets(g.num_nodes, g.num_nodes, triplets)
            .expect("graph invariants guarantee in-range triplets"),
    )
}

/// Draws node ids with probability proportional to `degree^0.75`.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    cdf: Vec<f64>,
    seed: u64,
}

pub const NEGATIVE_SAMPLING_POWER: f64 = 0.75;

pub fn build_negative_sampler(g: &Graph, seed: u64) -> Result<NegativeSampler> {
    let mut acc = 0.0;
    let cdf: Vec<f64> = g
        .degrees
        .iter()
        .map(|&d| {
            acc += (d as f64).powf(NEGATIVE_SAMPLING_POWER);
            acc
        })
        .collect();
    if acc == 0.0 {
        return Err(Error::AllNodesIsolated);
    }
    Ok(NegativeSampler { cdf, seed })
}

impl NegativeSampler {
    fn total(&self) -> f64 {
        *self.cdf.last().unwrap()
    }

    /// Normalized sampling probability of every node.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.total();
        let mut prev = 0.0;
        self.cdf
            .iter()
            .map(|&c| {
                let p = (c - prev) / total;
                prev = c;
                p
            })
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator on the sampler's own stream.
    pub fn rng(&self) -> ChaCha8Rng {
        seed::rng(self.seed, Stream::Negatives)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.total();
        // zero-mass nodes have cdf[i] == cdf[i-1] and can never satisfy both bounds
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Reads a TSV edge file and a CSV feature file into a validated [`Graph`].
///
/// Node count is taken from the feature file; ids must be 0-based and contiguous.
pub fn load_graph(edge_path: &Path, feature_path: &Path) -> Result<Graph> {
    let features = read_features(feature_path)?;
    let num_nodes = features.rows();
    let text = fs::read_to_string(edge_path).map_err(|e| Error::io(edge_path, e))?;
    let mut edges = Vec::new();
    let mut reversed = 0usize;
    let mut seen = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| Error::MalformedLine {
            path: edge_path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(malformed(format!("expected 2 fields, found {}", toks.len())));
        }
        let parse = |t: &str| t.parse::<usize>().map_err(|_| malformed(format!("bad node id {t:?}")));
        let (u, v) = (parse(toks[0])?, parse(toks[1])?);
        for id in [u, v] {
            if id >= num_nodes {
                return Err(Error::NodeIdOutOfRange { id, num_nodes });
            }
        }
        if seen.contains(&(v, u)) && u != v {
            reversed += 1;
        }
        seen.insert((u, v));
        edges.push((u, v));
    }
    if reversed > 0 {
        log::debug!("{}: merged {reversed} reversed duplicate edge(s)", edge_path.display());
    }
    // listing each edge once is the undirected convention; a mix of one-way and
    // reciprocated pairs looks like directed input
    if reversed > 0 && edges.iter().any(|&(u, v)| u != v && !seen.contains(&(v, u))) {
        log::warn!("{}: edge list looks directed; symmetrizing", edge_path.display());
    }
    Graph::new(edges, features)
}

fn read_features(path: &Path) -> Result<Tensor2> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Option<Vec<f64>>> = Vec::new();
    let mut width: Option<usize> = None;
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
        let mut toks = line.split(',').map(str::trim);
        let id_tok = toks.next().unwrap_or_default();
        let Ok(id) = id_tok.parse::<usize>() else {
            if lineno == 0 || rows.is_empty() && width.is_none() {
                // header
                continue;
            }
            return Err(malformed(format!("bad node id {id_tok:?}")));
        };
        let vals = toks
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(format!("bad feature value {t:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(Error::InconsistentFeatureWidth {
                    node: id,
                    expected: w,
                    found: vals.len(),
                })
            }
            _ => {}
        }
        if rows.len() <= id {
            rows.resize(id + 1, None);
        }
        if rows[id].is_some() {
            return Err(malformed(format!("duplicate feature row for node {id}")));
        }
        rows[id] = Some(vals);
    }
    let width = width.unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * width);
    for (node, r) in rows.into_iter().enumerate() {
        let r = r.ok_or(Error::FeatureRowMissing { node })?;
        data.extend(r);
    }
    Tensor2::from_vec(data.len() / width.max(1), width, data)
}
