//! Graph storage, the on-disk dataset format, the normalized adjacency
//! operator and train/validation/test splits.
//!
//! A dataset directory holds four UTF-8 text files:
//!
//! - `meta.json`: `{"n": int, "f": int, "num_classes": int, "name": string}`
//! - `edges.tsv`: one `src<TAB>dst` pair per line, 0-indexed. Each undirected
//!   edge may appear once or in both directions.
//! - `features.csr`: line 1 `n f nnz`, line 2 the `n+1` row pointers, line 3
//!   the `nnz` column indices, line 4 the `nnz` values.
//! - `labels.txt`: `n` lines with one class index each.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::CsrMatrix;
use crate::rng::{self, Stream};

/// Symmetric adjacency structure without self-loops, in CSR layout with
/// sorted neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl Adjacency {
    /// Symmetrizes and deduplicates `edges`, dropping self-loops.
    ///
    /// Panics if an endpoint is `>= n`.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (u, v) in edges {
            assert!(u < n && v < n, "edge ({u}, {v}) out of range for {n} nodes");
            if u == v {
                continue;
            }
            lists[u].push(v);
            lists[v].push(u);
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            indices.extend(l);
            indptr.push(indices.len());
        }
        Adjacency { indptr, indices }
    }

    pub fn empty(n: usize) -> Self {
        Adjacency {
            indptr: vec![0; n + 1],
            indices: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.indptr.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.indices[self.indptr[u]..self.indptr[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.indptr[u + 1] - self.indptr[u]
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| v > u)
                .map(move |v| (u, v))
        })
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.num_nodes()).all(|u| self.neighbors(u).iter().all(|&v| self.contains(v, u)))
    }
}

/// One transductive graph: structure, sparse nonnegative features, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    pub name: String,
    adjacency: Adjacency,
    features: Arc<CsrMatrix>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl SparseGraph {
    pub fn new(
        name: impl Into<String>,
        adjacency: Adjacency,
        features: CsrMatrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = adjacency.num_nodes();
        if features.rows() != n {
            return Err(Error::invalid(
                "graph",
                format!("{} feature rows for {n} nodes", features.rows()),
            ));
        }
        if labels.len() != n {
            return Err(Error::invalid(
                "graph",
                format!("{} labels for {n} nodes", labels.len()),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::invalid(
                "graph",
                format!("label {l} of node {i} outside [0, {num_classes})"),
            ));
        }
        if let Some(v) = features.values().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(
                "graph",
                format!("feature value {v} is not a nonnegative finite number"),
            ));
        }
        Ok(SparseGraph {
            name: name.into(),
            adjacency,
            features: Arc::new(features),
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn features(&self) -> &Arc<CsrMatrix> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the degree matrix of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency(Arc<CsrMatrix>);

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows()
    }

    /// Self-loops only; what a graph without edges normalizes to.
    pub fn identity(n: usize) -> Self {
        NormalizedAdjacency(Arc::new(CsrMatrix::identity(n)))
    }
}

pub fn normalize_adjacency(adj: &Adjacency) -> NormalizedAdjacency {
    let n = adj.num_nodes();
    let deg: Vec<f64> = (0..n).map(|u| (adj.degree(u) + 1) as f64).collect();
    let w = |u: usize, v: usize| 1.0 / (deg[u] * deg[v]).sqrt();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(adj.indices.len() + n);
    let mut values = Vec::with_capacity(adj.indices.len() + n);
    indptr.push(0);
    for u in 0..n {
        let mut self_done = false;
        for &v in adj.neighbors(u) {
            if !self_done && v > u {
                indices.push(u);
                values.push(1.0 / deg[u]);
                self_done = true;
            }
            indices.push(v);
            values.push(w(u, v));
        }
        if !self_done {
            indices.push(u);
            values.push(1.0 / deg[u]);
        }
        indptr.push(indices.len());
    }
    let m = CsrMatrix::new(n, n, indptr, indices, values).expect("normalized adjacency is well formed");
    NormalizedAdjacency(Arc::new(m))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Meta {
    n: usize,
    f: usize,
    num_classes: usize,
    name: String,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_num<T: std::str::FromStr>(tok: &str, path: &Path, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(path, line, format!("cannot parse {what} from {tok:?}")))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SparseGraph> {
    let dir = dir.as_ref();

    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read_text(&meta_path)?)
        .map_err(|e| Error::parse(&meta_path, e.line(), e.to_string()))?;
    let n = meta.n;

    let edges_path = dir.join("edges.tsv");
    let text = read_text(&edges_path)?;
    let mut edges = Vec::new();
    let mut self_loops = 0usize;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split('\t').collect();
        if toks.len() != 2 {
            return Err(Error::parse(&edges_path, lineno, "expected `src<TAB>dst`"));
        }
        let u: usize = parse_num(toks[0].trim(), &edges_path, lineno, "source node")?;
        let v: usize = parse_num(toks[1].trim(), &edges_path, lineno, "target node")?;
        if u >= n || v >= n {
            return Err(Error::parse(
                &edges_path,
                lineno,
                format!("node index out of range ({u}, {v}) for n = {n}"),
            ));
        }
        if u == v {
            self_loops += 1;
        }
        edges.push((u, v));
    }
    if self_loops > 0 {
        log::warn!("{}: dropped {self_loops} self-loop(s)", edges_path.display());
    }
    let adjacency = Adjacency::from_edges(n, edges);

    let features = read_features(&dir.join("features.csr"), n, meta.f)?;

    let labels_path = dir.join("labels.txt");
    let text = read_text(&labels_path)?;
    let mut labels = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let l: usize = parse_num(line.trim(), &labels_path, lineno, "label")?;
        if l >= meta.num_classes {
            return Err(Error::parse(
                &labels_path,
                lineno,
                format!("label {l} outside [0, {})", meta.num_classes),
            ));
        }
        labels.push(l);
    }
    if labels.len() != n {
        return Err(Error::parse(
            &labels_path,
            text.lines().count(),
            format!("{} labels for {n} nodes", labels.len()),
        ));
    }

    SparseGraph::new(meta.name, adjacency, features, labels, meta.num_classes)
}

fn read_features(path: &Path, n: usize, f: usize) -> Result<CsrMatrix> {
    let text = read_text(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let line = |k: usize| -> Result<&str> {
        lines
            .get(k - 1)
            .copied()
            .ok_or_else(|| Error::parse(path, k, "unexpected end of file"))
    };
    let fields = |k: usize, what: &str| -> Result<Vec<usize>> {
        line(k)?
            .split_whitespace()
            .map(|t| parse_num(t, path, k, what))
            .collect()
    };

    let header = fields(1, "header")?;
    let [hn, hf, nnz] = header[..] else {
        return Err(Error::parse(path, 1, "expected `n f nnz`"));
    };
    if hn != n || hf != f {
        return Err(Error::parse(
            path,
            1,
            format!("shape {hn}x{hf} disagrees with meta.json ({n}x{f})"),
        ));
    }
    let indptr = fields(2, "row pointer")?;
    let indices = fields(3, "column index")?;
    let values: Vec<f64> = line(4)
        .or_else(|e| if nnz == 0 { Ok("") } else { Err(e) })?
        .split_whitespace()
        .map(|t| parse_num(t, path, 4, "value"))
        .collect::<Result<_>>()?;
    if indptr.len() != n + 1 {
        return Err(Error::parse(
            path,
            2,
            format!("{} row pointers, expected {}", indptr.len(), n + 1),
        ));
    }
    if indices.len() != nnz {
        return Err(Error::parse(path, 3, format!("{} column indices, expected {nnz}", indices.len())));
    }
    if values.len() != nnz {
        return Err(Error::parse(path, 4, format!("{} values, expected {nnz}", values.len())));
    }
    if let Some(&c) = indices.iter().find(|&&c| c >= f) {
        return Err(Error::parse(path, 3, format!("column index {c} out of range for f = {f}")));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::parse(path, 4, format!("feature value {v} is not nonnegative")));
    }
    CsrMatrix::new(n, f, indptr, indices, values).map_err(|m| Error::parse(path, 2, m))
}

/// Writes `g` in the neutral format. Each undirected edge is written once.
pub fn save_dataset(g: &SparseGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| -> Result<()> {
        let p: PathBuf = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };

    let meta = Meta {
        n: g.num_nodes(),
        f: g.num_features(),
        num_classes: g.num_classes,
        name: g.name.clone(),
    };
    write("meta.json", serde_json::to_string(&meta).expect("meta serializes") + "\n")?;

    let mut edges = String::new();
    for (u, v) in g.adjacency.edges() {
        writeln!(edges, "{u}\t{v}").unwrap();
    }
    write("edges.tsv", edges)?;

    let x = &g.features;
    let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(" ");
    let body = format!(
        "{} {} {}\n{}\n{}\n{}\n",
        x.rows(),
        x.cols(),
        x.nnz(),
        join(&mut x.indptr().iter().map(|v| v.to_string())),
        join(&mut x.indices().iter().map(|v| v.to_string())),
        join(&mut x.values().iter().map(|v| v.to_string())),
    );
    write("features.csr", body)?;

    let mut labels = String::new();
    for l in &g.labels {
        writeln!(labels, "{l}").unwrap();
    }
    write("labels.txt", labels)
}

/// Disjoint train/validation/test node sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 10/10/80 split of a seeded uniform permutation. The 10% sizes are
/// `round(0.1 n)` with halves rounded up.
pub fn make_split(n: usize, seed: u64) -> Result<SplitSpec> {
    if n < 10 {
        return Err(Error::invalid("split", format!("need at least 10 nodes, got {n}")));
    }
    let tenth = (n + 5) / 10;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, Stream::Splits));
    let mut train = perm[..tenth].to_vec();
    let mut val = perm[tenth..2 * tenth].to_vec();
    let mut test = perm[2 * tenth..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec {
        seed,
        train,
        val,
        test,
    })
}
