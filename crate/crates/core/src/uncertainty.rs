//! Per-node uncertainty scores from repeated (augmentation, weight) draws,
//! and retention curves that rank test nodes by them.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig, GraphView};
use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::model::{sample_weights, Params};
use crate::ndiff::DenseMatrix;
use crate::objective::{per_node_loss, PriorConfig};
use crate::rng::{self, Stream};

pub const DEFAULT_DRAWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsCertain,
    HigherIsUncertain,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::HigherIsCertain => "higher_is_certain",
            Orientation::HigherIsUncertain => "higher_is_uncertain",
        }
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher_is_certain" => Ok(Orientation::HigherIsCertain),
            "higher_is_uncertain" => Ok(Orientation::HigherIsUncertain),
            _ => Err(Error::invalid("orientation", format!("unknown orientation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Cmds,
    Astd,
    AstdNorm,
    Psfv,
    ExpectedLikelihood,
    Waic,
}

impl Measure {
    pub const ALL: [Measure; 6] = [
        Measure::Cmds,
        Measure::Astd,
        Measure::AstdNorm,
        Measure::Psfv,
        Measure::ExpectedLikelihood,
        Measure::Waic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Cmds => "cmds",
            Measure::Astd => "astd",
            Measure::AstdNorm => "astd_norm",
            Measure::Psfv => "psfv",
            Measure::ExpectedLikelihood => "expected_likelihood",
            Measure::Waic => "waic",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            Measure::Cmds | Measure::ExpectedLikelihood | Measure::Waic => Orientation::HigherIsCertain,
            Measure::Astd | Measure::AstdNorm | Measure::Psfv => Orientation::HigherIsUncertain,
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("measure", format!("unknown measure {s:?}")))
    }
}

/// `values[j][i]`: likelihood proxy of node `i` under draw `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMatrix {
    pub values: DenseMatrix,
    /// Augmentation stream position of each draw.
    pub augment_draws: Vec<u128>,
    /// Weight stream position of each draw; `None` for fixed weights.
    pub weight_draws: Vec<Option<u128>>,
}

impl LikelihoodMatrix {
    pub fn from_values(values: DenseMatrix) -> Result<Self> {
        if let Some(v) = values.as_slice().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::invalid("likelihoods", format!("entries must be positive and finite, found {v}")));
        }
        let m = values.rows();
        Ok(LikelihoodMatrix {
            values,
            augment_draws: vec![0; m],
            weight_draws: vec![None; m],
        })
    }

    pub fn draws(&self) -> usize {
        self.values.rows()
    }

    pub fn nodes(&self) -> usize {
        self.values.cols()
    }

    fn column(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.draws()).map(move |j| self.values.get(j, i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationSource {
    Augmentations,
    Weights,
    Both,
}

/// Encoder outputs across draws, one `n × d` matrix per draw.
#[derive(Debug, Clone)]
pub struct EmbeddingSamples {
    pub draws: Vec<DenseMatrix>,
    pub source: VariationSource,
}

impl EmbeddingSamples {
    fn check(&self) -> Result<(usize, usize)> {
        let first = self
            .draws
            .first()
            .ok_or_else(|| Error::invalid("embedding samples", "no draws"))?;
        if self.draws.iter().any(|d| d.shape() != first.shape()) {
            return Err(Error::invalid("embedding samples", "draws differ in shape"));
        }
        Ok(first.shape())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub measure: Measure,
    pub orientation: Orientation,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    fn new(measure: Measure, scores: Vec<f64>) -> Self {
        ScoreVector {
            measure,
            orientation: measure.orientation(),
            scores,
        }
    }
}

/// Outputs of [`collect_draws`].
#[derive(Debug, Clone)]
pub struct Draws {
    pub likelihood: LikelihoodMatrix,
    /// Unaugmented graph under each weight sample; absent for fixed weights.
    pub weight_samples: Option<EmbeddingSamples>,
    /// First augmented view under each draw's weights.
    pub augment_samples: EmbeddingSamples,
}

/// Draws `m` joint (view pair, weight sample) pairs and records per-node
/// likelihood proxies `exp(-loss)` plus encoder outputs.
pub fn collect_draws(
    params: &Params,
    g: &SparseGraph,
    augment: &AugmentConfig,
    prior: &PriorConfig,
    m: usize,
    seed: u64,
) -> Result<Draws> {
    if m < 2 {
        return Err(Error::invalid("draws", format!("at least 2 draws are needed, got {m}")));
    }
    let mut aug_rng = rng::stream(seed, Stream::DrawAugment);
    let mut w_rng = rng::stream(seed, Stream::DrawWeights);
    let clean = GraphView::unaugmented(g);
    let n = g.num_nodes();

    let mut values = DenseMatrix::zeros(m, n);
    let mut augment_draws = Vec::with_capacity(m);
    let mut weight_draws = Vec::with_capacity(m);
    let mut by_weight = Vec::new();
    let mut by_augment = Vec::with_capacity(m);
    for j in 0..m {
        let views = make_views(g, augment, &mut aug_rng);
        augment_draws.push(views.draw_id);
        let sampled;
        let w = match params {
            Params::Deterministic(w) => {
                weight_draws.push(None);
                w
            }
            Params::Variational(vp) => {
                sampled = sample_weights(vp, &mut w_rng);
                weight_draws.push(Some(sampled.draw_id));
                by_weight.push(sampled.weights.encode(&clean));
                &sampled.weights
            }
        };
        let losses = per_node_loss(&views, w, prior)?;
        for (dst, l) in values.row_mut(j).iter_mut().zip(&losses) {
            *dst = (-l).exp();
        }
        by_augment.push(w.encode(&views.first));
        log::debug!("draw {}/{m} done", j + 1);
    }

    let deterministic = matches!(params, Params::Deterministic(_));
    let mut likelihood = LikelihoodMatrix::from_values(values)?;
    likelihood.augment_draws = augment_draws;
    likelihood.weight_draws = weight_draws;
    Ok(Draws {
        likelihood,
        weight_samples: (!deterministic).then_some(EmbeddingSamples {
            draws: by_weight,
            source: VariationSource::Weights,
        }),
        augment_samples: EmbeddingSamples {
            draws: by_augment,
            source: if deterministic {
                VariationSource::Augmentations
            } else {
                VariationSource::Both
            },
        },
    })
}

/// `1 / (M Σ_j l_j²)` with `l_j` the node's likelihoods normalized over
/// draws. Ranges from `1/M` (one dominant draw) to 1 (all equal).
pub fn cmds(l: &LikelihoodMatrix) -> Result<ScoreVector> {
    let m = l.draws() as f64;
    let mut scores = Vec::with_capacity(l.nodes());
    for i in 0..l.nodes() {
        let total: f64 = l.column(i).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::invalid("likelihoods", format!("node {i} has likelihood sum {total}")));
        }
        let sq: f64 = l.column(i).map(|v| (v / total).powi(2)).sum();
        scores.push(1.0 / (m * sq));
    }
    Ok(ScoreVector::new(Measure::Cmds, scores))
}

/// Mean over features of the across-draw population statistic `stat`.
fn per_feature_spread(e: &EmbeddingSamples, stat: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let (n, d) = e.check()?;
    let m = e.draws.len() as f64;
    let mut mean = DenseMatrix::zeros(n, d);
    for draw in &e.draws {
        mean.axpy(1.0 / m, draw);
    }
    let mut var = DenseMatrix::zeros(n, d);
    for draw in &e.draws {
        for ((v, x), mu) in var.as_mut_slice().iter_mut().zip(draw.as_slice()).zip(mean.as_slice()) {
            *v += (x - mu).powi(2) / m;
        }
    }
    Ok((0..n)
        .map(|i| var.row(i).iter().map(|&v| stat(v)).sum::<f64>() / d as f64)
        .collect())
}

fn require_weights(e: &EmbeddingSamples, measure: &'static str) -> Result<()> {
    if e.source == VariationSource::Augmentations {
        return Err(Error::NotApplicable {
            measure,
            reason: "its embeddings do not vary across weight draws",
        });
    }
    Ok(())
}

/// Average across-draw standard deviation of the embedding features.
pub fn astd(e: &EmbeddingSamples) -> Result<ScoreVector> {
    require_weights(e, "astd")?;
    Ok(ScoreVector::new(Measure::Astd, per_feature_spread(e, f64::sqrt)?))
}

/// Min-max scales each feature column across nodes, separately per draw;
/// constant columns become 0.
pub fn min_max_columns(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for c in 0..x.cols() {
        let (lo, hi) = (0..x.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            let v = x.get(r, c);
            (lo.min(v), hi.max(v))
        });
        let range = hi - lo;
        for r in 0..x.rows() {
            out.set(r, c, if range > 0.0 { (x.get(r, c) - lo) / range } else { 0.0 });
        }
    }
    out
}

/// [`astd`] after per-draw min-max normalization of every feature.
pub fn astd_norm(e: &EmbeddingSamples) -> Result<ScoreVector> {
    require_weights(e, "astd_norm")?;
    let normalized = EmbeddingSamples {
        draws: e.draws.iter().map(min_max_columns).collect(),
        source: e.source,
    };
    Ok(ScoreVector::new(Measure::AstdNorm, per_feature_spread(&normalized, f64::sqrt)?))
}

/// Average across-draw variance of the embedding features.
pub fn psfv(e: &EmbeddingSamples) -> Result<ScoreVector> {
    if e.source == VariationSource::Weights {
        return Err(Error::invalid("psfv input", "embeddings must vary across augmentations"));
    }
    Ok(ScoreVector::new(Measure::Psfv, per_feature_spread(e, |v| v)?))
}

pub fn expected_likelihood(l: &LikelihoodMatrix) -> ScoreVector {
    let m = l.draws() as f64;
    let scores = (0..l.nodes()).map(|i| l.column(i).sum::<f64>() / m).collect();
    ScoreVector::new(Measure::ExpectedLikelihood, scores)
}

/// Mean likelihood minus the population variance of the log-likelihood.
pub fn waic(l: &LikelihoodMatrix) -> ScoreVector {
    let m = l.draws() as f64;
    let scores = (0..l.nodes())
        .map(|i| {
            let mean = l.column(i).sum::<f64>() / m;
            let logs: Vec<f64> = l.column(i).map(f64::ln).collect();
            let lm = logs.iter().sum::<f64>() / m;
            let var = logs.iter().map(|x| (x - lm).powi(2)).sum::<f64>() / m;
            mean - var
        })
        .collect();
    ScoreVector::new(Measure::Waic, scores)
}

/// Computes one measure from collected draws.
pub fn score(measure: Measure, draws: &Draws) -> Result<ScoreVector> {
    let not_variational = || Error::NotApplicable {
        measure: match measure {
            Measure::Astd => "astd",
            _ => "astd_norm",
        },
        reason: "it has no weight distribution to sample from",
    };
    match measure {
        Measure::Cmds => cmds(&draws.likelihood),
        Measure::Astd => astd(draws.weight_samples.as_ref().ok_or_else(not_variational)?),
        Measure::AstdNorm => astd_norm(draws.weight_samples.as_ref().ok_or_else(not_variational)?),
        Measure::Psfv => psfv(&draws.augment_samples),
        Measure::ExpectedLikelihood => Ok(expected_likelihood(&draws.likelihood)),
        Measure::Waic => Ok(waic(&draws.likelihood)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionCurve {
    /// `(k / T, accuracy of the k most certain test nodes)` for `k = 1..=T`.
    pub points: Vec<(f64, f64)>,
    /// Test nodes, most certain first.
    pub order: Vec<usize>,
}

impl RetentionCurve {
    /// Mean cumulative accuracy over all retention levels.
    pub fn area(&self) -> f64 {
        self.points.iter().map(|p| p.1).sum::<f64>() / self.points.len() as f64
    }

    /// Cumulative accuracy at the smallest retained fraction `>= fraction`.
    pub fn accuracy_at(&self, fraction: f64) -> f64 {
        self.points
            .iter()
            .find(|p| p.0 >= fraction - 1e-12)
            .unwrap_or(self.points.last().expect("curve is non-empty"))
            .1
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,accuracy\n");
        for (f, a) in &self.points {
            s.push_str(&format!("{f:.6},{a:.6}\n"));
        }
        s
    }
}

/// Cumulative accuracy over test nodes sorted most-certain-first; ties keep
/// ascending node order.
pub fn retention_curve(score: &ScoreVector, test_nodes: &[usize], correct: &[bool]) -> Result<RetentionCurve> {
    if test_nodes.is_empty() {
        return Err(Error::invalid("retention", "the test set is empty"));
    }
    if test_nodes.len() != correct.len() {
        return Err(Error::invalid(
            "retention",
            format!("{} test nodes but {} correctness flags", test_nodes.len(), correct.len()),
        ));
    }
    if let Some(&bad) = test_nodes.iter().find(|&&i| i >= score.scores.len()) {
        return Err(Error::invalid("retention", format!("test node {bad} has no score")));
    }
    let mut idx: Vec<usize> = (0..test_nodes.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (score.scores[test_nodes[a]], score.scores[test_nodes[b]]);
        let by_score = match score.orientation {
            Orientation::HigherIsCertain => sb.total_cmp(&sa),
            Orientation::HigherIsUncertain => sa.total_cmp(&sb),
        };
        by_score.then(test_nodes[a].cmp(&test_nodes[b]))
    });
    let t = idx.len() as f64;
    let mut hits = 0usize;
    let points = idx
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            hits += usize::from(correct[p]);
            ((k + 1) as f64 / t, hits as f64 / (k + 1) as f64)
        })
        .collect();
    Ok(RetentionCurve {
        points,
        order: idx.iter().map(|&p| test_nodes[p]).collect(),
    })
}

/// Writes `scores.tsv`: a `#` line with each column's orientation, a header,
/// then one row per node.
pub fn write_scores(path: &Path, scores: &[ScoreVector]) -> Result<()> {
    let mut s = String::from("# orientation:");
    for v in scores {
        s.push_str(&format!(" {}={}", v.measure, v.orientation.as_str()));
    }
    s.push_str("\nnode");
    for v in scores {
        s.push('\t');
        s.push_str(v.measure.name());
    }
    s.push('\n');
    let n = scores.first().map_or(0, |v| v.scores.len());
    for i in 0..n {
        s.push_str(&i.to_string());
        for v in scores {
            s.push('\t');
            s.push_str(&v.scores[i].to_string());
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreVector>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut orientations = Vec::new();
    let header = loop {
        let (i, line) = lines.next().ok_or_else(|| Error::parse(path, 1, "missing header"))?;
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(list) = rest.trim().strip_prefix("orientation:") {
                for item in list.split_whitespace() {
                    let (m, o) = item
                        .split_once('=')
                        .ok_or_else(|| Error::parse(path, i + 1, format!("bad orientation entry {item:?}")))?;
                    orientations.push((m.parse::<Measure>()?, o.parse::<Orientation>()?));
                }
            }
            continue;
        }
        break line;
    };
    let mut cols = header.split('\t');
    if cols.next() != Some("node") {
        return Err(Error::parse(path, 1, "header must start with `node`"));
    }
    let mut out: Vec<ScoreVector> = Vec::new();
    for name in cols {
        let measure: Measure = name.parse()?;
        let orientation = orientations
            .iter()
            .find(|(m, _)| *m == measure)
            .map(|(_, o)| *o)
            .ok_or_else(|| Error::parse(path, 1, format!("no orientation recorded for {name}")))?;
        if orientation != measure.orientation() {
            return Err(Error::parse(
                path,
                1,
                format!("{name} is recorded as {} but is {}", orientation.as_str(), measure.orientation().as_str()),
            ));
        }
        out.push(ScoreVector {
            measure,
            orientation,
            scores: Vec::new(),
        });
    }
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != out.len() + 1 {
            return Err(Error::parse(path, i + 1, format!("expected {} fields", out.len() + 1)));
        }
        let node: usize = fields[0].parse().map_err(|_| Error::parse(path, i + 1, "bad node index"))?;
        if node != out.first().map_or(0, |v| v.scores.len()) {
            return Err(Error::parse(path, i + 1, format!("node {node} out of order")));
        }
        for (v, f) in out.iter_mut().zip(&fields[1..]) {
            v.scores
                .push(f.parse().map_err(|_| Error::parse(path, i + 1, format!("bad score {f:?}")))?);
        }
    }
    Ok(out)
}

pub fn write_retention(path: &Path, curve: &RetentionCurve) -> Result<()> {
    fs::write(path, curve.to_csv()).map_err(|e| Error::io(path, e))
}
