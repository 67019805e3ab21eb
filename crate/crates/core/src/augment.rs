//! Stochastic graph views: Bernoulli edge dropping and feature masking.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Adjacency, NormalizedAdjacency, SparseGraph};
use crate::ndiff::CsrMatrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// One Bernoulli draw per feature dimension, shared by all nodes.
    #[default]
    Column,
    /// One draw per stored feature entry.
    Entry,
}

/// Masking (`p_f*`) and edge-drop (`p_e*`) probabilities of the two views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_f1: f64,
    pub p_f2: f64,
    pub p_e1: f64,
    pub p_e2: f64,
    #[serde(default)]
    pub mask_mode: MaskMode,
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            p_f1: 0.0,
            p_f2: 0.0,
            p_e1: 0.0,
            p_e2: 0.0,
            mask_mode: MaskMode::Column,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_f1", self.p_f1),
            ("p_f2", self.p_f2),
            ("p_e1", self.p_e1),
            ("p_e2", self.p_e2),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("augmentation", format!("{name} = {p} is not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Removes each undirected edge independently with probability `p_e`.
/// Exactly one uniform draw is consumed per undirected edge.
pub fn drop_edges(adj: &Adjacency, p_e: f64, rng: &mut Rng) -> Adjacency {
    let kept: Vec<(usize, usize)> = adj.edges().filter(|_| rng.random::<f64>() >= p_e).collect();
    Adjacency::from_edges(adj.num_nodes(), kept)
}

/// Zeroes features with probability `p_f`, per column or per entry.
pub fn mask_features(x: &CsrMatrix, p_f: f64, mode: MaskMode, rng: &mut Rng) -> CsrMatrix {
    match mode {
        MaskMode::Column => {
            let masked: Vec<bool> = (0..x.cols()).map(|_| rng.random::<f64>() < p_f).collect();
            x.filter(|_, c, _| !masked[c])
        }
        MaskMode::Entry => x.filter(|_, _, _| rng.random::<f64>() >= p_f),
    }
}

/// One augmented copy of a graph, ready for the encoder.
#[derive(Debug, Clone)]
pub struct GraphView {
    pub adjacency: NormalizedAdjacency,
    pub features: Arc<CsrMatrix>,
    /// Undirected edges that survived dropping.
    pub kept_edges: usize,
}

impl GraphView {
    pub fn unaugmented(g: &SparseGraph) -> Self {
        GraphView {
            adjacency: normalize_adjacency(g.adjacency()),
            features: Arc::clone(g.features()),
            kept_edges: g.adjacency().num_edges(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.num_nodes()
    }
}

pub fn make_view(g: &SparseGraph, p_f: f64, p_e: f64, mode: MaskMode, rng: &mut Rng) -> GraphView {
    let adj = drop_edges(g.adjacency(), p_e, rng);
    let features = mask_features(g.features(), p_f, mode, rng);
    GraphView {
        adjacency: normalize_adjacency(&adj),
        features: Arc::new(features),
        kept_edges: adj.num_edges(),
    }
}

/// Two views of the same graph; node `i` of one view is the positive of
/// node `i` of the other.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub first: GraphView,
    pub second: GraphView,
    /// Word position of the augmentation stream before the draw.
    pub draw_id: u128,
}

pub fn make_views(g: &SparseGraph, cfg: &AugmentConfig, rng: &mut Rng) -> ViewPair {
    let draw_id = rng.get_word_pos();
    let first = make_view(g, cfg.p_f1, cfg.p_e1, cfg.mask_mode, rng);
    let second = make_view(g, cfg.p_f2, cfg.p_e2, cfg.mask_mode, rng);
    ViewPair {
        first,
        second,
        draw_id,
    }
}
