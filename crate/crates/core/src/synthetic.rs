//! Labelled toy graphs with community structure and bag-of-words features.

use rand::Rng as _;

use crate::graph::{Adjacency, SparseGraph};
use crate::ndiff::CsrMatrix;
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
pub struct PlantedPartition {
    pub nodes: usize,
    pub classes: usize,
    pub features: usize,
    /// Expected number of same-class neighbors per node.
    pub intra_degree: f64,
    /// Expected number of other-class neighbors per node.
    pub inter_degree: f64,
    /// Active words per node.
    pub words: usize,
    /// Probability that a word is drawn from the node's class vocabulary.
    pub topic_signal: f64,
    pub seed: u64,
}

impl Default for PlantedPartition {
    fn default() -> Self {
        PlantedPartition {
            nodes: 200,
            classes: 4,
            features: 60,
            intra_degree: 4.0,
            inter_degree: 1.0,
            words: 6,
            topic_signal: 0.6,
            seed: 0,
        }
    }
}

impl PlantedPartition {
    pub fn generate(&self) -> SparseGraph {
        let mut rng = rng::stream(self.seed, Stream::Init);
        let n = self.nodes;
        let labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();

        let class_size = n as f64 / self.classes as f64;
        let p_in = (self.intra_degree / (class_size - 1.0).max(1.0)).min(1.0);
        let p_out = (self.inter_degree / (n as f64 - class_size).max(1.0)).min(1.0);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                let p = if labels[u] == labels[v] { p_in } else { p_out };
                if rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }

        let vocab = (self.features / self.classes).max(1);
        let mut triplets = Vec::with_capacity(n * self.words);
        for (u, &label) in labels.iter().enumerate() {
            for _ in 0..self.words {
                let col = if rng.random::<f64>() < self.topic_signal {
                    (label * vocab + rng.random_range(0..vocab)) % self.features
                } else {
                    rng.random_range(0..self.features)
                };
                triplets.push((u, col, 1.0));
            }
        }
        // Repeated words collapse to a single unit entry.
        let x = CsrMatrix::from_triplets(n, self.features, triplets);
        let x = CsrMatrix::new(
            n,
            self.features,
            x.indptr().to_vec(),
            x.indices().to_vec(),
            vec![1.0; x.nnz()],
        )
        .expect("valid feature matrix");

        SparseGraph::new(
            format!("planted-{}x{}", n, self.classes),
            Adjacency::from_edges(n, edges),
            x,
            labels,
            self.classes,
        )
        .expect("generated graph is valid")
    }
}
