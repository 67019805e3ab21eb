//! Fixtures shared by the kernel benchmarks and the acceptance suite.

use rand::{Rng as _, SeedableRng};
use vgcl_core::rng::Rng;
use vgcl_core::synthetic::PlantedPartition;
use vgcl_core::{DenseMatrix, SparseGraph};

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1)`.
pub fn dense(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut r = rng(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

/// `dense` with every row scaled to unit length.
pub fn unit_rows(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut m = dense(rows, cols, seed);
    for i in 0..rows {
        let norm = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|x| *x /= norm);
    }
    m
}

/// Planted-partition graph with citation-like degree and sparsity.
pub fn citation_like(nodes: usize, seed: u64) -> SparseGraph {
    PlantedPartition {
        nodes,
        classes: 7,
        features: 1433,
        intra_degree: 3.0,
        inter_degree: 0.9,
        words: 18,
        topic_signal: 0.6,
        seed,
    }
    .generate()
}
