#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng as _, SeedableRng};
use vgcl_core::graph::Adjacency;
use vgcl_core::model::{EncoderConfig, Weights};
use vgcl_core::ndiff::{CsrMatrix, DenseMatrix};
use vgcl_core::rng::Rng;
use vgcl_core::SparseGraph;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`. Gradients with norm below 1e-6 are compared
/// absolutely; central differences at `FD_STEP` carry ~1e-11 roundoff.
pub fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a.zip_map(b, |x, y| x - y).norm();
    diff / a.norm().max(b.norm()).max(1e-6)
}

/// Central differences of `f` with respect to every entry of every input.
pub fn fd_grad(f: impl Fn(&[DenseMatrix]) -> f64, x: &[DenseMatrix]) -> Vec<DenseMatrix> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut g = DenseMatrix::zeros(x[i].rows(), x[i].cols());
        for k in 0..x[i].len() {
            let orig = xs[i].as_slice()[k];
            xs[i].as_mut_slice()[k] = orig + FD_STEP;
            let up = f(&xs);
            xs[i].as_mut_slice()[k] = orig - FD_STEP;
            let down = f(&xs);
            xs[i].as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

pub fn random_graph(rng: &mut Rng, n: usize, f: usize, p_edge: f64, classes: usize) -> SparseGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p_edge {
                edges.push((u, v));
            }
        }
    }
    let mut trip = Vec::new();
    for r in 0..n {
        for c in 0..f {
            if rng.random::<f64>() < 0.6 {
                trip.push((r, c, rng.random_range(0.1..2.0)));
            }
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    SparseGraph::new(
        "random",
        Adjacency::from_edges(n, edges),
        CsrMatrix::from_triplets(n, f, trip),
        labels,
        classes,
    )
    .unwrap()
}

pub fn small_cfg(in_dim: usize, dim: usize) -> EncoderConfig {
    EncoderConfig {
        in_dim,
        hidden: dim,
        out: dim,
        proj_hidden: dim,
    }
}

pub fn random_weights(rng: &mut Rng, cfg: &EncoderConfig, scale: f64) -> Weights {
    Weights::from_fn(cfg, |_, r, c| uniform(rng, r, c, -scale, scale))
}

/// Dense `D^{-1/2} (A + I) D^{-1/2}` built directly from the edge list.
pub fn dense_normalized(adj: &Adjacency) -> DenseMatrix {
    let n = adj.num_nodes();
    let mut a = DenseMatrix::identity(n);
    for (u, v) in adj.edges() {
        a.set(u, v, 1.0);
        a.set(v, u, 1.0);
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    DenseMatrix::from_fn(n, n, |i, j| a.get(i, j) / (deg[i] * deg[j]).sqrt())
}

pub fn relu(m: &DenseMatrix) -> DenseMatrix {
    m.map(|x| x.max(0.0))
}

/// Reference encoder and projection head on dense matrices.
pub fn dense_forward(a_hat: &DenseMatrix, x: &DenseMatrix, w: &Weights) -> (DenseMatrix, DenseMatrix) {
    let h1 = relu(&a_hat.matmul(&x.matmul(&w.w1)));
    let z = relu(&a_hat.matmul(&h1.matmul(&w.w2)));
    let add_bias = |m: DenseMatrix, b: &DenseMatrix| DenseMatrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) + b.get(0, c));
    let a = add_bias(z.matmul(&w.p1), &w.b1).map(|v| if v > 0.0 { v } else { v.exp_m1() });
    let h = add_bias(a.matmul(&w.p2), &w.b2);
    (z, h)
}

/// Symmetrized NT-Xent evaluated term by term from the definition.
pub fn brute_nt_xent(h1: &DenseMatrix, h2: &DenseMatrix, tau: f64, intra: bool) -> (f64, Vec<f64>) {
    let n = h1.rows();
    let unit = |m: &DenseMatrix, i: usize| {
        let r = m.row(i);
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let u: Vec<Vec<f64>> = (0..n).map(|i| unit(h1, i)).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| unit(h2, i)).collect();
    let one_side = |a: &[Vec<f64>], b: &[Vec<f64>], i: usize| {
        let pos = (cos(&a[i], &b[i]) / tau).exp();
        let mut denom = pos;
        for k in 0..n {
            if k != i {
                denom += (cos(&a[i], &b[k]) / tau).exp();
                if intra {
                    denom += (cos(&a[i], &a[k]) / tau).exp();
                }
            }
        }
        -(pos / denom).ln()
    };
    let per: Vec<f64> = (0..n).map(|i| 0.5 * (one_side(&u, &v, i) + one_side(&v, &u, i))).collect();
    (per.iter().sum::<f64>() / n as f64, per)
}

/// `∫ q log(q/p)` for `q = N(mu, s²)`, `p = N(0, sigma²)` by composite
/// Simpson on `mu ± 14 s`.
pub fn kl_quadrature(mu: f64, s: f64, sigma: f64) -> f64 {
    let steps = 40_000;
    let (a, b) = (mu - 14.0 * s, mu + 14.0 * s);
    let h = (b - a) / steps as f64;
    let log_normal = |x: f64, m: f64, sd: f64| -0.5 * ((x - m) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let f = |x: f64| {
        let lq = log_normal(x, mu, s);
        lq.exp() * (lq - log_normal(x, 0.0, sigma))
    };
    let mut acc = f(a) + f(b);
    for k in 1..steps {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}
