//! Two-layer GCN encoder, two-layer MLP projection head, and the
//! deterministic and mean-field Gaussian parameterizations of their weights.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::GraphView;
use crate::error::{Error, Result};
use crate::ndiff::{scalar, DenseMatrix, Tape, Var};
use crate::rng::Rng;

/// Initial standard deviation of every variational weight.
pub const INIT_STD: f64 = 0.01;

/// Names of the learnable tensors, in canonical order.
pub const PARAM_NAMES: [&str; 6] = ["w1", "w2", "p1", "b1", "p2", "b2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub out: usize,
    pub proj_hidden: usize,
}

impl EncoderConfig {
    pub fn new(in_dim: usize) -> Self {
        EncoderConfig {
            in_dim,
            hidden: 128,
            out: 128,
            proj_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden == 0 || self.out == 0 || self.proj_hidden == 0 {
            return Err(Error::invalid("encoder", format!("all dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn shapes(&self) -> [(usize, usize); 6] {
        [
            (self.in_dim, self.hidden),
            (self.hidden, self.out),
            (self.out, self.proj_hidden),
            (1, self.proj_hidden),
            (self.proj_hidden, self.out),
            (1, self.out),
        ]
    }
}

/// Concrete weights: GCN layers `w1`, `w2` (no bias) and projection layers
/// `p1`/`b1`, `p2`/`b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
    pub p1: DenseMatrix,
    pub b1: DenseMatrix,
    pub p2: DenseMatrix,
    pub b2: DenseMatrix,
}

impl Weights {
    pub fn from_fn(cfg: &EncoderConfig, mut f: impl FnMut(usize, usize, usize) -> DenseMatrix) -> Self {
        let s = cfg.shapes();
        Weights {
            w1: f(0, s[0].0, s[0].1),
            w2: f(1, s[1].0, s[1].1),
            p1: f(2, s[2].0, s[2].1),
            b1: f(3, s[3].0, s[3].1),
            p2: f(4, s[4].0, s[4].1),
            b2: f(5, s[5].0, s[5].1),
        }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self::from_fn(cfg, |_, r, c| DenseMatrix::zeros(r, c))
    }

    /// Rebuilds from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(t: Vec<DenseMatrix>) -> Result<Self> {
        let [w1, w2, p1, b1, p2, b2]: [DenseMatrix; 6] = t
            .try_into()
            .map_err(|v: Vec<_>| Error::invalid("weights", format!("expected 6 tensors, got {}", v.len())))?;
        let w = Weights { w1, w2, p1, b1, p2, b2 };
        let cfg = w.config();
        for (i, (t, s)) in w.tensors().iter().zip(cfg.shapes()).enumerate() {
            if t.shape() != s {
                return Err(Error::invalid(
                    "weights",
                    format!("{} has shape {:?}, expected {:?}", PARAM_NAMES[i], t.shape(), s),
                ));
            }
        }
        Ok(w)
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            in_dim: self.w1.rows(),
            hidden: self.w1.cols(),
            out: self.w2.cols(),
            proj_hidden: self.p1.cols(),
        }
    }

    pub fn tensors(&self) -> [&DenseMatrix; 6] {
        [&self.w1, &self.w2, &self.p1, &self.b1, &self.p2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut DenseMatrix; 6] {
        [
            &mut self.w1,
            &mut self.w2,
            &mut self.p1,
            &mut self.b1,
            &mut self.p2,
            &mut self.b2,
        ]
    }

    pub fn map(&self, mut f: impl FnMut(&DenseMatrix) -> DenseMatrix) -> Weights {
        let t = self.tensors();
        Weights {
            w1: f(t[0]),
            w2: f(t[1]),
            p1: f(t[2]),
            b1: f(t[3]),
            p2: f(t[4]),
            b2: f(t[5]),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn on_tape(&self, tape: &Tape) -> WeightVars {
        WeightVars::from_array(self.tensors().map(|t| tape.leaf(t.clone())))
    }

    /// Encoder output on `view`, without recording gradients.
    pub fn encode(&self, view: &GraphView) -> DenseMatrix {
        let tape = Tape::new();
        let w = self.on_tape(&tape);
        let z = encode(&tape, view, &w);
        let out = tape.value(z).clone();
        out
    }
}

/// Tape handles for one set of weights.
#[derive(Debug, Clone, Copy)]
pub struct WeightVars {
    pub w1: Var,
    pub w2: Var,
    pub p1: Var,
    pub b1: Var,
    pub p2: Var,
    pub b2: Var,
}

impl WeightVars {
    pub fn from_array([w1, w2, p1, b1, p2, b2]: [Var; 6]) -> Self {
        WeightVars { w1, w2, p1, b1, p2, b2 }
    }

    pub fn to_array(self) -> [Var; 6] {
        [self.w1, self.w2, self.p1, self.b1, self.p2, self.b2]
    }

    pub fn grads(&self, tape: &Tape) -> Weights {
        let [w1, w2, p1, b1, p2, b2] = self.to_array().map(|v| tape.grad(v));
        Weights { w1, w2, p1, b1, p2, b2 }
    }
}

/// Mean-field Gaussian over every weight: `w ~ N(mean, softplus(spread)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mean: Weights,
    /// Pre-softplus spread `p`.
    pub spread: Weights,
}

impl VariationalParams {
    /// Variational parameters with every standard deviation equal to `std`.
    pub fn with_std(mean: Weights, std: f64) -> Self {
        let p = scalar::softplus_inv(std);
        let spread = mean.map(|t| DenseMatrix::filled(t.rows(), t.cols(), p));
        VariationalParams { mean, spread }
    }

    pub fn std(&self) -> Weights {
        self.spread.map(|t| t.map(scalar::softplus))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Deterministic,
    Variational,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    Deterministic(Weights),
    Variational(VariationalParams),
}

impl Params {
    pub fn kind(&self) -> ParamKind {
        match self {
            Params::Deterministic(_) => ParamKind::Deterministic,
            Params::Variational(_) => ParamKind::Variational,
        }
    }

    /// The point estimate: the weights themselves, or the variational means.
    pub fn mean(&self) -> &Weights {
        match self {
            Params::Deterministic(w) => w,
            Params::Variational(vp) => &vp.mean,
        }
    }

    pub fn config(&self) -> EncoderConfig {
        self.mean().config()
    }

    /// Learnable tensors: weights, or means followed by spreads.
    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        match self {
            Params::Deterministic(w) => w.tensors().to_vec(),
            Params::Variational(vp) => vp.mean.tensors().into_iter().chain(vp.spread.tensors()).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        match self {
            Params::Deterministic(w) => w.tensors_mut().into_iter().collect(),
            Params::Variational(vp) => vp
                .mean
                .tensors_mut()
                .into_iter()
                .chain(vp.spread.tensors_mut())
                .collect(),
        }
    }

    /// Tensor names matching [`tensors`](Self::tensors).
    pub fn tensor_names(&self) -> Vec<String> {
        match self {
            Params::Deterministic(_) => PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            Params::Variational(_) => PARAM_NAMES
                .iter()
                .map(|s| format!("mean/{s}"))
                .chain(PARAM_NAMES.iter().map(|s| format!("spread/{s}")))
                .collect(),
        }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// Glorot-uniform weight matrices and zero biases; variational spreads start
/// at `softplus⁻¹(INIT_STD)`.
pub fn init_params(cfg: &EncoderConfig, rng: &mut Rng, kind: ParamKind) -> Params {
    let mean = Weights::from_fn(cfg, |i, r, c| {
        if PARAM_NAMES[i].starts_with('b') {
            DenseMatrix::zeros(r, c)
        } else {
            glorot(r, c, rng)
        }
    });
    match kind {
        ParamKind::Deterministic => Params::Deterministic(mean),
        ParamKind::Variational => Params::Variational(VariationalParams::with_std(mean, INIT_STD)),
    }
}

/// Standard-normal noise shaped like `like`, drawn tensor by tensor in
/// [`PARAM_NAMES`] order, row-major.
pub fn draw_noise(like: &Weights, rng: &mut Rng) -> Weights {
    like.map(|t| DenseMatrix::from_fn(t.rows(), t.cols(), |_, _| rng.sample(StandardNormal)))
}

/// One draw `w = mean + softplus(spread) ⊙ noise`.
#[derive(Debug, Clone)]
pub struct WeightSample {
    pub weights: Weights,
    pub noise: Weights,
    /// Word position of the weight stream before the draw.
    pub draw_id: u128,
}

pub fn sample_weights(vp: &VariationalParams, rng: &mut Rng) -> WeightSample {
    let draw_id = rng.get_word_pos();
    let noise = draw_noise(&vp.mean, rng);
    let std = vp.std();
    let mut weights = vp.mean.clone();
    for ((w, s), e) in weights.tensors_mut().into_iter().zip(std.tensors()).zip(noise.tensors()) {
        for ((wi, &si), &ei) in w.as_mut_slice().iter_mut().zip(s.as_slice()).zip(e.as_slice()) {
            *wi += si * ei;
        }
    }
    WeightSample {
        weights,
        noise,
        draw_id,
    }
}

/// Reparameterized sample on the tape, differentiable in `mean` and `spread`.
pub fn sample_on_tape(tape: &Tape, mean: &WeightVars, spread: &WeightVars, noise: &Weights) -> WeightVars {
    let m = mean.to_array();
    let p = spread.to_array();
    let e = noise.tensors();
    WeightVars::from_array(std::array::from_fn(|i| {
        let std = tape.softplus(p[i]);
        let eps = tape.leaf(e[i].clone());
        let scaled = tape.mul(std, eps);
        tape.add(m[i], scaled)
    }))
}

/// `Z = relu(Â relu(Â X W1) W2)`.
pub fn encode(tape: &Tape, view: &GraphView, w: &WeightVars) -> Var {
    let adj = view.adjacency.matrix();
    let xw = tape.spmm(&view.features, w.w1);
    let h = tape.relu(tape.spmm(adj, xw));
    let hw = tape.matmul(h, w.w2);
    tape.relu(tape.spmm(adj, hw))
}

/// `H = elu(Z P1 + b1) P2 + b2`.
pub fn project(tape: &Tape, z: Var, w: &WeightVars) -> Var {
    let a = tape.add_row(tape.matmul(z, w.p1), w.b1);
    let a = tape.elu(a);
    tape.add_row(tape.matmul(a, w.p2), w.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize_adjacency, Adjacency, NormalizedAdjacency};
    use crate::ndiff::CsrMatrix;
    use crate::rng::{stream, Stream};
    use std::sync::Arc;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            in_dim: 5,
            hidden: 4,
            out: 3,
            proj_hidden: 4,
        }
    }

    #[test]
    fn deterministic_init_within_glorot_bound() {
        let cfg = EncoderConfig::new(1433);
        let Params::Deterministic(w) = init_params(&cfg, &mut stream(0, Stream::Init), ParamKind::Deterministic)
        else {
            unreachable!()
        };
        let bound = (6.0f64 / (1433.0 + 128.0)).sqrt();
        assert!(w.w1.as_slice().iter().all(|x| x.abs() <= bound));
        assert!(w.b1.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn variational_init_std() {
        let p = init_params(&small_cfg(), &mut stream(0, Stream::Init), ParamKind::Variational);
        let Params::Variational(vp) = p else { unreachable!() };
        for t in vp.std().tensors() {
            assert!(t.as_slice().iter().all(|s| (0.009..=0.011).contains(s)));
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(&small_cfg(), &mut stream(5, Stream::Init), ParamKind::Variational);
        let b = init_params(&small_cfg(), &mut stream(5, Stream::Init), ParamKind::Variational);
        assert_eq!(a, b);
    }

    #[test]
    fn vanishing_std_sample_equals_mean() {
        let Params::Deterministic(mean) = init_params(&small_cfg(), &mut stream(1, Stream::Init), ParamKind::Deterministic)
        else {
            unreachable!()
        };
        let vp = VariationalParams {
            spread: mean.map(|t| DenseMatrix::filled(t.rows(), t.cols(), -40.0)),
            mean: mean.clone(),
        };
        let s = sample_weights(&vp, &mut stream(1, Stream::Weights));
        for (a, b) in s.weights.tensors().iter().zip(mean.tensors()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn zero_features_encode_to_zero() {
        let cfg = small_cfg();
        let w = match init_params(&cfg, &mut stream(2, Stream::Init), ParamKind::Deterministic) {
            Params::Deterministic(w) => w,
            _ => unreachable!(),
        };
        let view = GraphView {
            adjacency: normalize_adjacency(&Adjacency::from_edges(4, [(0, 1), (1, 2)])),
            features: Arc::new(CsrMatrix::from_triplets(4, 5, vec![])),
            kept_edges: 2,
        };
        assert_eq!(w.encode(&view), DenseMatrix::zeros(4, 3));
    }

    #[test]
    fn single_node_encoder_is_an_mlp() {
        let cfg = small_cfg();
        let w = match init_params(&cfg, &mut stream(3, Stream::Init), ParamKind::Deterministic) {
            Params::Deterministic(w) => w,
            _ => unreachable!(),
        };
        let x = DenseMatrix::from_rows(&[&[1.0, 0.0, 2.0, 0.5, 0.0]]);
        let view = GraphView {
            adjacency: NormalizedAdjacency::identity(1),
            features: Arc::new(CsrMatrix::from_dense(&x)),
            kept_edges: 0,
        };
        let relu = |m: DenseMatrix| m.map(scalar::relu);
        let expect = relu(relu(x.matmul(&w.w1)).matmul(&w.w2));
        assert!(w.encode(&view).max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn projection_identity_on_nonnegative_input() {
        let n = 3;
        let t = Tape::new();
        let z = DenseMatrix::from_fn(n, 4, |r, c| (r + c) as f64 * 0.25);
        let w = WeightVars {
            w1: t.leaf(DenseMatrix::zeros(1, 1)),
            w2: t.leaf(DenseMatrix::zeros(1, 1)),
            p1: t.leaf(DenseMatrix::identity(4)),
            b1: t.leaf(DenseMatrix::zeros(1, 4)),
            p2: t.leaf(DenseMatrix::identity(4)),
            b2: t.leaf(DenseMatrix::zeros(1, 4)),
        };
        let zv = t.leaf(z.clone());
        let h = project(&t, zv, &w);
        assert_eq!(*t.value(h), z);

        let zero = Tape::new();
        let w0 = Weights::zeros(&EncoderConfig {
            in_dim: 1,
            hidden: 1,
            out: 4,
            proj_hidden: 4,
        })
        .on_tape(&zero);
        let zv = zero.leaf(z);
        let h = project(&zero, zv, &w0);
        assert_eq!(*zero.value(h), DenseMatrix::zeros(n, 4));
    }
}
