//! Contrastive loss, Gaussian KL, hyperprior penalty and the combined
//! training objective.

use serde::{Deserialize, Serialize};

use crate::augment::ViewPair;
use crate::error::{Error, Result};
use crate::model::{self, draw_noise, Params, VariationalParams, Weights};
use crate::ndiff::{gemm, gemm_into, scalar, DenseMatrix, Tape, Var};
use crate::rng::Rng;

/// Row block of the similarity matrices; bounds memory at `O(BLOCK * n)`.
pub const BLOCK: usize = 2048;

pub const DEFAULT_TAU: f64 = 0.5;

/// Which non-matching pairs enter the contrastive denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    /// Other nodes from the opposite view and from the anchor's own view.
    #[default]
    InterIntra,
    /// Other nodes from the opposite view only.
    InterOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Prior weight variance σ².
    pub sigma_sq: f64,
    /// Hyperprior std on the variational means; `None` disables the term.
    pub sigma0: Option<f64>,
    /// Hyperprior mean on the spreads.
    pub mu_p: Option<f64>,
    /// Hyperprior variance on the spreads; `None` disables the term.
    pub sigma_p_sq: Option<f64>,
    pub tau: f64,
    /// Weight of the KL term; `None` means `1/n`.
    pub kl_scale: Option<f64>,
    /// Weight of the hyperprior term; `None` means the KL weight.
    pub hp_scale: Option<f64>,
    pub negatives: Negatives,
}

impl PriorConfig {
    pub fn new(sigma_sq: f64) -> Self {
        PriorConfig {
            sigma_sq,
            sigma0: None,
            mu_p: None,
            sigma_p_sq: None,
            tau: DEFAULT_TAU,
            kl_scale: None,
            hp_scale: None,
            negatives: Negatives::InterIntra,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid("prior", format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("sigma_sq", self.sigma_sq)?;
        positive("tau", self.tau)?;
        if let Some(s) = self.sigma0 {
            positive("sigma0", s)?;
        }
        if let Some(s) = self.sigma_p_sq {
            positive("sigma_p_sq", s)?;
        }
        if self.sigma_p_sq.is_some() != self.mu_p.is_some() {
            return Err(Error::invalid("prior", "mu_p and sigma_p_sq must be given together"));
        }
        if let Some(m) = self.mu_p {
            if !m.is_finite() {
                return Err(Error::invalid("prior", format!("mu_p must be finite, got {m}")));
            }
        }
        for (name, s) in [("kl_scale", self.kl_scale), ("hp_scale", self.hp_scale)] {
            if let Some(s) = s {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::invalid("prior", format!("{name} must be >= 0, got {s}")));
                }
            }
        }
        Ok(())
    }

    pub fn kl_weight(&self, n: usize) -> f64 {
        self.kl_scale.unwrap_or(1.0 / n as f64)
    }

    pub fn hp_weight(&self, n: usize) -> f64 {
        self.hp_scale.unwrap_or_else(|| self.kl_weight(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub infonce: f64,
    pub per_node: Vec<f64>,
    pub kl: f64,
    pub hyperprior: f64,
    pub total: f64,
}

/// Contrastive loss value and, optionally, its gradients with respect to the
/// row-normalized embeddings.
#[derive(Debug, Clone)]
pub struct NtXentOutput {
    pub loss: f64,
    pub per_node: Vec<f64>,
    pub grads: Option<(DenseMatrix, DenseMatrix)>,
}

fn check_inputs(h1: &DenseMatrix, h2: &DenseMatrix, tau: f64) -> Result<()> {
    if h1.shape() != h2.shape() {
        return Err(Error::invalid(
            "embeddings",
            format!("view shapes differ: {:?} vs {:?}", h1.shape(), h2.shape()),
        ));
    }
    if h1.rows() < 2 {
        return Err(Error::invalid("embeddings", "contrastive loss needs at least 2 nodes"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("temperature", format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// Largest graph evaluated with whole `n × n` similarity matrices.
pub const FULL_MAX_NODES: usize = 6000;
/// Below this temperature a fixed logit shift could underflow; the row-max
/// path is used instead.
pub const FULL_MIN_TAU: f64 = 0.01;

/// How [`nt_xent_normalized_with`] lays out the similarity computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Whole matrices when they fit and `tau` allows, row blocks otherwise.
    Auto,
    /// Whole similarity matrices, reusing `U Vᵀ` for both directions.
    Full,
    /// `BLOCK` rows at a time, each row shifted by its own maximum.
    Blocked,
}

/// Symmetrized loss on unit-norm rows `u`, `v`.
pub fn nt_xent_normalized(
    u: &DenseMatrix,
    v: &DenseMatrix,
    tau: f64,
    negatives: Negatives,
    with_grad: bool,
) -> Result<NtXentOutput> {
    nt_xent_normalized_with(u, v, tau, negatives, with_grad, Strategy::Auto)
}

pub fn nt_xent_normalized_with(
    u: &DenseMatrix,
    v: &DenseMatrix,
    tau: f64,
    negatives: Negatives,
    with_grad: bool,
    strategy: Strategy,
) -> Result<NtXentOutput> {
    check_inputs(u, v, tau)?;
    let n = u.rows();
    let full = match strategy {
        Strategy::Auto => n <= FULL_MAX_NODES && tau >= FULL_MIN_TAU,
        Strategy::Full => true,
        Strategy::Blocked => false,
    };
    if full {
        return Ok(nt_xent_full(u, v, tau, negatives, with_grad));
    }
    let intra = negatives == Negatives::InterIntra;
    let coef = 1.0 / (2.0 * n as f64 * tau);

    let mut lu = vec![0.0; n];
    let mut lv = vec![0.0; n];
    let mut grads = with_grad.then(|| (DenseMatrix::zeros(n, u.cols()), DenseMatrix::zeros(n, u.cols())));

    match grads.as_mut() {
        Some((gu, gv)) => {
            one_direction(u, v, tau, intra, coef, &mut lu, Some((&mut *gu, &mut *gv)));
            one_direction(v, u, tau, intra, coef, &mut lv, Some((&mut *gv, &mut *gu)));
        }
        None => {
            one_direction(u, v, tau, intra, coef, &mut lu, None);
            one_direction(v, u, tau, intra, coef, &mut lv, None);
        }
    }

    let per_node: Vec<f64> = lu.iter().zip(&lv).map(|(a, b)| 0.5 * (a + b)).collect();
    let loss = per_node.iter().sum::<f64>() / n as f64;
    Ok(NtXentOutput { loss, per_node, grads })
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// An `rows × cols` matrix with unspecified contents, backed by a reused
/// allocation when one is available.
fn scratch(rows: usize, cols: usize) -> DenseMatrix {
    let mut buf = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    if buf.len() != rows * cols {
        buf.clear();
        buf.resize(rows * cols, 0.0);
    }
    DenseMatrix::from_vec(rows, cols, buf)
}

fn release(m: DenseMatrix) {
    SCRATCH.with(|s| {
        let mut pool = s.borrow_mut();
        if pool.len() < 3 {
            pool.push(m.into_vec());
        }
    });
}

const SYM_BLOCK: usize = 256;
const TILE: usize = 64;

/// `exp(x xᵀ / tau - m)` with a zero diagonal, where `m` is the largest
/// logit. Only the upper triangle is multiplied and exponentiated; the
/// lower one is mirrored tile by tile. Returns the matrix, `m` and its row
/// sums.
fn exp_intra(x: &DenseMatrix, inv_tau: f64) -> (DenseMatrix, f64, Vec<f64>) {
    let n = x.rows();
    let mut l = scratch(n, n);
    for bs in (0..n).step_by(SYM_BLOCK) {
        let be = (bs + SYM_BLOCK).min(n);
        let c = &mut l.as_mut_slice()[bs * n + bs..];
        gemm_into(inv_tau, x.rows_view(bs, be), x.rows_view(bs, n).t(), 0.0, c, n as isize);
    }
    let mut m = f64::NEG_INFINITY;
    for i in 0..n {
        m = l.row(i)[i..].iter().copied().fold(m, f64::max);
    }
    let data = l.as_mut_slice();
    for ti in (0..n).step_by(TILE) {
        let te = (ti + TILE).min(n);
        for tk in (ti..n).step_by(TILE) {
            let ke = (tk + TILE).min(n);
            for i in ti..te {
                for k in tk.max(i + 1)..ke {
                    let y = (data[i * n + k] - m).exp();
                    data[i * n + k] = y;
                    data[k * n + i] = y;
                }
            }
        }
    }
    for i in 0..n {
        data[i * n + i] = 0.0;
    }
    let sums = (0..n).map(|i| l.row(i).iter().sum()).collect();
    (l, m, sums)
}

/// Log of `e^a·x + e^b·y` for nonnegative `x`, `y`.
fn ln_sum2(a: f64, x: f64, b: f64, y: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() * x + (b - m).exp() * y).ln()
}

/// Whole-matrix evaluation. Logits are cosines over `tau`, so shifting each
/// matrix by its global maximum keeps every row sum at least
/// `exp(-2 / tau)`, far from underflow for `tau >= FULL_MIN_TAU`.
fn nt_xent_full(u: &DenseMatrix, v: &DenseMatrix, tau: f64, negatives: Negatives, with_grad: bool) -> NtXentOutput {
    let (n, d) = u.shape();
    let inv_tau = 1.0 / tau;
    let intra = negatives == Negatives::InterIntra;

    let mut euv = scratch(n, n);
    gemm(inv_tau, u.view(), v.view().t(), 0.0, &mut euv);
    let positive: Vec<f64> = (0..n).map(|i| euv.get(i, i)).collect();
    let m_uv = euv.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut row_sum = vec![0.0; n];
    let mut col_sum = vec![0.0; n];
    for (i, rs) in row_sum.iter_mut().enumerate() {
        for (x, cs) in euv.row_mut(i).iter_mut().zip(col_sum.iter_mut()) {
            *x = (*x - m_uv).exp();
            *rs += *x;
            *cs += *x;
        }
    }

    let (mut euu, mut evv) = (DenseMatrix::zeros(0, 0), DenseMatrix::zeros(0, 0));
    let (mut lse_u, mut lse_v) = (vec![0.0; n], vec![0.0; n]);
    let (mut m_uu, mut m_vv) = (0.0, 0.0);
    if intra {
        let qu;
        let qv;
        (euu, m_uu, qu) = exp_intra(u, inv_tau);
        (evv, m_vv, qv) = exp_intra(v, inv_tau);
        for i in 0..n {
            lse_u[i] = ln_sum2(m_uv, row_sum[i], m_uu, qu[i]);
            lse_v[i] = ln_sum2(m_uv, col_sum[i], m_vv, qv[i]);
        }
    } else {
        for i in 0..n {
            lse_u[i] = m_uv + row_sum[i].ln();
            lse_v[i] = m_uv + col_sum[i].ln();
        }
    }

    let per_node: Vec<f64> = (0..n)
        .map(|i| 0.5 * ((lse_u[i] - positive[i]) + (lse_v[i] - positive[i])))
        .collect();
    let loss = per_node.iter().sum::<f64>() / n as f64;
    if !with_grad {
        for e in [euv, euu, evv] {
            release(e);
        }
        return NtXentOutput {
            loss,
            per_node,
            grads: None,
        };
    }

    // Softmax weights: anchor u_i puts e^{m_uv - lse_u[i]}·euv[i][k] on v_k,
    // anchor v_k puts e^{m_uv - lse_v[k]}·euv[i][k] on u_i.
    let coef = 1.0 / (2.0 * n as f64 * tau);
    let a: Vec<f64> = lse_u.iter().map(|l| (m_uv - l).exp()).collect();
    let b: Vec<f64> = lse_v.iter().map(|l| (m_uv - l).exp()).collect();
    for i in 0..n {
        let row = euv.row_mut(i);
        for (x, bk) in row.iter_mut().zip(&b) {
            *x *= coef * (a[i] + bk);
        }
        row[i] -= 2.0 * coef;
    }
    let mut gu = DenseMatrix::zeros(n, d);
    let mut gv = DenseMatrix::zeros(n, d);
    gemm(1.0, euv.view(), v.view(), 0.0, &mut gu);
    gemm(1.0, euv.view().t(), u.view(), 0.0, &mut gv);
    release(euv);

    if intra {
        // Each intra similarity appears in the denominators of both its
        // endpoints, so the coefficient matrix is symmetric.
        for (e, m, lse, x, g) in [(&mut euu, m_uu, &lse_u, u, &mut gu), (&mut evv, m_vv, &lse_v, v, &mut gv)] {
            let w: Vec<f64> = lse.iter().map(|l| coef * (m - l).exp()).collect();
            for i in 0..n {
                for (y, wk) in e.row_mut(i).iter_mut().zip(&w) {
                    *y *= w[i] + wk;
                }
            }
            gemm(1.0, e.view(), x.view(), 1.0, g);
        }
    }
    release(euu);
    release(evv);

    NtXentOutput {
        loss,
        per_node,
        grads: Some((gu, gv)),
    }
}

/// Losses of anchors in `a` against positives in `b`; accumulates
/// `coef·τ·∂ℓ/∂a` into `ga` and `coef·τ·∂ℓ/∂b` into `gb`.
fn one_direction(
    a: &DenseMatrix,
    b: &DenseMatrix,
    tau: f64,
    intra: bool,
    coef: f64,
    losses: &mut [f64],
    mut grads: Option<(&mut DenseMatrix, &mut DenseMatrix)>,
) {
    let (n, d) = a.shape();
    let inv_tau = 1.0 / tau;
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let m = end - start;
        let mut sab = DenseMatrix::zeros(m, n);
        gemm(inv_tau, a.rows_view(start, end), b.view().t(), 0.0, &mut sab);
        let mut saa = if intra {
            let mut s = DenseMatrix::zeros(m, n);
            gemm(inv_tau, a.rows_view(start, end), a.view().t(), 0.0, &mut s);
            s
        } else {
            DenseMatrix::zeros(0, 0)
        };

        for r in 0..m {
            let i = start + r;
            let row_ab = sab.row_mut(r);
            let positive = row_ab[i];
            let mut mx = row_ab.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if intra {
                let row_aa = saa.row(r);
                for (k, &x) in row_aa.iter().enumerate() {
                    if k != i && x > mx {
                        mx = x;
                    }
                }
            }
            let mut total = 0.0;
            for x in row_ab.iter_mut() {
                *x = (*x - mx).exp();
                total += *x;
            }
            if intra {
                let row_aa = saa.row_mut(r);
                row_aa[i] = 0.0;
                for (k, x) in row_aa.iter_mut().enumerate() {
                    if k != i {
                        *x = (*x - mx).exp();
                        total += *x;
                    }
                }
            }
            losses[i] = mx + total.ln() - positive;

            if grads.is_some() {
                let w = coef / total;
                let row_ab = sab.row_mut(r);
                row_ab.iter_mut().for_each(|x| *x *= w);
                row_ab[i] -= coef;
                if intra {
                    saa.row_mut(r).iter_mut().for_each(|x| *x *= w);
                }
            }
        }

        if let Some((ga, gb)) = grads.as_mut() {
            let ga_rows = &mut ga.as_mut_slice()[start * d..end * d];
            gemm_into(1.0, sab.view(), b.view(), 1.0, ga_rows, d as isize);
            gemm(1.0, sab.view().t(), a.rows_view(start, end), 1.0, gb);
            if intra {
                let ga_rows = &mut ga.as_mut_slice()[start * d..end * d];
                gemm_into(1.0, saa.view(), a.view(), 1.0, ga_rows, d as isize);
                gemm(1.0, saa.view().t(), a.rows_view(start, end), 1.0, ga);
            }
        }
    }
}

/// Loss value on raw (unnormalized) embeddings, without gradients.
pub fn nt_xent_value(h1: &DenseMatrix, h2: &DenseMatrix, tau: f64, negatives: Negatives) -> Result<NtXentOutput> {
    check_inputs(h1, h2, tau)?;
    let tape = Tape::new();
    let u = tape.row_l2_normalize(tape.leaf(h1.clone()));
    let v = tape.row_l2_normalize(tape.leaf(h2.clone()));
    let (u, v) = (tape.value(u), tape.value(v));
    nt_xent_normalized(&u, &v, tau, negatives, false)
}

/// Differentiable loss on the tape; returns the scalar node and per-node losses.
pub fn nt_xent(tape: &Tape, h1: Var, h2: Var, tau: f64, negatives: Negatives) -> Result<(Var, Vec<f64>)> {
    check_inputs(&tape.value(h1), &tape.value(h2), tau)?;
    let u = tape.row_l2_normalize(h1);
    let v = tape.row_l2_normalize(h2);
    let out = nt_xent_normalized(&tape.value(u), &tape.value(v), tau, negatives, true)?;
    let (gu, gv) = out.grads.expect("gradients requested");
    Ok((tape.fused_scalar(out.loss, vec![(u, gu), (v, gv)]), out.per_node))
}

/// `ln softplus(p)` without underflow for very negative `p`.
fn ln_softplus(p: f64) -> f64 {
    if p < -20.0 {
        p - 0.5 * p.exp()
    } else {
        scalar::softplus(p).ln()
    }
}

/// `d ln softplus(p) / dp = sigmoid(p) / softplus(p)`.
fn d_ln_softplus(p: f64) -> f64 {
    if p < -20.0 {
        1.0 - 0.5 * p.exp()
    } else {
        scalar::sigmoid(p) / scalar::softplus(p)
    }
}

/// Closed-form `KL(q(w|θ) ‖ N(0, σ²))` summed over every weight, with
/// gradients with respect to the means and spreads.
pub fn kl_gaussian_with_grad(vp: &VariationalParams, sigma_sq: f64) -> (f64, Weights, Weights) {
    let ln_sigma = 0.5 * sigma_sq.ln();
    let mut kl = 0.0;
    let mut gm = Weights::zeros(&vp.mean.config());
    let mut gp = gm.clone();
    let tensors = vp.mean.tensors().into_iter().zip(vp.spread.tensors());
    for ((mu_t, p_t), (gm_t, gp_t)) in tensors.zip(gm.tensors_mut().into_iter().zip(gp.tensors_mut())) {
        let slots = mu_t.as_slice().iter().zip(p_t.as_slice());
        for ((&mu, &p), (g_mu, g_p)) in slots.zip(gm_t.as_mut_slice().iter_mut().zip(gp_t.as_mut_slice())) {
            let s = scalar::softplus(p);
            kl += ln_sigma - ln_softplus(p) + (s * s + mu * mu) / (2.0 * sigma_sq) - 0.5;
            *g_mu = mu / sigma_sq;
            *g_p = -d_ln_softplus(p) + s * scalar::sigmoid(p) / sigma_sq;
        }
    }
    (kl, gm, gp)
}

pub fn kl_gaussian(vp: &VariationalParams, sigma_sq: f64) -> f64 {
    kl_gaussian_with_grad(vp, sigma_sq).0
}

/// Negative log hyperprior density (constants dropped) with gradients.
/// Disabled terms contribute nothing.
pub fn hyperprior_with_grad(vp: &VariationalParams, cfg: &PriorConfig) -> (f64, Weights, Weights) {
    let mut value = 0.0;
    let mut gm = Weights::zeros(&vp.mean.config());
    let mut gp = gm.clone();
    if let Some(s0) = cfg.sigma0 {
        let prec = 1.0 / (s0 * s0);
        for (mu_t, g_t) in vp.mean.tensors().into_iter().zip(gm.tensors_mut()) {
            for (&mu, g) in mu_t.as_slice().iter().zip(g_t.as_mut_slice()) {
                value += 0.5 * mu * mu * prec;
                *g = mu * prec;
            }
        }
    }
    if let (Some(mu_p), Some(sp2)) = (cfg.mu_p, cfg.sigma_p_sq) {
        for (p_t, g_t) in vp.spread.tensors().into_iter().zip(gp.tensors_mut()) {
            for (&p, g) in p_t.as_slice().iter().zip(g_t.as_mut_slice()) {
                let d = p - mu_p;
                value += 0.5 * d * d / sp2;
                *g = d / sp2;
            }
        }
    }
    (value, gm, gp)
}

pub fn hyperprior_penalty(vp: &VariationalParams, cfg: &PriorConfig) -> f64 {
    hyperprior_with_grad(vp, cfg).0
}

/// Loss components and gradients with respect to
/// [`Params::tensors`](crate::model::Params::tensors), in the same order.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub breakdown: LossBreakdown,
    pub grads: Vec<DenseMatrix>,
}

fn views_loss(
    tape: &Tape,
    views: &ViewPair,
    w: &model::WeightVars,
    prior: &PriorConfig,
) -> Result<(Var, Vec<f64>)> {
    let h1 = model::project(tape, model::encode(tape, &views.first, w), w);
    let h2 = model::project(tape, model::encode(tape, &views.second, w), w);
    nt_xent(tape, h1, h2, prior.tau, prior.negatives)
}

/// Per-node contrastive losses of concrete weights on a view pair.
pub fn per_node_loss(views: &ViewPair, w: &Weights, prior: &PriorConfig) -> Result<Vec<f64>> {
    let h1 = project_plain(w, &w.encode(&views.first));
    let h2 = project_plain(w, &w.encode(&views.second));
    Ok(nt_xent_value(&h1, &h2, prior.tau, prior.negatives)?.per_node)
}

fn project_plain(w: &Weights, z: &DenseMatrix) -> DenseMatrix {
    let tape = Tape::new();
    let wv = w.on_tape(&tape);
    let zv = tape.leaf(z.clone());
    let h = model::project(&tape, zv, &wv);
    let out = tape.value(h).clone();
    out
}

/// The training objective and its gradient.
///
/// Deterministic parameters: one forward pass, no KL or hyperprior.
/// Variational parameters: the contrastive loss is averaged over `samples`
/// reparameterized weight draws from `rng`, then the scaled KL and
/// hyperprior are added.
pub fn total_loss(
    views: &ViewPair,
    params: &Params,
    prior: &PriorConfig,
    samples: usize,
    rng: &mut Rng,
) -> Result<LossAndGrad> {
    let n = views.first.num_nodes();
    match params {
        Params::Deterministic(w) => {
            let tape = Tape::new();
            let wv = w.on_tape(&tape);
            let (loss, per_node) = views_loss(&tape, views, &wv, prior)?;
            let infonce = tape.scalar(loss);
            tape.backward(loss);
            let grads = wv.grads(&tape).tensors().into_iter().cloned().collect();
            Ok(LossAndGrad {
                breakdown: LossBreakdown {
                    infonce,
                    per_node,
                    kl: 0.0,
                    hyperprior: 0.0,
                    total: infonce,
                },
                grads,
            })
        }
        Params::Variational(vp) => {
            prior.validate()?;
            if samples == 0 {
                return Err(Error::invalid("samples", "at least one weight sample is required"));
            }
            let cfg = vp.mean.config();
            let mut gm = Weights::zeros(&cfg);
            let mut gp = Weights::zeros(&cfg);
            let mut infonce = 0.0;
            let mut per_node = vec![0.0; n];
            let inv_s = 1.0 / samples as f64;
            for _ in 0..samples {
                let noise = draw_noise(&vp.mean, rng);
                let tape = Tape::new();
                let mean = vp.mean.on_tape(&tape);
                let spread = vp.spread.on_tape(&tape);
                let w = model::sample_on_tape(&tape, &mean, &spread, &noise);
                let (loss, pn) = views_loss(&tape, views, &w, prior)?;
                infonce += inv_s * tape.scalar(loss);
                for (acc, x) in per_node.iter_mut().zip(pn) {
                    *acc += inv_s * x;
                }
                tape.backward(loss);
                for (acc, v) in gm.tensors_mut().into_iter().zip(mean.to_array()) {
                    acc.axpy(inv_s, &tape.grad(v));
                }
                for (acc, v) in gp.tensors_mut().into_iter().zip(spread.to_array()) {
                    acc.axpy(inv_s, &tape.grad(v));
                }
            }

            let (kl, kl_gm, kl_gp) = kl_gaussian_with_grad(vp, prior.sigma_sq);
            let (hp, hp_gm, hp_gp) = hyperprior_with_grad(vp, prior);
            let (ks, hs) = (prior.kl_weight(n), prior.hp_weight(n));
            for (acc, (k, h)) in gm.tensors_mut().into_iter().zip(kl_gm.tensors().into_iter().zip(hp_gm.tensors())) {
                acc.axpy(ks, k);
                acc.axpy(hs, h);
            }
            for (acc, (k, h)) in gp.tensors_mut().into_iter().zip(kl_gp.tensors().into_iter().zip(hp_gp.tensors())) {
                acc.axpy(ks, k);
                acc.axpy(hs, h);
            }
            let grads = gm.tensors().into_iter().chain(gp.tensors()).cloned().collect();
            Ok(LossAndGrad {
                breakdown: LossBreakdown {
                    infonce,
                    per_node,
                    kl,
                    hyperprior: hp,
                    total: infonce + ks * kl + hs * hp,
                },
                grads,
            })
        }
    }
}
