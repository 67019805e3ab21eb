//! Central finite-difference checks for every differentiable operation,
//! shared by the core gradient tests and the acceptance suite.

use std::sync::Arc;

use rand::Rng as _;
use vgcl_core::augment::{make_views, AugmentConfig, GraphView, ViewPair};
use vgcl_core::model::{self, VariationalParams, Weights};
use vgcl_core::ndiff::{CsrMatrix, DenseMatrix, Tape, Var};
use vgcl_core::objective::{
    hyperprior_penalty, hyperprior_with_grad, kl_gaussian, kl_gaussian_with_grad, nt_xent, nt_xent_normalized_with,
    total_loss, Negatives, PriorConfig, Strategy,
};
use vgcl_core::rng::Rng;
use vgcl_core::Params;

use super::{fd_grad, random_graph, random_weights, rel_err, rng, small_cfg, uniform};

pub const CASES: usize = 100;
pub const TOL: f64 = 1e-4;

/// `(check, worst relative error, tolerance)`.
pub type Outcome = (String, f64, f64);

/// Entries bounded away from zero so kinks stay out of the difference stencil.
fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.05..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

/// Checks `sum(op(x) ⊙ R)` for a fixed random `R`, over `CASES` random inputs.
fn check_op(
    seed: u64,
    gen: impl Fn(&mut Rng) -> Vec<DenseMatrix>,
    op: impl Fn(&Tape, &[Var]) -> Var,
) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let xs = gen(&mut r);
        let shape = {
            let tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = op(&tape, &vars);
            let s = tape.value(out).shape();
            s
        };
        let weights = uniform(&mut r, shape.0, shape.1, -1.0, 1.0);
        let build = |tape: &Tape, xs: &[DenseMatrix]| {
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = op(tape, &vars);
            let w = tape.leaf(weights.clone());
            (vars, tape.sum(tape.mul(out, w)))
        };
        let tape = Tape::new();
        let (vars, loss) = build(&tape, &xs);
        tape.backward(loss);
        let fd = fd_grad(
            |xs| {
                let tape = Tape::new();
                let (_, loss) = build(&tape, xs);
                tape.scalar(loss)
            },
            &xs,
        );
        for (v, g) in vars.iter().zip(&fd) {
            worst = worst.max(rel_err(&tape.grad(*v), g));
        }
    }
    worst
}

pub fn elementwise_and_reduction_ops() -> Vec<Outcome> {
    let mut out = Vec::new();
    type Op = fn(&Tape, &[Var]) -> Var;
    let unary: [(&str, Op); 9] = [
        ("relu", |t, v| t.relu(v[0])),
        ("elu", |t, v| t.elu(v[0])),
        ("exp", |t, v| t.exp(v[0])),
        ("softplus", |t, v| t.softplus(v[0])),
        ("square", |t, v| t.square(v[0])),
        ("scale", |t, v| t.scale(v[0], -1.7)),
        ("add_scalar", |t, v| t.add_scalar(v[0], 0.3)),
        ("sum", |t, v| t.sum(v[0])),
        ("mean", |t, v| t.mean(v[0])),
    ];
    for (i, (name, op)) in unary.into_iter().enumerate() {
        let worst = check_op(
            i as u64,
            |r| {
                let (a, b) = dims(r);
                vec![away_from_zero(r, a, b)]
            },
            op,
        );
        out.push((name.to_string(), worst, TOL));
    }

    let worst = check_op(
        20,
        |r| {
            let (a, b) = dims(r);
            vec![uniform(r, a, b, 0.1, 3.0)]
        },
        |t, v| t.log(v[0]),
    );
    out.push(("log".to_string(), worst, TOL));

    let binary: [(&str, Op); 3] = [
        ("add", |t, v| t.add(v[0], v[1])),
        ("sub", |t, v| t.sub(v[0], v[1])),
        ("mul", |t, v| t.mul(v[0], v[1])),
    ];
    for (i, (name, op)) in binary.into_iter().enumerate() {
        let worst = check_op(
            30 + i as u64,
            |r| {
                let (a, b) = dims(r);
                vec![away_from_zero(r, a, b), away_from_zero(r, a, b)]
            },
            op,
        );
        out.push((name.to_string(), worst, TOL));
    }
    out
}

pub fn matmul_add_row_and_spmm() -> Vec<Outcome> {
    let mut out = Vec::new();
    let worst = check_op(
        40,
        |r| {
            let (a, b) = dims(r);
            let c = r.random_range(1..5);
            vec![away_from_zero(r, a, b), away_from_zero(r, b, c)]
        },
        |t, v| t.matmul(v[0], v[1]),
    );
    out.push(("matmul".to_string(), worst, TOL));

    let worst = check_op(
        41,
        |r| {
            let (a, b) = dims(r);
            vec![away_from_zero(r, a, b), away_from_zero(r, 1, b)]
        },
        |t, v| t.add_row(v[0], v[1]),
    );
    out.push(("add_row".to_string(), worst, TOL));

    let mut r = rng(42);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (rows, inner) = dims(&mut r);
        let cols = r.random_range(1..5);
        let s = Arc::new(CsrMatrix::from_dense(&DenseMatrix::from_fn(rows, inner, |_, _| {
            if r.random::<f64>() < 0.5 {
                r.random_range(-2.0..2.0)
            } else {
                0.0
            }
        })));
        let d = away_from_zero(&mut r, inner, cols);
        let w = uniform(&mut r, rows, cols, -1.0, 1.0);
        let eval = |xs: &[DenseMatrix], tape: &Tape| {
            let dv = tape.leaf(xs[0].clone());
            let wv = tape.leaf(w.clone());
            (dv, tape.sum(tape.mul(tape.spmm(&s, dv), wv)))
        };
        let tape = Tape::new();
        let (dv, loss) = eval(std::slice::from_ref(&d), &tape);
        tape.backward(loss);
        let fd = fd_grad(
            |xs| {
                let t = Tape::new();
                let (_, l) = eval(xs, &t);
                t.scalar(l)
            },
            &[d],
        );
        worst = worst.max(rel_err(&tape.grad(dv), &fd[0]));
    }
    out.push(("spmm".to_string(), worst, TOL));
    out
}

pub fn row_normalize_gradient() -> Vec<Outcome> {
    let mut out = Vec::new();
    let worst = check_op(
        50,
        |r| {
            let (a, b) = dims(r);
            vec![away_from_zero(r, a, b + 1)]
        },
        |t, v| t.row_l2_normalize(v[0]),
    );
    out.push(("row_l2_normalize".to_string(), worst, TOL));

    let mut r = rng(51);
    let x = uniform(&mut r, 3, 4, -2.0, 2.0);
    let worst = check_op(
        52,
        |_| vec![x.clone()],
        |t, v| t.row_l2_normalize(v[0]),
    );
    out.push(("3x4 row_l2_normalize".to_string(), worst, 1e-6));
    out
}

fn random_view(r: &mut Rng, n: usize, f: usize) -> GraphView {
    GraphView::unaugmented(&random_graph(r, n, f, 0.4, 2))
}

pub fn encoder_gradient() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut r = rng(60);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let n = r.random_range(2..7);
        let f = r.random_range(1..5);
        let cfg = small_cfg(f, r.random_range(1..4));
        let view = random_view(&mut r, n, f);
        let w = random_weights(&mut r, &cfg, 1.0);
        let out_w = uniform(&mut r, n, cfg.out, -1.0, 1.0);
        let eval = |ws: &[DenseMatrix], tape: &Tape| {
            let vars = [tape.leaf(ws[0].clone()), tape.leaf(ws[1].clone())];
            let wv = model::WeightVars {
                w1: vars[0],
                w2: vars[1],
                p1: tape.leaf(w.p1.clone()),
                b1: tape.leaf(w.b1.clone()),
                p2: tape.leaf(w.p2.clone()),
                b2: tape.leaf(w.b2.clone()),
            };
            let z = model::encode(tape, &view, &wv);
            let o = tape.leaf(out_w.clone());
            (vars, tape.sum(tape.mul(z, o)))
        };
        let xs = [w.w1.clone(), w.w2.clone()];
        let tape = Tape::new();
        let (vars, loss) = eval(&xs, &tape);
        tape.backward(loss);
        let fd = fd_grad(
            |xs| {
                let t = Tape::new();
                let (_, l) = eval(xs, &t);
                t.scalar(l)
            },
            &xs,
        );
        for (v, g) in vars.iter().zip(&fd) {
            worst = worst.max(rel_err(&tape.grad(*v), g));
        }
    }
    out.push(("encode".to_string(), worst, TOL));
    out
}

pub fn projection_gradient() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut r = rng(70);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let n = r.random_range(1..6);
        let d = r.random_range(1..4);
        let cfg = small_cfg(2, d);
        let w = random_weights(&mut r, &cfg, 1.0);
        let z = away_from_zero(&mut r, n, d);
        let out_w = uniform(&mut r, n, d, -1.0, 1.0);
        let xs = vec![z, w.p1.clone(), w.b1.clone(), w.p2.clone(), w.b2.clone()];
        let eval = |xs: &[DenseMatrix], tape: &Tape| {
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let wv = model::WeightVars {
                w1: tape.leaf(w.w1.clone()),
                w2: tape.leaf(w.w2.clone()),
                p1: vars[1],
                b1: vars[2],
                p2: vars[3],
                b2: vars[4],
            };
            let h = model::project(tape, vars[0], &wv);
            let o = tape.leaf(out_w.clone());
            (vars, tape.sum(tape.mul(h, o)))
        };
        let tape = Tape::new();
        let (vars, loss) = eval(&xs, &tape);
        tape.backward(loss);
        let fd = fd_grad(
            |xs| {
                let t = Tape::new();
                let (_, l) = eval(xs, &t);
                t.scalar(l)
            },
            &xs,
        );
        for (v, g) in vars.iter().zip(&fd) {
            worst = worst.max(rel_err(&tape.grad(*v), g));
        }
    }
    out.push(("project".to_string(), worst, TOL));
    out
}

pub fn nt_xent_gradient_on_tape() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut r = rng(80);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let n = r.random_range(2..8);
        let d = r.random_range(1..5);
        let tau = r.random_range(0.2..1.5);
        let neg = if case % 2 == 0 {
            Negatives::InterIntra
        } else {
            Negatives::InterOnly
        };
        let xs = vec![uniform(&mut r, n, d, -1.0, 1.0), uniform(&mut r, n, d, -1.0, 1.0)];
        let eval = |xs: &[DenseMatrix], tape: &Tape| {
            let a = tape.leaf(xs[0].clone());
            let b = tape.leaf(xs[1].clone());
            let (loss, _) = nt_xent(tape, a, b, tau, neg).unwrap();
            ([a, b], loss)
        };
        let tape = Tape::new();
        let (vars, loss) = eval(&xs, &tape);
        tape.backward(loss);
        let fd = fd_grad(
            |xs| {
                let t = Tape::new();
                let (_, l) = eval(xs, &t);
                t.scalar(l)
            },
            &xs,
        );
        for (v, g) in vars.iter().zip(&fd) {
            worst = worst.max(rel_err(&tape.grad(*v), g));
        }
    }
    out.push(("nt_xent".to_string(), worst, TOL));
    out
}

fn unit_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        out.row_mut(i).iter_mut().for_each(|x| *x /= norm);
    }
    out
}

pub fn nt_xent_kernel_gradients_for_both_strategies() -> Vec<Outcome> {
    let mut out = Vec::new();
    for (seed, strategy) in [(90, Strategy::Full), (91, Strategy::Blocked)] {
        let mut r = rng(seed);
        let mut worst: f64 = 0.0;
        for case in 0..CASES {
            let n = r.random_range(2..8);
            let d = r.random_range(1..5);
            let tau = r.random_range(0.2..1.5);
            let neg = if case % 2 == 0 {
                Negatives::InterIntra
            } else {
                Negatives::InterOnly
            };
            let u = unit_rows(&uniform(&mut r, n, d, -1.0, 1.0));
            let v = unit_rows(&uniform(&mut r, n, d, -1.0, 1.0));
            let out = nt_xent_normalized_with(&u, &v, tau, neg, true, strategy).unwrap();
            let (gu, gv) = out.grads.unwrap();
            let fd = fd_grad(
                |xs| {
                    nt_xent_normalized_with(&xs[0], &xs[1], tau, neg, false, strategy)
                        .unwrap()
                        .loss
                },
                &[u, v],
            );
            worst = worst.max(rel_err(&gu, &fd[0])).max(rel_err(&gv, &fd[1]));
        }
        out.push((format!("{strategy:?} kernel"), worst, TOL));
    }
    out
}

fn random_vp(r: &mut Rng, d: usize) -> VariationalParams {
    let cfg = small_cfg(2, d);
    let mean = random_weights(r, &cfg, 1.0);
    let spread = random_weights(r, &cfg, 3.0);
    VariationalParams { mean, spread }
}

fn vp_from(xs: &[DenseMatrix]) -> VariationalParams {
    VariationalParams {
        mean: Weights::from_tensors(xs[..6].to_vec()).unwrap(),
        spread: Weights::from_tensors(xs[6..].to_vec()).unwrap(),
    }
}

fn flatten(vp: &VariationalParams) -> Vec<DenseMatrix> {
    vp.mean.tensors().into_iter().chain(vp.spread.tensors()).cloned().collect()
}

fn worst_pair(analytic: (&Weights, &Weights), fd: &[DenseMatrix]) -> f64 {
    analytic
        .0
        .tensors()
        .into_iter()
        .chain(analytic.1.tensors())
        .zip(fd)
        .map(|(a, b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

pub fn kl_gradient() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut r = rng(100);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let d = r.random_range(1..3);
        let vp = random_vp(&mut r, d);
        let sigma_sq = r.random_range(0.01..4.0);
        let (_, gm, gp) = kl_gaussian_with_grad(&vp, sigma_sq);
        let fd = fd_grad(|xs| kl_gaussian(&vp_from(xs), sigma_sq), &flatten(&vp));
        worst = worst.max(worst_pair((&gm, &gp), &fd));
    }
    out.push(("kl_gaussian".to_string(), worst, TOL));
    out
}

pub fn hyperprior_gradient() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut r = rng(110);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let d = r.random_range(1..3);
        let vp = random_vp(&mut r, d);
        let mut cfg = PriorConfig::new(1.0);
        if case % 3 != 1 {
            cfg.sigma0 = Some(r.random_range(0.1..2.0));
        }
        if case % 3 != 2 {
            cfg.mu_p = Some(r.random_range(-3.0..0.0));
            cfg.sigma_p_sq = Some(r.random_range(0.01..2.0));
        }
        let (_, gm, gp) = hyperprior_with_grad(&vp, &cfg);
        let fd = fd_grad(|xs| hyperprior_penalty(&vp_from(xs), &cfg), &flatten(&vp));
        worst = worst.max(worst_pair((&gm, &gp), &fd));
    }
    out.push(("hyperprior_penalty".to_string(), worst, TOL));
    out
}

fn toy_views(r: &mut Rng, n: usize, f: usize) -> ViewPair {
    let g = random_graph(r, n, f, 0.5, 2);
    let aug = AugmentConfig {
        p_f1: 0.2,
        p_f2: 0.3,
        p_e1: 0.2,
        p_e2: 0.3,
        ..AugmentConfig::none()
    };
    make_views(&g, &aug, r)
}

pub fn total_loss_gradient() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut r = rng(120);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let n = r.random_range(3..7);
        let f = r.random_range(2..5);
        let views = toy_views(&mut r, n, f);
        let cfg = small_cfg(f, 2);
        let mut prior = PriorConfig::new(r.random_range(0.05..1.0));
        prior.tau = r.random_range(0.3..1.0);
        if case % 2 == 0 {
            prior.sigma0 = Some(0.5);
            prior.mu_p = Some(-2.0);
            prior.sigma_p_sq = Some(0.5);
        }
        let samples = 1 + case % 3;
        let noise_seed = r.random::<u64>();

        let (params, xs) = if case % 4 == 3 {
            let w = random_weights(&mut r, &cfg, 1.0);
            let xs: Vec<DenseMatrix> = w.tensors().into_iter().cloned().collect();
            (Params::Deterministic(w), xs)
        } else {
            let mut vp = random_vp(&mut r, 2);
            vp.mean = random_weights(&mut r, &cfg, 1.0);
            vp.spread = random_weights(&mut r, &cfg, 1.0).map(|t| t.map(|x| x - 2.0));
            let xs = flatten(&vp);
            (Params::Variational(vp), xs)
        };
        let rebuild = |xs: &[DenseMatrix]| match &params {
            Params::Deterministic(_) => Params::Deterministic(Weights::from_tensors(xs.to_vec()).unwrap()),
            Params::Variational(_) => Params::Variational(vp_from(xs)),
        };
        let eval = |p: &Params| total_loss(&views, p, &prior, samples, &mut rng(noise_seed)).unwrap();
        let analytic = eval(&params);
        let fd = fd_grad(|xs| eval(&rebuild(xs)).breakdown.total, &xs);
        for (a, b) in analytic.grads.iter().zip(&fd) {
            worst = worst.max(rel_err(a, b));
        }
    }
    out.push(("total_loss".to_string(), worst, TOL));
    out
}

/// Every check, in order.
pub fn all() -> Vec<Outcome> {
    [elementwise_and_reduction_ops, matmul_add_row_and_spmm, row_normalize_gradient, encoder_gradient, projection_gradient, nt_xent_gradient_on_tape, nt_xent_kernel_gradients_for_both_strategies, kl_gradient, hyperprior_gradient, total_loss_gradient]
    .iter()
    .flat_map(|f| f())
    .collect()
}
