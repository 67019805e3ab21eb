mod common;

use common::{random_graph, random_weights, rng, small_cfg, uniform};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use vgcl_core::augment::{make_views, AugmentConfig};
use vgcl_core::model::VariationalParams;
use vgcl_core::ndiff::DenseMatrix;
use vgcl_core::objective::{per_node_loss, PriorConfig};
use vgcl_core::rng::{stream, Stream};
use vgcl_core::uncertainty::{
    astd, astd_norm, cmds, collect_draws, expected_likelihood, psfv, retention_curve, waic, VariationSource,
};
use vgcl_core::{EmbeddingSamples, Error, LikelihoodMatrix, Measure, Params, ScoreVector};

fn column(values: &[f64]) -> LikelihoodMatrix {
    LikelihoodMatrix::from_values(DenseMatrix::from_vec(values.len(), 1, values.to_vec())).unwrap()
}

fn positive_column() -> impl Strategy<Value = Vec<f64>> {
    (2usize..=64).prop_flat_map(|m| prop::collection::vec(1e-6f64..1e3, m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn cmds_bounds_and_scale_invariance(col in positive_column(), c in 1e-6f64..1e6) {
        let m = col.len() as f64;
        let s = cmds(&column(&col)).unwrap().scores[0];
        prop_assert!(s >= 1.0 / m - 1e-12 && s <= 1.0 + 1e-12, "{s} for M = {m}");
        let scaled: Vec<f64> = col.iter().map(|v| v * c).collect();
        let t = cmds(&column(&scaled)).unwrap().scores[0];
        prop_assert!((s - t).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn cmds_is_invariant_to_draw_order(mut col in positive_column(), seed in any::<u64>()) {
        let s = cmds(&column(&col)).unwrap().scores[0];
        col.shuffle(&mut rng(seed));
        let t = cmds(&column(&col)).unwrap().scores[0];
        prop_assert!((s - t).abs() <= 1e-12);
    }

    #[test]
    fn waic_never_exceeds_expected_likelihood(col in positive_column()) {
        let l = column(&col);
        prop_assert!(waic(&l).scores[0] <= expected_likelihood(&l).scores[0]);
    }
}

#[test]
fn cmds_extremes_over_every_draw_count() {
    for m in 2..=64 {
        let uniform_col = vec![0.37; m];
        assert!((cmds(&column(&uniform_col)).unwrap().scores[0] - 1.0).abs() <= 1e-12);
        let mut one_hot = vec![1e-300; m];
        one_hot[m / 2] = 1.0;
        let s = cmds(&column(&one_hot)).unwrap().scores[0];
        assert!((s - 1.0 / m as f64).abs() <= 1e-12, "M = {m}: {s}");
    }
    let s = cmds(&column(&[0.75, 0.25])).unwrap().scores[0];
    assert!((s - 0.8).abs() <= 1e-15);
}

#[test]
fn equal_log_variances_give_matching_orders() {
    let mut r = rng(1);
    let n = 40;
    let base: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..0.0)).collect();
    let offsets = [-0.4, 0.1, 0.3];
    let l = LikelihoodMatrix::from_values(DenseMatrix::from_fn(3, n, |j, i| (base[i] + offsets[j]).exp())).unwrap();
    let rank = |s: &ScoreVector| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
        idx
    };
    assert_eq!(rank(&expected_likelihood(&l)), rank(&waic(&l)));
}

fn samples(draws: Vec<DenseMatrix>, source: VariationSource) -> EmbeddingSamples {
    EmbeddingSamples { draws, source }
}

#[test]
fn spread_measures_hand_cases() {
    let d = 128;
    let a = DenseMatrix::zeros(1, d);
    let mut b = DenseMatrix::zeros(1, d);
    b.set(0, 5, 2.0);
    let e = samples(vec![a.clone(), b.clone()], VariationSource::Weights);
    assert!((astd(&e).unwrap().scores[0] - 1.0 / 128.0).abs() < 1e-15);
    let e = samples(vec![a.clone(), b.clone()], VariationSource::Augmentations);
    assert!((psfv(&e).unwrap().scores[0] - 1.0 / 128.0).abs() < 1e-15);

    let same = samples(vec![b.clone(), b.clone(), b.clone()], VariationSource::Both);
    assert_eq!(astd(&same).unwrap().scores, vec![0.0]);
    assert_eq!(astd_norm(&same).unwrap().scores, vec![0.0]);
    assert_eq!(psfv(&same).unwrap().scores, vec![0.0]);

    let err = astd(&samples(vec![a, b], VariationSource::Augmentations)).unwrap_err();
    assert!(matches!(err, Error::NotApplicable { .. }));
    assert!(err.to_string().contains("not applicable to a deterministic encoder"));
}

#[test]
fn astd_norm_two_node_hand_case() {
    // Feature 0 is informative; feature 1 is constant and maps to zero.
    let d0 = DenseMatrix::from_rows(&[&[0.0, 3.0], &[4.0, 3.0]]);
    let d1 = DenseMatrix::from_rows(&[&[1.0, 3.0], &[2.0, 3.0]]);
    // Normalized per draw: d0 -> [[0,0],[1,0]], d1 -> [[0,0],[1,0]].
    let e = samples(vec![d0, d1], VariationSource::Weights);
    assert_eq!(astd_norm(&e).unwrap().scores, vec![0.0, 0.0]);

    let d0 = DenseMatrix::from_rows(&[&[0.0], &[4.0], &[2.0]]);
    let d1 = DenseMatrix::from_rows(&[&[0.0], &[4.0], &[1.0]]);
    // Node 2 normalizes to 0.5 and 0.25: population std 0.125.
    let e = samples(vec![d0, d1], VariationSource::Weights);
    let s = astd_norm(&e).unwrap().scores;
    assert!(s[0].abs() < 1e-15 && s[1].abs() < 1e-15 && (s[2] - 0.125).abs() < 1e-15);
}

proptest! {
    #[test]
    fn spread_measure_scaling(seed in any::<u64>(), c in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let draws: Vec<DenseMatrix> = (0..4).map(|_| uniform(&mut r, 6, 3, -1.0, 1.0)).collect();
        let e = samples(draws.clone(), VariationSource::Both);
        let doubled = samples(draws.iter().map(|d| d.map(|v| 2.0 * v)).collect(), VariationSource::Both);
        for (a, b) in astd(&e).unwrap().scores.iter().zip(astd(&doubled).unwrap().scores) {
            prop_assert!((2.0 * a - b).abs() <= 1e-12);
        }
        let affine = samples(draws.iter().map(|d| d.map(|v| c * v + shift)).collect(), VariationSource::Both);
        for (a, b) in astd_norm(&e).unwrap().scores.iter().zip(astd_norm(&affine).unwrap().scores) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let p = psfv(&e).unwrap().scores;
        for (i, s) in p.iter().enumerate() {
            let mut acc = 0.0;
            for f in 0..3 {
                let xs: Vec<f64> = draws.iter().map(|d| d.get(i, f)).collect();
                let m = xs.iter().sum::<f64>() / 4.0;
                acc += xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            }
            prop_assert!((s - acc / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn retention_ends_at_overall_accuracy(seed in any::<u64>(), t in 1usize..200) {
        let mut r = rng(seed);
        let scores = ScoreVector {
            measure: Measure::Cmds,
            orientation: Measure::Cmds.orientation(),
            scores: (0..t).map(|_| r.random_range(0.0..1.0)).collect(),
        };
        let correct: Vec<bool> = (0..t).map(|_| r.random::<bool>()).collect();
        let nodes: Vec<usize> = (0..t).collect();
        let curve = retention_curve(&scores, &nodes, &correct).unwrap();
        prop_assert_eq!(curve.points.len(), t);
        prop_assert!(curve.points.windows(2).all(|w| w[0].0 < w[1].0));
        let last = curve.points.last().unwrap();
        prop_assert_eq!(last.0, 1.0);
        prop_assert_eq!(last.1, correct.iter().filter(|&&c| c).count() as f64 / t as f64);
    }
}

#[test]
fn calibrated_scores_give_non_increasing_curve() {
    let t = 50;
    let correct: Vec<bool> = (0..t).map(|i| i < 30).collect();
    let scores = ScoreVector {
        measure: Measure::Astd,
        orientation: Measure::Astd.orientation(),
        scores: (0..t).map(|i| i as f64).collect(),
    };
    let curve = retention_curve(&scores, &(0..t).collect::<Vec<_>>(), &correct).unwrap();
    assert!(curve.points.windows(2).all(|w| w[1].1 <= w[0].1));
    assert!(retention_curve(&scores, &[], &[]).is_err());
}

#[test]
fn random_scores_give_flat_curves() {
    let t = 2000;
    let mut r = rng(3);
    let correct: Vec<bool> = (0..t).map(|_| r.random::<f64>() < 0.7).collect();
    let overall = correct.iter().filter(|&&c| c).count() as f64 / t as f64;
    let nodes: Vec<usize> = (0..t).collect();
    let mut mean_at_half = 0.0;
    for _ in 0..100 {
        let scores = ScoreVector {
            measure: Measure::Cmds,
            orientation: Measure::Cmds.orientation(),
            scores: (0..t).map(|_| r.random::<f64>()).collect(),
        };
        mean_at_half += retention_curve(&scores, &nodes, &correct).unwrap().accuracy_at(0.5) / 100.0;
    }
    // Standard error of the 100-shuffle mean at half retention.
    let se = (overall * (1.0 - overall) / (t as f64 / 2.0) / 100.0).sqrt();
    assert!((mean_at_half - overall).abs() <= 4.0 * se, "{mean_at_half} vs {overall}");
}

fn toy() -> vgcl_core::SparseGraph {
    random_graph(&mut rng(4), 25, 6, 0.2, 3)
}

#[test]
fn draws_match_objective_and_are_reproducible() {
    let g = toy();
    let cfg = small_cfg(6, 5);
    let vp = VariationalParams::with_std(random_weights(&mut rng(5), &cfg, 0.7), 0.05);
    let params = Params::Variational(vp.clone());
    let aug = AugmentConfig {
        p_f1: 0.2,
        p_f2: 0.3,
        p_e1: 0.2,
        p_e2: 0.3,
        ..AugmentConfig::none()
    };
    let prior = PriorConfig::new(1.0);
    let d = collect_draws(&params, &g, &aug, &prior, 2, 9).unwrap();

    let mut aug_rng = stream(9, Stream::DrawAugment);
    let mut w_rng = stream(9, Stream::DrawWeights);
    for j in 0..2 {
        let views = make_views(&g, &aug, &mut aug_rng);
        let w = vgcl_core::model::sample_weights(&vp, &mut w_rng).weights;
        let losses = per_node_loss(&views, &w, &prior).unwrap();
        for (i, l) in losses.iter().enumerate() {
            assert_eq!(d.likelihood.values.get(j, i), (-l).exp());
        }
    }
    let again = collect_draws(&params, &g, &aug, &prior, 2, 9).unwrap();
    assert_eq!(d.likelihood, again.likelihood);
    assert!(collect_draws(&params, &g, &aug, &prior, 1, 9).is_err());
}

#[test]
fn deterministic_model_without_augmentation_repeats_itself() {
    let g = toy();
    let w = random_weights(&mut rng(6), &small_cfg(6, 5), 0.7);
    let d = collect_draws(&Params::Deterministic(w), &g, &AugmentConfig::none(), &PriorConfig::new(1.0), 4, 1).unwrap();
    let v = &d.likelihood.values;
    for j in 1..4 {
        assert_eq!(v.row(j), v.row(0));
    }
    assert!(d.weight_samples.is_none());
    assert!(psfv(&d.augment_samples).unwrap().scores.iter().all(|&s| s == 0.0));
    assert!(cmds(&d.likelihood).unwrap().scores.iter().all(|&s| (s - 1.0).abs() < 1e-12));
}
