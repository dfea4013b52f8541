//! Match-quality metrics: co-activation score, explained variance,
//! and cross-entropy delta on externally supplied logits.

use crate::assignment::{validate_bijection, Permutation};
use crate::error::{Error, Result};
use crate::sae::{ActivationBatch, BatchKind};

/// Conditioning of the co-activation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// P(target active | source active) — conditioned on the source layer.
    #[default]
    Conditional,
    /// Jaccard overlap of the two activation sets.
    Symmetric,
}

/// Co-activation score over matched feature pairs.
#[derive(Debug, Clone)]
pub struct MatchingScore {
    /// Mean over pairs with at least one qualifying token.
    pub score: f64,
    /// Per-pair score; `None` for pairs with no qualifying tokens.
    pub per_pair: Vec<Option<f64>>,
    pub n_valid_pairs: usize,
}

/// Probability that matched features co-activate. A feature counts as
/// active when its post-JumpReLU value is strictly positive. Pairs
/// whose source feature never activates are excluded from the mean and
/// reported as `None`.
pub fn matching_score(
    feat_a: &ActivationBatch,
    feat_b: &ActivationBatch,
    p: &Permutation,
    mode: ScoreMode,
) -> Result<MatchingScore> {
    if feat_a.kind != BatchKind::Feature || feat_b.kind != BatchKind::Feature {
        return Err(Error::KindMismatch("matching_score expects feature batches".into()));
    }
    let t = feat_a.num_tokens();
    if feat_b.num_tokens() != t {
        return Err(Error::dim(format!(
            "token counts differ: {} vs {}",
            t,
            feat_b.num_tokens()
        )));
    }
    let f = feat_a.width();
    if feat_b.width() != f {
        return Err(Error::dim(format!(
            "feature widths differ: {f} vs {}",
            feat_b.width()
        )));
    }
    if p.len() != f {
        return Err(Error::dim(format!(
            "permutation spans {} features, batches have {f}",
            p.len()
        )));
    }

    let a = feat_a.data.as_slice().expect("contiguous");
    let b = feat_b.data.as_slice().expect("contiguous");
    let mut per_pair = Vec::with_capacity(f);
    let mut sum = 0.0f64;
    let mut n_valid = 0usize;
    for i in 0..f {
        let j = p.map[i];
        let mut co = 0usize;
        let mut denom = 0usize;
        match mode {
            ScoreMode::Conditional => {
                for tok in 0..t {
                    let src = a[tok * f + i] > 0.0;
                    if src {
                        denom += 1;
                        if b[tok * f + j] > 0.0 {
                            co += 1;
                        }
                    }
                }
            }
            ScoreMode::Symmetric => {
                for tok in 0..t {
                    let src = a[tok * f + i] > 0.0;
                    let dst = b[tok * f + j] > 0.0;
                    if src || dst {
                        denom += 1;
                        if src && dst {
                            co += 1;
                        }
                    }
                }
            }
        }
        if denom == 0 {
            per_pair.push(None);
        } else {
            let s = co as f64 / denom as f64;
            per_pair.push(Some(s));
            sum += s;
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(Error::NoActivations);
    }
    Ok(MatchingScore {
        score: sum / n_valid as f64,
        per_pair,
        n_valid_pairs: n_valid,
    })
}

/// Explained variance of an approximation, with the raw residual ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplainedVariance {
    /// `1 - residual_ratio`.
    pub ev: f64,
    /// `Σ_dim Var(x̂_dim − x_dim) / Σ_dim Var(x_dim)` (population
    /// variance over tokens).
    pub residual_ratio: f64,
}

/// How well `x_hat` approximates `x`, as one minus the ratio of summed
/// per-dimension residual variance to summed per-dimension variance of
/// `x`. Both the ratio and its complement are reported.
pub fn explained_variance(
    x_hat: &ActivationBatch,
    x: &ActivationBatch,
) -> Result<ExplainedVariance> {
    if x_hat.kind != BatchKind::Hidden || x.kind != BatchKind::Hidden {
        return Err(Error::KindMismatch("explained_variance expects hidden batches".into()));
    }
    let t = x.num_tokens();
    let d = x.width();
    if x_hat.num_tokens() != t || x_hat.width() != d {
        return Err(Error::dim(format!(
            "shapes differ: {}x{} vs {t}x{d}",
            x_hat.num_tokens(),
            x_hat.width()
        )));
    }
    if t < 2 {
        return Err(Error::Degenerate("variance needs at least two tokens".into()));
    }

    let xh = x_hat.data.as_slice().expect("contiguous");
    let xr = x.data.as_slice().expect("contiguous");

    // Two passes: per-dimension means, then squared deviations.
    let mut mean_res = vec![0.0f64; d];
    let mut mean_x = vec![0.0f64; d];
    for tok in 0..t {
        let row_h = &xh[tok * d..(tok + 1) * d];
        let row_x = &xr[tok * d..(tok + 1) * d];
        for dim in 0..d {
            mean_res[dim] += row_h[dim] - row_x[dim];
            mean_x[dim] += row_x[dim];
        }
    }
    let inv_t = 1.0 / t as f64;
    for dim in 0..d {
        mean_res[dim] *= inv_t;
        mean_x[dim] *= inv_t;
    }
    let mut var_res = 0.0f64;
    let mut var_x = 0.0f64;
    for tok in 0..t {
        let row_h = &xh[tok * d..(tok + 1) * d];
        let row_x = &xr[tok * d..(tok + 1) * d];
        for dim in 0..d {
            let r = (row_h[dim] - row_x[dim]) - mean_res[dim];
            var_res += r * r;
            let v = row_x[dim] - mean_x[dim];
            var_x += v * v;
        }
    }
    var_res *= inv_t;
    var_x *= inv_t;

    if var_x == 0.0 {
        return Err(Error::Degenerate("reference batch has zero total variance".into()));
    }
    let residual_ratio = var_res / var_x;
    Ok(ExplainedVariance { ev: 1.0 - residual_ratio, residual_ratio })
}

/// Mean difference in next-token loss (nats) between modified and
/// original logits: `mean_t [CE(mod_t, y_t) − CE(orig_t, y_t)]`,
/// stabilized by max subtraction.
pub fn delta_cross_entropy(
    logits_mod: &ActivationBatch,
    logits_orig: &ActivationBatch,
    targets: &[usize],
) -> Result<f64> {
    let t = logits_orig.num_tokens();
    let v = logits_orig.width();
    if logits_mod.num_tokens() != t || logits_mod.width() != v {
        return Err(Error::dim(format!(
            "logit shapes differ: {}x{} vs {t}x{v}",
            logits_mod.num_tokens(),
            logits_mod.width()
        )));
    }
    if targets.len() != t {
        return Err(Error::dim(format!(
            "{} targets for {t} tokens",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::domain(format!(
            "target {bad} out of range for vocabulary {v}"
        )));
    }

    let lm = logits_mod.data.as_slice().expect("contiguous");
    let lo = logits_orig.data.as_slice().expect("contiguous");
    let mut sum = 0.0f64;
    for tok in 0..t {
        let row_m = &lm[tok * v..(tok + 1) * v];
        let row_o = &lo[tok * v..(tok + 1) * v];
        let y = targets[tok];
        sum += log_softmax_at(row_o, y) - log_softmax_at(row_m, y);
    }
    Ok(sum / t as f64)
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    logits[index] - max - lse.ln()
}

/// Per-index agreement helper used by recovery-accuracy reports: the
/// fraction of source features whose matched target equals the planted
/// one, with cost ties counted as correct when the candidate attains
/// the same pair cost.
pub fn recovery_accuracy(recovered: &Permutation, truth: &Permutation) -> Result<f64> {
    if recovered.len() != truth.len() {
        return Err(Error::dim(format!(
            "permutations span {} vs {} features",
            recovered.len(),
            truth.len()
        )));
    }
    validate_bijection(&recovered.map)?;
    validate_bijection(&truth.map)?;
    let same = recovered
        .map
        .iter()
        .zip(&truth.map)
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::Provenance;
    use ndarray::arr2;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn feature_batch(data: Array2<f64>, layer: u32) -> ActivationBatch {
        ActivationBatch::new(data, BatchKind::Feature, layer).unwrap()
    }

    fn hidden_batch(data: Array2<f64>, layer: u32) -> ActivationBatch {
        ActivationBatch::new(data, BatchKind::Hidden, layer).unwrap()
    }

    #[test]
    fn score_is_one_for_permuted_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = 12;
        let t = 30;
        let a = Array2::from_shape_fn((t, f), |_| {
            if rng.gen_bool(0.4) {
                rng.gen_range(0.1..2.0)
            } else {
                0.0
            }
        });
        let mut map: Vec<usize> = (0..f).collect();
        map.shuffle(&mut rng);
        let p = Permutation::new(map.clone(), 0, 1, Provenance::Exact).unwrap();
        let mut b = Array2::zeros((t, f));
        for tok in 0..t {
            for i in 0..f {
                b[[tok, map[i]]] = a[[tok, i]];
            }
        }
        let score = matching_score(
            &feature_batch(a, 0),
            &feature_batch(b, 1),
            &p,
            ScoreMode::Conditional,
        )
        .unwrap();
        assert_eq!(score.score, 1.0);
        assert!(score.n_valid_pairs > 0);
    }

    #[test]
    fn score_is_zero_against_silent_target() {
        let a = arr2(&[[1.0, 0.0], [0.5, 0.2]]);
        let b = Array2::zeros((2, 2));
        let p = Permutation::identity(2, 0, 1);
        let score = matching_score(
            &feature_batch(a, 0),
            &feature_batch(b, 1),
            &p,
            ScoreMode::Conditional,
        )
        .unwrap();
        assert_eq!(score.score, 0.0);
    }

    #[test]
    fn score_hand_counted_pattern() {
        // 3 tokens, 2 features.
        // feature 0 of A active at tokens 0,2; B[p(0)] active at 0 only -> 1/2
        // feature 1 of A active at token 1; B[p(1)] active at 1 -> 1/1
        let a = arr2(&[[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]]);
        let b = arr2(&[[0.5, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let p = Permutation::identity(2, 0, 1);
        let score = matching_score(
            &feature_batch(a, 0),
            &feature_batch(b, 1),
            &p,
            ScoreMode::Conditional,
        )
        .unwrap();
        assert_eq!(score.per_pair, vec![Some(0.5), Some(1.0)]);
        assert_eq!(score.n_valid_pairs, 2);
        assert_eq!(score.score, 0.75);
    }

    #[test]
    fn score_excludes_silent_source_pairs() {
        let a = arr2(&[[1.0, 0.0], [2.0, 0.0]]);
        let b = arr2(&[[1.0, 1.0], [1.0, 1.0]]);
        let p = Permutation::identity(2, 0, 1);
        let score = matching_score(
            &feature_batch(a, 0),
            &feature_batch(b, 1),
            &p,
            ScoreMode::Conditional,
        )
        .unwrap();
        assert_eq!(score.per_pair, vec![Some(1.0), None]);
        assert_eq!(score.n_valid_pairs, 1);
        assert_eq!(score.score, 1.0);
    }

    #[test]
    fn score_errors_without_any_activity() {
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((2, 3));
        let p = Permutation::identity(3, 0, 1);
        assert!(matches!(
            matching_score(
                &feature_batch(a, 0),
                &feature_batch(b, 1),
                &p,
                ScoreMode::Conditional
            ),
            Err(Error::NoActivations)
        ));
    }

    #[test]
    fn score_counting_oracle_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, f) = (25, 9);
        let gen = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((t, f), |_| {
                if rng.gen_bool(0.35) {
                    rng.gen_range(0.05..1.0)
                } else {
                    0.0
                }
            })
        };
        let a = gen(&mut rng);
        let b = gen(&mut rng);
        let mut map: Vec<usize> = (0..f).collect();
        map.shuffle(&mut rng);
        let p = Permutation::new(map.clone(), 0, 1, Provenance::Exact).unwrap();

        let got = matching_score(
            &feature_batch(a.clone(), 0),
            &feature_batch(b.clone(), 1),
            &p,
            ScoreMode::Conditional,
        )
        .unwrap();
        for i in 0..f {
            let mut active = 0;
            let mut both = 0;
            for tok in 0..t {
                if a[[tok, i]] > 0.0 {
                    active += 1;
                    if b[[tok, map[i]]] > 0.0 {
                        both += 1;
                    }
                }
            }
            match got.per_pair[i] {
                Some(s) => assert_eq!(s, both as f64 / active as f64),
                None => assert_eq!(active, 0),
            }
        }
    }

    #[test]
    fn symmetric_mode_is_jaccard() {
        let a = arr2(&[[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]);
        let b = arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]);
        let p = Permutation::identity(2, 0, 1);
        let score = matching_score(
            &feature_batch(a, 0),
            &feature_batch(b, 1),
            &p,
            ScoreMode::Symmetric,
        )
        .unwrap();
        // feature 0: union tokens {0,1,2}, intersection {0} -> 1/3
        assert_eq!(score.per_pair[0], Some(1.0 / 3.0));
        assert_eq!(score.per_pair[1], None);
    }

    #[test]
    fn ev_perfect_and_mean_baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((8, 3), |_| rng.gen_range(-1.0..1.0));
        let xb = hidden_batch(x.clone(), 0);
        let perfect = explained_variance(&xb, &xb).unwrap();
        assert_eq!(perfect.residual_ratio, 0.0);
        assert_eq!(perfect.ev, 1.0);

        // per-dimension mean as predictor: residual variance equals data variance
        let mut means = vec![0.0f64; 3];
        for tok in 0..8 {
            for dim in 0..3 {
                means[dim] += x[[tok, dim]] / 8.0;
            }
        }
        let xm = Array2::from_shape_fn((8, 3), |(_, dim)| means[dim]);
        let r = explained_variance(&hidden_batch(xm, 0), &xb).unwrap();
        assert!((r.residual_ratio - 1.0).abs() <= 1e-12);
        assert!(r.ev.abs() <= 1e-12);
    }

    #[test]
    fn ev_matches_two_pass_oracle_on_hand_case() {
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]]);
        let xh = arr2(&[[1.5, 2.0], [2.5, 5.0], [5.5, 8.0]]);
        let got = explained_variance(&hidden_batch(xh.clone(), 0), &hidden_batch(x.clone(), 0))
            .unwrap();

        // independent two-pass computation
        let t = 3usize;
        let mut var_res = 0.0;
        let mut var_x = 0.0;
        for dim in 0..2 {
            let res: Vec<f64> = (0..t).map(|tok| xh[[tok, dim]] - x[[tok, dim]]).collect();
            let mr = res.iter().sum::<f64>() / t as f64;
            var_res += res.iter().map(|r| (r - mr) * (r - mr)).sum::<f64>() / t as f64;
            let mx = (0..t).map(|tok| x[[tok, dim]]).sum::<f64>() / t as f64;
            var_x += (0..t)
                .map(|tok| (x[[tok, dim]] - mx) * (x[[tok, dim]] - mx))
                .sum::<f64>()
                / t as f64;
        }
        let expect = var_res / var_x;
        assert!((got.residual_ratio - expect).abs() <= 1e-15);
        assert_eq!(got.ev + got.residual_ratio, 1.0);
    }

    #[test]
    fn ev_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((10, 4), |_| rng.gen_range(-1.0..1.0));
        let xh = Array2::from_shape_fn((10, 4), |(t, d)| x[[t, d]] + rng.gen_range(-0.1..0.1));
        let base = explained_variance(&hidden_batch(xh.clone(), 0), &hidden_batch(x.clone(), 0))
            .unwrap();
        let shift = [5.0, -2.0, 0.5, 1.0];
        let xs = Array2::from_shape_fn((10, 4), |(t, d)| x[[t, d]] + shift[d]);
        let xhs = Array2::from_shape_fn((10, 4), |(t, d)| xh[[t, d]] + shift[d]);
        let shifted =
            explained_variance(&hidden_batch(xhs, 0), &hidden_batch(xs, 0)).unwrap();
        assert!((base.ev - shifted.ev).abs() <= 1e-9);
    }

    #[test]
    fn ev_degenerate_inputs() {
        let one = hidden_batch(arr2(&[[1.0, 2.0]]), 0);
        assert!(matches!(
            explained_variance(&one, &one),
            Err(Error::Degenerate(_))
        ));
        let consts = hidden_batch(arr2(&[[1.0, 2.0], [1.0, 2.0]]), 0);
        let other = hidden_batch(arr2(&[[1.0, 2.5], [0.0, 2.0]]), 0);
        assert!(matches!(
            explained_variance(&other, &consts),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn delta_ce_identical_logits_is_zero() {
        let logits = hidden_batch(arr2(&[[0.3, -0.2, 1.0], [0.1, 0.4, -0.5]]), 0);
        assert_eq!(
            delta_cross_entropy(&logits, &logits, &[2, 1]).unwrap(),
            0.0
        );
    }

    #[test]
    fn delta_ce_shift_invariance() {
        let orig = hidden_batch(arr2(&[[0.0, 0.0]]), 0);
        let shifted = hidden_batch(arr2(&[[7.5, 7.5]]), 0);
        let d = delta_cross_entropy(&shifted, &orig, &[0]).unwrap();
        assert!(d.abs() <= 1e-12);
    }

    #[test]
    fn delta_ce_hand_case() {
        // V=2, orig [0,0], mod [1,0], target 0:
        // CE_mod = ln(1 + e^{-1}), CE_orig = ln 2
        let orig = hidden_batch(arr2(&[[0.0, 0.0]]), 0);
        let modified = hidden_batch(arr2(&[[1.0, 0.0]]), 0);
        let got = delta_cross_entropy(&modified, &orig, &[0]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln() - 2.0f64.ln();
        assert!((got - expect).abs() <= 1e-15);
    }

    #[test]
    fn delta_ce_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = hidden_batch(Array2::from_shape_fn((5, 4), |_| rng.gen_range(-2.0..2.0)), 0);
        let b = hidden_batch(Array2::from_shape_fn((5, 4), |_| rng.gen_range(-2.0..2.0)), 0);
        let targets = [0, 3, 1, 2, 2];
        let ab = delta_cross_entropy(&a, &b, &targets).unwrap();
        let ba = delta_cross_entropy(&b, &a, &targets).unwrap();
        assert!((ab + ba).abs() <= 1e-12);
    }

    #[test]
    fn delta_ce_validation() {
        let a = hidden_batch(arr2(&[[0.0, 0.0]]), 0);
        assert!(delta_cross_entropy(&a, &a, &[2]).is_err());
        assert!(delta_cross_entropy(&a, &a, &[0, 1]).is_err());
    }
}
