//! Layer skipping by encode-permute-decode and its quantile-hybrid
//! variant.
//!
//! Both paths share one accumulation kernel (target bias first, then
//! source features in ascending index order), so the `q = 1` hybrid is
//! bitwise identical to plain encode-permute-decode.

use ndarray::Array2;
use rayon::prelude::*;

use crate::assignment::Permutation;
use crate::error::{Error, Result};
use crate::matching::{quantile_split, MatchResult};
use crate::sae::{encode, ActivationBatch, BatchKind, SaeParams};

/// Which layer's decoder bias the quantile-hybrid decode adds.
///
/// The quantile formula uses the target layer's bias; `Source` is the
/// documented alternative reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasChoice {
    #[default]
    Target,
    Source,
}

/// Approximates the next layer's hidden states: encode with layer
/// `t`'s SAE, reindex features through `p`, decode with layer
/// `t+1`'s SAE.
pub fn encode_permute_decode(
    sae_t: &SaeParams,
    sae_t1: &SaeParams,
    p: &Permutation,
    x_t: &ActivationBatch,
) -> Result<ActivationBatch> {
    mixed_decode(sae_t, sae_t1, p, None, BiasChoice::Target, x_t)
}

/// Quantile-hybrid decode: features whose matched-pair MSE falls at or
/// below the `q`-quantile are permuted and decoded with the target
/// decoder, the rest keep their own indices and the source decoder;
/// both partial decodes are summed with the target decoder bias.
pub fn quantile_decode(
    sae_t: &SaeParams,
    sae_t1: &SaeParams,
    result: &MatchResult,
    q: f64,
    x_t: &ActivationBatch,
) -> Result<ActivationBatch> {
    quantile_decode_with_bias(sae_t, sae_t1, result, q, x_t, BiasChoice::Target)
}

/// [`quantile_decode`] with an explicit bias choice.
pub fn quantile_decode_with_bias(
    sae_t: &SaeParams,
    sae_t1: &SaeParams,
    result: &MatchResult,
    q: f64,
    x_t: &ActivationBatch,
    bias: BiasChoice,
) -> Result<ActivationBatch> {
    let (low, _high) = quantile_split(result, q)?;
    if result.permutation.len() != sae_t.num_features() {
        return Err(Error::dim(format!(
            "match result spans {} features, SAE has {}",
            result.permutation.len(),
            sae_t.num_features()
        )));
    }
    let mut low_mask = vec![false; result.permutation.len()];
    for i in low {
        low_mask[i] = true;
    }
    mixed_decode(sae_t, sae_t1, &result.permutation, Some(&low_mask), bias, x_t)
}

fn mixed_decode(
    sae_t: &SaeParams,
    sae_t1: &SaeParams,
    p: &Permutation,
    low_mask: Option<&[bool]>,
    bias: BiasChoice,
    x_t: &ActivationBatch,
) -> Result<ActivationBatch> {
    let f = sae_t.num_features();
    let d = sae_t.hidden_dim();
    if x_t.kind != BatchKind::Hidden {
        return Err(Error::KindMismatch(
            "encode-permute-decode expects a hidden batch".into(),
        ));
    }
    if x_t.width() != d {
        return Err(Error::dim(format!(
            "hidden batch width {} != hidden dim {d}",
            x_t.width()
        )));
    }
    if sae_t1.num_features() != f || sae_t1.hidden_dim() != d {
        return Err(Error::dim(format!(
            "SAE shapes differ: {}x{} vs {}x{}",
            f,
            d,
            sae_t1.num_features(),
            sae_t1.hidden_dim()
        )));
    }
    if p.len() != f {
        return Err(Error::dim(format!(
            "permutation spans {} features, SAEs have {f}",
            p.len()
        )));
    }
    if p.from_layer != sae_t.layer_id || p.to_layer != sae_t1.layer_id {
        return Err(Error::domain(format!(
            "permutation connects layers {} -> {}, SAEs are {} and {}",
            p.from_layer, p.to_layer, sae_t.layer_id, sae_t1.layer_id
        )));
    }
    if x_t.layer_id != sae_t.layer_id {
        return Err(Error::domain(format!(
            "hidden batch is for layer {}, source SAE is layer {}",
            x_t.layer_id, sae_t.layer_id
        )));
    }

    let w_dec_t = sae_t.w_dec.as_slice().expect("contiguous");
    let w_dec_t1 = sae_t1.w_dec.as_slice().expect("contiguous");
    let b_dec = match bias {
        BiasChoice::Target => sae_t1.b_dec.as_slice().expect("contiguous"),
        BiasChoice::Source => sae_t.b_dec.as_slice().expect("contiguous"),
    };

    let t = x_t.num_tokens();
    let input = x_t.data.as_slice().expect("contiguous");
    let mut out = vec![0.0f64; t * d];
    out.par_chunks_mut(d)
        .zip(input.par_chunks(d))
        .try_for_each(|(row_out, row_in)| -> Result<()> {
            let feats = encode(sae_t, row_in)?;
            for dim in 0..d {
                let target_row = &w_dec_t1[dim * f..(dim + 1) * f];
                let source_row = &w_dec_t[dim * f..(dim + 1) * f];
                let mut acc = b_dec[dim];
                match low_mask {
                    None => {
                        for i in 0..f {
                            acc += feats[i] * target_row[p.map[i]];
                        }
                    }
                    Some(mask) => {
                        for i in 0..f {
                            let w = if mask[i] { target_row[p.map[i]] } else { source_row[i] };
                            acc += feats[i] * w;
                        }
                    }
                }
                row_out[dim] = acc;
            }
            Ok(())
        })?;

    Ok(ActivationBatch {
        data: Array2::from_shape_vec((t, d), out).expect("shape"),
        kind: BatchKind::Hidden,
        layer_id: sae_t1.layer_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{match_layers, MatchOptions};
    use crate::sae::reconstruct;
    use crate::synth::{gen_activations, gen_planted_pair, SynthSpec};

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec { d: 10, f: 32, seed, ..SynthSpec::default() }
    }

    fn planted_setup(seed: u64, noise: f64) -> (crate::sae::SaeParams, crate::sae::SaeParams, Permutation, ActivationBatch) {
        let s = SynthSpec { noise_sigma: noise, ..spec(seed) };
        let (a, b, truth) = gen_planted_pair(&s).unwrap();
        let (hidden, _features) = gen_activations(&a, 12, seed + 1, 4, 0.0).unwrap();
        (a, b, truth, hidden)
    }

    #[test]
    fn permuted_copy_equals_source_reconstruction() {
        let (a, b, truth, hidden) = planted_setup(3, 0.0);
        let out = encode_permute_decode(&a, &b, &truth, &hidden).unwrap();
        assert_eq!(out.layer_id, b.layer_id);
        for t in 0..hidden.num_tokens() {
            let x: Vec<f64> = hidden.data.row(t).to_vec();
            let expect = reconstruct(&a, &x).unwrap();
            assert_eq!(out.data.row(t).to_vec(), expect, "token {t}");
        }
    }

    #[test]
    fn identity_permutation_same_sae_is_reconstruction() {
        let (a, _b, _truth, hidden) = planted_setup(5, 0.0);
        let id = Permutation::identity(a.num_features(), a.layer_id, a.layer_id);
        let out = encode_permute_decode(&a, &a, &id, &hidden).unwrap();
        for t in 0..hidden.num_tokens() {
            let x: Vec<f64> = hidden.data.row(t).to_vec();
            assert_eq!(out.data.row(t).to_vec(), reconstruct(&a, &x).unwrap());
        }
    }

    #[test]
    fn output_matches_per_feature_accumulation_oracle() {
        let (a, b, truth, hidden) = planted_setup(7, 0.02);
        let out = encode_permute_decode(&a, &b, &truth, &hidden).unwrap();
        for t in 0..hidden.num_tokens() {
            let x: Vec<f64> = hidden.data.row(t).to_vec();
            let feats = encode(&a, &x).unwrap();
            let mut expect = b.b_dec.to_vec();
            for i in 0..a.num_features() {
                for dim in 0..a.hidden_dim() {
                    expect[dim] += feats[i] * b.w_dec[[dim, truth.map[i]]];
                }
            }
            let got = out.data.row(t).to_vec();
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shape_and_layer_validation() {
        let (a, b, truth, hidden) = planted_setup(9, 0.0);
        // wrong kind
        let feats = crate::sae::encode_batch(&a, &hidden).unwrap();
        assert!(encode_permute_decode(&a, &b, &truth, &feats).is_err());
        // wrong permutation layers
        let bad = Permutation::identity(a.num_features(), 7, 8);
        assert!(encode_permute_decode(&a, &b, &bad, &hidden).is_err());
        // wrong batch layer
        let mut moved = hidden.clone();
        moved.layer_id = 3;
        assert!(encode_permute_decode(&a, &b, &truth, &moved).is_err());
    }

    fn matched(a: &crate::sae::SaeParams, b: &crate::sae::SaeParams) -> MatchResult {
        match_layers(a, b, &MatchOptions::default()).unwrap()
    }

    #[test]
    fn quantile_one_is_bitwise_encode_permute_decode() {
        let (a, b, _truth, hidden) = planted_setup(11, 0.03);
        let result = matched(&a, &b);
        let epd = encode_permute_decode(&a, &b, &result.permutation, &hidden).unwrap();
        let qd = quantile_decode(&a, &b, &result, 1.0, &hidden).unwrap();
        assert_eq!(epd.data, qd.data);
    }

    #[test]
    fn quantile_zero_is_source_decode_with_target_bias() {
        let (a, b, _truth, hidden) = planted_setup(13, 0.03);
        let result = matched(&a, &b);
        let qd = quantile_decode(&a, &b, &result, 0.0, &hidden).unwrap();
        for t in 0..hidden.num_tokens() {
            let x: Vec<f64> = hidden.data.row(t).to_vec();
            let feats = encode(&a, &x).unwrap();
            let mut expect = b.b_dec.to_vec();
            for i in 0..a.num_features() {
                for dim in 0..a.hidden_dim() {
                    expect[dim] += feats[i] * a.w_dec[[dim, i]];
                }
            }
            let got = qd.data.row(t).to_vec();
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mid_quantile_matches_per_feature_recomposition() {
        let (a, b, _truth, hidden) = planted_setup(17, 0.05);
        let result = matched(&a, &b);
        let q = 0.6;
        let qd = quantile_decode(&a, &b, &result, q, &hidden).unwrap();

        let (low, high) = quantile_split(&result, q).unwrap();
        assert!(!low.is_empty() && !high.is_empty(), "want a genuine split");
        let mut is_low = vec![false; a.num_features()];
        for i in &low {
            is_low[*i] = true;
        }
        for t in 0..hidden.num_tokens() {
            let x: Vec<f64> = hidden.data.row(t).to_vec();
            let feats = encode(&a, &x).unwrap();
            let mut expect = b.b_dec.to_vec();
            for i in 0..a.num_features() {
                for dim in 0..a.hidden_dim() {
                    let w = if is_low[i] {
                        b.w_dec[[dim, result.permutation.map[i]]]
                    } else {
                        a.w_dec[[dim, i]]
                    };
                    expect[dim] += feats[i] * w;
                }
            }
            let got = qd.data.row(t).to_vec();
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn moving_one_feature_changes_output_by_its_decode_difference() {
        let (a, b, _truth, hidden) = planted_setup(19, 0.05);
        let result = matched(&a, &b);
        let f = a.num_features();

        // Two-valued MSE pattern: ten features at 1.0, the rest at
        // 100.0. At q = 0.2 the threshold sits on the low value in both
        // configurations, so flipping feature 0 to 100.0 moves exactly
        // that one feature between the sets.
        let mut result_lo = result.clone();
        for i in 0..f {
            result_lo.per_pair_mse[i] = if i < 10 { 1.0 } else { 100.0 };
        }
        let mut result_hi = result_lo.clone();
        result_hi.per_pair_mse[0] = 100.0;
        let q = 0.2;
        let (lo_set_a, _) = quantile_split(&result_lo, q).unwrap();
        let (lo_set_b, _) = quantile_split(&result_hi, q).unwrap();
        assert_eq!(lo_set_a, (0..10).collect::<Vec<_>>());
        assert_eq!(lo_set_b, (1..10).collect::<Vec<_>>());

        let out_lo = quantile_decode(&a, &b, &result_lo, q, &hidden).unwrap();
        let out_hi = quantile_decode(&a, &b, &result_hi, q, &hidden).unwrap();
        let j = result.permutation.map[0];
        for t in 0..hidden.num_tokens() {
            let x: Vec<f64> = hidden.data.row(t).to_vec();
            let feats = encode(&a, &x).unwrap();
            for dim in 0..a.hidden_dim() {
                let expected_delta = feats[0] * (b.w_dec[[dim, j]] - a.w_dec[[dim, 0]]);
                let got_delta = out_lo.data[[t, dim]] - out_hi.data[[t, dim]];
                assert!(
                    (got_delta - expected_delta).abs() <= 1e-11 * expected_delta.abs().max(1.0),
                    "token {t} dim {dim}: {got_delta} vs {expected_delta}"
                );
            }
        }
    }

    #[test]
    fn source_bias_flag() {
        let (a, b, _truth, hidden) = planted_setup(23, 0.02);
        let result = matched(&a, &b);
        let target = quantile_decode(&a, &b, &result, 0.0, &hidden).unwrap();
        let source =
            quantile_decode_with_bias(&a, &b, &result, 0.0, &hidden, BiasChoice::Source).unwrap();
        // differ exactly by the bias difference per dimension
        for t in 0..hidden.num_tokens() {
            for dim in 0..a.hidden_dim() {
                let delta = target.data[[t, dim]] - source.data[[t, dim]];
                let expect = b.b_dec[dim] - a.b_dec[dim];
                assert!((delta - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn folded_saes_decode_consistently() {
        let (a, b, truth, hidden) = planted_setup(29, 0.0);
        let fa = crate::sae::fold_params(&a).unwrap();
        let fb = crate::sae::fold_params(&b).unwrap();
        let raw = encode_permute_decode(&a, &b, &truth, &hidden).unwrap();
        let folded = encode_permute_decode(&fa, &fb, &truth, &hidden).unwrap();
        for (u, v) in raw.data.iter().zip(folded.data.iter()) {
            assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0));
        }
    }
}
