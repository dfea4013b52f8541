//! Seeded synthetic SAEs, planted-permutation pairs and chains, and
//! activation streams.
//!
//! Everything here is a pure function of a [`SynthSpec`]: the PRNG is
//! pinned to ChaCha8 with one sub-stream per role, so outputs are
//! bitwise reproducible across platforms and runs. Generated pairs
//! carry their planted permutation, which downstream tests use as the
//! recovery oracle.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::assignment::{Permutation, Provenance};
use crate::error::{Error, Result};
use crate::matching::compose;
use crate::pruning::encode_permute_decode;
use crate::sae::{encode_batch, fold_params, ActivationBatch, BatchKind, SaeParams};

/// Name of the pinned generator, recorded in file metadata.
pub const PRNG_ALGORITHM: &str = "chacha8";

const STREAM_BASE_SAE: u64 = 0;
const STREAM_ACTIVATIONS: u64 = 3;
// Chain step t >= 1 draws its permutation from stream 2t - 1 and its
// noise from stream 2t; a pair is a one-step chain.
fn truth_stream(step: u64) -> u64 {
    8 + 2 * step
}
fn noise_stream(step: u64) -> u64 {
    9 + 2 * step
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parameters of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub d: usize,
    pub f: usize,
    pub seed: u64,
    /// Noise std as a fraction of each feature's folded-weight norm.
    pub noise_sigma: f64,
    /// Thresholds are drawn log-uniformly from this range.
    pub theta_log_range: (f64, f64),
    /// Per-layer hidden-norm multiplier for the norm-growth scenario.
    pub scale_growth: f64,
    pub chain_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            d: 32,
            f: 256,
            seed: 0,
            noise_sigma: 0.0,
            theta_log_range: (0.25, 4.0),
            scale_growth: 1.0,
            chain_len: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.f == 0 {
            return Err(Error::dim("synth spec needs d >= 1 and f >= 1"));
        }
        let (lo, hi) = self.theta_log_range;
        if !(lo > 0.0) || !lo.is_finite() || !hi.is_finite() || hi < lo {
            return Err(Error::domain("theta range must satisfy 0 < lo <= hi"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::domain("noise_sigma must be finite and >= 0"));
        }
        if !self.scale_growth.is_finite() || self.scale_growth < 1.0 {
            return Err(Error::domain("scale_growth must be finite and >= 1"));
        }
        if self.chain_len < 2 {
            return Err(Error::domain("chain_len must be >= 2"));
        }
        Ok(())
    }
}

/// A generated chain: SAEs for layers `0..chain_len`, the per-step
/// planted permutations, and their running compositions from layer 0.
#[derive(Debug, Clone)]
pub struct SynthChain {
    pub saes: Vec<SaeParams>,
    pub step_truths: Vec<Permutation>,
    pub cumulative_truths: Vec<Permutation>,
}

/// Draws one unfolded SAE: encoder entries i.i.d. normal scaled by
/// `1/sqrt(d)`, decoder columns normalized to unit norm, thresholds
/// log-uniform in the spec's range, small normal biases.
pub fn gen_sae(spec: &SynthSpec) -> Result<SaeParams> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, STREAM_BASE_SAE);
    gen_sae_with_rng(spec, &mut rng, 0)
}

fn gen_sae_with_rng(spec: &SynthSpec, rng: &mut ChaCha8Rng, layer_id: u32) -> Result<SaeParams> {
    let (f, d) = (spec.f, spec.d);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let w_enc =
        Array2::from_shape_fn((f, d), |_| rng.sample::<f64, _>(StandardNormal) * inv_sqrt_d);

    let mut w_dec = Array2::zeros((d, f));
    for j in 0..f {
        let mut col: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in col.iter_mut() {
            *v /= norm;
        }
        for dim in 0..d {
            w_dec[[dim, j]] = col[dim];
        }
    }

    let (lo, hi) = spec.theta_log_range;
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let theta = Array1::from_shape_fn(f, |_| {
        let u: f64 = rng.gen_range(0.0..1.0);
        (ln_lo + u * (ln_hi - ln_lo)).exp()
    });
    let b_enc = Array1::from_shape_fn(f, |_| rng.sample::<f64, _>(StandardNormal) * 0.01);
    let b_dec = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal) * 0.01);

    SaeParams::new(w_enc, b_enc, w_dec, b_dec, theta, layer_id, false)
}

/// Permuted (and optionally noisy) variant of `base`, one layer up.
///
/// The copy is permuted by a fresh uniform bijection and its thresholds
/// multiplied by `growth`. With positive `sigma`, Gaussian noise scaled
/// by each feature's folded-weight norm is added in folded space, after
/// which thresholds are re-extracted as the folded decoder column norms
/// and the SAE unfolded back. Zero noise short-circuits to an exact
/// copy so that planted costs are exactly zero.
fn planted_variant(
    base: &SaeParams,
    sigma: f64,
    growth: f64,
    rng_perm: &mut ChaCha8Rng,
    rng_noise: &mut ChaCha8Rng,
) -> Result<(SaeParams, Permutation)> {
    let f = base.num_features();
    let d = base.hidden_dim();

    let mut map: Vec<usize> = (0..f).collect();
    map.shuffle(rng_perm);
    let truth = Permutation::new(map, base.layer_id, base.layer_id + 1, Provenance::Exact)?;

    let mut permuted = base.clone();
    permuted.layer_id = base.layer_id + 1;
    for i in 0..f {
        let j = truth.map[i];
        for k in 0..d {
            permuted.w_enc[[j, k]] = base.w_enc[[i, k]];
            permuted.w_dec[[k, j]] = base.w_dec[[k, i]];
        }
        permuted.b_enc[j] = base.b_enc[i];
        permuted.theta[j] = base.theta[i] * growth;
    }

    if sigma == 0.0 {
        return Ok((permuted, truth));
    }

    let folded = fold_params(&permuted)?;
    for attempt in 0..100 {
        let mut w_enc = folded.w_enc.clone();
        let mut b_enc = folded.b_enc.clone();
        let mut w_dec = folded.w_dec.clone();
        let mut theta = Array1::zeros(f);

        let mut ok = true;
        for j in 0..f {
            let enc_sq: f64 = (0..d).map(|k| w_enc[[j, k]] * w_enc[[j, k]]).sum();
            let dec_sq: f64 = (0..d).map(|k| w_dec[[k, j]] * w_dec[[k, j]]).sum();
            let feat_norm = (enc_sq + dec_sq + b_enc[j] * b_enc[j]).sqrt();
            let std = sigma * feat_norm;
            for k in 0..d {
                w_enc[[j, k]] += rng_noise.sample::<f64, _>(StandardNormal) * std;
            }
            for k in 0..d {
                w_dec[[k, j]] += rng_noise.sample::<f64, _>(StandardNormal) * std;
            }
            b_enc[j] += rng_noise.sample::<f64, _>(StandardNormal) * std;

            let new_dec_sq: f64 = (0..d).map(|k| w_dec[[k, j]] * w_dec[[k, j]]).sum();
            let t = new_dec_sq.sqrt();
            if !(t > 0.0) || !t.is_finite() {
                ok = false;
                break;
            }
            theta[j] = t;
        }
        if !ok {
            continue;
        }

        // Unfold with the re-extracted thresholds.
        for j in 0..f {
            let t = theta[j];
            for k in 0..d {
                w_enc[[j, k]] *= t;
                w_dec[[k, j]] /= t;
            }
            b_enc[j] *= t;
        }
        let sae = SaeParams::new(
            w_enc,
            b_enc,
            w_dec,
            folded.b_dec.clone(),
            theta,
            permuted.layer_id,
            false,
        )?;
        let _ = attempt;
        return Ok((sae, truth));
    }
    Err(Error::domain(
        "noise produced non-positive thresholds in 100 consecutive draws",
    ))
}

/// Base SAE plus a planted-permutation copy with optional noise.
pub fn gen_planted_pair(spec: &SynthSpec) -> Result<(SaeParams, SaeParams, Permutation)> {
    gen_pair_with_growth(spec, 1.0)
}

/// Like [`gen_planted_pair`], but the copy models a layer whose input
/// norms are `scale_growth` times larger: the factor is carried
/// entirely by the thresholds while raw decoder columns stay unit-norm,
/// so only folded weights see the scale.
pub fn gen_norm_growth_pair(spec: &SynthSpec) -> Result<(SaeParams, SaeParams, Permutation)> {
    gen_pair_with_growth(spec, spec.scale_growth)
}

fn gen_pair_with_growth(
    spec: &SynthSpec,
    growth: f64,
) -> Result<(SaeParams, SaeParams, Permutation)> {
    spec.validate()?;
    let a = gen_sae(spec)?;
    let mut rng_perm = rng_for(spec.seed, truth_stream(1));
    let mut rng_noise = rng_for(spec.seed, noise_stream(1));
    let (b, truth) = planted_variant(&a, spec.noise_sigma, growth, &mut rng_perm, &mut rng_noise)?;
    Ok((a, b, truth))
}

/// A chain of `chain_len` SAEs where each layer is a planted-noisy
/// variant of the previous one. Drift accumulates step by step.
pub fn gen_chain(spec: &SynthSpec) -> Result<SynthChain> {
    spec.validate()?;
    let mut saes = vec![gen_sae(spec)?];
    let mut step_truths: Vec<Permutation> = Vec::new();
    let mut cumulative_truths: Vec<Permutation> = Vec::new();

    for step in 1..spec.chain_len {
        let mut rng_perm = rng_for(spec.seed, truth_stream(step as u64));
        let mut rng_noise = rng_for(spec.seed, noise_stream(step as u64));
        let (sae, truth) = planted_variant(
            saes.last().expect("nonempty"),
            spec.noise_sigma,
            1.0,
            &mut rng_perm,
            &mut rng_noise,
        )?;
        saes.push(sae);
        let cumulative = match cumulative_truths.last() {
            None => truth.clone(),
            Some(prev) => compose(prev, &truth)?,
        };
        step_truths.push(truth);
        cumulative_truths.push(cumulative);
    }
    Ok(SynthChain { saes, step_truths, cumulative_truths })
}

/// One token's construction recipe: which decoder directions are mixed,
/// with what coefficients, at what overall scale.
#[derive(Debug, Clone)]
struct TokenPlan {
    support: Vec<usize>,
    coeffs: Vec<f64>,
    scale: f64,
}

/// Draws per-token plans against `sae`: a sparse non-negative support
/// and coefficients, plus the scale at which exactly `active_per_token`
/// features cross their thresholds (found in closed form from the
/// per-feature crossing points of the encoder response).
fn plan_tokens(
    sae: &SaeParams,
    tokens: usize,
    active_per_token: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenPlan> {
    let f = sae.num_features();
    let d = sae.hidden_dim();
    let b_dec = sae.b_dec.as_slice().expect("contiguous");
    // Per-feature pre-activation offsets at scale 0: b_enc + W_enc b_dec.
    let offsets: Vec<f64> = (0..f)
        .map(|j| {
            let mut h = sae.b_enc[j];
            for k in 0..d {
                h += sae.w_enc[[j, k]] * b_dec[k];
            }
            h
        })
        .collect();

    let mut plans = Vec::with_capacity(tokens);
    for _ in 0..tokens {
        let support = rand::seq::index::sample(rng, f, active_per_token).into_vec();
        let coeffs: Vec<f64> = support
            .iter()
            .map(|_| 0.5 + rng.sample::<f64, _>(StandardNormal).abs())
            .collect();
        let mut base = vec![0.0f64; d];
        for (&j, &c) in support.iter().zip(&coeffs) {
            for dim in 0..d {
                base[dim] += c * sae.w_dec[[dim, j]];
            }
        }

        // pre_j(s) = offsets[j] + s * <enc_j, base>
        let mut always_on = 0usize;
        let mut crossings: Vec<f64> = Vec::new();
        for j in 0..f {
            if offsets[j] > sae.theta[j] {
                always_on += 1;
                continue;
            }
            let mut gain = 0.0;
            for k in 0..d {
                gain += sae.w_enc[[j, k]] * base[k];
            }
            if gain > 0.0 {
                crossings.push((sae.theta[j] - offsets[j]) / gain);
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let need = active_per_token.saturating_sub(always_on);
        let scale = if need == 0 {
            0.0
        } else if crossings.len() < need {
            crossings.last().copied().unwrap_or(0.0) * 1.5
        } else if crossings.len() == need {
            crossings[need - 1] * 1.5
        } else {
            (crossings[need - 1] * crossings[need]).sqrt()
        };
        plans.push(TokenPlan { support, coeffs, scale });
    }
    plans
}

/// Realizes token plans as hidden states of `sae`, optionally reindexing
/// the supports through a permutation first. With `map` set to the
/// planted truth this mirrors the stream into the target layer's frame:
/// at zero noise the target realizes exactly the matched activations.
fn hidden_from_plans(
    sae: &SaeParams,
    plans: &[TokenPlan],
    map: Option<&Permutation>,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ActivationBatch> {
    let d = sae.hidden_dim();
    let b_dec = sae.b_dec.as_slice().expect("contiguous");
    let mut hidden = Array2::zeros((plans.len(), d));
    for (t, plan) in plans.iter().enumerate() {
        let mut base = vec![0.0f64; d];
        for (&j, &c) in plan.support.iter().zip(&plan.coeffs) {
            let col = match map {
                Some(p) => p.map[j],
                None => j,
            };
            for dim in 0..d {
                base[dim] += c * sae.w_dec[[dim, col]];
            }
        }
        let base_norm = (base.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let noise_std = noise_sigma * plan.scale * base_norm / (d as f64).sqrt();
        for dim in 0..d {
            let mut v = b_dec[dim] + plan.scale * base[dim];
            if noise_std > 0.0 {
                v += rng.sample::<f64, _>(StandardNormal) * noise_std;
            }
            hidden[[t, dim]] = v;
        }
    }
    ActivationBatch::new(hidden, BatchKind::Hidden, sae.layer_id)
}

fn validate_activation_args(
    sae: &SaeParams,
    tokens: usize,
    active_per_token: usize,
    noise_sigma: f64,
) -> Result<()> {
    let f = sae.num_features();
    if tokens == 0 {
        return Err(Error::dim("need at least one token"));
    }
    if active_per_token == 0 || active_per_token > f {
        return Err(Error::domain(format!("active_per_token must be in [1, {f}]")));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::domain("noise_sigma must be finite and >= 0"));
    }
    Ok(())
}

/// Hidden states built as sparse non-negative combinations of decoder
/// directions, scaled through the encoder so that each token activates
/// `active_per_token` features (up to noise), plus the realized feature
/// activations `encode(sae, hidden)`.
pub fn gen_activations(
    sae: &SaeParams,
    tokens: usize,
    seed: u64,
    active_per_token: usize,
    noise_sigma: f64,
) -> Result<(ActivationBatch, ActivationBatch)> {
    validate_activation_args(sae, tokens, active_per_token, noise_sigma)?;
    let mut rng = rng_for(seed, STREAM_ACTIVATIONS);
    let plans = plan_tokens(sae, tokens, active_per_token, &mut rng);
    let hidden = hidden_from_plans(sae, &plans, None, noise_sigma, &mut rng)?;
    let features = encode_batch(sae, &hidden)?;
    Ok((hidden, features))
}

/// A paired two-layer token stream for pruning and score experiments.
#[derive(Debug, Clone)]
pub struct PairActivations {
    /// Source-layer hidden states.
    pub hidden_t: ActivationBatch,
    /// Decode-consistent reference for the target layer: the planted
    /// permutation applied to the realized source features, decoded
    /// with the target decoder. Layer skipping with the true
    /// permutation reproduces this stream exactly.
    pub hidden_t1_ref: ActivationBatch,
    /// Co-activation-consistent target hidden states: the same token
    /// plans realized in the target layer's frame, so matched features
    /// fire together (exactly so at zero noise).
    pub hidden_t1_coact: ActivationBatch,
}

/// Builds the paired stream for a planted pair `(a, b, truth)`.
pub fn gen_pair_activations(
    a: &SaeParams,
    b: &SaeParams,
    truth: &Permutation,
    tokens: usize,
    seed: u64,
    active_per_token: usize,
    noise_sigma: f64,
) -> Result<PairActivations> {
    validate_activation_args(a, tokens, active_per_token, noise_sigma)?;
    if truth.len() != a.num_features() {
        return Err(Error::dim(format!(
            "truth spans {} features, SAE has {}",
            truth.len(),
            a.num_features()
        )));
    }
    let mut rng_a = rng_for(seed, STREAM_ACTIVATIONS);
    let plans = plan_tokens(a, tokens, active_per_token, &mut rng_a);
    let hidden_t = hidden_from_plans(a, &plans, None, noise_sigma, &mut rng_a)?;
    let hidden_t1_ref = encode_permute_decode(a, b, truth, &hidden_t)?;
    let mut rng_b = rng_for(seed, STREAM_ACTIVATIONS + 1);
    let hidden_t1_coact = hidden_from_plans(b, &plans, Some(truth), noise_sigma, &mut rng_b)?;
    Ok(PairActivations { hidden_t, hidden_t1_ref, hidden_t1_coact })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::l0_stats;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec { d: 16, f: 48, seed, ..SynthSpec::default() }
    }

    #[test]
    fn gen_sae_is_deterministic() {
        let s = spec(42);
        let a = gen_sae(&s).unwrap();
        let b = gen_sae(&s).unwrap();
        assert_eq!(a, b);
        let c = gen_sae(&SynthSpec { seed: 43, ..s }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gen_sae_decoder_columns_unit_norm() {
        let sae = gen_sae(&spec(7)).unwrap();
        for j in 0..sae.num_features() {
            let norm: f64 = (0..sae.hidden_dim())
                .map(|k| sae.w_dec[[k, j]] * sae.w_dec[[k, j]])
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() <= 1e-9, "column {j} norm {norm}");
        }
    }

    #[test]
    fn gen_sae_theta_in_range() {
        let s = spec(11);
        let sae = gen_sae(&s).unwrap();
        let (lo, hi) = s.theta_log_range;
        for &t in sae.theta.iter() {
            assert!(t >= lo && t <= hi);
        }
    }

    #[test]
    fn planted_pair_zero_noise_is_exact_permuted_copy() {
        let s = spec(13);
        let (a, b, truth) = gen_planted_pair(&s).unwrap();
        crate::assignment::validate_bijection(&truth.map).unwrap();
        for i in 0..s.f {
            let j = truth.map[i];
            assert_eq!(b.theta[j], a.theta[i]);
            assert_eq!(b.b_enc[j], a.b_enc[i]);
            for k in 0..s.d {
                assert_eq!(b.w_enc[[j, k]], a.w_enc[[i, k]]);
                assert_eq!(b.w_dec[[k, j]], a.w_dec[[k, i]]);
            }
        }
        assert_eq!(b.layer_id, 1);
        assert_eq!((truth.from_layer, truth.to_layer), (0, 1));
    }

    #[test]
    fn norm_growth_reduces_to_planted_at_unit_growth() {
        let s = SynthSpec { noise_sigma: 0.03, scale_growth: 1.0, ..spec(17) };
        let (a1, b1, t1) = gen_planted_pair(&s).unwrap();
        let (a2, b2, t2) = gen_norm_growth_pair(&s).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(t1.map, t2.map);
    }

    #[test]
    fn norm_growth_scales_thresholds_and_keeps_unit_decoder() {
        let s = SynthSpec { scale_growth: 3.0, ..spec(19) };
        let (a, b, truth) = gen_norm_growth_pair(&s).unwrap();
        for i in 0..s.f {
            assert_eq!(b.theta[truth.map[i]], a.theta[i] * 3.0);
        }
        // raw decoder columns of b stay unit-norm
        for j in 0..s.f {
            let norm: f64 = (0..s.d)
                .map(|k| b.w_dec[[k, j]] * b.w_dec[[k, j]])
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn noisy_pair_has_positive_thresholds_and_unit_decoder() {
        let s = SynthSpec { noise_sigma: 0.1, ..spec(23) };
        let (_a, b, _t) = gen_planted_pair(&s).unwrap();
        assert!(!b.folded);
        for j in 0..s.f {
            assert!(b.theta[j] > 0.0);
            let norm: f64 = (0..s.d)
                .map(|k| b.w_dec[[k, j]] * b.w_dec[[k, j]])
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() <= 1e-9, "column {j} norm {norm}");
        }
    }

    #[test]
    fn refolding_noisy_pair_recovers_folded_norms_as_theta() {
        // fold(unfold(noisy)) round-trips: decoder column norms of the
        // refolded SAE equal theta.
        let s = SynthSpec { noise_sigma: 0.05, ..spec(29) };
        let (_a, b, _t) = gen_planted_pair(&s).unwrap();
        let folded = fold_params(&b).unwrap();
        for j in 0..s.f {
            let norm: f64 = (0..s.d)
                .map(|k| folded.w_dec[[k, j]] * folded.w_dec[[k, j]])
                .sum::<f64>()
                .sqrt();
            assert!((norm - b.theta[j]).abs() <= 1e-9 * b.theta[j].max(1.0));
        }
    }

    #[test]
    fn chain_zero_noise_composition_matches_cumulative() {
        let s = SynthSpec { chain_len: 5, ..spec(31) };
        let chain = gen_chain(&s).unwrap();
        assert_eq!(chain.saes.len(), 5);
        assert_eq!(chain.step_truths.len(), 4);
        assert_eq!(chain.cumulative_truths.len(), 4);

        let mut acc = chain.step_truths[0].clone();
        assert_eq!(acc.map, chain.cumulative_truths[0].map);
        for k in 1..chain.step_truths.len() {
            acc = compose(&acc, &chain.step_truths[k]).unwrap();
            assert_eq!(acc.map, chain.cumulative_truths[k].map);
        }
        for (t, sae) in chain.saes.iter().enumerate() {
            assert_eq!(sae.layer_id, t as u32);
        }
    }

    #[test]
    fn chain_len_two_equals_planted_pair() {
        let s = SynthSpec { noise_sigma: 0.02, ..spec(37) };
        let chain = gen_chain(&s).unwrap();
        let (a, b, truth) = gen_planted_pair(&s).unwrap();
        assert_eq!(chain.saes[0], a);
        assert_eq!(chain.saes[1], b);
        assert_eq!(chain.step_truths[0].map, truth.map);
    }

    #[test]
    fn activations_hit_target_l0() {
        let s = spec(41);
        let sae = gen_sae(&s).unwrap();
        let (hidden, features) = gen_activations(&sae, 32, 5, 4, 0.0).unwrap();
        assert_eq!(hidden.kind, BatchKind::Hidden);
        assert_eq!(features.kind, BatchKind::Feature);
        let stats = l0_stats(&features).unwrap();
        assert_eq!(stats.mean_l0, 4.0, "per-token l0: {:?}", stats.per_token_l0);
    }

    #[test]
    fn single_active_feature_token() {
        let s = spec(43);
        let sae = gen_sae(&s).unwrap();
        let (_hidden, features) = gen_activations(&sae, 1, 9, 1, 0.0).unwrap();
        let stats = l0_stats(&features).unwrap();
        assert_eq!(stats.per_token_l0, vec![1]);
    }

    #[test]
    fn activations_deterministic_per_seed() {
        let s = spec(47);
        let sae = gen_sae(&s).unwrap();
        let x = gen_activations(&sae, 8, 3, 4, 0.01).unwrap();
        let y = gen_activations(&sae, 8, 3, 4, 0.01).unwrap();
        assert_eq!(x.0, y.0);
        assert_eq!(x.1, y.1);
    }

    #[test]
    fn pair_activations_reference_matches_truth_decode() {
        let s = SynthSpec { noise_sigma: 0.01, ..spec(53) };
        let (a, b, truth) = gen_planted_pair(&s).unwrap();
        let pair = gen_pair_activations(&a, &b, &truth, 6, 77, 4, 0.0).unwrap();
        let again = encode_permute_decode(&a, &b, &truth, &pair.hidden_t).unwrap();
        assert_eq!(pair.hidden_t1_ref, again);
    }

    #[test]
    fn pair_coact_stream_fires_matched_features_exactly_at_zero_noise() {
        let s = spec(59);
        let (a, b, truth) = gen_planted_pair(&s).unwrap();
        let pair = gen_pair_activations(&a, &b, &truth, 10, 3, 4, 0.0).unwrap();
        let feats_a = crate::sae::encode_batch(&a, &pair.hidden_t).unwrap();
        let feats_b = crate::sae::encode_batch(&b, &pair.hidden_t1_coact).unwrap();
        for t in 0..10 {
            for i in 0..s.f {
                let a_active = feats_a.data[[t, i]] > 0.0;
                let b_active = feats_b.data[[t, truth.map[i]]] > 0.0;
                assert_eq!(a_active, b_active, "token {t} feature {i}");
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec { d: 0, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { theta_log_range: (0.0, 1.0), ..SynthSpec::default() }
            .validate()
            .is_err());
        assert!(SynthSpec { noise_sigma: -0.1, ..SynthSpec::default() }
            .validate()
            .is_err());
        assert!(SynthSpec { scale_growth: 0.5, ..SynthSpec::default() }
            .validate()
            .is_err());
        assert!(SynthSpec { chain_len: 1, ..SynthSpec::default() }.validate().is_err());
    }
}
