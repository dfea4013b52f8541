//! Layer-pair matching, permutation composition, chains, and
//! MSE-quantile splits.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::assignment::{
    build_cost_matrix, solve_lap, CostOptions, CostPrecision, GroupWeights, Permutation,
    Provenance, WeightSet,
};
use crate::error::{Error, Result};
use crate::sae::{fold_params, SaeParams};

/// Options controlling how a layer pair is matched.
#[derive(Debug, Clone)]
pub struct MatchOptions {
    /// Match on folded parameters (the default). When false, costs are
    /// computed on the raw weights for A/B comparisons.
    pub folded: bool,
    pub weight_set: WeightSet,
    pub group_weights: GroupWeights,
    pub precision: CostPrecision,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            folded: true,
            weight_set: WeightSet::EncoderDecoderBias,
            group_weights: GroupWeights::default(),
            precision: CostPrecision::F64,
        }
    }
}

/// Outcome of matching one layer pair.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub permutation: Permutation,
    pub total_cost: f64,
    /// `per_pair_mse[i] = C[i, map[i]]` for source feature `i`.
    pub per_pair_mse: Vec<f64>,
    pub weight_set: WeightSet,
    pub folded: bool,
    pub config_fingerprint: String,
}

/// Matched results for every consecutive layer pair of a chain.
#[derive(Debug, Clone)]
pub struct PermutationChain {
    results: Vec<MatchResult>,
}

/// Short digest identifying a matching configuration; embedded in
/// results so downstream artifacts can be traced to their settings.
pub fn config_fingerprint(opts: &MatchOptions) -> String {
    let canonical = format!(
        "saematch-config-v1;weight_set={};folded={};gw_dec={:.17e};gw_enc={:.17e};gw_bias={:.17e};precision={}",
        opts.weight_set.as_str(),
        opts.folded,
        opts.group_weights.decoder,
        opts.group_weights.encoder,
        opts.group_weights.bias,
        opts.precision.as_str(),
    );
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(digest)[..16].to_string()
}

/// Matches the features of two SAEs: folds (unless `opts.folded` is
/// false), builds the cost matrix, solves the assignment, and records
/// the matched-pair costs.
pub fn match_layers(a: &SaeParams, b: &SaeParams, opts: &MatchOptions) -> Result<MatchResult> {
    let (fa, fb);
    let (a_ref, b_ref) = if opts.folded {
        fa = if a.folded { a.clone() } else { fold_params(a)? };
        fb = if b.folded { b.clone() } else { fold_params(b)? };
        (&fa, &fb)
    } else {
        if a.folded || b.folded {
            return Err(Error::state(
                "unfolded matching requires unfolded parameters on both sides",
            ));
        }
        (a, b)
    };

    let cost_opts = CostOptions {
        group_weights: opts.group_weights,
        precision: opts.precision,
        allow_unfolded: !opts.folded,
    };
    let cost = build_cost_matrix(a_ref, b_ref, opts.weight_set, &cost_opts)?;
    let (permutation, total_cost) = solve_lap(&cost)?;
    let per_pair_mse: Vec<f64> = permutation
        .map
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .collect();

    Ok(MatchResult {
        permutation,
        total_cost,
        per_pair_mse,
        weight_set: opts.weight_set,
        folded: opts.folded,
        config_fingerprint: config_fingerprint(opts),
    })
}

/// `P(A→C) = P(B→C) ∘ P(A→B)`: `out.map[i] = p_bc.map[p_ab.map[i]]`.
pub fn compose(p_ab: &Permutation, p_bc: &Permutation) -> Result<Permutation> {
    if p_ab.to_layer != p_bc.from_layer {
        return Err(Error::dim(format!(
            "compose: first permutation ends at layer {} but second starts at layer {}",
            p_ab.to_layer, p_bc.from_layer
        )));
    }
    if p_ab.len() != p_bc.len() {
        return Err(Error::dim(format!(
            "compose: lengths differ ({} vs {})",
            p_ab.len(),
            p_bc.len()
        )));
    }
    let map: Vec<usize> = p_ab.map.iter().map(|&j| p_bc.map[j]).collect();
    Ok(Permutation {
        map,
        from_layer: p_ab.from_layer,
        to_layer: p_bc.to_layer,
        provenance: Provenance::Composed,
    })
}

/// Matches every consecutive pair of a layer-ordered SAE list. Pairs
/// are independent and solved in parallel; the result order is fixed.
pub fn match_chain(saes: &[SaeParams], opts: &MatchOptions) -> Result<PermutationChain> {
    if saes.len() < 2 {
        return Err(Error::dim("a chain needs at least two SAEs"));
    }
    let (f, d) = (saes[0].num_features(), saes[0].hidden_dim());
    for sae in &saes[1..] {
        if sae.num_features() != f || sae.hidden_dim() != d {
            return Err(Error::dim(format!(
                "shape drift across layers: {}x{} vs {}x{}",
                sae.num_features(),
                sae.hidden_dim(),
                f,
                d
            )));
        }
    }
    if saes.windows(2).any(|w| w[0].layer_id >= w[1].layer_id) {
        return Err(Error::domain("layer ids must be strictly increasing"));
    }
    let results: Vec<MatchResult> = saes
        .par_windows(2)
        .map(|pair| match_layers(&pair[0], &pair[1], opts))
        .collect::<Result<_>>()?;
    Ok(PermutationChain { results })
}

impl PermutationChain {
    /// Wraps consecutive-pair results, checking that they connect.
    pub fn new(results: Vec<MatchResult>) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::dim("empty permutation chain"));
        }
        for w in results.windows(2) {
            if w[0].permutation.to_layer != w[1].permutation.from_layer {
                return Err(Error::dim(format!(
                    "chain does not connect: {} -> {} followed by {} -> {}",
                    w[0].permutation.from_layer,
                    w[0].permutation.to_layer,
                    w[1].permutation.from_layer,
                    w[1].permutation.to_layer
                )));
            }
        }
        Ok(PermutationChain { results })
    }

    pub fn results(&self) -> &[MatchResult] {
        &self.results
    }

    /// Number of layers spanned (`results + 1`).
    pub fn num_layers(&self) -> usize {
        self.results.len() + 1
    }

    /// Permutation from chain position `from` to position `to`,
    /// obtained by composing the consecutive steps in between.
    pub fn composed_span(&self, from: usize, to: usize) -> Result<Permutation> {
        if from >= to || to > self.results.len() {
            return Err(Error::dim(format!(
                "invalid span {from} -> {to} over {} steps",
                self.results.len()
            )));
        }
        let mut acc = self.results[from].permutation.clone();
        for step in &self.results[from + 1..to] {
            acc = compose(&acc, &step.permutation)?;
        }
        Ok(acc)
    }
}

/// Fraction of indices on which two permutations agree.
pub fn agreement(p: &Permutation, q: &Permutation) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!(
            "agreement: lengths differ ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let same = p.map.iter().zip(&q.map).filter(|(a, b)| a == b).count();
    Ok(same as f64 / p.len() as f64)
}

/// Splits source feature indices by the empirical `q`-quantile of their
/// matched-pair MSE (linear interpolation between order statistics).
///
/// Index `i` goes to the low set iff `per_pair_mse[i] <= threshold`, so
/// ties land low. `q = 1` sends everything low; `q = 0` sends
/// everything high.
pub fn quantile_split(result: &MatchResult, q: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !q.is_finite() || !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("quantile {q} outside [0, 1]")));
    }
    let n = result.per_pair_mse.len();
    if q == 0.0 {
        return Ok((Vec::new(), (0..n).collect()));
    }
    let mut sorted = result.per_pair_mse.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite mse"));
    let threshold = linear_quantile(&sorted, q);
    let mut low = Vec::new();
    let mut high = Vec::new();
    for (i, &mse) in result.per_pair_mse.iter().enumerate() {
        if mse <= threshold {
            low.push(i);
        } else {
            high.push(i);
        }
    }
    Ok((low, high))
}

fn linear_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
