//! Feature-pair cost matrices and exact linear-assignment solvers.
//!
//! The cost between feature `i` of layer A and feature `j` of layer B
//! is a sum of squared Euclidean distances over the selected weight
//! groups (decoder columns, encoder rows, encoder bias). Matching
//! minimizes the total cost over all bijections.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::SaeParams;

/// Which weight groups contribute to the pairwise cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSet {
    DecoderOnly,
    EncoderOnly,
    EncoderDecoderBias,
}

impl WeightSet {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeightSet::DecoderOnly => "decoder_only",
            WeightSet::EncoderOnly => "encoder_only",
            WeightSet::EncoderDecoderBias => "encoder_decoder_bias",
        }
    }

    fn include_decoder(&self) -> bool {
        matches!(self, WeightSet::DecoderOnly | WeightSet::EncoderDecoderBias)
    }

    fn include_encoder(&self) -> bool {
        matches!(self, WeightSet::EncoderOnly | WeightSet::EncoderDecoderBias)
    }

    fn include_bias(&self) -> bool {
        matches!(self, WeightSet::EncoderDecoderBias)
    }
}

/// Per-group cost multipliers. All default to one; exposed because the
/// relative weighting of encoder vs decoder terms is a free choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupWeights {
    pub decoder: f64,
    pub encoder: f64,
    pub bias: f64,
}

impl Default for GroupWeights {
    fn default() -> Self {
        GroupWeights { decoder: 1.0, encoder: 1.0, bias: 1.0 }
    }
}

/// Storage precision of a cost matrix. Accumulation is always 64-bit;
/// `F32` halves memory for very wide SAEs at the price of rounding each
/// final entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostPrecision {
    F64,
    F32,
}

impl CostPrecision {
    pub fn as_str(&self) -> &'static str {
        match self {
            CostPrecision::F64 => "f64",
            CostPrecision::F32 => "f32",
        }
    }
}

#[derive(Debug, Clone)]
enum CostData {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

/// Dense `F×F` matrix of pairwise feature costs between two layers.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    data: CostData,
    n: usize,
    pub source_layer: u32,
    pub target_layer: u32,
    pub weight_set: WeightSet,
}

impl CostMatrix {
    /// Wraps a row-major square matrix, validating that every entry is
    /// finite and non-negative.
    pub fn from_f64(
        data: Vec<f64>,
        n: usize,
        source_layer: u32,
        target_layer: u32,
        weight_set: WeightSet,
    ) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::dim(format!(
                "cost matrix: {} entries for side {n}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("cost matrix entries must be finite and >= 0"));
        }
        Ok(CostMatrix {
            data: CostData::F64(data),
            n,
            source_layer,
            target_layer,
            weight_set,
        })
    }

    /// Number of features per side.
    pub fn side(&self) -> usize {
        self.n
    }

    pub fn precision(&self) -> CostPrecision {
        match self.data {
            CostData::F64(_) => CostPrecision::F64,
            CostData::F32(_) => CostPrecision::F32,
        }
    }

    /// Entry `(i, j)` widened to 64-bit.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.data {
            CostData::F64(d) => d[i * self.n + j],
            CostData::F32(d) => d[i * self.n + j] as f64,
        }
    }

    /// Transposed copy (swaps source and target roles).
    pub fn transposed(&self) -> CostMatrix {
        let n = self.n;
        let data = match &self.data {
            CostData::F64(d) => {
                let mut t = vec![0.0f64; n * n];
                for i in 0..n {
                    for j in 0..n {
                        t[j * n + i] = d[i * n + j];
                    }
                }
                CostData::F64(t)
            }
            CostData::F32(d) => {
                let mut t = vec![0.0f32; n * n];
                for i in 0..n {
                    for j in 0..n {
                        t[j * n + i] = d[i * n + j];
                    }
                }
                CostData::F32(t)
            }
        };
        CostMatrix {
            data,
            n,
            source_layer: self.target_layer,
            target_layer: self.source_layer,
            weight_set: self.weight_set,
        }
    }
}

/// How a permutation was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Exact,
    Composed,
}

/// A bijection over feature indices: `map[i]` is the target-layer
/// feature matched to source feature `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pub map: Vec<usize>,
    pub from_layer: u32,
    pub to_layer: u32,
    pub provenance: Provenance,
}

impl Permutation {
    /// Validates that `map` is a bijection on `[0, len)`.
    pub fn new(
        map: Vec<usize>,
        from_layer: u32,
        to_layer: u32,
        provenance: Provenance,
    ) -> Result<Self> {
        validate_bijection(&map)?;
        Ok(Permutation { map, from_layer, to_layer, provenance })
    }

    pub fn identity(len: usize, from_layer: u32, to_layer: u32) -> Self {
        Permutation {
            map: (0..len).collect(),
            from_layer,
            to_layer,
            provenance: Provenance::Exact,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// The inverse bijection, with source and target roles swapped.
    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0usize; self.map.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Permutation {
            map: inv,
            from_layer: self.to_layer,
            to_layer: self.from_layer,
            provenance: self.provenance,
        }
    }
}

pub(crate) fn validate_bijection(map: &[usize]) -> Result<()> {
    let n = map.len();
    if n == 0 {
        return Err(Error::domain("empty permutation"));
    }
    let mut seen = vec![false; n];
    for &j in map {
        if j >= n || seen[j] {
            return Err(Error::domain("map is not a bijection on [0, F)"));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Options for [`build_cost_matrix`].
#[derive(Debug, Clone)]
pub struct CostOptions {
    pub group_weights: GroupWeights,
    pub precision: CostPrecision,
    /// Permit raw (unfolded) parameters. Off by default: matching is
    /// defined on folded weights.
    pub allow_unfolded: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            group_weights: GroupWeights::default(),
            precision: CostPrecision::F64,
            allow_unfolded: false,
        }
    }
}

/// Builds the pairwise cost matrix between the features of two SAEs.
///
/// `C[i, j]` sums, over the groups selected by `weight_set`, the
/// squared distance between decoder columns, encoder rows and encoder
/// biases of feature `i` in `a` and feature `j` in `b`. The decoder
/// bias is excluded: it is shared by all features and cannot affect
/// their order. Rows are computed in parallel; the result is identical
/// for any worker count.
pub fn build_cost_matrix(
    a: &SaeParams,
    b: &SaeParams,
    weight_set: WeightSet,
    opts: &CostOptions,
) -> Result<CostMatrix> {
    let f = a.num_features();
    let d = a.hidden_dim();
    if b.num_features() != f || b.hidden_dim() != d {
        return Err(Error::dim(format!(
            "cost matrix: SAE shapes differ ({}x{} vs {}x{})",
            f,
            d,
            b.num_features(),
            b.hidden_dim()
        )));
    }
    if !opts.allow_unfolded && !(a.folded && b.folded) {
        return Err(Error::state(
            "cost matrix requires folded parameters (fold first, or opt into unfolded costs)",
        ));
    }
    let gw = opts.group_weights;
    if ![gw.decoder, gw.encoder, gw.bias]
        .iter()
        .all(|w| w.is_finite() && *w >= 0.0)
    {
        return Err(Error::domain("group weights must be finite and >= 0"));
    }

    // Feature-major copies of the decoders so the inner distance loops
    // run over contiguous memory.
    let dec_a = transpose_to_feature_major(&a.w_dec);
    let dec_b = transpose_to_feature_major(&b.w_dec);
    let enc_a = a.w_enc.as_slice().expect("contiguous");
    let enc_b = b.w_enc.as_slice().expect("contiguous");
    let bias_a = a.b_enc.as_slice().expect("contiguous");
    let bias_b = b.b_enc.as_slice().expect("contiguous");

    let use_dec = weight_set.include_decoder();
    let use_enc = weight_set.include_encoder();
    let use_bias = weight_set.include_bias();

    let fill_row = |i: usize, row: &mut [f64]| {
        for j in 0..f {
            let mut c = 0.0f64;
            if use_dec {
                c += gw.decoder * dist2(&dec_a[i * d..(i + 1) * d], &dec_b[j * d..(j + 1) * d]);
            }
            if use_enc {
                c += gw.encoder * dist2(&enc_a[i * d..(i + 1) * d], &enc_b[j * d..(j + 1) * d]);
            }
            if use_bias {
                let db = bias_a[i] - bias_b[j];
                c += gw.bias * db * db;
            }
            row[j] = c;
        }
    };

    let data = match opts.precision {
        CostPrecision::F64 => {
            let mut out = vec![0.0f64; f * f];
            out.par_chunks_mut(f)
                .enumerate()
                .for_each(|(i, row)| fill_row(i, row));
            CostData::F64(out)
        }
        CostPrecision::F32 => {
            let mut out = vec![0.0f32; f * f];
            out.par_chunks_mut(f).enumerate().for_each(|(i, row)| {
                let mut tmp = vec![0.0f64; f];
                fill_row(i, &mut tmp);
                for (o, v) in row.iter_mut().zip(&tmp) {
                    *o = *v as f32;
                }
            });
            CostData::F32(out)
        }
    };

    Ok(CostMatrix {
        data,
        n: f,
        source_layer: a.layer_id,
        target_layer: b.layer_id,
        weight_set,
    })
}

fn transpose_to_feature_major(w_dec: &Array2<f64>) -> Vec<f64> {
    let (d, f) = w_dec.dim();
    let src = w_dec.as_slice().expect("contiguous");
    let mut out = vec![0.0f64; f * d];
    for dim in 0..d {
        for j in 0..f {
            out[j * d + dim] = src[dim * f + j];
        }
    }
    out
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for k in 0..a.len() {
        let diff = a[k] - b[k];
        acc += diff * diff;
    }
    acc
}

/// Exhaustive minimum over all `F!` assignments. Only for `F <= 10`;
/// serves as the oracle for [`solve_lap`].
pub fn solve_lap_exact(cost: &CostMatrix) -> Result<(Permutation, f64)> {
    let n = cost.side();
    if n > 10 {
        return Err(Error::SizeLimit(format!(
            "exhaustive solver limited to F <= 10, got {n}"
        )));
    }
    let eval = |perm: &[usize]| -> f64 {
        let mut total = 0.0;
        for (i, &j) in perm.iter().enumerate() {
            total += cost.get(i, j);
        }
        total
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_perm = perm.clone();
    let mut best = eval(&perm);
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let total = eval(&perm);
            if total < best {
                best = total;
                best_perm = perm.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((
        Permutation {
            map: best_perm,
            from_layer: cost.source_layer,
            to_layer: cost.target_layer,
            provenance: Provenance::Exact,
        },
        best,
    ))
}

/// Exact optimal assignment via shortest augmenting paths with dual
/// potentials (O(F³) worst case). Column scans run in ascending index
/// order, so ties break deterministically toward lower indices.
pub fn solve_lap(cost: &CostMatrix) -> Result<(Permutation, f64)> {
    let map = match &cost.data {
        CostData::F64(d) => shortest_augmenting_path(d, cost.n),
        CostData::F32(d) => shortest_augmenting_path(d, cost.n),
    };
    let mut total = 0.0f64;
    for (i, &j) in map.iter().enumerate() {
        total += cost.get(i, j);
    }
    Ok((
        Permutation {
            map,
            from_layer: cost.source_layer,
            to_layer: cost.target_layer,
            provenance: Provenance::Exact,
        },
        total,
    ))
}

trait CostElem: Copy + Send + Sync {
    fn widen(self) -> f64;
}

impl CostElem for f64 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
}

impl CostElem for f32 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
}

/// Row-by-row augmentation with potentials. Columns are 1-based
/// internally; column 0 is the virtual source of each search.
fn shortest_augmenting_path<T: CostElem>(data: &[T], n: usize) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; n]; // row potentials
    let mut v = vec![0.0f64; n + 1]; // column potentials
    let mut col_to_row = vec![NONE; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![f64::INFINITY; n + 1];
    let mut used = vec![false; n + 1];

    for row in 0..n {
        col_to_row[0] = row;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = col_to_row[j0];
            let costs = &data[i0 * n..(i0 + 1) * n];
            let u_i0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let reduced = costs[j - 1].widen() - u_i0 - v[j];
                    if reduced < minv[j] {
                        minv[j] = reduced;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_to_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_to_row[j0] == NONE {
                break;
            }
        }
        // Flip the augmenting path back to the virtual column.
        while j0 != 0 {
            let j1 = way[j0];
            col_to_row[j0] = col_to_row[j1];
            j0 = j1;
        }
    }

    let mut map = vec![0usize; n];
    for j in 1..=n {
        if col_to_row[j] != NONE {
            map[col_to_row[j]] = j - 1;
        }
    }
    map
}

/// `Σ_i C[i, p.map[i]]`.
pub fn cost_of_permutation(cost: &CostMatrix, p: &Permutation) -> Result<f64> {
    if p.map.len() != cost.side() {
        return Err(Error::dim(format!(
            "permutation length {} does not match cost side {}",
            p.map.len(),
            cost.side()
        )));
    }
    validate_bijection(&p.map)?;
    let mut total = 0.0;
    for (i, &j) in p.map.iter().enumerate() {
        total += cost.get(i, j);
    }
    Ok(total)
}
