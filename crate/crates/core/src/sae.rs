//! SAE forward math (encode, jump-relu, decode) and the parameter
//! folding transform.
//!
//! A sparse autoencoder maps a hidden state `x ∈ R^d` to feature
//! activations `f = JumpReLU(W_enc x + b_enc) ∈ R^F` and back via
//! `x̂ = W_dec f + b_dec`. Folding rescales encoder rows and bias by
//! `1/theta[i]` and decoder columns by `theta[i]`, setting all
//! thresholds to one without changing the reconstruction. After
//! folding, per-feature scales live in the decoder columns, which is
//! what makes weight-space matching across layers meaningful.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// One layer's SAE parameters.
///
/// `w_enc` is `F×d` (feature rows), `w_dec` is `d×F` (feature
/// columns). When `folded` is false every `theta` component must be
/// strictly positive; when true they are all exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub theta: Array1<f64>,
    pub layer_id: u32,
    pub folded: bool,
}

/// What an activation batch holds: hidden states (`T×d`) or feature
/// activations (`T×F`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Hidden,
    Feature,
}

impl BatchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BatchKind::Hidden => "hidden",
            BatchKind::Feature => "feature",
        }
    }
}

/// A `T×n` batch of per-token vectors for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub data: Array2<f64>,
    pub kind: BatchKind,
    pub layer_id: u32,
}

/// Per-token count of strictly positive entries plus its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct L0Stats {
    pub mean_l0: f64,
    pub per_token_l0: Vec<usize>,
}

impl SaeParams {
    /// Validates dimensional consistency and the threshold invariant.
    pub fn new(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_dec: Array1<f64>,
        theta: Array1<f64>,
        layer_id: u32,
        folded: bool,
    ) -> Result<Self> {
        let (f, d) = w_enc.dim();
        if f == 0 || d == 0 {
            return Err(Error::dim("w_enc must be at least 1x1"));
        }
        if w_dec.dim() != (d, f) {
            return Err(Error::dim(format!(
                "w_dec is {:?}, expected ({d}, {f})",
                w_dec.dim()
            )));
        }
        if b_enc.len() != f {
            return Err(Error::dim(format!(
                "b_enc has length {}, expected {f}",
                b_enc.len()
            )));
        }
        if b_dec.len() != d {
            return Err(Error::dim(format!(
                "b_dec has length {}, expected {d}",
                b_dec.len()
            )));
        }
        if theta.len() != f {
            return Err(Error::dim(format!(
                "theta has length {}, expected {f}",
                theta.len()
            )));
        }
        for a in [&w_enc, &w_dec] {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain("non-finite weight entry"));
            }
        }
        if b_enc.iter().chain(b_dec.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite bias entry"));
        }
        validate_theta(theta.as_slice().expect("contiguous"), folded)?;
        Ok(SaeParams {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            theta,
            layer_id,
            folded,
        })
    }

    /// Number of features.
    pub fn num_features(&self) -> usize {
        self.w_enc.nrows()
    }

    /// Hidden dimension.
    pub fn hidden_dim(&self) -> usize {
        self.w_enc.ncols()
    }
}

/// Checks the threshold invariant for the given fold state.
pub(crate) fn validate_theta(theta: &[f64], folded: bool) -> Result<()> {
    if folded {
        if theta.iter().any(|&t| t != 1.0) {
            return Err(Error::domain("folded SAE must have all thresholds equal to 1"));
        }
    } else if theta.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::domain("unfolded SAE requires strictly positive finite thresholds"));
    }
    Ok(())
}

impl ActivationBatch {
    pub fn new(data: Array2<f64>, kind: BatchKind, layer_id: u32) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::dim("activation batch needs at least one token"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite activation entry"));
        }
        Ok(ActivationBatch { data, kind, layer_id })
    }

    pub fn num_tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

/// `out[i] = z[i]` if `z[i] > theta[i]`, else 0.
///
/// The Heaviside step uses `H(0) = 0`: a pre-activation exactly at its
/// threshold stays inactive, so `z/θ > 1 ⇔ z > θ` and folding is exact.
pub fn jump_relu(z: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    if z.len() != theta.len() {
        return Err(Error::dim(format!(
            "jump_relu: z has length {}, theta {}",
            z.len(),
            theta.len()
        )));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::domain("jump_relu: non-finite threshold"));
    }
    Ok(z.iter()
        .zip(theta)
        .map(|(&z, &t)| if z > t { z } else { 0.0 })
        .collect())
}

/// `f(x) = JumpReLU(W_enc x + b_enc, theta)` for one hidden vector.
pub fn encode(sae: &SaeParams, x: &[f64]) -> Result<Vec<f64>> {
    let d = sae.hidden_dim();
    if x.len() != d {
        return Err(Error::dim(format!(
            "encode: input has length {}, expected {d}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("encode: non-finite input entry"));
    }
    let w = sae.w_enc.as_slice().expect("contiguous");
    let b = sae.b_enc.as_slice().expect("contiguous");
    let theta = sae.theta.as_slice().expect("contiguous");
    let f = sae.num_features();
    let mut out = vec![0.0; f];
    for i in 0..f {
        let row = &w[i * d..(i + 1) * d];
        let mut acc = b[i];
        for k in 0..d {
            acc += row[k] * x[k];
        }
        out[i] = if acc > theta[i] { acc } else { 0.0 };
    }
    Ok(out)
}

/// `x̂(f) = W_dec f + b_dec` for one feature vector.
pub fn decode(sae: &SaeParams, f: &[f64]) -> Result<Vec<f64>> {
    let nf = sae.num_features();
    if f.len() != nf {
        return Err(Error::dim(format!(
            "decode: input has length {}, expected {nf}",
            f.len()
        )));
    }
    let w = sae.w_dec.as_slice().expect("contiguous");
    let b = sae.b_dec.as_slice().expect("contiguous");
    let d = sae.hidden_dim();
    let mut out = vec![0.0; d];
    for dim in 0..d {
        let row = &w[dim * nf..(dim + 1) * nf];
        let mut acc = b[dim];
        for j in 0..nf {
            acc += row[j] * f[j];
        }
        out[dim] = acc;
    }
    Ok(out)
}

/// `decode(encode(x))`.
pub fn reconstruct(sae: &SaeParams, x: &[f64]) -> Result<Vec<f64>> {
    decode(sae, &encode(sae, x)?)
}

/// Encodes every token of a hidden batch. Tokens are independent and
/// processed in parallel; output does not depend on the worker count.
pub fn encode_batch(sae: &SaeParams, batch: &ActivationBatch) -> Result<ActivationBatch> {
    if batch.kind != BatchKind::Hidden {
        return Err(Error::KindMismatch("encode_batch expects a hidden batch".into()));
    }
    let d = sae.hidden_dim();
    if batch.width() != d {
        return Err(Error::dim(format!(
            "encode_batch: batch width {} != hidden dim {d}",
            batch.width()
        )));
    }
    let t = batch.num_tokens();
    let f = sae.num_features();
    let input = batch.data.as_slice().expect("contiguous");
    let mut out = vec![0.0; t * f];
    out.par_chunks_mut(f)
        .zip(input.par_chunks(d))
        .try_for_each(|(row_out, row_in)| -> Result<()> {
            row_out.copy_from_slice(&encode(sae, row_in)?);
            Ok(())
        })?;
    Ok(ActivationBatch {
        data: Array2::from_shape_vec((t, f), out).expect("shape"),
        kind: BatchKind::Feature,
        layer_id: sae.layer_id,
    })
}

/// Decodes every token of a feature batch.
pub fn decode_batch(sae: &SaeParams, batch: &ActivationBatch) -> Result<ActivationBatch> {
    if batch.kind != BatchKind::Feature {
        return Err(Error::KindMismatch("decode_batch expects a feature batch".into()));
    }
    let f = sae.num_features();
    if batch.width() != f {
        return Err(Error::dim(format!(
            "decode_batch: batch width {} != feature count {f}",
            batch.width()
        )));
    }
    let t = batch.num_tokens();
    let d = sae.hidden_dim();
    let input = batch.data.as_slice().expect("contiguous");
    let mut out = vec![0.0; t * d];
    out.par_chunks_mut(d)
        .zip(input.par_chunks(f))
        .try_for_each(|(row_out, row_in)| -> Result<()> {
            row_out.copy_from_slice(&decode(sae, row_in)?);
            Ok(())
        })?;
    Ok(ActivationBatch {
        data: Array2::from_shape_vec((t, d), out).expect("shape"),
        kind: BatchKind::Hidden,
        layer_id: sae.layer_id,
    })
}

/// `reconstruct` applied to every token of a hidden batch.
pub fn reconstruct_batch(sae: &SaeParams, batch: &ActivationBatch) -> Result<ActivationBatch> {
    decode_batch(sae, &encode_batch(sae, batch)?)
}

/// Moves the thresholds into the weights: encoder row `i` and
/// `b_enc[i]` are divided by `theta[i]`, decoder column `i` is
/// multiplied by `theta[i]`, and all thresholds become one. The SAE's
/// input-output map is unchanged.
pub fn fold_params(sae: &SaeParams) -> Result<SaeParams> {
    if sae.folded {
        return Err(Error::state("SAE is already folded"));
    }
    if sae.theta.iter().any(|&t| t <= 0.0) {
        return Err(Error::domain("fold_params requires strictly positive thresholds"));
    }
    let f = sae.num_features();
    let d = sae.hidden_dim();
    let theta = sae.theta.as_slice().expect("contiguous");

    let mut w_enc = sae.w_enc.clone();
    {
        let w = w_enc.as_slice_mut().expect("contiguous");
        for i in 0..f {
            let inv = &mut w[i * d..(i + 1) * d];
            for v in inv.iter_mut() {
                *v /= theta[i];
            }
        }
    }
    let mut b_enc = sae.b_enc.clone();
    for (b, &t) in b_enc.iter_mut().zip(theta) {
        *b /= t;
    }
    let mut w_dec = sae.w_dec.clone();
    {
        let w = w_dec.as_slice_mut().expect("contiguous");
        for dim in 0..d {
            let row = &mut w[dim * f..(dim + 1) * f];
            for (v, &t) in row.iter_mut().zip(theta) {
                *v *= t;
            }
        }
    }
    Ok(SaeParams {
        w_enc,
        b_enc,
        w_dec,
        b_dec: sae.b_dec.clone(),
        theta: Array1::ones(f),
        layer_id: sae.layer_id,
        folded: true,
    })
}

/// Mean and per-token l0 (count of strictly positive entries) of a
/// feature batch.
pub fn l0_stats(features: &ActivationBatch) -> Result<L0Stats> {
    if features.kind != BatchKind::Feature {
        return Err(Error::KindMismatch("l0_stats expects a feature batch".into()));
    }
    let per_token_l0: Vec<usize> = features
        .data
        .rows()
        .into_iter()
        .map(|row| row.iter().filter(|&&v| v > 0.0).count())
        .collect();
    let mean_l0 = per_token_l0.iter().sum::<usize>() as f64 / per_token_l0.len() as f64;
    Ok(L0Stats { mean_l0, per_token_l0 })
}
