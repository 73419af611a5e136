//! Contrastive objectives over a mini-batch and their exact gradients.
//!
//! The textual objective contrasts two dropout views of each sentence against
//! the second views of all other in-batch sentences. The multimodal objective
//! contrasts each view's shared-space projection against all in-batch image
//! projections, summing over both views. The combined per-instance loss is
//! `ℓ_S + λ·ℓ_M`, averaged over the batch.
//!
//! The backward pass is written out by hand for the fixed
//! pool → dropout → affine → tanh → (normalize) → cosine → softmax-NLL chain.

use serde::{Deserialize, Serialize};

use crate::data::{BatchKind, MiniBatch};
use crate::error::{Error, Result};
use crate::model::{Affine, DropoutMask, FeatureTable, ModelParams, Tensors};
use crate::numeric::{self, DenseMatrix};

/// Unit-norm tolerance for shared-space rows.
pub const SHARED_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Textual temperature τ.
    pub tau: f64,
    /// Multimodal temperature τ′.
    pub tau_prime: f64,
    /// Weight λ on the multimodal term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            tau_prime: 0.05,
            lambda: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.tau_prime > 0.0 && self.tau_prime.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tau_prime must be positive, got {}",
                self.tau_prime
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLossResult {
    pub per_instance_textual: Vec<f64>,
    /// Empty for text-only batches.
    pub per_instance_multimodal: Vec<f64>,
    pub mean_total: f64,
}

impl BatchLossResult {
    pub fn mean_textual(&self) -> f64 {
        mean(&self.per_instance_textual)
    }

    pub fn mean_multimodal(&self) -> Option<f64> {
        (!self.per_instance_multimodal.is_empty()).then(|| mean(&self.per_instance_multimodal))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Source of the per-batch dropout masks. Masks are a pure function of
/// `(seed, row, view)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskStream {
    pub seed: u64,
    pub keep_prob: f64,
}

impl MaskStream {
    pub fn mask(&self, row: usize, view: usize, dim: usize) -> Result<DropoutMask> {
        DropoutMask::derive(self.seed, row as u64, view as u64, dim, self.keep_prob)
    }
}

fn check_same_shape(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            got: b.rows(),
        });
    }
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            expected: a.cols(),
            got: b.cols(),
        });
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

/// Per-instance textual losses for view matrices `h_z` and `h_zp`.
pub fn simcse_batch_loss(h_z: &DenseMatrix, h_zp: &DenseMatrix, tau: f64) -> Result<Vec<f64>> {
    check_same_shape(h_z, h_zp)?;
    check_temperature(tau)?;
    let n = h_z.rows();
    let mut scores = vec![0.0; n];
    (0..n)
        .map(|i| {
            for (j, s) in scores.iter_mut().enumerate() {
                *s = numeric::cosine_slices(h_z.row(i), h_zp.row(j))? / tau;
            }
            numeric::softmax_nll(&scores, i)
        })
        .collect()
}

/// Per-instance multimodal losses; each sums the NLL of both views against
/// the paired image with all other in-batch images as negatives.
pub fn multimodal_batch_loss(
    s_z: &DenseMatrix,
    s_zp: &DenseMatrix,
    v: &DenseMatrix,
    tau_prime: f64,
) -> Result<Vec<f64>> {
    check_same_shape(s_z, s_zp)?;
    check_same_shape(s_z, v)?;
    check_temperature(tau_prime)?;
    for m in [s_z, s_zp, v] {
        if let Some(row) = m
            .iter_rows()
            .find(|r| (numeric::norm(r) - 1.0).abs() > SHARED_NORM_TOLERANCE)
        {
            return Err(Error::InvalidArgument(format!(
                "shared-space rows must be unit norm, found norm {}",
                numeric::norm(row)
            )));
        }
    }
    let n = s_z.rows();
    let mut scores = vec![0.0; n];
    (0..n)
        .map(|i| {
            let mut total = 0.0;
            for view in [s_z, s_zp] {
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = numeric::cosine_slices(view.row(i), v.row(j))? / tau_prime;
                }
                total += numeric::softmax_nll(&scores, i)?;
            }
            Ok(total)
        })
        .collect()
}

/// Mean over the batch of `ℓ_S + λ·ℓ_M`; an empty `l_m` counts as zeros.
pub fn combined_loss(l_s: &[f64], l_m: &[f64], lambda: f64) -> Result<f64> {
    if l_s.is_empty() {
        return Err(Error::Empty("no per-instance losses"));
    }
    if !l_m.is_empty() && l_m.len() != l_s.len() {
        return Err(Error::DimensionMismatch {
            expected: l_s.len(),
            got: l_m.len(),
        });
    }
    let sum: f64 = if l_m.is_empty() {
        l_s.iter().sum()
    } else {
        l_s.iter().zip(l_m).map(|(s, m)| s + lambda * m).sum()
    };
    Ok(sum / l_s.len() as f64)
}

/// Runs the forward pass and accumulates `∂ mean_total / ∂θ` into
/// `params.grads`. Gradient slots are not cleared first.
pub fn batch_loss_and_grads(
    batch: &MiniBatch,
    features: Option<&FeatureTable>,
    params: &mut ModelParams,
    cfg: &LossConfig,
    masks: MaskStream,
) -> Result<BatchLossResult> {
    let dims = *params.dims();
    let ModelParams { values, grads, .. } = params;
    forward_backward(batch, features, values, &dims, cfg, masks, Some(grads))
}

/// Forward pass only; leaves gradients untouched.
pub fn batch_loss(
    batch: &MiniBatch,
    features: Option<&FeatureTable>,
    params: &ModelParams,
    cfg: &LossConfig,
    masks: MaskStream,
) -> Result<BatchLossResult> {
    forward_backward(
        batch,
        features,
        &params.values,
        params.dims(),
        cfg,
        masks,
        None,
    )
}

/// Cached activations of one `tanh(Wx+b)` head, optionally normalized.
struct HeadActs {
    /// Row-major `n × out`, post-tanh.
    act: Vec<f64>,
    /// Norm of each `act` row (only meaningful when normalized).
    norms: Vec<f64>,
    /// Unit rows of `act`.
    unit: Vec<f64>,
    out: usize,
}

impl HeadActs {
    fn compute(head: &Affine, inputs: &[f64], n: usize) -> Result<Self> {
        let (out, inp) = (head.out_dim(), head.in_dim());
        let mut act = vec![0.0; n * out];
        let mut norms = vec![0.0; n];
        let mut unit = vec![0.0; n * out];
        for i in 0..n {
            let a = &mut act[i * out..(i + 1) * out];
            head.forward_into(&inputs[i * inp..(i + 1) * inp], a);
            let nrm = numeric::norm(a);
            if nrm <= numeric::NORM_EPSILON {
                return Err(Error::ZeroNorm { norm: nrm });
            }
            norms[i] = nrm;
            for (u, x) in unit[i * out..(i + 1) * out].iter_mut().zip(a.iter()) {
                *u = x / nrm;
            }
        }
        Ok(HeadActs {
            act,
            norms,
            unit,
            out,
        })
    }

    fn unit_row(&self, i: usize) -> &[f64] {
        &self.unit[i * self.out..(i + 1) * self.out]
    }

    /// Maps a gradient w.r.t. the unit rows back through normalization and
    /// tanh, accumulating weight/bias grads and `∂/∂input`.
    fn backward(
        &self,
        head: &Affine,
        grad_head: &mut Affine,
        inputs: &[f64],
        d_unit: &[f64],
        d_inputs: &mut [f64],
    ) {
        let (out, inp) = (self.out, head.in_dim());
        let mut d_pre = vec![0.0; out];
        for i in 0..self.norms.len() {
            let u = self.unit_row(i);
            let du = &d_unit[i * out..(i + 1) * out];
            let a = &self.act[i * out..(i + 1) * out];
            let proj = numeric::dot(u, du);
            let inv = 1.0 / self.norms[i];
            for k in 0..out {
                let d_act = (du[k] - u[k] * proj) * inv;
                d_pre[k] = d_act * (1.0 - a[k] * a[k]);
            }
            let x = &inputs[i * inp..(i + 1) * inp];
            grad_head.weight.add_outer(&d_pre, x);
            numeric::axpy(1.0, &d_pre, &mut grad_head.bias);
            head.weight
                .matvec_t_acc(&d_pre, &mut d_inputs[i * inp..(i + 1) * inp]);
        }
    }
}

/// Contrastive NLL over the score matrix `a_unit[i]·b_unit[j] / temp`, with
/// row `i` targeting column `i`. Returns per-row losses and adds
/// `weight · ∂(Σ_i ℓ_i)/∂unit` into `d_a`, `d_b` when requested.
fn contrast(
    a: &HeadActs,
    b: &HeadActs,
    temp: f64,
    weight: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let n = a.norms.len();
    let mut scores = vec![0.0; n];
    let mut probs = vec![0.0; n];
    let mut losses = Vec::with_capacity(n);
    let mut grads = grads;
    for i in 0..n {
        let ai = a.unit_row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = numeric::dot(ai, b.unit_row(j)) / temp;
        }
        numeric::softmax_into(&scores, &mut probs);
        losses.push(numeric::softmax_nll(&scores, i).unwrap_or(f64::NAN));
        if let Some((d_a, d_b)) = grads.as_mut() {
            let out = a.out;
            for j in 0..n {
                let g = weight * (probs[j] - if i == j { 1.0 } else { 0.0 }) / temp;
                numeric::axpy(g, b.unit_row(j), &mut d_a[i * out..(i + 1) * out]);
                numeric::axpy(g, ai, &mut d_b[j * out..(j + 1) * out]);
            }
        }
    }
    losses
}

fn forward_backward(
    batch: &MiniBatch,
    features: Option<&FeatureTable>,
    values: &Tensors,
    dims: &crate::model::Dims,
    cfg: &LossConfig,
    masks: MaskStream,
    mut grads: Option<&mut Tensors>,
) -> Result<BatchLossResult> {
    cfg.validate()?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("mini-batch"));
    }
    let d = dims.d;

    // Pooled sentence vectors and the two dropout views.
    let mut pooled = vec![0.0; n * d];
    let mut scales = [vec![0.0; n * d], vec![0.0; n * d]];
    let mut views = [vec![0.0; n * d], vec![0.0; n * d]];
    for (i, tokens) in batch.sentences.iter().enumerate() {
        check_tokens(tokens, dims.vocab)?;
        let p = &mut pooled[i * d..(i + 1) * d];
        for &t in tokens {
            numeric::axpy(1.0, values.embed.row(t as usize), p);
        }
        let inv = 1.0 / tokens.len() as f64;
        p.iter_mut().for_each(|x| *x *= inv);
        for view in 0..2 {
            let mask = masks.mask(i, view, d)?;
            for k in 0..d {
                let s = mask.scale(k);
                scales[view][i * d + k] = s;
                views[view][i * d + k] = p[k] * s;
            }
        }
    }

    let h = [
        HeadActs::compute(&values.textual, &views[0], n)?,
        HeadActs::compute(&values.textual, &views[1], n)?,
    ];
    let weight = 1.0 / n as f64;
    let mut d_h = [vec![0.0; n * d], vec![0.0; n * d]];
    let textual = {
        let g = grads.is_some().then(|| {
            let [a, b] = &mut d_h;
            (a.as_mut_slice(), b.as_mut_slice())
        });
        contrast(&h[0], &h[1], cfg.tau, weight, g)
    };

    let mut d_views = [vec![0.0; n * d], vec![0.0; n * d]];
    if let Some(g) = grads.as_deref_mut() {
        for view in 0..2 {
            h[view].backward(
                &values.textual,
                &mut g.textual,
                &views[view],
                &d_h[view],
                &mut d_views[view],
            );
        }
    }

    let mut multimodal = Vec::new();
    if batch.kind == BatchKind::Multimodal {
        let table = features.ok_or_else(|| {
            Error::InvalidArgument("multimodal batch requires an image feature table".into())
        })?;
        if table.dim() != dims.d_v {
            return Err(Error::DimensionMismatch {
                expected: dims.d_v,
                got: table.dim(),
            });
        }
        if batch.image_ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: batch.image_ids.len(),
            });
        }
        let mut image_in = Vec::with_capacity(n * dims.d_v);
        for id in &batch.image_ids {
            image_in.extend_from_slice(table.require(id)?);
        }
        let s = [
            HeadActs::compute(&values.shared_text, &views[0], n)?,
            HeadActs::compute(&values.shared_text, &views[1], n)?,
        ];
        let v = HeadActs::compute(&values.shared_image, &image_in, n)?;
        let ds = dims.d_s;
        let mut d_s = [vec![0.0; n * ds], vec![0.0; n * ds]];
        let mut d_v = vec![0.0; n * ds];
        let mm_weight = cfg.lambda * weight;
        multimodal = vec![0.0; n];
        for view in 0..2 {
            let g = grads
                .is_some()
                .then(|| (d_s[view].as_mut_slice(), d_v.as_mut_slice()));
            let losses = contrast(&s[view], &v, cfg.tau_prime, mm_weight, g);
            for (acc, l) in multimodal.iter_mut().zip(losses) {
                *acc += l;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            for view in 0..2 {
                s[view].backward(
                    &values.shared_text,
                    &mut g.shared_text,
                    &views[view],
                    &d_s[view],
                    &mut d_views[view],
                );
            }
            // Image features are frozen; their input gradient is discarded.
            let mut sink = vec![0.0; n * dims.d_v];
            v.backward(
                &values.shared_image,
                &mut g.shared_image,
                &image_in,
                &d_v,
                &mut sink,
            );
        }
    }

    if let Some(g) = grads {
        let mut d_pool = vec![0.0; d];
        for (i, tokens) in batch.sentences.iter().enumerate() {
            for (k, dp) in d_pool.iter_mut().enumerate() {
                let idx = i * d + k;
                *dp = d_views[0][idx] * scales[0][idx] + d_views[1][idx] * scales[1][idx];
            }
            let inv = 1.0 / tokens.len() as f64;
            for &t in tokens {
                numeric::axpy(inv, &d_pool, g.embed.row_mut(t as usize));
            }
        }
    }

    let mean_total = combined_loss(&textual, &multimodal, cfg.lambda)?;
    if !mean_total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {mean_total}")));
    }
    Ok(BatchLossResult {
        per_instance_textual: textual,
        per_instance_multimodal: multimodal,
        mean_total,
    })
}

fn check_tokens(tokens: &[crate::model::TokenId], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("sentence has no tokens"));
    }
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&t) => Err(Error::IndexOutOfRange {
            index: t as usize,
            len: vocab,
        }),
        None => Ok(()),
    }
}
