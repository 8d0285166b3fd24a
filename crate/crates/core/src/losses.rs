//! Training signals: mean-squared SDF initialization, the score
//! distillation surrogate, and the attention/mask alignment term with its
//! min-max normalization.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{Tape, TensorError, TensorId};

/// Denominator guard for attention normalization.
pub const NORM_NU: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

/// `(1/N) sum (pred - target)^2` over equally shaped tensors.
pub fn mse_loss(tape: &mut Tape, pred: TensorId, target: TensorId) -> Result<TensorId, LossError> {
    if tape.data(pred).is_empty() {
        return Err(LossError::Invalid("mse over empty input".into()));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Scalar whose gradient w.r.t. every `rendered` pixel is exactly
/// `weight * (eps_hat - eps)`, with both noise tensors held constant.
/// Backward from it therefore drives the renderer/geometry chain only and
/// never reaches denoiser internals.
pub fn sds_surrogate(
    tape: &mut Tape,
    rendered: TensorId,
    eps_hat: &[f64],
    eps: &[f64],
    weight: f64,
) -> Result<TensorId, LossError> {
    let n = tape.data(rendered).len();
    if eps_hat.len() != n || eps.len() != n {
        return Err(LossError::Invalid(format!(
            "sds shapes differ: rendered {n}, eps_hat {}, eps {}",
            eps_hat.len(),
            eps.len()
        )));
    }
    let coeff: Vec<f64> = eps_hat
        .iter()
        .zip(eps)
        .map(|(&a, &b)| weight * (a - b))
        .collect();
    let coeff = tape.constant(coeff, tape.shape(rendered).to_vec())?;
    let weighted = tape.mul(coeff, rendered)?;
    Ok(tape.sum(weighted))
}

/// Min-max normalization of an attention map. The extrema are taken from
/// the forward values and treated as constants in backward; the alignment
/// gradient lives in the numerator.
pub fn normalize_attention(tape: &mut Tape, raw: TensorId) -> Result<TensorId, LossError> {
    let data = tape.data(raw);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(LossError::Invalid("attention map contains non-finite values".into()));
    }
    let mn = data.iter().copied().fold(f64::INFINITY, f64::min);
    let mx = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.scalar_add(raw, -mn);
    Ok(tape.scalar_mul(shifted, 1.0 / (mx - mn + NORM_NU)))
}

/// Mean absolute difference between each normalized attention map and its
/// resized mask target, averaged over layers. Per-layer means keep layers
/// of different resolutions comparable.
pub fn ama_loss(
    tape: &mut Tape,
    maps: &[TensorId],
    targets: &[TensorId],
    expected_layers: usize,
) -> Result<(TensorId, Vec<f64>), LossError> {
    if maps.len() != expected_layers || targets.len() != expected_layers {
        return Err(LossError::Invalid(format!(
            "expected {expected_layers} attention layers, got {} maps / {} targets",
            maps.len(),
            targets.len()
        )));
    }
    if expected_layers == 0 {
        return Err(LossError::Invalid("alignment needs at least one layer".into()));
    }
    let mut per_layer = Vec::with_capacity(maps.len());
    let mut acc: Option<TensorId> = None;
    for (&map, &target) in maps.iter().zip(targets) {
        if tape.shape(map) != tape.shape(target) {
            return Err(TensorError::ShapeMismatch {
                op: "ama",
                lhs: tape.shape(map).to_vec(),
                rhs: tape.shape(target).to_vec(),
            }
            .into());
        }
        let diff = tape.sub(map, target)?;
        let l1 = tape.abs(diff);
        let layer = tape.mean(l1);
        per_layer.push(tape.item(layer));
        acc = Some(match acc {
            Some(a) => tape.add(a, layer)?,
            None => layer,
        });
    }
    let total = tape.scalar_mul(acc.expect("non-empty"), 1.0 / maps.len() as f64);
    Ok((total, per_layer))
}

/// Per-iteration scalars destined for the loss log.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub iteration: usize,
    pub stage: String,
    pub sds: f64,
    pub ama: f64,
    pub per_layer_ama: Vec<f64>,
    pub grad_norm_geo: f64,
    pub grad_norm_mat: f64,
    pub grad_norm_lora: f64,
}

/// L2 norm over every gradient whose name starts with one of `prefixes`.
pub fn grad_norm(grads: &BTreeMap<String, Vec<f64>>, prefixes: &[&str]) -> f64 {
    grads
        .iter()
        .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .flat_map(|(_, g)| g.iter())
        .fold(0.0, |acc, v| acc + v * v)
        .sqrt()
}
