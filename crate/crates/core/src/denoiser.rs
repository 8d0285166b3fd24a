//! Frozen stand-in denoiser: a seeded patch-token transformer with
//! cross-attention against toy text tokens (CLS first). It predicts the
//! noise in its input and records, per block, the spatial attention toward
//! the CLS key for the alignment loss.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cglora::{self, AdapterSet};
use crate::rng;
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lora(#[from] crate::cglora::LoraError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error("prompt is empty after tokenization")]
    EmptyPrompt,
    #[error("{0}")]
    Invalid(String),
}

/// Fixed stream key for the frozen text stand-in, independent of run seeds
/// so every run sees the same embeddings.
const TEXT_SEED: u64 = 0x7e87_3a11;

/// Linear-beta diffusion schedule. `alpha(t)^2 + sigma(t)^2 = 1` holds
/// exactly because both derive from the same cumulative product.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    alpha_bar: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

impl NoiseSchedule {
    pub fn new(timesteps: usize) -> Self {
        assert!(timesteps >= 2, "schedule needs at least two steps");
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut prod = 1.0;
        for i in 0..timesteps {
            let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (timesteps - 1) as f64;
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Self { timesteps, alpha_bar }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Gradient weight w(t) = sigma(t)^2.
    pub fn weight(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t]
    }

    /// Uniform draw from the central 96% of the schedule.
    pub fn sample_timestep(&self, rng: &mut ChaCha8Rng) -> usize {
        let lo = (0.02 * self.timesteps as f64) as usize;
        let hi = (0.98 * self.timesteps as f64) as usize;
        rng.gen_range(lo..hi)
    }

    /// `x_t = alpha(t) x + sigma(t) eps` with `eps` entering as a constant.
    pub fn add_noise(
        &self,
        tape: &mut Tape,
        x: TensorId,
        t: usize,
        eps: &[f64],
    ) -> Result<TensorId, DenoiserError> {
        if eps.len() != tape.data(x).len() {
            return Err(DenoiserError::Invalid(format!(
                "noise length {} does not match input {}",
                eps.len(),
                tape.data(x).len()
            )));
        }
        let eps_t = tape.constant(eps.to_vec(), tape.shape(x).to_vec())?;
        let ax = tape.scalar_mul(x, self.alpha(t));
        let se = tape.scalar_mul(eps_t, self.sigma(t));
        Ok(tape.add(ax, se)?)
    }
}

/// Direction-aware prompt suffix from the camera yaw.
pub fn direction_suffix(yaw: f64) -> &'static str {
    let tau = std::f64::consts::TAU;
    let mut y = yaw % tau;
    if y > std::f64::consts::PI {
        y -= tau;
    } else if y <= -std::f64::consts::PI {
        y += tau;
    }
    let a = y.abs();
    if a < std::f64::consts::FRAC_PI_4 {
        ", front view"
    } else if a < 3.0 * std::f64::consts::FRAC_PI_4 {
        ", side view"
    } else {
        ", back view"
    }
}

/// Frozen token features of one prompt: a CLS row shared by all prompts,
/// one hashed row per whitespace token, and the pooled mean of the token
/// rows.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub tokens: Vec<String>,
    pub dim: usize,
    /// `(tokens + 1) x dim`, CLS at row 0.
    pub features: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl TextEncoding {
    pub fn rows(&self) -> usize {
        self.tokens.len() + 1
    }
}

fn seeded_row(domain: &str, ids: &[u64], dim: usize) -> Vec<f64> {
    let mut r = rng::stream(TEXT_SEED, domain, ids);
    (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

pub fn encode_text(prompt: &str, dim: usize) -> Result<TextEncoding, DenoiserError> {
    let tokens: Vec<String> = prompt.split_whitespace().map(|s| s.to_string()).collect();
    if tokens.is_empty() {
        return Err(DenoiserError::EmptyPrompt);
    }
    let mut features = seeded_row("text-cls", &[], dim);
    let mut pooled = vec![0.0; dim];
    for tok in &tokens {
        let row = seeded_row("text-word", &[rng::hash_str(tok)], dim);
        for (p, v) in pooled.iter_mut().zip(&row) {
            *p += v / tokens.len() as f64;
        }
        features.extend(row);
    }
    Ok(TextEncoding { tokens, dim, features, pooled })
}

/// Attention-score divisor: the full channel dimension or the per-head one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    SqrtDim,
    SqrtDimPerHead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Token channel width d.
    pub dim: usize,
    /// Attention heads H.
    pub heads: usize,
    /// Number of attention blocks L.
    pub layers: usize,
    /// Input image side; tokens are 1x1 patches, so h = w = input_res.
    pub input_res: usize,
    /// Text token width fed to the key/value input projection.
    pub text_dim: usize,
    pub attn_scale: AttnScale,
}

impl DenoiserConfig {
    pub fn token_count(&self) -> usize {
        self.input_res * self.input_res
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(DenoiserError::Invalid(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.input_res == 0 {
            return Err(DenoiserError::Invalid("layers and input_res must be positive".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        match self.attn_scale {
            AttnScale::SqrtDim => 1.0 / (self.dim as f64).sqrt(),
            AttnScale::SqrtDimPerHead => 1.0 / (self.dim as f64 / self.heads as f64).sqrt(),
        }
    }
}

/// All frozen weights, bit-identical for a fixed seed. Never optimized;
/// they enter tapes as constants only.
#[derive(Debug, Clone)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl DenoiserWeights {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self, DenoiserError> {
        config.validate()?;
        let d = config.dim;
        let n = config.token_count();
        let mut arrays = BTreeMap::new();
        let insert_gauss = |name: String, rows: usize, cols: usize, arrays: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>| {
            let mut r = rng::stream(seed, "denoiser", &[rng::hash_str(&name)]);
            let scale = 1.0 / (rows as f64).sqrt();
            let data: Vec<f64> =
                (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal) * scale).collect();
            arrays.insert(name, (vec![rows, cols], data));
        };
        insert_gauss("patch.w".into(), 3, d, &mut arrays);
        arrays.insert("patch.b".into(), (vec![d], vec![0.0; d]));
        insert_gauss("text.w".into(), config.text_dim, d, &mut arrays);
        arrays.insert("text.b".into(), (vec![d], vec![0.0; d]));
        arrays.insert("pos".into(), (vec![n, d], positional_embedding(config.input_res, d)));
        for b in 0..config.layers {
            for proj in ["q", "k", "v", "o"] {
                insert_gauss(format!("block{b}.{proj}.w"), d, d, &mut arrays);
            }
            insert_gauss(format!("block{b}.ff1.w"), d, 2 * d, &mut arrays);
            arrays.insert(format!("block{b}.ff1.b"), (vec![2 * d], vec![0.0; 2 * d]));
            insert_gauss(format!("block{b}.ff2.w"), 2 * d, d, &mut arrays);
            arrays.insert(format!("block{b}.ff2.b"), (vec![d], vec![0.0; d]));
        }
        insert_gauss("out.w".into(), d, 3, &mut arrays);
        // Damp the head: a trained noise predictor leaves modest residuals
        // against the true noise, and an undamped random head would swamp
        // the distillation signal with a large constant drift.
        if let Some((_, w)) = arrays.get_mut("out.w") {
            w.iter_mut().for_each(|v| *v *= 0.05);
        }
        arrays.insert("out.b".into(), (vec![3], vec![0.0; 3]));
        Ok(Self { config, arrays })
    }

    fn constant(&self, tape: &mut Tape, name: &str) -> TensorId {
        let (shape, data) = self.arrays.get(name).expect("known weight name");
        tape.constant(data.clone(), shape.clone()).expect("consistent weight shapes")
    }

    /// FNV-1a over all weight bits; the frozen-weight immutability check.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, (_, data)) in &self.arrays {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for v in data {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Two-axis sinusoidal position features for the token lattice.
fn positional_embedding(res: usize, d: usize) -> Vec<f64> {
    let quarter = (d / 4).max(1);
    let mut out = vec![0.0; res * res * d];
    for y in 0..res {
        for x in 0..res {
            let base = (y * res + x) * d;
            for i in 0..d {
                let (axis_pos, k) = if i < d / 2 { (x as f64, i) } else { (y as f64, i - d / 2) };
                let pair = k / 2;
                let freq = (10_000f64).powf(-(pair as f64) / quarter as f64);
                out[base + i] = if k % 2 == 0 {
                    (axis_pos * freq).sin()
                } else {
                    (axis_pos * freq).cos()
                };
            }
        }
    }
    out
}

/// Sinusoidal embedding of the integer timestep.
fn time_embedding(t: usize, d: usize) -> Vec<f64> {
    let half = (d / 2).max(1);
    (0..d)
        .map(|i| {
            let pair = i / 2;
            let freq = (10_000f64).powf(-(pair as f64) / half as f64);
            let x = t as f64 * freq;
            if i % 2 == 0 {
                x.sin()
            } else {
                x.cos()
            }
        })
        .collect()
}

/// Head-averaged spatial attention toward the CLS key of one block, raw
/// and min-max normalized, both shaped `[h, w]` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord {
    pub layer: usize,
    pub raw: TensorId,
    pub normalized: TensorId,
}

#[derive(Debug)]
pub struct DenoiserOutput {
    pub eps_hat: TensorId,
    pub records: Vec<AttentionRecord>,
}

/// Run the frozen denoiser on `x_t` (`[r, r, 3]`). Adapters, when present,
/// are added to every attention projection. Per block, the spatial softmax
/// of the query/CLS-key scores is recorded per head, head-averaged, then
/// min-max normalized.
pub fn predict_noise(
    tape: &mut Tape,
    weights: &DenoiserWeights,
    x_t: TensorId,
    text: &TextEncoding,
    t: usize,
    adapters: Option<&AdapterSet>,
) -> Result<DenoiserOutput, DenoiserError> {
    let cfg = &weights.config;
    let r = cfg.input_res;
    let (d, heads) = (cfg.dim, cfg.heads);
    let dh = d / heads;
    let n = cfg.token_count();
    if tape.shape(x_t) != [r, r, 3] {
        return Err(DenoiserError::Invalid(format!(
            "input shape {:?}, expected [{r}, {r}, 3]",
            tape.shape(x_t)
        )));
    }
    if text.dim != cfg.text_dim {
        return Err(DenoiserError::Invalid(format!(
            "text width {} does not match config {}",
            text.dim, cfg.text_dim
        )));
    }
    if let Some(ad) = adapters {
        if ad.blocks.len() != cfg.layers {
            return Err(DenoiserError::Invalid(format!(
                "{} adapter blocks for {} layers",
                ad.blocks.len(),
                cfg.layers
            )));
        }
    }

    // Patch tokens plus position and timestep features.
    let tokens = tape.reshape(x_t, vec![n, 3])?;
    let patch_w = weights.constant(tape, "patch.w");
    let patch_b = weights.constant(tape, "patch.b");
    let embedded = tape.matmul(tokens, patch_w)?;
    let embedded = tape.add_bias(embedded, patch_b)?;
    let pos = weights.constant(tape, "pos");
    let with_pos = tape.add(embedded, pos)?;
    let time = tape.constant(time_embedding(t, d), vec![d])?;
    let mut x = tape.add_bias(with_pos, time)?;

    // Text tokens projected to the attention width.
    let m = text.rows();
    let text_tokens = tape.constant(text.features.clone(), vec![m, cfg.text_dim])?;
    let text_w = weights.constant(tape, "text.w");
    let text_b = weights.constant(tape, "text.b");
    let k_src = tape.matmul(text_tokens, text_w)?;
    let k_src = tape.add_bias(k_src, text_b)?;

    let scale = cfg.scale();
    let mut records = Vec::with_capacity(cfg.layers);
    for block in 0..cfg.layers {
        let block_ad = adapters.map(|a| &a.blocks[block]);
        let wq = weights.constant(tape, &format!("block{block}.q.w"));
        let wk = weights.constant(tape, &format!("block{block}.k.w"));
        let wv = weights.constant(tape, &format!("block{block}.v.w"));
        let wo = weights.constant(tape, &format!("block{block}.o.w"));
        let q = cglora::lora_forward(tape, x, wq, block_ad.map(|a| &a.q))?;
        let k = cglora::lora_forward(tape, k_src, wk, block_ad.map(|a| &a.k))?;
        let v = cglora::lora_forward(tape, k_src, wv, block_ad.map(|a| &a.v))?;

        let mut head_outputs = Vec::with_capacity(heads);
        let mut cls_maps = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores_raw = tape.matmul(qh, kt)?;
            let scores = tape.scalar_mul(scores_raw, scale);
            let attn = tape.softmax(scores, 1)?;
            head_outputs.push(tape.matmul(attn, vh)?);

            // Spatial attention toward the CLS key: softmax over the h*w
            // query positions of this head's CLS scores.
            let cls_scores = tape.slice(scores, 1, 0, 1)?;
            cls_maps.push(tape.softmax(cls_scores, 0)?);
        }
        let concat = tape.concat(&head_outputs, 1)?;
        let attended = cglora::lora_forward(tape, concat, wo, block_ad.map(|a| &a.o))?;
        x = tape.add(x, attended)?;

        let mut avg = cls_maps[0];
        for &mp in &cls_maps[1..] {
            avg = tape.add(avg, mp)?;
        }
        let scaled = tape.scalar_mul(avg, 1.0 / heads as f64);
        let raw = tape.reshape(scaled, vec![r, r])?;
        let normalized = crate::losses::normalize_attention(tape, raw)?;
        records.push(AttentionRecord { layer: block, raw, normalized });

        let ff1 = weights.constant(tape, &format!("block{block}.ff1.w"));
        let ffb1 = weights.constant(tape, &format!("block{block}.ff1.b"));
        let ff2 = weights.constant(tape, &format!("block{block}.ff2.w"));
        let ffb2 = weights.constant(tape, &format!("block{block}.ff2.b"));
        let h1 = tape.matmul(x, ff1)?;
        let h1 = tape.add_bias(h1, ffb1)?;
        let h1 = tape.silu(h1);
        let h2 = tape.matmul(h1, ff2)?;
        let h2 = tape.add_bias(h2, ffb2)?;
        x = tape.add(x, h2)?;
    }

    let out_w = weights.constant(tape, "out.w");
    let out_b = weights.constant(tape, "out.b");
    let eps_tokens = tape.matmul(x, out_w)?;
    let eps_tokens = tape.add_bias(eps_tokens, out_b)?;
    let eps_hat = tape.reshape(eps_tokens, vec![r, r, 3])?;
    Ok(DenoiserOutput { eps_hat, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::new(1000);
        for t in 0..1000 {
            let (a, sg) = (s.alpha(t), s.sigma(t));
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
            if t > 0 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar strictly decreasing");
            }
        }
        assert!(s.alpha_bar(0) > 0.999);
    }

    #[test]
    fn timestep_sampling_stays_in_central_band() {
        let s = NoiseSchedule::new(1000);
        let mut r = rng::stream(1, "ts", &[]);
        for _ in 0..2000 {
            let t = s.sample_timestep(&mut r);
            assert!((20..980).contains(&t));
        }
    }

    #[test]
    fn add_noise_is_exact_affine() {
        let s = NoiseSchedule::new(100);
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 0.5], vec![3]).unwrap();
        let xt = s.add_noise(&mut tape, x, 40, &[0.0, 0.0, 0.0]).unwrap();
        for (got, want) in tape.data(xt).iter().zip([1.0, -2.0, 0.5]) {
            assert!((got - s.alpha(40) * want).abs() < 1e-15);
        }
    }

    #[test]
    fn direction_suffix_buckets() {
        use std::f64::consts::PI;
        assert_eq!(direction_suffix(0.0), ", front view");
        assert_eq!(direction_suffix(PI), ", back view");
        assert_eq!(direction_suffix(PI / 2.0), ", side view");
        assert_eq!(direction_suffix(-PI / 2.0), ", side view");
        assert_eq!(direction_suffix(-3.0), ", back view");
        assert_eq!(direction_suffix(PI / 4.0), ", side view");
    }

    #[test]
    fn text_encoding_is_deterministic_and_structured() {
        let a = encode_text("a red fox", 64).unwrap();
        let b = encode_text("a red fox", 64).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.pooled, b.pooled);

        let c = encode_text("a blue fox", 64).unwrap();
        // CLS rows identical across prompts.
        assert_eq!(a.features[..64], c.features[..64]);
        // Row for "a" identical, row for the changed word different.
        assert_eq!(a.features[64..128], c.features[64..128]);
        assert_ne!(a.features[128..192], c.features[128..192]);
        assert_ne!(a.pooled, c.pooled);

        assert!(matches!(encode_text("   ", 64), Err(DenoiserError::EmptyPrompt)));
    }

    fn tiny_weights() -> DenoiserWeights {
        DenoiserWeights::new(
            DenoiserConfig {
                dim: 16,
                heads: 2,
                layers: 2,
                input_res: 4,
                text_dim: 8,
                attn_scale: AttnScale::SqrtDim,
            },
            99,
        )
        .unwrap()
    }

    #[test]
    fn weights_are_seed_deterministic() {
        let a = tiny_weights();
        let b = tiny_weights();
        assert_eq!(a.checksum(), b.checksum());
        let c = DenoiserWeights::new(a.config.clone(), 100).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn predict_noise_shapes_and_records() {
        let w = tiny_weights();
        let text = encode_text("tiny test prompt", 8).unwrap();
        let mut tape = Tape::new();
        let mut r = rng::stream(2, "x", &[]);
        let data: Vec<f64> = (0..4 * 4 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = tape.leaf(data, vec![4, 4, 3]).unwrap();
        let out = predict_noise(&mut tape, &w, x, &text, 17, None).unwrap();
        assert_eq!(tape.shape(out.eps_hat), &[4, 4, 3]);
        assert_eq!(out.records.len(), 2);
        for rec in &out.records {
            assert_eq!(tape.shape(rec.raw), &[4, 4]);
            let raw = tape.data(rec.raw);
            assert!(raw.iter().all(|&v| v > 0.0));
            // Head average of per-head spatial softmaxes sums to one.
            let sum: f64 = raw.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let nm = tape.data(rec.normalized);
            let mn = nm.iter().copied().fold(f64::INFINITY, f64::min);
            let mx = nm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(mn, 0.0);
            assert!(mx < 1.0);
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let w = tiny_weights();
        let text = encode_text("x", 8).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0; 27], vec![3, 3, 3]).unwrap();
        assert!(predict_noise(&mut tape, &w, x, &text, 5, None).is_err());
    }
}
