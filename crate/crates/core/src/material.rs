//! Appearance: a hash-grid material field (diffuse, normal variation,
//! roughness/metallic), environment lighting, and a Cook-Torrance BRDF with
//! GGX distribution, Smith shadowing, and Schlick Fresnel.
//!
//! The BRDF exists twice: as plain scalar math for oracles and previews,
//! and as tape ops for training. Both follow the same formulas and are
//! cross-checked in the tests.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

use crate::nn::{self, HashGrid, Mlp};
use crate::params::{LeafSet, ParamStore};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("environment map: {0}")]
    Env(String),
    #[error("env map i/o at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub const ROUGHNESS_FLOOR: f64 = 0.08;
pub const NORMAL_PERTURB_SCALE: f64 = 0.2;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// One quadrature sample of the incident light field.
#[derive(Debug, Clone, Copy)]
pub struct EnvSample {
    pub dir: [f64; 3],
    pub radiance: [f64; 3],
    pub solid_angle: f64,
}

/// Directional quadrature of an environment. Full maps cover the sphere
/// (solid angles summing to 4 pi); [`EnvMap::directional`] builds a single
/// delta light for tests and previews.
#[derive(Debug, Clone)]
pub struct EnvMap {
    pub samples: Vec<EnvSample>,
}

/// Deterministic, near-uniform unit directions (spherical Fibonacci set).
fn fibonacci_directions(count: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5.0f64.sqrt());
    (0..count)
        .map(|i| {
            let y = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), y, r * phi.sin()]
        })
        .collect()
}

impl EnvMap {
    /// Built-in presets: `uniform`, `three-point`, `sunset`.
    pub fn preset(name: &str, samples: usize) -> Result<Self, MaterialError> {
        if samples == 0 {
            return Err(MaterialError::Env("preset needs at least one sample".into()));
        }
        let dirs = fibonacci_directions(samples);
        let dw = 4.0 * PI / samples as f64;
        let radiance_fn: Box<dyn Fn([f64; 3]) -> [f64; 3]> = match name {
            "uniform" => Box::new(|_| [1.0, 1.0, 1.0]),
            "three-point" => Box::new(|d: [f64; 3]| {
                let lobe = |axis: [f64; 3], power: f64| {
                    dot(d, normalize3(axis)).max(0.0).powf(power)
                };
                let key = lobe([0.5, 0.7, 0.6], 8.0);
                let fill = lobe([-0.7, 0.2, 0.5], 2.0);
                let rim = lobe([0.1, 0.4, -0.9], 16.0);
                [
                    0.12 + 2.4 * key + 0.5 * fill + 1.1 * rim,
                    0.12 + 2.3 * key + 0.55 * fill + 1.1 * rim,
                    0.12 + 2.2 * key + 0.65 * fill + 1.25 * rim,
                ]
            }),
            "sunset" => Box::new(|d: [f64; 3]| {
                let y = d[1];
                let horizon = (-((y - 0.05) * (y - 0.05)) / 0.02).exp();
                let sky = y.max(0.0);
                let ground = (-y).max(0.0);
                [
                    0.08 + 2.6 * horizon + 0.35 * sky + 0.20 * ground,
                    0.08 + 1.2 * horizon + 0.45 * sky + 0.14 * ground,
                    0.08 + 0.45 * horizon + 0.80 * sky + 0.10 * ground,
                ]
            }),
            other => {
                return Err(MaterialError::Env(format!(
                    "unknown preset '{other}' (expected uniform, three-point, or sunset)"
                )))
            }
        };
        let samples = dirs
            .into_iter()
            .map(|dir| EnvSample { dir, radiance: radiance_fn(dir), solid_angle: dw })
            .collect();
        let env = Self { samples };
        env.validate()?;
        Ok(env)
    }

    /// Single delta light of unit solid angle; not a full sphere cover.
    pub fn directional(dir: [f64; 3], radiance: [f64; 3]) -> Self {
        Self {
            samples: vec![EnvSample { dir: normalize3(dir), radiance, solid_angle: 1.0 }],
        }
    }

    /// Full-sphere sanity: solid angles sum to 4 pi, radiances nonnegative.
    pub fn validate(&self) -> Result<(), MaterialError> {
        let total: f64 = self.samples.iter().map(|s| s.solid_angle).sum();
        if (total - 4.0 * PI).abs() > 1e-6 {
            return Err(MaterialError::Env(format!(
                "solid angles sum to {total}, expected 4 pi"
            )));
        }
        if self
            .samples
            .iter()
            .any(|s| s.radiance.iter().any(|&r| r < 0.0 || !r.is_finite()))
        {
            return Err(MaterialError::Env("negative or non-finite radiance".into()));
        }
        Ok(())
    }

    /// Parse the plain-text format: one `dx dy dz r g b dw` line per sample.
    pub fn from_text(text: &str) -> Result<Self, MaterialError> {
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| MaterialError::Env(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 7 {
                return Err(MaterialError::Env(format!(
                    "line {}: expected 7 fields, got {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            samples.push(EnvSample {
                dir: normalize3([vals[0], vals[1], vals[2]]),
                radiance: [vals[3], vals[4], vals[5]],
                solid_angle: vals[6],
            });
        }
        let env = Self { samples };
        env.validate()?;
        Ok(env)
    }

    pub fn load(path: &Path) -> Result<Self, MaterialError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| MaterialError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                s.dir[0], s.dir[1], s.dir[2], s.radiance[0], s.radiance[1], s.radiance[2], s.solid_angle
            ));
        }
        out
    }
}

/// Reflectance inputs of one surface point.
#[derive(Debug, Clone, Copy)]
pub struct BrdfParams {
    pub diffuse: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

/// Which reflectance terms a shade evaluates. `DiffuseOnly` keeps just the
/// Lambert term, used by the analytic shading oracles and flat previews.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrdfModel {
    CookTorrance,
    DiffuseOnly,
}

fn ggx_d(nh: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let t = nh * nh * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

fn smith_g1(nv: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let denom = (nv + (a2 + (1.0 - a2) * nv * nv).sqrt()).max(1e-7);
    2.0 * nv / denom
}

/// Diffuse and specular components of the BRDF (their sum is `f`).
pub fn brdf_components(
    wi: [f64; 3],
    wo: [f64; 3],
    n: [f64; 3],
    params: &BrdfParams,
) -> ([f64; 3], [f64; 3]) {
    let nwi = dot(n, wi);
    let nwo = dot(n, wo);
    if nwi <= 0.0 || nwo <= 0.0 {
        return ([0.0; 3], [0.0; 3]);
    }
    let m = params.metallic;
    let kd = params.diffuse;
    let diffuse = [
        (1.0 - m) * kd[0] / PI,
        (1.0 - m) * kd[1] / PI,
        (1.0 - m) * kd[2] / PI,
    ];
    let h = normalize3([wi[0] + wo[0], wi[1] + wo[1], wi[2] + wo[2]]);
    let alpha = params.roughness.max(1e-4).powi(2);
    let d = ggx_d(dot(n, h).max(0.0), alpha);
    let g = smith_g1(nwi, alpha) * smith_g1(nwo, alpha);
    let hw = dot(h, wo).max(0.0);
    let fres = |f0: f64| f0 + (1.0 - f0) * (1.0 - hw).powi(5);
    let denom = (4.0 * nwi * nwo).max(1e-7);
    let spec = [
        d * g * fres(0.04 * (1.0 - m) + kd[0] * m) / denom,
        d * g * fres(0.04 * (1.0 - m) + kd[1] * m) / denom,
        d * g * fres(0.04 * (1.0 - m) + kd[2] * m) / denom,
    ];
    (diffuse, spec)
}

/// Full reflectance `f = diffuse + specular`.
pub fn brdf_eval(wi: [f64; 3], wo: [f64; 3], n: [f64; 3], params: &BrdfParams) -> [f64; 3] {
    let (d, s) = brdf_components(wi, wo, n, params);
    [d[0] + s[0], d[1] + s[1], d[2] + s[2]]
}

/// Scalar shading of one point: radiance summed over the environment
/// quadrature with the hemispherical cosine clamp.
pub fn shade_point(
    n: [f64; 3],
    wo: [f64; 3],
    params: &BrdfParams,
    env: &EnvMap,
    model: BrdfModel,
) -> [f64; 3] {
    let mut out = [0.0; 3];
    for s in &env.samples {
        let cos = dot(s.dir, n).max(0.0);
        if cos == 0.0 {
            continue;
        }
        let f = match model {
            BrdfModel::CookTorrance => brdf_eval(s.dir, wo, n, params),
            BrdfModel::DiffuseOnly => {
                let (d, _) = brdf_components(s.dir, wo, n, params);
                d
            }
        };
        for c in 0..3 {
            out[c] += s.radiance[c] * f[c] * cos * s.solid_angle;
        }
    }
    out
}

/// The material field: hash-grid encoding into a single-hidden-layer MLP
/// with 8 sigmoid outputs mapped to diffuse, normal variation, roughness
/// (floored) and metallic.
#[derive(Debug, Clone)]
pub struct MaterialField {
    pub encoding: HashGrid,
    pub mlp: Mlp,
}

/// Tape handles of the sampled material maps.
#[derive(Debug, Clone, Copy)]
pub struct MaterialRows {
    pub diffuse: TensorId,
    pub normal_delta: TensorId,
    pub roughness_metallic: TensorId,
}

impl MaterialField {
    pub fn new() -> Self {
        let encoding = HashGrid::new("mat");
        let mlp = Mlp::new("mat.mlp", vec![encoding.output_dim(), 32, 8]);
        Self { encoding, mlp }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.encoding.table_names();
        names.extend(self.mlp.param_names());
        names
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        self.encoding.init(store, seed);
        self.mlp.init(store, seed);
    }

    /// Sample the material at surface points (clamped to the unit cube).
    /// Diffuse in `[0,1]^3`, normal delta in `[-1,1]^3`, roughness in
    /// `[ROUGHNESS_FLOOR, 1]`, metallic in `[0,1]`.
    pub fn sample(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        leafs: &mut LeafSet,
        points: &[[f64; 3]],
        trainable: bool,
    ) -> Result<MaterialRows, MaterialError> {
        let enc = self.encoding.encode(tape, store, leafs, points, trainable)?;
        let raw = self.mlp.forward(tape, store, leafs, enc, trainable)?;
        let squashed = tape.sigmoid(raw);
        let diffuse = tape.slice(squashed, 1, 0, 3)?;
        let kn01 = tape.slice(squashed, 1, 3, 3)?;
        let kn_scaled = tape.scalar_mul(kn01, 2.0);
        let normal_delta = tape.scalar_add(kn_scaled, -1.0);
        let rough01 = tape.slice(squashed, 1, 6, 1)?;
        let rough = tape.clamp(rough01, ROUGHNESS_FLOOR, 1.0);
        let metallic = tape.slice(squashed, 1, 7, 1)?;
        let roughness_metallic = tape.concat(&[rough, metallic], 1)?;
        Ok(MaterialRows { diffuse, normal_delta, roughness_metallic })
    }
}

impl Default for MaterialField {
    fn default() -> Self {
        Self::new()
    }
}

/// Perturb geometric normals by the material's normal-variation term:
/// `normalize(n + 0.2 k_n)`, flipped back into the geometric hemisphere if
/// a row ever leaves it (the 0.2 scale keeps that from happening for unit
/// geometric normals, so the flip is a value-level safety decision).
pub fn perturb_normals(
    tape: &mut Tape,
    geom_normals: TensorId,
    normal_delta: TensorId,
) -> Result<TensorId, MaterialError> {
    let scaled = tape.scalar_mul(normal_delta, NORMAL_PERTURB_SCALE);
    let bent = tape.add(geom_normals, scaled)?;
    let unit = nn::normalize_rows(tape, bent, 1e-12)?;
    let m = tape.shape(unit)[0];
    let (u, g) = (tape.data(unit), tape.data(geom_normals));
    let signs: Vec<f64> = (0..m)
        .map(|i| {
            let d = u[i * 3] * g[i * 3] + u[i * 3 + 1] * g[i * 3 + 1] + u[i * 3 + 2] * g[i * 3 + 2];
            if d < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    if signs.iter().all(|&s| s == 1.0) {
        return Ok(unit);
    }
    let sign_col = tape.constant(signs, vec![m, 1])?;
    let sign3 = nn::tile_cols(tape, sign_col, 3)?;
    Ok(tape.mul(unit, sign3)?)
}

/// Tape shading of `M` surface points under the environment quadrature.
/// Normals and material maps are differentiable; view directions and the
/// light set are constants of the frame.
pub fn shade_rows(
    tape: &mut Tape,
    normals: TensorId,
    wo: &[f64],
    mat: &MaterialRows,
    env: &EnvMap,
    model: BrdfModel,
) -> Result<TensorId, MaterialError> {
    let m = tape.shape(normals)[0];
    if wo.len() != m * 3 {
        return Err(MaterialError::Env(format!(
            "view directions: {} values for {m} rows",
            wo.len()
        )));
    }
    let kd = mat.diffuse;
    let metallic_col = tape.slice(mat.roughness_metallic, 1, 1, 1)?;
    let metallic3 = nn::tile_cols(tape, metallic_col, 3)?;
    let neg_m = tape.scalar_mul(metallic3, -1.0);
    let one_minus_m = tape.scalar_add(neg_m, 1.0);
    let kd_dielectric = tape.mul(kd, one_minus_m)?;
    let diffuse_base = tape.scalar_mul(kd_dielectric, 1.0 / PI); // [M,3]

    let mut acc: Option<TensorId> = None;
    let add_contribution = |tape: &mut Tape, acc: &mut Option<TensorId>, term: TensorId| {
        *acc = Some(match acc.take() {
            Some(a) => tape.add(a, term).expect("same shapes"),
            None => term,
        });
    };

    // Rows whose shading normal faces away from the viewer radiate nothing
    // toward it; the gate is a value-level decision like the scalar branch.
    let wo_t = tape.constant(wo.to_vec(), vec![m, 3])?;
    let nwo = nn::dot_rows(tape, normals, wo_t)?;
    let view_mask: Vec<f64> = tape.data(nwo).iter().map(|&v| f64::from(v > 0.0)).collect();
    let view_mask = tape.constant(view_mask, vec![m, 1])?;
    let view_mask3 = nn::tile_cols(tape, view_mask, 3)?;

    match model {
        BrdfModel::DiffuseOnly => {
            for s in &env.samples {
                let wi_col = tape.constant(s.dir.to_vec(), vec![3, 1])?;
                let nwi = tape.matmul(normals, wi_col)?;
                let cos = tape.clamp(nwi, 0.0, f64::INFINITY);
                let cos3 = nn::tile_cols(tape, cos, 3)?;
                let visible = tape.mul(diffuse_base, view_mask3)?;
                let lit = tape.mul(visible, cos3)?;
                let lw: Vec<f64> = (0..m * 3)
                    .map(|i| s.radiance[i % 3] * s.solid_angle)
                    .collect();
                let lw = tape.constant(lw, vec![m, 3])?;
                let term = tape.mul(lit, lw)?;
                add_contribution(tape, &mut acc, term);
            }
        }
        BrdfModel::CookTorrance => {
            let rough_col = tape.slice(mat.roughness_metallic, 1, 0, 1)?;
            let rough = tape.clamp(rough_col, 1e-4, f64::INFINITY);
            let alpha = tape.mul(rough, rough)?;
            let alpha2 = tape.mul(alpha, alpha)?;
            let a2_minus1 = tape.scalar_add(alpha2, -1.0);
            let neg_a2 = tape.scalar_mul(alpha2, -1.0);
            let one_minus_a2 = tape.scalar_add(neg_a2, 1.0);
            // F0 = 0.04 (1 - metallic) + diffuse * metallic
            let f0_dielectric = tape.scalar_mul(one_minus_m, 0.04);
            let kd_metal = tape.mul(kd, metallic3)?;
            let f0 = tape.add(f0_dielectric, kd_metal)?;
            let neg_f0 = tape.scalar_mul(f0, -1.0);
            let one_minus_f0 = tape.scalar_add(neg_f0, 1.0);

            let nwo_pos = tape.clamp(nwo, 0.0, f64::INFINITY);
            let g1_out = smith_g1_rows(tape, nwo_pos, alpha2, one_minus_a2)?;

            for s in &env.samples {
                let wi_col = tape.constant(s.dir.to_vec(), vec![3, 1])?;
                let nwi = tape.matmul(normals, wi_col)?;
                let cos = tape.clamp(nwi, 0.0, f64::INFINITY);

                // Half vectors and h.wo depend only on frame constants.
                let mut hdata = Vec::with_capacity(m * 3);
                let mut hw5 = Vec::with_capacity(m);
                for i in 0..m {
                    let w = [wo[i * 3], wo[i * 3 + 1], wo[i * 3 + 2]];
                    let h = normalize3([s.dir[0] + w[0], s.dir[1] + w[1], s.dir[2] + w[2]]);
                    hdata.extend_from_slice(&h);
                    let hwv = dot(h, w).max(0.0);
                    hw5.push((1.0 - hwv).powi(5));
                }
                let h = tape.constant(hdata, vec![m, 3])?;
                let nh = nn::dot_rows(tape, normals, h)?;
                let nh_pos = tape.clamp(nh, 0.0, f64::INFINITY);
                let nh2 = tape.mul(nh_pos, nh_pos)?;
                let t = tape.mul(nh2, a2_minus1)?;
                let t1 = tape.scalar_add(t, 1.0);
                let t2 = tape.mul(t1, t1)?;
                let pit2 = tape.scalar_mul(t2, PI);
                let d = tape.div(alpha2, pit2)?;

                let g1_in = smith_g1_rows(tape, cos, alpha2, one_minus_a2)?;
                let g = tape.mul(g1_in, g1_out)?;

                let hw5_col = tape.constant(hw5, vec![m, 1])?;
                let hw5_3 = nn::tile_cols(tape, hw5_col, 3)?;
                let fres_var = tape.mul(one_minus_f0, hw5_3)?;
                let fres = tape.add(f0, fres_var)?;

                let nwi_nwo = tape.mul(cos, nwo_pos)?;
                let denom_raw = tape.scalar_mul(nwi_nwo, 4.0);
                let denom = tape.clamp(denom_raw, 1e-7, f64::INFINITY);
                let dg = tape.mul(d, g)?;
                let dg_norm = tape.div(dg, denom)?;
                let dg3 = nn::tile_cols(tape, dg_norm, 3)?;
                let spec = tape.mul(dg3, fres)?;

                let f_raw = tape.add(diffuse_base, spec)?;
                let f = tape.mul(f_raw, view_mask3)?;
                let cos3 = nn::tile_cols(tape, cos, 3)?;
                let lit = tape.mul(f, cos3)?;
                let lw: Vec<f64> = (0..m * 3)
                    .map(|i| s.radiance[i % 3] * s.solid_angle)
                    .collect();
                let lw = tape.constant(lw, vec![m, 3])?;
                let term = tape.mul(lit, lw)?;
                add_contribution(tape, &mut acc, term);
            }
        }
    }
    match acc {
        Some(id) => Ok(id),
        None => Ok(tape.constant(vec![0.0; m * 3], vec![m, 3])?),
    }
}

fn smith_g1_rows(
    tape: &mut Tape,
    nv: TensorId,
    alpha2: TensorId,
    one_minus_a2: TensorId,
) -> Result<TensorId, MaterialError> {
    let nv2 = tape.mul(nv, nv)?;
    let t = tape.mul(nv2, one_minus_a2)?;
    let under = tape.add(t, alpha2)?;
    let root = tape.sqrt(under);
    let denom_raw = tape.add(nv, root)?;
    let denom = tape.clamp(denom_raw, 1e-7, f64::INFINITY);
    let two_nv = tape.scalar_mul(nv, 2.0);
    Ok(tape.div(two_nv, denom)?)
}
