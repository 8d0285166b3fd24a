//! Two-stage optimization driver: geometry then appearance, with camera
//! sampling, loss logging, checkpoints, and artifact export.
//!
//! Every random draw is keyed by `(seed, purpose, stage, iteration, frame)`
//! so a resumed run replays the exact trajectory of an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cglora::{CameraEncoder, CgLoraSet};
use crate::denoiser::{
    self, AttnScale, DenoiserConfig, DenoiserWeights, NoiseSchedule, TextEncoding,
};
use crate::geometry::{self, GeometryField, TetGrid};
use crate::io;
use crate::losses::{self, LossReport};
use crate::material::{BrdfModel, EnvMap, MaterialField};
use crate::params::{Adam, LeafSet, ParamStore};
use crate::render::{self, CameraPose, FrameBuffers};
use crate::rng;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
    #[error(transparent)]
    Material(#[from] crate::material::MaterialError),
    #[error(transparent)]
    Denoiser(#[from] crate::denoiser::DenoiserError),
    #[error(transparent)]
    Lora(#[from] crate::cglora::LoraError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Params(#[from] crate::params::ParamError),
    #[error(transparent)]
    Files(#[from] crate::io::IoError),
    #[error("i/o at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss at {stage} iteration {iteration} ({what})")]
    NonFinite { stage: Stage, iteration: usize, what: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Sampling ranges for the per-iteration cameras, in degrees. Cameras sit
/// on a sphere of `radius` looking at the origin.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRanges {
    pub pitch_deg: [f64; 2],
    pub yaw_deg: [f64; 2],
    pub fov_deg: [f64; 2],
    pub radius: f64,
}

impl Default for CameraRanges {
    fn default() -> Self {
        Self {
            pitch_deg: [-15.0, 45.0],
            yaw_deg: [-180.0, 180.0],
            fov_deg: [25.0, 45.0],
            radius: 2.5,
        }
    }
}

/// Full run configuration. Defaults are the desk-scale setup; every field
/// can be overridden from JSON or the command line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompt: String,
    pub seed: u64,
    /// Tet lattice cells per axis.
    pub grid_resolution: usize,
    /// Rendered image side in pixels.
    pub render_res: usize,
    /// Denoiser token image side (renders are average-pooled to it).
    pub denoiser_res: usize,
    /// Denoiser channel width d.
    pub denoiser_dim: usize,
    /// Attention heads H.
    pub denoiser_heads: usize,
    /// Attention blocks L.
    pub denoiser_layers: usize,
    /// Text feature width.
    pub text_dim: usize,
    /// Camera feature width.
    pub cam_dim: usize,
    /// Adapter rank r (split between the text and camera halves).
    pub rank: usize,
    /// Generator inner rank r'.
    pub gen_rank: usize,
    pub batch_size: usize,
    pub geometry_iters: usize,
    pub appearance_iters: usize,
    /// Steps of the initial ellipsoid SDF fit.
    pub init_iters: usize,
    /// Surface samples of the fit (matched by as many volume samples).
    pub init_samples: usize,
    pub ellipsoid_radii: [f64; 3],
    pub sds_weight: f64,
    pub ama_weight: f64,
    /// Learning rate of the ellipsoid fit.
    pub lr_init: f64,
    /// Learning rate of the geometry/material fields during the
    /// distillation stages. Far below the fit rate: the distillation
    /// signal is noise-dominated at this scale and a hot field rate
    /// erodes the surface.
    pub lr_fields: f64,
    /// Learning rate of the adapter generators and camera encoder.
    pub lr_lora: f64,
    pub camera: CameraRanges,
    /// Environment preset name (`uniform`, `three-point`, `sunset`).
    pub env: String,
    pub env_samples: usize,
    /// Optional environment table file overriding the preset.
    pub env_path: Option<PathBuf>,
    pub timesteps: usize,
    pub attn_scale: AttnScale,
    /// Seed of the frozen denoiser stand-in (separate from the run seed).
    pub denoiser_seed: u64,
    /// Let alignment gradients reach the rendered image (and so the 3D
    /// fields) through the noisy input, not just the adapters.
    pub ama_full_path: bool,
    /// Re-initialize the adapters when entering the appearance stage.
    pub reset_lora_between_stages: bool,
    /// Attention heatmaps are dumped every this many iterations.
    pub dump_interval: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompt: "a small ceramic bowl".into(),
            seed: 0,
            grid_resolution: 16,
            render_res: 64,
            denoiser_res: 16,
            denoiser_dim: 32,
            denoiser_heads: 4,
            denoiser_layers: 3,
            text_dim: 64,
            cam_dim: 64,
            rank: 4,
            gen_rank: 4,
            batch_size: 4,
            geometry_iters: 400,
            appearance_iters: 200,
            init_iters: 2000,
            init_samples: 2048,
            ellipsoid_radii: [0.5, 0.5, 0.65],
            sds_weight: 1.0,
            ama_weight: 0.1,
            lr_init: 1e-3,
            lr_fields: 1e-4,
            lr_lora: 1e-3,
            camera: CameraRanges::default(),
            env: "uniform".into(),
            env_samples: 64,
            env_path: None,
            timesteps: 1000,
            attn_scale: AttnScale::SqrtDim,
            denoiser_seed: 0x5eed,
            ama_full_path: true,
            reset_lora_between_stages: true,
            dump_interval: 50,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.prompt.split_whitespace().next().is_none() {
            return fail("prompt must contain at least one token".into());
        }
        if self.grid_resolution < 2 {
            return fail(format!("grid_resolution {} below 2", self.grid_resolution));
        }
        if self.render_res < 8 {
            return fail(format!("render_res {} below 8", self.render_res));
        }
        if self.denoiser_res == 0 || self.render_res % self.denoiser_res != 0 {
            return fail(format!(
                "denoiser_res {} must divide render_res {}",
                self.denoiser_res, self.render_res
            ));
        }
        if self.denoiser_dim == 0
            || self.denoiser_heads == 0
            || self.denoiser_dim % self.denoiser_heads != 0
        {
            return fail(format!(
                "denoiser_dim {} must be a positive multiple of denoiser_heads {}",
                self.denoiser_dim, self.denoiser_heads
            ));
        }
        if self.denoiser_layers == 0 {
            return fail("denoiser_layers must be positive".into());
        }
        if self.rank == 0 || self.rank % 2 != 0 {
            return fail(format!("rank {} must be even and positive", self.rank));
        }
        if self.gen_rank == 0 {
            return fail("gen_rank must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.timesteps < 2 {
            return fail("timesteps must be at least 2".into());
        }
        if self.init_samples == 0 || self.init_iters == 0 {
            return fail("init_iters and init_samples must be positive".into());
        }
        if self.ellipsoid_radii.iter().any(|&r| r <= 0.0 || r >= 1.0) {
            return fail(format!("ellipsoid_radii {:?} must lie in (0, 1)", self.ellipsoid_radii));
        }
        if self.dump_interval == 0 {
            return fail("dump_interval must be positive".into());
        }
        let c = &self.camera;
        if c.pitch_deg[0] >= c.pitch_deg[1]
            || c.yaw_deg[0] >= c.yaw_deg[1]
            || c.fov_deg[0] >= c.fov_deg[1]
        {
            return fail("camera ranges must be non-empty intervals".into());
        }
        if c.pitch_deg[0] <= -90.0 || c.pitch_deg[1] >= 90.0 {
            return fail("pitch range must stay inside (-90, 90) degrees".into());
        }
        if c.fov_deg[0] <= 0.0 || c.fov_deg[1] >= 180.0 {
            return fail("fov range must stay inside (0, 180) degrees".into());
        }
        if c.radius <= 0.0 {
            return fail("camera radius must be positive".into());
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            dim: self.denoiser_dim,
            heads: self.denoiser_heads,
            layers: self.denoiser_layers,
            input_res: self.denoiser_res,
            text_dim: self.text_dim,
            attn_scale: self.attn_scale,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Geometry,
    Appearance,
    Done,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Geometry => "geometry",
            Stage::Appearance => "appearance",
            Stage::Done => "done",
        };
        write!(f, "{name}")
    }
}

/// Frozen mesh of the appearance stage.
#[derive(Debug, Clone)]
struct CachedMesh {
    vertices: Vec<f64>,
    faces: Vec<[usize; 3]>,
    vertex_normals: Vec<f64>,
}

/// Everything a run carries between iterations. Parameters and optimizer
/// moments round-trip through checkpoints; the rest is rebuilt from the
/// config deterministically.
pub struct RunState {
    pub config: RunConfig,
    pub stage: Stage,
    pub iteration: usize,
    pub init_done: bool,
    pub params: ParamStore,
    pub opt_geo: Adam,
    pub opt_mat: Adam,
    pub opt_lora: Adam,
    pub grid: TetGrid,
    pub geometry: GeometryField,
    pub material: MaterialField,
    pub lora: CgLoraSet,
    pub camera_encoder: CameraEncoder,
    pub denoiser: DenoiserWeights,
    pub schedule: NoiseSchedule,
    pub env: EnvMap,
    text_cache: BTreeMap<String, TextEncoding>,
    frozen_mesh: Option<CachedMesh>,
}

impl RunState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let grid = geometry::build_tet_grid(config.grid_resolution);
        let geometry_field = GeometryField::new();
        let material = MaterialField::new();
        let lora = CgLoraSet::new(
            config.denoiser_layers,
            config.denoiser_dim,
            config.rank,
            config.gen_rank,
            config.text_dim,
            config.cam_dim,
        )?;
        let camera_encoder = CameraEncoder::new(config.cam_dim);
        let denoiser = DenoiserWeights::new(config.denoiser_config(), config.denoiser_seed)?;
        let schedule = NoiseSchedule::new(config.timesteps);
        let env = load_env(&config)?;

        let mut params = ParamStore::new();
        geometry_field.init_params(&mut params, config.seed);
        material.init_params(&mut params, config.seed);
        lora.init_params(&mut params, config.seed);
        camera_encoder.init_params(&mut params, config.seed);

        Ok(Self {
            config,
            stage: Stage::Geometry,
            iteration: 0,
            init_done: false,
            params,
            opt_geo: Adam::new(),
            opt_mat: Adam::new(),
            opt_lora: Adam::new(),
            grid,
            geometry: geometry_field,
            material,
            lora,
            camera_encoder,
            denoiser,
            schedule,
            env,
            text_cache: BTreeMap::new(),
            frozen_mesh: None,
        })
    }

    fn delta_limit(&self) -> f64 {
        0.45 * self.grid.cell_size
    }

    fn stage_index(&self) -> u64 {
        match self.stage {
            Stage::Geometry => 0,
            Stage::Appearance => 1,
            Stage::Done => 2,
        }
    }

    fn encoded_prompt(&mut self, yaw: f64) -> Result<TextEncoding> {
        let prompt = format!("{}{}", self.config.prompt, denoiser::direction_suffix(yaw));
        if let Some(hit) = self.text_cache.get(&prompt) {
            return Ok(hit.clone());
        }
        let enc = denoiser::encode_text(&prompt, self.config.text_dim)?;
        self.text_cache.insert(prompt, enc.clone());
        Ok(enc)
    }

    /// Field evaluation on the lattice with the outer shell pinned
    /// outside, so the extracted surface always closes inside the grid no
    /// matter where the optimization pushes the level set.
    fn grid_field(
        &self,
        tape: &mut Tape,
        leafs: &mut LeafSet,
        trainable: bool,
    ) -> Result<(TensorId, TensorId)> {
        let (s, delta) = self.geometry.evaluate(
            tape,
            &self.params,
            leafs,
            &self.grid.vertices,
            self.delta_limit(),
            trainable,
        )?;
        let v = self.grid.vertices.len();
        let mut interior = vec![0.0; v];
        let mut boundary = vec![0.0; v];
        for (i, p) in self.grid.vertices.iter().enumerate() {
            if p.iter().any(|c| c.abs() == 1.0) {
                boundary[i] = 1.0;
            } else {
                interior[i] = 1.0;
            }
        }
        let interior = tape.constant(interior, vec![v, 1])?;
        let boundary = tape.constant(boundary, vec![v, 1])?;
        let floored = tape.clamp(s, 1e-3, f64::INFINITY);
        let keep = tape.mul(s, interior)?;
        let pinned = tape.mul(floored, boundary)?;
        let s = tape.add(keep, pinned)?;
        Ok((s, delta))
    }

    /// Extract the current surface on a throwaway tape and return values:
    /// vertices, faces, and unit vertex normals.
    pub fn extract_mesh_values(&self) -> Result<(Vec<f64>, Vec<[usize; 3]>, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut leafs = LeafSet::new();
        let (s, delta) = self.grid_field(&mut tape, &mut leafs, false)?;
        let mesh = geometry::marching_tets(&mut tape, &self.grid, s, delta)?;
        let (_, vnorm) = geometry::face_and_vertex_normals(&mut tape, &mesh)?;
        Ok((
            tape.data(mesh.vertices).to_vec(),
            mesh.faces.clone(),
            tape.data(vnorm).to_vec(),
        ))
    }
}

fn load_env(config: &RunConfig) -> Result<EnvMap> {
    match &config.env_path {
        Some(path) => Ok(EnvMap::load(path)?),
        None => Ok(EnvMap::preset(&config.env, config.env_samples)?),
    }
}

/// Uniform camera draw: pitch, yaw, fov in that order, on the look-at
/// sphere of the configured radius.
pub fn sample_camera(rng: &mut ChaCha8Rng, ranges: &CameraRanges) -> CameraPose {
    let deg = std::f64::consts::PI / 180.0;
    let pitch = rng.gen_range(ranges.pitch_deg[0]..ranges.pitch_deg[1]) * deg;
    let yaw = rng.gen_range(ranges.yaw_deg[0]..ranges.yaw_deg[1]) * deg;
    let fov = rng.gen_range(ranges.fov_deg[0]..ranges.fov_deg[1]) * deg;
    CameraPose::orbit(ranges.radius, yaw, pitch, fov)
}

/// Per-iteration observability: the loss report plus the min/max of each
/// layer's normalized attention map across the batch.
#[derive(Debug, Clone)]
pub struct IterTrace {
    pub stage: Stage,
    pub iteration: usize,
    pub report: LossReport,
    pub record_extrema: Vec<(f64, f64)>,
    /// Mean rendered-mask coverage (pixels) over the batch.
    pub mask_pixels: f64,
}

/// Destination of per-iteration outputs: the CSV log and heatmap dumps
/// when a directory is attached, an in-memory trace when enabled.
pub struct RunSink {
    out_dir: Option<PathBuf>,
    csv: Option<fs::File>,
    pub collect_trace: bool,
    pub trace: Vec<IterTrace>,
    pub echo: bool,
}

impl RunSink {
    /// File-backed sink; creates the directory, appends to an existing
    /// loss log (resume) or starts one with a header.
    pub fn files(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let csv_path = out_dir.join("losses.csv");
        let fresh = !csv_path.exists();
        let mut csv = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_path)
            .map_err(io_err(&csv_path))?;
        if fresh {
            writeln!(csv, "{}", io::LOSS_CSV_HEADER).map_err(io_err(&csv_path))?;
        }
        Ok(Self {
            out_dir: Some(out_dir.to_path_buf()),
            csv: Some(csv),
            collect_trace: false,
            trace: Vec::new(),
            echo: false,
        })
    }

    /// In-memory sink for tests and library callers.
    pub fn memory() -> Self {
        Self { out_dir: None, csv: None, collect_trace: true, trace: Vec::new(), echo: false }
    }

    fn record(&mut self, trace: IterTrace, dumps: Option<Vec<AttentionDump>>) -> Result<()> {
        if let Some(csv) = &mut self.csv {
            writeln!(csv, "{}", io::loss_csv_row(&trace.report))
                .map_err(|source| PipelineError::Io { path: "losses.csv".into(), source })?;
        }
        if let (Some(dir), Some(dumps)) = (&self.out_dir, &dumps) {
            for dump in dumps {
                let path = dir.join(format!("att_L{}_iter{}.ppm", dump.layer, dump.global_iter));
                io::write_heatmap_ppm(&path, &dump.values, dump.side, dump.side)?;
            }
        }
        if self.echo {
            let r = &trace.report;
            eprintln!(
                "[{} {:>4}] sds {:+.4e}  ama {:.4}  |g| geo {:.3e} mat {:.3e} lora {:.3e}",
                r.stage, r.iteration, r.sds, r.ama, r.grad_norm_geo, r.grad_norm_mat, r.grad_norm_lora
            );
        }
        if self.collect_trace {
            self.trace.push(trace);
        }
        Ok(())
    }
}

struct AttentionDump {
    layer: usize,
    values: Vec<f64>,
    side: usize,
    global_iter: usize,
}

/// Per-frame objective terms plus logged values.
struct FrameTerms {
    sds: TensorId,
    ama: TensorId,
    sds_value: f64,
    ama_value: f64,
    per_layer: Vec<f64>,
    record_extrema: Vec<(f64, f64)>,
    records_normalized: Vec<Vec<f64>>,
    mask_pixels: f64,
}

/// Shared per-frame tail: pool the render to the denoiser input, noise it,
/// run the denoiser with freshly generated adapters, and build both loss
/// terms.
fn frame_terms(
    state: &mut RunState,
    tape: &mut Tape,
    leafs: &mut LeafSet,
    rendered: TensorId,
    mask: &[f64],
    pose: &CameraPose,
    iter: usize,
    frame: usize,
) -> Result<FrameTerms> {
    let stage_idx = state.stage_index();
    let text = state.encoded_prompt(pose.yaw)?;
    let cfg = &state.config;
    let (res, dres) = (cfg.render_res, cfg.denoiser_res);

    let pooled = tape.constant(text.pooled.clone(), vec![1, cfg.text_dim])?;
    let cam_feat = state.camera_encoder.encode(tape, &state.params, leafs, pose, true)?;
    let adapters = state.lora.generate(tape, &state.params, leafs, pooled, cam_feat, true)?;

    let x = tape.avg_pool2d(rendered, res / dres)?;
    let mut t_rng = rng::stream(cfg.seed, "timestep", &[stage_idx, iter as u64, frame as u64]);
    let t = state.schedule.sample_timestep(&mut t_rng);
    let mut n_rng = rng::stream(cfg.seed, "noise", &[stage_idx, iter as u64, frame as u64]);
    let eps: Vec<f64> =
        (0..dres * dres * 3).map(|_| n_rng.sample::<f64, _>(StandardNormal)).collect();
    let x_t = state.schedule.add_noise(tape, x, t, &eps)?;

    // With the full path disabled, alignment gradients stop at the noisy
    // input instead of flowing back into the render.
    let denoiser_input = if cfg.ama_full_path {
        x_t
    } else {
        tape.constant(tape.data(x_t).to_vec(), vec![dres, dres, 3])?
    };
    let out = denoiser::predict_noise(
        tape,
        &state.denoiser,
        denoiser_input,
        &text,
        t,
        Some(&adapters),
    )?;

    let eps_hat = tape.data(out.eps_hat).to_vec();
    let sds = losses::sds_surrogate(tape, x, &eps_hat, &eps, state.schedule.weight(t))?;

    let eta = render::eta_resize(mask, res, dres, dres)?;
    let eta_t = tape.constant(eta, vec![dres, dres])?;
    let maps: Vec<TensorId> = out.records.iter().map(|r| r.normalized).collect();
    let targets: Vec<TensorId> = vec![eta_t; maps.len()];
    let (ama, per_layer) = losses::ama_loss(tape, &maps, &targets, cfg.denoiser_layers)?;

    let mut record_extrema = Vec::with_capacity(out.records.len());
    let mut records_normalized = Vec::with_capacity(out.records.len());
    for rec in &out.records {
        let d = tape.data(rec.normalized);
        let mn = d.iter().copied().fold(f64::INFINITY, f64::min);
        let mx = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        record_extrema.push((mn, mx));
        records_normalized.push(d.to_vec());
    }
    Ok(FrameTerms {
        sds,
        ama,
        sds_value: tape.item(sds),
        ama_value: tape.item(ama),
        per_layer,
        record_extrema,
        records_normalized,
        mask_pixels: mask.iter().filter(|&&m| m == 1.0).count() as f64,
    })
}

fn mean_per_layer(frames: &[FrameTerms], layers: usize) -> Vec<f64> {
    let mut out = vec![0.0; layers];
    for f in frames {
        for (o, v) in out.iter_mut().zip(&f.per_layer) {
            *o += v / frames.len() as f64;
        }
    }
    out
}

fn extrema_union(frames: &[FrameTerms], layers: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); layers];
    for f in frames {
        for (o, &(mn, mx)) in out.iter_mut().zip(&f.record_extrema) {
            o.0 = o.0.min(mn);
            o.1 = o.1.max(mx);
        }
    }
    out
}

/// Alignment gate: the term joins the objective in the second half of each
/// stage.
pub fn ama_active(iter: usize, stage_iters: usize) -> bool {
    iter >= stage_iters / 2
}

struct IterationOutcome {
    report: LossReport,
    record_extrema: Vec<(f64, f64)>,
    dumps: Option<Vec<AttentionDump>>,
    mask_pixels: f64,
}

fn check_finite(stage: Stage, iter: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::NonFinite {
            stage,
            iteration: iter,
            what: format!("{what} = {v}"),
        })
    }
}

fn make_report(state: &RunState, frames: &[FrameTerms], iter: usize, grads: &BTreeMap<String, Vec<f64>>) -> LossReport {
    LossReport {
        iteration: iter,
        stage: state.stage.to_string(),
        sds: frames.iter().map(|f| f.sds_value).sum::<f64>() / frames.len() as f64,
        ama: frames.iter().map(|f| f.ama_value).sum::<f64>() / frames.len() as f64,
        per_layer_ama: mean_per_layer(frames, state.config.denoiser_layers),
        grad_norm_geo: losses::grad_norm(grads, &["geo."]),
        grad_norm_mat: losses::grad_norm(grads, &["mat."]),
        grad_norm_lora: losses::grad_norm(grads, &["lora.", "cam."]),
    }
}

fn make_dumps(state: &RunState, frames: &[FrameTerms], iter: usize) -> Option<Vec<AttentionDump>> {
    if iter % state.config.dump_interval != 0 {
        return None;
    }
    let global_iter = match state.stage {
        Stage::Geometry => iter,
        _ => state.config.geometry_iters + iter,
    };
    Some(
        frames[0]
            .records_normalized
            .iter()
            .enumerate()
            .map(|(layer, values)| AttentionDump {
                layer,
                values: values.clone(),
                side: state.config.denoiser_res,
                global_iter,
            })
            .collect(),
    )
}

fn split_by_prefix(
    grads: &BTreeMap<String, Vec<f64>>,
    prefixes: &[&str],
) -> BTreeMap<String, Vec<f64>> {
    grads
        .iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// One geometry iteration: shared tape over mesh extraction and the whole
/// batch, single backward pass, Adam on the field and adapter groups.
fn geometry_iteration(state: &mut RunState, iter: usize) -> Result<IterationOutcome> {
    let cfg = state.config.clone();
    let mut tape = Tape::new();
    let mut leafs = LeafSet::new();

    let (s, delta) = state.grid_field(&mut tape, &mut leafs, true)?;
    let mesh = geometry::marching_tets(&mut tape, &state.grid, s, delta)?;
    let (_, vertex_normals) = geometry::face_and_vertex_normals(&mut tape, &mesh)?;

    let mut frames = Vec::with_capacity(cfg.batch_size);
    for frame in 0..cfg.batch_size {
        let mut cam_rng =
            rng::stream(cfg.seed, "camera", &[state.stage_index(), iter as u64, frame as u64]);
        let pose = sample_camera(&mut cam_rng, &cfg.camera);
        let rendered = render::rasterize(
            &mut tape,
            mesh.vertices,
            &mesh.faces,
            vertex_normals,
            &pose,
            cfg.render_res,
        )?;
        // Normals encoded into [0,1] for the denoiser; background gray.
        let scaled = tape.scalar_mul(rendered.image, 0.5);
        let encoded = tape.scalar_add(scaled, 0.5);
        let terms = frame_terms(
            state,
            &mut tape,
            &mut leafs,
            encoded,
            &rendered.buffers.mask,
            &pose,
            iter,
            frame,
        )?;
        check_finite(state.stage, iter, "sds", terms.sds_value)?;
        check_finite(state.stage, iter, "ama", terms.ama_value)?;
        frames.push(terms);
    }

    let mut sds_sum = frames[0].sds;
    for f in &frames[1..] {
        sds_sum = tape.add(sds_sum, f.sds)?;
    }
    let mut objective = tape.scalar_mul(sds_sum, cfg.sds_weight / frames.len() as f64);
    if ama_active(iter, cfg.geometry_iters) {
        let mut ama_sum = frames[0].ama;
        for f in &frames[1..] {
            ama_sum = tape.add(ama_sum, f.ama)?;
        }
        let ama_term = tape.scalar_mul(ama_sum, cfg.ama_weight / frames.len() as f64);
        objective = tape.add(objective, ama_term)?;
    }
    let grads = tape.backward(objective)?;
    let by_name = leafs.gradients(&tape, &grads);

    let report = make_report(state, &frames, iter, &by_name);
    let dumps = make_dumps(state, &frames, iter);
    let record_extrema = extrema_union(&frames, cfg.denoiser_layers);

    state
        .opt_geo
        .step(&mut state.params, &split_by_prefix(&by_name, &["geo."]), cfg.lr_fields)?;
    state
        .opt_lora
        .step(&mut state.params, &split_by_prefix(&by_name, &["lora.", "cam."]), cfg.lr_lora)?;

    let mask_pixels = frames.iter().map(|f| f.mask_pixels).sum::<f64>() / frames.len() as f64;
    Ok(IterationOutcome { report, record_extrema, dumps, mask_pixels })
}

/// One appearance iteration: the mesh is frozen, so each frame builds its
/// own tape and gradients accumulate (meaned) across the batch.
fn appearance_iteration(state: &mut RunState, iter: usize) -> Result<IterationOutcome> {
    let cfg = state.config.clone();
    if state.frozen_mesh.is_none() {
        let (vertices, faces, vertex_normals) = state.extract_mesh_values()?;
        state.frozen_mesh = Some(CachedMesh { vertices, faces, vertex_normals });
    }
    let mesh = state.frozen_mesh.clone().expect("cached above");

    let mut frames = Vec::with_capacity(cfg.batch_size);
    let mut accum: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for frame in 0..cfg.batch_size {
        let mut tape = Tape::new();
        let mut leafs = LeafSet::new();
        let mut cam_rng =
            rng::stream(cfg.seed, "camera", &[state.stage_index(), iter as u64, frame as u64]);
        let pose = sample_camera(&mut cam_rng, &cfg.camera);

        let (image, buffers) = shaded_frame(state, &mut tape, &mut leafs, &mesh, &pose)?;
        let terms =
            frame_terms(state, &mut tape, &mut leafs, image, &buffers.mask, &pose, iter, frame)?;
        check_finite(state.stage, iter, "sds", terms.sds_value)?;
        check_finite(state.stage, iter, "ama", terms.ama_value)?;

        let mut objective = tape.scalar_mul(terms.sds, cfg.sds_weight / cfg.batch_size as f64);
        if ama_active(iter, cfg.appearance_iters) {
            let ama_term = tape.scalar_mul(terms.ama, cfg.ama_weight / cfg.batch_size as f64);
            objective = tape.add(objective, ama_term)?;
        }
        let grads = tape.backward(objective)?;
        for (name, g) in leafs.gradients(&tape, &grads) {
            let slot = accum.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(&g) {
                *a += b;
            }
        }
        frames.push(terms);
    }

    let report = make_report(state, &frames, iter, &accum);
    let dumps = make_dumps(state, &frames, iter);
    let record_extrema = extrema_union(&frames, cfg.denoiser_layers);

    state
        .opt_mat
        .step(&mut state.params, &split_by_prefix(&accum, &["mat."]), cfg.lr_fields)?;
    state
        .opt_lora
        .step(&mut state.params, &split_by_prefix(&accum, &["lora.", "cam."]), cfg.lr_lora)?;

    let mask_pixels = frames.iter().map(|f| f.mask_pixels).sum::<f64>() / frames.len() as f64;
    Ok(IterationOutcome { report, record_extrema, dumps, mask_pixels })
}

/// Differentiable shaded render of the frozen mesh: material sampling,
/// normal perturbation, and environment shading per covered pixel,
/// scattered back into an image tensor.
fn shaded_frame(
    state: &RunState,
    tape: &mut Tape,
    leafs: &mut LeafSet,
    mesh: &CachedMesh,
    pose: &CameraPose,
) -> Result<(TensorId, FrameBuffers)> {
    let res = state.config.render_res;
    let (screen, ws) = render::project_values(&mesh.vertices, pose, res);
    let (coverage, buffers) = render::compute_coverage(&screen, &ws, &mesh.faces, res);
    let hits = coverage.hits.len();
    if hits == 0 {
        let image = tape.constant(vec![0.0; res * res * 3], vec![res, res, 3])?;
        return Ok((image, buffers));
    }

    let positions = render::coverage_attribute_values(&coverage, &mesh.faces, &mesh.vertices, 3);
    let raw_normals =
        render::coverage_attribute_values(&coverage, &mesh.faces, &mesh.vertex_normals, 3);
    let mut points = Vec::with_capacity(hits);
    let mut normals = Vec::with_capacity(hits * 3);
    let mut view_dirs = Vec::with_capacity(hits * 3);
    for i in 0..hits {
        let p = [positions[i * 3], positions[i * 3 + 1], positions[i * 3 + 2]];
        points.push(p);
        let n = [raw_normals[i * 3], raw_normals[i * 3 + 1], raw_normals[i * 3 + 2]];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-12);
        normals.extend_from_slice(&[n[0] / len, n[1] / len, n[2] / len]);
        let v = [
            pose.position[0] - p[0],
            pose.position[1] - p[1],
            pose.position[2] - p[2],
        ];
        let vl = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
        view_dirs.extend_from_slice(&[v[0] / vl, v[1] / vl, v[2] / vl]);
    }

    let rows = state.material.sample(tape, &state.params, leafs, &points, true)?;
    let n_geo = tape.constant(normals, vec![hits, 3])?;
    let shading_normals = crate::material::perturb_normals(tape, n_geo, rows.normal_delta)?;
    let shaded = crate::material::shade_rows(
        tape,
        shading_normals,
        &view_dirs,
        &rows,
        &state.env,
        BrdfModel::CookTorrance,
    )?;
    let pixels: Vec<usize> = coverage.hits.iter().map(|h| h.pixel).collect();
    let flat = tape.scatter_add_rows(shaded, &pixels, res * res)?;
    let image = tape.reshape(flat, vec![res, res, 3])?;
    Ok((image, buffers))
}

/// Run (or continue) the geometry stage: the ellipsoid SDF fit once per
/// fresh run, then the optimization loop.
pub fn run_geometry_stage(state: &mut RunState, sink: &mut RunSink) -> Result<()> {
    if state.stage != Stage::Geometry {
        return Ok(());
    }
    let cfg = state.config.clone();
    if !state.init_done {
        let mut surf_rng = rng::stream(cfg.seed, "init-surface", &[]);
        let mut vol_rng = rng::stream(cfg.seed, "init-volume", &[]);
        let samples = geometry::init_sample_set(
            cfg.init_samples,
            cfg.ellipsoid_radii,
            &state.grid.vertices,
            &mut surf_rng,
            &mut vol_rng,
        );
        geometry::init_geometry(
            &state.geometry,
            &mut state.params,
            &mut state.opt_geo,
            &samples,
            cfg.init_iters,
            cfg.lr_init,
        )?;
        state.init_done = true;
    }

    for iter in state.iteration..cfg.geometry_iters {
        let outcome = geometry_iteration(state, iter)?;
        state.iteration = iter + 1;
        sink.record(
            IterTrace {
                stage: Stage::Geometry,
                iteration: iter,
                report: outcome.report,
                record_extrema: outcome.record_extrema,
                mask_pixels: outcome.mask_pixels,
            },
            outcome.dumps,
        )?;
    }
    state.stage = Stage::Appearance;
    state.iteration = 0;
    if state.config.reset_lora_between_stages {
        state.lora.init_params(&mut state.params, state.config.seed);
        state.opt_lora = Adam::new();
    }
    Ok(())
}

/// Run (or continue) the appearance stage over the frozen geometry.
pub fn run_appearance_stage(state: &mut RunState, sink: &mut RunSink) -> Result<()> {
    if state.stage != Stage::Appearance {
        return Ok(());
    }
    let iters = state.config.appearance_iters;
    for iter in state.iteration..iters {
        let outcome = appearance_iteration(state, iter)?;
        state.iteration = iter + 1;
        sink.record(
            IterTrace {
                stage: Stage::Appearance,
                iteration: iter,
                report: outcome.report,
                record_extrema: outcome.record_extrema,
                mask_pixels: outcome.mask_pixels,
            },
            outcome.dumps,
        )?;
    }
    state.stage = Stage::Done;
    state.iteration = 0;
    Ok(())
}

/// Both stages from wherever the state currently points.
pub fn run_to_completion(state: &mut RunState, sink: &mut RunSink) -> Result<()> {
    run_geometry_stage(state, sink)?;
    run_appearance_stage(state, sink)?;
    Ok(())
}

/// Checkpoint paths share a stem: `<dir>/<name>.json` + `.bin`.
pub fn save_checkpoint(state: &RunState, stem: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "stage": state.stage,
        "iteration": state.iteration,
        "init_done": state.init_done,
        "config": state.config,
    });
    let optimizers: BTreeMap<String, &Adam> = [
        ("geo".to_string(), &state.opt_geo),
        ("mat".to_string(), &state.opt_mat),
        ("lora".to_string(), &state.opt_lora),
    ]
    .into();
    crate::params::save_checkpoint(stem, &state.params, &optimizers, meta)?;
    Ok(())
}

/// Rebuild a run from a checkpoint stem (or its `.json` manifest path).
pub fn load_state(stem: &Path) -> Result<RunState> {
    let loaded = crate::params::load_checkpoint(stem)?;
    let config: RunConfig = serde_json::from_value(
        loaded
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| PipelineError::Config("checkpoint lacks config".into()))?,
    )?;
    let mut state = RunState::new(config)?;
    state.params = loaded.store;
    state.stage = serde_json::from_value(
        loaded.meta.get("stage").cloned().unwrap_or_else(|| serde_json::json!("geometry")),
    )?;
    state.iteration = loaded.meta.get("iteration").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    state.init_done = loaded.meta.get("init_done").and_then(|v| v.as_bool()).unwrap_or(false);
    for (name, adam) in loaded.optimizers {
        match name.as_str() {
            "geo" => state.opt_geo = adam,
            "mat" => state.opt_mat = adam,
            "lora" => state.opt_lora = adam,
            other => return Err(PipelineError::Config(format!("unknown optimizer group {other}"))),
        }
    }
    Ok(state)
}

/// Shaded render of the current state from one pose; plain pixel values.
pub fn render_view(
    state: &RunState,
    pose: &CameraPose,
    res: usize,
    env: &EnvMap,
) -> Result<(Vec<f64>, FrameBuffers)> {
    let (vertices, faces, vertex_normals) = state.extract_mesh_values()?;
    let mesh = CachedMesh { vertices, faces, vertex_normals };
    let mut tape = Tape::new();
    let mut leafs = LeafSet::new();
    let stash;
    let env_state: &RunState = if std::ptr::eq(env, &state.env) {
        state
    } else {
        stash = StateWithEnv { inner: state, env };
        return stash.render(&mesh, pose, res);
    };
    let (image, buffers) = shaded_frame(env_state, &mut tape, &mut leafs, &mesh, pose)?;
    Ok((tape.data(image).to_vec(), buffers))
}

/// Borrowed state with a swapped environment, for relighting exports.
struct StateWithEnv<'a> {
    inner: &'a RunState,
    env: &'a EnvMap,
}

impl StateWithEnv<'_> {
    fn render(
        &self,
        mesh: &CachedMesh,
        pose: &CameraPose,
        res: usize,
    ) -> Result<(Vec<f64>, FrameBuffers)> {
        let mut tape = Tape::new();
        let mut leafs = LeafSet::new();
        let (screen, ws) = render::project_values(&mesh.vertices, pose, res);
        let (coverage, buffers) = render::compute_coverage(&screen, &ws, &mesh.faces, res);
        if coverage.hits.is_empty() {
            return Ok((vec![0.0; res * res * 3], buffers));
        }
        let state = self.inner;
        let positions =
            render::coverage_attribute_values(&coverage, &mesh.faces, &mesh.vertices, 3);
        let raw_normals =
            render::coverage_attribute_values(&coverage, &mesh.faces, &mesh.vertex_normals, 3);
        let hits = coverage.hits.len();
        let mut points = Vec::with_capacity(hits);
        let mut normals = Vec::with_capacity(hits * 3);
        let mut view_dirs = Vec::with_capacity(hits * 3);
        for i in 0..hits {
            let p = [positions[i * 3], positions[i * 3 + 1], positions[i * 3 + 2]];
            points.push(p);
            let n = [raw_normals[i * 3], raw_normals[i * 3 + 1], raw_normals[i * 3 + 2]];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-12);
            normals.extend_from_slice(&[n[0] / len, n[1] / len, n[2] / len]);
            let v = [
                pose.position[0] - p[0],
                pose.position[1] - p[1],
                pose.position[2] - p[2],
            ];
            let vl = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            view_dirs.extend_from_slice(&[v[0] / vl, v[1] / vl, v[2] / vl]);
        }
        let rows = state.material.sample(&mut tape, &state.params, &mut leafs, &points, false)?;
        let n_geo = tape.constant(normals, vec![hits, 3])?;
        let shading_normals = crate::material::perturb_normals(&mut tape, n_geo, rows.normal_delta)?;
        let shaded = crate::material::shade_rows(
            &mut tape,
            shading_normals,
            &view_dirs,
            &rows,
            self.env,
            BrdfModel::CookTorrance,
        )?;
        let mut image = vec![0.0; res * res * 3];
        let data = tape.data(shaded);
        for (i, hit) in coverage.hits.iter().enumerate() {
            image[hit.pixel * 3..hit.pixel * 3 + 3].copy_from_slice(&data[i * 3..i * 3 + 3]);
        }
        Ok((image, buffers))
    }
}

/// Write the exportable artifacts of a state: mesh, turntable renders,
/// config echo, and a checkpoint. Deterministic for a fixed state.
pub fn export(state: &RunState, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();

    let (vertices, faces, _) = state.extract_mesh_values()?;
    let obj_path = out_dir.join("mesh.obj");
    io::write_obj(&obj_path, &vertices, &faces)?;
    written.push(obj_path);

    let res = state.config.render_res;
    let deg = std::f64::consts::PI / 180.0;
    for k in 0..8 {
        let yaw = -180.0 + 45.0 * k as f64;
        let pose = CameraPose::orbit(state.config.camera.radius, yaw * deg, 15.0 * deg, 35.0 * deg);
        let (image, _) = render_view(state, &pose, res, &state.env)?;
        let path = out_dir.join(format!("view_{k}.ppm"));
        io::write_ppm(&path, &image, res, res, true)?;
        written.push(path);
    }

    let config_path = out_dir.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&state.config)?)
        .map_err(io_err(&config_path))?;
    written.push(config_path);

    let stem = out_dir.join("checkpoint");
    save_checkpoint(state, &stem)?;
    written.push(stem.with_extension("json"));
    written.push(stem.with_extension("bin"));
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig {
            prompt: "a tiny cube".into(),
            grid_resolution: 6,
            render_res: 32,
            denoiser_res: 8,
            denoiser_dim: 16,
            denoiser_heads: 2,
            denoiser_layers: 2,
            text_dim: 16,
            cam_dim: 16,
            batch_size: 2,
            geometry_iters: 4,
            appearance_iters: 4,
            init_iters: 300,
            init_samples: 256,
            env_samples: 8,
            dump_interval: 1000,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = tiny_config();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);

        let bad: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"not_a_field": 1}"#);
        assert!(bad.is_err(), "unknown fields rejected");

        let mut broken = tiny_config();
        broken.denoiser_res = 7;
        assert!(broken.validate().is_err());
        let mut broken = tiny_config();
        broken.rank = 3;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn camera_samples_stay_in_ranges_and_replay() {
        let ranges = CameraRanges::default();
        let mut r1 = rng::stream(7, "camera", &[0, 0, 0]);
        let mut r2 = rng::stream(7, "camera", &[0, 0, 0]);
        let deg = std::f64::consts::PI / 180.0;
        for _ in 0..500 {
            let a = sample_camera(&mut r1, &ranges);
            let b = sample_camera(&mut r2, &ranges);
            assert_eq!(a, b);
            assert!(a.pitch >= -15.0 * deg && a.pitch < 45.0 * deg);
            assert!(a.yaw >= -std::f64::consts::PI && a.yaw < std::f64::consts::PI);
            assert!(a.fov >= 25.0 * deg && a.fov < 45.0 * deg);
            let r = (a.position[0].powi(2) + a.position[1].powi(2) + a.position[2].powi(2)).sqrt();
            assert!((r - ranges.radius).abs() < 1e-12);
        }
    }

    #[test]
    fn ama_gate_splits_stage_in_half() {
        assert!(!ama_active(0, 400));
        assert!(!ama_active(199, 400));
        assert!(ama_active(200, 400));
        assert!(ama_active(399, 400));
    }

    #[test]
    fn tiny_run_completes_and_traces() {
        let mut state = RunState::new(tiny_config()).unwrap();
        let mut sink = RunSink::memory();
        run_to_completion(&mut state, &mut sink).unwrap();
        assert_eq!(state.stage, Stage::Done);
        assert_eq!(sink.trace.len(), 8, "one trace per iteration");
        for t in &sink.trace {
            assert!(t.report.sds.is_finite());
            assert!((0.0..=1.0).contains(&t.report.ama));
            for &(mn, mx) in &t.record_extrema {
                assert_eq!(mn, 0.0, "normalized map min is exactly zero");
                assert!(mx < 1.0);
            }
        }
        // Geometry gradients live only in the geometry stage.
        assert!(sink.trace[0].report.grad_norm_geo > 0.0);
        assert_eq!(sink.trace[0].report.grad_norm_mat, 0.0);
        let app = &sink.trace[4];
        assert_eq!(app.report.stage, "appearance");
        assert_eq!(app.report.grad_norm_geo, 0.0);
        assert!(app.report.grad_norm_mat > 0.0);
    }

    #[test]
    fn determinism_same_seed_same_trace() {
        let run = || {
            let mut state = RunState::new(tiny_config()).unwrap();
            let mut sink = RunSink::memory();
            run_to_completion(&mut state, &mut sink).unwrap();
            let (verts, faces, _) = state.extract_mesh_values().unwrap();
            (
                sink.trace
                    .iter()
                    .map(|t| (t.report.sds, t.report.ama, t.report.grad_norm_lora))
                    .collect::<Vec<_>>(),
                verts,
                faces,
            )
        };
        let (t1, v1, f1) = run();
        let (t2, v2, f2) = run();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(f1, f2);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();

        // Uninterrupted run.
        let mut full = RunState::new(tiny_config()).unwrap();
        run_to_completion(&mut full, &mut RunSink::memory()).unwrap();

        // Run geometry only, checkpoint, reload, finish.
        let mut cfg = tiny_config();
        cfg.appearance_iters = 0;
        let mut half = RunState::new(tiny_config()).unwrap();
        run_geometry_stage(&mut half, &mut RunSink::memory()).unwrap();
        let stem = dir.path().join("ckpt");
        save_checkpoint(&half, &stem).unwrap();
        drop(half);
        drop(cfg);

        let mut resumed = load_state(&stem).unwrap();
        assert_eq!(resumed.stage, Stage::Appearance);
        run_to_completion(&mut resumed, &mut RunSink::memory()).unwrap();

        for (name, entry) in full.params.iter() {
            let other = resumed.params.get(name).unwrap();
            assert_eq!(&entry.data, &other.data, "{name} differs after resume");
        }
    }

    #[test]
    fn frozen_denoiser_and_geometry_in_appearance() {
        let mut state = RunState::new(tiny_config()).unwrap();
        let denoiser_before = state.denoiser.checksum();
        let mut sink = RunSink::memory();
        run_geometry_stage(&mut state, &mut sink).unwrap();
        let geo_after_stage = state.params.checksum("geo.");
        run_appearance_stage(&mut state, &mut sink).unwrap();
        assert_eq!(state.params.checksum("geo."), geo_after_stage, "geometry frozen");
        assert_eq!(state.denoiser.checksum(), denoiser_before, "denoiser frozen");
    }

    #[test]
    fn export_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.out_dir = dir.path().to_path_buf();
        let mut state = RunState::new(cfg).unwrap();
        run_to_completion(&mut state, &mut RunSink::memory()).unwrap();
        let files = export(&state, dir.path()).unwrap();
        for f in &files {
            assert!(f.exists(), "{f:?} missing");
        }
        let (v, f) = io::read_obj(&dir.path().join("mesh.obj")).unwrap();
        assert!(!v.is_empty());
        assert!(!f.is_empty());

        // Re-export is byte-identical.
        let before = fs::read(dir.path().join("mesh.obj")).unwrap();
        export(&state, dir.path()).unwrap();
        assert_eq!(before, fs::read(dir.path().join("mesh.obj")).unwrap());
    }
}
