//! Camera-guided low-rank adapters.
//!
//! Each attention projection carries an adapter whose dimensionality-
//! reduction halves are generated per iteration: one from the pooled text
//! feature, one from the encoded camera, each through a low-rank generator
//! pair (U, V). The expansion matrix B starts at zero so the adapted
//! network initially reproduces the frozen one exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nn::Mlp;
use crate::params::{LeafSet, ParamStore};
use crate::render::CameraPose;
use crate::rng;
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum LoraError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

/// Trainable MLP mapping camera parameters to a feature vector. Angles are
/// fed as (sin, cos) pairs, which removes the yaw wrap discontinuity, so
/// the 6 raw parameters widen to 9 inputs.
#[derive(Debug, Clone)]
pub struct CameraEncoder {
    pub mlp: Mlp,
    pub out_dim: usize,
}

impl CameraEncoder {
    pub fn new(out_dim: usize) -> Self {
        Self { mlp: Mlp::new("cam.enc", vec![9, 64, 64, out_dim]), out_dim }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.mlp.param_names()
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        self.mlp.init(store, seed);
    }

    pub fn features(pose: &CameraPose) -> [f64; 9] {
        [
            pose.position[0],
            pose.position[1],
            pose.position[2],
            pose.yaw.sin(),
            pose.yaw.cos(),
            pose.pitch.sin(),
            pose.pitch.cos(),
            pose.fov.sin(),
            pose.fov.cos(),
        ]
    }

    /// Encode one pose into a `[1, out_dim]` feature row.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        leafs: &mut LeafSet,
        pose: &CameraPose,
        trainable: bool,
    ) -> Result<TensorId, LoraError> {
        let input = tape.constant(Self::features(pose).to_vec(), vec![1, 9])?;
        Ok(self.mlp.forward(tape, store, leafs, input, trainable)?)
    }
}

/// Generated adapter halves plus the expansion matrix for one projection.
#[derive(Debug, Clone, Copy)]
pub struct ProjAdapters {
    pub a_txt: TensorId,
    pub a_cam: TensorId,
    pub b: TensorId,
}

/// Generator parameters of one adapted projection.
#[derive(Debug, Clone)]
pub struct CgLoraLayer {
    pub prefix: String,
    /// Width of the adapted projection (both input and output).
    pub dim: usize,
    /// Total adapter rank r; each branch generates r/2 columns.
    pub rank: usize,
    /// Inner rank r' of the U V generator factorization.
    pub gen_rank: usize,
    pub text_dim: usize,
    pub cam_dim: usize,
}

impl CgLoraLayer {
    pub fn new(prefix: &str, dim: usize, rank: usize, gen_rank: usize, text_dim: usize, cam_dim: usize) -> Result<Self, LoraError> {
        if rank % 2 != 0 || rank == 0 {
            return Err(LoraError::Invalid(format!("adapter rank {rank} must be even and positive")));
        }
        Ok(Self { prefix: prefix.to_string(), dim, rank, gen_rank, text_dim, cam_dim })
    }

    pub fn param_names(&self) -> Vec<String> {
        ["u_txt", "v_txt", "u_cam", "v_cam", "b"]
            .iter()
            .map(|s| format!("{}.{s}", self.prefix))
            .collect()
    }

    /// Trainable scalar count: r'(d_txt + d_cam) + 2 r' (d r / 2) + r d.
    pub fn param_count(&self) -> usize {
        let half = self.dim * self.rank / 2;
        self.gen_rank * (self.text_dim + self.cam_dim)
            + 2 * self.gen_rank * half
            + self.rank * self.dim
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let half = self.dim * self.rank / 2;
        let mut fill = |name: &str, rows: usize, cols: usize, scale: f64, which: u64| {
            let mut r = rng::stream(seed, "cglora", &[rng::hash_str(&self.prefix), which]);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| r.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            store.insert(&format!("{}.{name}", self.prefix), vec![rows, cols], data);
        };
        let su = |fan: usize| 1.0 / (fan as f64).sqrt();
        fill("u_txt", self.text_dim, self.gen_rank, su(self.text_dim), 0);
        fill("v_txt", self.gen_rank, half, su(self.gen_rank), 1);
        fill("u_cam", self.cam_dim, self.gen_rank, su(self.cam_dim), 2);
        fill("v_cam", self.gen_rank, half, su(self.gen_rank), 3);
        // Zero expansion keeps the adapted forward equal to the frozen one
        // until training moves it.
        store.insert(
            &format!("{}.b", self.prefix),
            vec![self.rank, self.dim],
            vec![0.0; self.rank * self.dim],
        );
    }

    /// Generate the reduction matrices from pooled text and camera rows.
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        leafs: &mut LeafSet,
        text_feat: TensorId,
        cam_feat: TensorId,
        trainable: bool,
    ) -> Result<ProjAdapters, LoraError> {
        if tape.shape(text_feat) != [1, self.text_dim] {
            return Err(LoraError::Invalid(format!(
                "text feature shape {:?}, expected [1, {}]",
                tape.shape(text_feat),
                self.text_dim
            )));
        }
        if tape.shape(cam_feat) != [1, self.cam_dim] {
            return Err(LoraError::Invalid(format!(
                "camera feature shape {:?}, expected [1, {}]",
                tape.shape(cam_feat),
                self.cam_dim
            )));
        }
        let half = self.rank / 2;
        let branch = |tape: &mut Tape, leafs: &mut LeafSet, feat: TensorId, u: &str, v: &str| {
            let u_name = format!("{}.{u}", self.prefix);
            let v_name = format!("{}.{v}", self.prefix);
            let (u_id, v_id) = if trainable {
                (leafs.leaf(tape, store, &u_name), leafs.leaf(tape, store, &v_name))
            } else {
                (leafs.frozen(tape, store, &u_name), leafs.frozen(tape, store, &v_name))
            };
            let reduced = tape.matmul(feat, u_id)?;
            let flat = tape.matmul(reduced, v_id)?;
            // Row-major reshape of the d*r/2 row into a [d, r/2] matrix.
            tape.reshape(flat, vec![self.dim, half])
        };
        let a_txt = branch(tape, leafs, text_feat, "u_txt", "v_txt")?;
        let a_cam = branch(tape, leafs, cam_feat, "u_cam", "v_cam")?;
        let b_name = format!("{}.b", self.prefix);
        let b = if trainable {
            leafs.leaf(tape, store, &b_name)
        } else {
            leafs.frozen(tape, store, &b_name)
        };
        Ok(ProjAdapters { a_txt, a_cam, b })
    }
}

/// `y = x W + [x A_txt ; x A_cam] B`, the frozen projection plus the
/// concatenated low-rank update. With `adapters` absent this is exactly
/// the frozen forward.
pub fn lora_forward(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    adapters: Option<&ProjAdapters>,
) -> Result<TensorId, LoraError> {
    let base = tape.matmul(x, w)?;
    let Some(ad) = adapters else {
        return Ok(base);
    };
    let xa_txt = tape.matmul(x, ad.a_txt)?;
    let xa_cam = tape.matmul(x, ad.a_cam)?;
    let cat = tape.concat(&[xa_txt, xa_cam], 1)?;
    let update = tape.matmul(cat, ad.b)?;
    Ok(tape.add(base, update)?)
}

/// Adapters generated for one denoiser block (all four projections).
#[derive(Debug, Clone, Copy)]
pub struct BlockAdapters {
    pub q: ProjAdapters,
    pub k: ProjAdapters,
    pub v: ProjAdapters,
    pub o: ProjAdapters,
}

/// Adapters for every block of the denoiser, regenerated each iteration.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub blocks: Vec<BlockAdapters>,
}

/// One adapter layer per attention projection per denoiser block.
#[derive(Debug, Clone)]
pub struct CgLoraSet {
    pub layers: Vec<[CgLoraLayer; 4]>,
}

pub const PROJ_NAMES: [&str; 4] = ["q", "k", "v", "o"];

impl CgLoraSet {
    pub fn new(
        blocks: usize,
        dim: usize,
        rank: usize,
        gen_rank: usize,
        text_dim: usize,
        cam_dim: usize,
    ) -> Result<Self, LoraError> {
        let mut layers = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let mk = |p: &str| {
                CgLoraLayer::new(&format!("lora.b{b}.{p}"), dim, rank, gen_rank, text_dim, cam_dim)
            };
            layers.push([mk("q")?, mk("k")?, mk("v")?, mk("o")?]);
        }
        Ok(Self { layers })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().flatten().flat_map(|l| l.param_names()).collect()
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        for layer in self.layers.iter().flatten() {
            layer.init_params(store, seed);
        }
    }

    /// Generate every block's adapters from the shared text/camera rows.
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        leafs: &mut LeafSet,
        text_feat: TensorId,
        cam_feat: TensorId,
        trainable: bool,
    ) -> Result<AdapterSet, LoraError> {
        let mut blocks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let gen = |i: usize, tape: &mut Tape, leafs: &mut LeafSet| {
                layer[i].generate(tape, store, leafs, text_feat, cam_feat, trainable)
            };
            let q = gen(0, tape, leafs)?;
            let k = gen(1, tape, leafs)?;
            let v = gen(2, tape, leafs)?;
            let o = gen(3, tape, leafs)?;
            blocks.push(BlockAdapters { q, k, v, o });
        }
        Ok(AdapterSet { blocks })
    }

    /// Zero the generator halves (U and V); with them at zero the adapters
    /// vanish for every pose and prompt.
    pub fn zero_generators(&self, store: &mut ParamStore) {
        for layer in self.layers.iter().flatten() {
            for part in ["u_txt", "v_txt", "u_cam", "v_cam"] {
                let name = format!("{}.{part}", layer.prefix);
                store.get_mut(&name).expect("initialized").data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}
