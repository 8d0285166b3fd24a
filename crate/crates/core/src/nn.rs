//! Small building blocks on top of the tape: multiresolution hash-grid
//! positional encoding, plain MLPs, and row-wise vector helpers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::params::{LeafSet, ParamStore};
use crate::rng;
use crate::tensor::{Result, Tape, TensorId};

/// Multiresolution hash-grid encoding with trilinear interpolation.
/// Each level owns a trainable feature table; corner features are hashed
/// lattice lookups blended by the corner weights.
#[derive(Debug, Clone)]
pub struct HashGrid {
    pub prefix: String,
    pub levels: usize,
    pub features: usize,
    pub table_size: usize,
    pub base_resolution: usize,
    pub growth: usize,
}

impl HashGrid {
    pub fn new(prefix: &str) -> Self {
        Self {
            prefix: prefix.to_string(),
            levels: 4,
            features: 2,
            table_size: 1 << 12,
            base_resolution: 4,
            growth: 2,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    pub fn table_names(&self) -> Vec<String> {
        (0..self.levels).map(|l| format!("{}.grid.l{l}", self.prefix)).collect()
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for (l, name) in self.table_names().into_iter().enumerate() {
            let mut r = rng::stream(seed, "hashgrid", &[rng::hash_str(&self.prefix), l as u64]);
            let data: Vec<f64> = (0..self.table_size * self.features)
                .map(|_| r.gen_range(-1e-2..1e-2))
                .collect();
            store.insert(&name, vec![self.table_size, self.features], data);
        }
    }

    fn hash(&self, ix: u64, iy: u64, iz: u64) -> usize {
        let h = ix ^ iy.wrapping_mul(2654435761) ^ iz.wrapping_mul(805459861);
        (h as usize) & (self.table_size - 1)
    }

    /// Encode `points` (clamped to the unit cube) into `[N, levels*features]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        leafs: &mut LeafSet,
        points: &[[f64; 3]],
        trainable: bool,
    ) -> Result<TensorId> {
        let n = points.len();
        let mut level_outputs = Vec::with_capacity(self.levels);
        for (l, name) in self.table_names().into_iter().enumerate() {
            let table = if trainable {
                leafs.leaf(tape, store, &name)
            } else {
                leafs.frozen(tape, store, &name)
            };
            let res = (self.base_resolution * self.growth.pow(l as u32)) as f64;

            // Corner indices and trilinear weights; the weights depend only
            // on the fixed query points, so they enter as constants.
            let mut corner_idx = vec![Vec::with_capacity(n); 8];
            let mut corner_w = vec![Vec::with_capacity(n); 8];
            for p in points {
                let mut cell = [0u64; 3];
                let mut frac = [0.0f64; 3];
                for d in 0..3 {
                    let x = (p[d].clamp(-1.0, 1.0) + 1.0) * 0.5 * res;
                    let c = x.floor().min(res - 1.0).max(0.0);
                    cell[d] = c as u64;
                    frac[d] = (x - c).clamp(0.0, 1.0);
                }
                for (c, (idx, w)) in corner_idx.iter_mut().zip(corner_w.iter_mut()).enumerate() {
                    let (dx, dy, dz) = ((c & 1) as u64, ((c >> 1) & 1) as u64, ((c >> 2) & 1) as u64);
                    idx.push(self.hash(cell[0] + dx, cell[1] + dy, cell[2] + dz));
                    let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
                    let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
                    let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
                    w.push(wx * wy * wz);
                }
            }

            let mut acc: Option<TensorId> = None;
            for c in 0..8 {
                let gathered = tape.gather_rows(table, &corner_idx[c])?;
                let mut wdata = Vec::with_capacity(n * self.features);
                for &w in &corner_w[c] {
                    for _ in 0..self.features {
                        wdata.push(w);
                    }
                }
                let weights = tape.constant(wdata, vec![n, self.features])?;
                let term = tape.mul(gathered, weights)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            level_outputs.push(acc.expect("eight corners"));
        }
        tape.concat(&level_outputs, 1)
    }
}

/// Fully connected layers with SiLU on hidden activations.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        Self { prefix: prefix.to_string(), dims }
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.dims.len() - 1)
            .flat_map(|i| {
                [format!("{}.w{i}", self.prefix), format!("{}.b{i}", self.prefix)]
            })
            .collect()
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for i in 0..self.dims.len() - 1 {
            let (fan_in, fan_out) = (self.dims[i], self.dims[i + 1]);
            let mut r = rng::stream(seed, "mlp", &[rng::hash_str(&self.prefix), i as u64]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| r.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            store.insert(&format!("{}.w{i}", self.prefix), vec![fan_in, fan_out], w);
            store.insert(&format!("{}.b{i}", self.prefix), vec![fan_out], vec![0.0; fan_out]);
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        leafs: &mut LeafSet,
        x: TensorId,
        trainable: bool,
    ) -> Result<TensorId> {
        let mut h = x;
        for i in 0..self.dims.len() - 1 {
            let (wn, bn) = (format!("{}.w{i}", self.prefix), format!("{}.b{i}", self.prefix));
            let (w, b) = if trainable {
                (leafs.leaf(tape, store, &wn), leafs.leaf(tape, store, &bn))
            } else {
                (leafs.frozen(tape, store, &wn), leafs.frozen(tape, store, &bn))
            };
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if i + 1 < self.dims.len() - 1 {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }
}

/// `[n,1] -> [n,k]` by repeating the column.
pub fn tile_cols(tape: &mut Tape, x: TensorId, k: usize) -> Result<TensorId> {
    let ones = tape.constant(vec![1.0; k], vec![1, k])?;
    tape.matmul(x, ones)
}

/// Row-wise dot product of two `[n,c]` tensors -> `[n,1]`.
pub fn dot_rows(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    let prod = tape.mul(a, b)?;
    let c = tape.shape(prod)[1];
    let ones = tape.constant(vec![1.0; c], vec![c, 1])?;
    tape.matmul(prod, ones)
}

/// Row-wise Euclidean norm of `[n,c]` -> `[n,1]`, floored at `min_norm`.
pub fn norm_rows(tape: &mut Tape, x: TensorId, min_norm: f64) -> Result<TensorId> {
    let sq = dot_rows(tape, x, x)?;
    let n = tape.sqrt(sq);
    Ok(tape.clamp(n, min_norm, f64::INFINITY))
}

/// Rows scaled to unit length (degenerate rows floored, not renormalized).
pub fn normalize_rows(tape: &mut Tape, x: TensorId, min_norm: f64) -> Result<TensorId> {
    let c = tape.shape(x)[1];
    let n = norm_rows(tape, x, min_norm)?;
    let tiled = tile_cols(tape, n, c)?;
    tape.div(x, tiled)
}

/// Row-wise 3-D cross product of `[n,3]` tensors.
pub fn cross_rows(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    let col = |tape: &mut Tape, t: TensorId, j: usize| tape.slice(t, 1, j, 1);
    let (ax, ay, az) = (col(tape, a, 0)?, col(tape, a, 1)?, col(tape, a, 2)?);
    let (bx, by, bz) = (col(tape, b, 0)?, col(tape, b, 1)?, col(tape, b, 2)?);
    let t1 = tape.mul(ay, bz)?;
    let t2 = tape.mul(az, by)?;
    let cx = tape.sub(t1, t2)?;
    let t3 = tape.mul(az, bx)?;
    let t4 = tape.mul(ax, bz)?;
    let cy = tape.sub(t3, t4)?;
    let t5 = tape.mul(ax, by)?;
    let t6 = tape.mul(ay, bx)?;
    let cz = tape.sub(t5, t6)?;
    tape.concat(&[cx, cy, cz], 1)
}
