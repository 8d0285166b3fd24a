//! Tetrahedral SDF geometry: a lattice of tets over the unit cube, an MLP
//! field predicting per-vertex signed distance and deformation, and
//! differentiable marching-tetrahedra surface extraction.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nn::{self, HashGrid, Mlp};
use crate::params::{Adam, LeafSet, ParamStore};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error("sdf fit diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Tetrahedral lattice over the cube `[-1,1]^3`. Every cell is split into
/// six tets around its main diagonal, so neighbouring cells share face
/// diagonals and the decomposition is conforming.
#[derive(Debug, Clone)]
pub struct TetGrid {
    pub resolution: usize,
    pub vertices: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    pub cell_size: f64,
}

/// Local vertex pairs of a tet's six edges, in canonical slot order.
pub const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

const CUBE_TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

fn signed_volume(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let w = [d[0] - a[0], d[1] - a[1], d[2] - a[2]];
    (u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0]))
        / 6.0
}

/// Build the lattice at `resolution` cells per axis (at least 2).
pub fn build_tet_grid(resolution: usize) -> TetGrid {
    assert!(resolution >= 2, "resolution must be at least 2");
    let n = resolution + 1;
    let cell_size = 2.0 / resolution as f64;
    let coord = |i: usize| -1.0 + i as f64 * cell_size;
    let vid = |i: usize, j: usize, k: usize| (i * n + j) * n + k;

    let mut vertices = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                vertices.push([coord(i), coord(j), coord(k)]);
            }
        }
    }

    let mut tets = Vec::with_capacity(6 * resolution.pow(3));
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                let corner = |b: usize| {
                    vid(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1))
                };
                for local in CUBE_TETS {
                    let mut tet = [corner(local[0]), corner(local[1]), corner(local[2]), corner(local[3])];
                    let vol = signed_volume(
                        vertices[tet[0]],
                        vertices[tet[1]],
                        vertices[tet[2]],
                        vertices[tet[3]],
                    );
                    if vol < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    TetGrid { resolution, vertices, tets, cell_size }
}

/// Scaled-sphere approximation of the ellipsoid signed distance:
/// `(|p / radii| - 1) * min(radii)`. Sign-exact, distance approximate.
pub fn ellipsoid_sdf(p: [f64; 3], radii: [f64; 3]) -> f64 {
    let q = [p[0] / radii[0], p[1] / radii[1], p[2] / radii[2]];
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
    (norm - 1.0) * radii[0].min(radii[1]).min(radii[2])
}

/// `n` points on the ellipsoid surface (normalized Gaussians scaled by the
/// radii), deterministic for a given stream.
pub fn sample_ellipsoid_surface(n: usize, radii: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            loop {
                let g: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if norm > 1e-9 {
                    return [
                        radii[0] * g[0] / norm,
                        radii[1] * g[1] / norm,
                        radii[2] * g[2] / norm,
                    ];
                }
            }
        })
        .collect()
}

/// The SDF/deformation field: hash-grid encoding into a two-hidden-layer
/// MLP with four outputs (signed distance plus a 3-D offset).
#[derive(Debug, Clone)]
pub struct GeometryField {
    pub encoding: HashGrid,
    pub mlp: Mlp,
}

impl GeometryField {
    pub fn new() -> Self {
        let encoding = HashGrid::new("geo");
        let mlp = Mlp::new("geo.mlp", vec![encoding.output_dim(), 32, 32, 4]);
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

    /// Predict `(s, delta)` at `points`; `delta` is clamped per component
    /// to `delta_limit` so deformed vertices cannot invert their tets.
    pub fn evaluate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        leafs: &mut LeafSet,
        points: &[[f64; 3]],
        delta_limit: f64,
        trainable: bool,
    ) -> Result<(TensorId, TensorId), GeometryError> {
        let enc = self.encoding.encode(tape, store, leafs, points, trainable)?;
        let out = self.mlp.forward(tape, store, leafs, enc, trainable)?;
        let s = tape.slice(out, 1, 0, 1)?;
        let raw = tape.slice(out, 1, 1, 3)?;
        let delta = tape.clamp(raw, -delta_limit, delta_limit);
        Ok((s, delta))
    }
}

impl Default for GeometryField {
    fn default() -> Self {
        Self::new()
    }
}

/// Fixed SDF regression targets for the initialization fit.
#[derive(Debug, Clone, Default)]
pub struct SdfSamples {
    pub points: Vec<[f64; 3]>,
    pub targets: Vec<f64>,
}

impl SdfSamples {
    pub fn extend_from(&mut self, points: Vec<[f64; 3]>, radii: [f64; 3]) {
        for p in points {
            self.targets.push(ellipsoid_sdf(p, radii));
            self.points.push(p);
        }
    }
}

/// Regression set for the ellipsoid fit: `n` surface samples, every
/// lattice vertex the extraction will read (with analytic targets, so no
/// spurious crossings survive anywhere on the grid), and `n` off-surface
/// samples split between the interior and a radial band for sub-cell
/// detail.
pub fn init_sample_set(
    n: usize,
    radii: [f64; 3],
    lattice: &[[f64; 3]],
    surface_rng: &mut ChaCha8Rng,
    volume_rng: &mut ChaCha8Rng,
) -> SdfSamples {
    let mut samples = SdfSamples::default();
    samples.extend_from(sample_ellipsoid_surface(n, radii, surface_rng), radii);
    samples.extend_from(lattice.to_vec(), radii);
    let mut off_surface = Vec::with_capacity(n);
    for i in 0..n {
        let p = if i % 2 == 0 {
            // Uniform inside the ellipsoid (rejection from the cube).
            loop {
                let p = [
                    volume_rng.gen_range(-1.0..1.0),
                    volume_rng.gen_range(-1.0..1.0),
                    volume_rng.gen_range(-1.0..1.0),
                ];
                let q = (p[0] / radii[0]).powi(2)
                    + (p[1] / radii[1]).powi(2)
                    + (p[2] / radii[2]).powi(2);
                if q < 1.0 {
                    break p;
                }
            }
        } else {
            // Radial band across the surface: a surface direction scaled
            // into [0.5, 1.5] of its radius.
            let dir = sample_ellipsoid_surface(1, radii, volume_rng)[0];
            let u = volume_rng.gen_range(0.5..1.5);
            [dir[0] * u, dir[1] * u, dir[2] * u]
        };
        off_surface.push(p);
    }
    samples.extend_from(off_surface, radii);
    samples
}

/// Fit the field to `samples` by mean squared error with Adam. Returns the
/// final loss; aborts with a diagnostic if the loss stops being finite.
pub fn init_geometry(
    field: &GeometryField,
    store: &mut ParamStore,
    optimizer: &mut Adam,
    samples: &SdfSamples,
    iters: usize,
    lr: f64,
) -> Result<f64, GeometryError> {
    if samples.points.is_empty() {
        return Err(GeometryError::Invalid("initialization needs at least one sample".into()));
    }
    let n = samples.points.len();
    let mut last = f64::INFINITY;
    for step in 0..iters {
        let mut tape = Tape::new();
        let mut leafs = LeafSet::new();
        let (s, _) = field.evaluate(&mut tape, store, &mut leafs, &samples.points, 1.0, true)?;
        let target = tape.constant(samples.targets.clone(), vec![n, 1])?;
        let loss = crate::losses::mse_loss(&mut tape, s, target)?;
        last = tape.item(loss);
        if !last.is_finite() {
            return Err(GeometryError::Diverged { step, loss: last });
        }
        let grads = tape.backward(loss)?;
        let by_name = leafs.gradients(&tape, &grads);
        optimizer.step(store, &by_name, lr).expect("registered names");
    }
    Ok(last)
}

/// Triangles of one sign case, as indices into [`TET_EDGES`].
#[derive(Debug, Clone, Default)]
struct SignCase {
    tris: Vec<[usize; 3]>,
}

fn case_table() -> &'static [SignCase; 16] {
    static TABLE: OnceLock<[SignCase; 16]> = OnceLock::new();
    TABLE.get_or_init(build_case_table)
}

/// Derive the 16-case table on a canonical positively oriented tet.
/// The quad cycle is topological and the winding test is invariant under
/// positive-determinant maps, so the table transfers to every grid tet.
fn build_case_table() -> [SignCase; 16] {
    let verts: [[f64; 3]; 4] =
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let midpoint = |slot: usize| {
        let (a, b) = TET_EDGES[slot];
        [
            0.5 * (verts[a][0] + verts[b][0]),
            0.5 * (verts[a][1] + verts[b][1]),
            0.5 * (verts[a][2] + verts[b][2]),
        ]
    };
    let slot_of = |a: usize, b: usize| {
        TET_EDGES
            .iter()
            .position(|&(x, y)| (x, y) == (a.min(b), a.max(b)))
            .expect("tet edge")
    };

    let mut table: [SignCase; 16] = Default::default();
    for mask in 1usize..15 {
        let inside: Vec<usize> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
        let outside: Vec<usize> = (0..4).filter(|i| mask & (1 << i) == 0).collect();
        let centroid = |ids: &[usize]| {
            let mut c = [0.0; 3];
            for &i in ids {
                for d in 0..3 {
                    c[d] += verts[i][d] / ids.len() as f64;
                }
            }
            c
        };
        let (ci, co) = (centroid(&inside), centroid(&outside));
        let dir = [co[0] - ci[0], co[1] - ci[1], co[2] - ci[2]];
        let orient = |tri: &mut [usize; 3]| {
            let (p0, p1, p2) = (midpoint(tri[0]), midpoint(tri[1]), midpoint(tri[2]));
            let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
            let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
            let n = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            if n[0] * dir[0] + n[1] * dir[1] + n[2] * dir[2] < 0.0 {
                tri.swap(1, 2);
            }
        };

        let mut tris = Vec::new();
        match inside.len() {
            1 | 3 => {
                let apex = if inside.len() == 1 { inside[0] } else { outside[0] };
                let others: Vec<usize> = (0..4).filter(|&i| i != apex).collect();
                let mut tri = [
                    slot_of(apex, others[0]),
                    slot_of(apex, others[1]),
                    slot_of(apex, others[2]),
                ];
                orient(&mut tri);
                tris.push(tri);
            }
            2 => {
                // Quad cycle (a,c) (a,d) (b,d) (b,c): consecutive crossings
                // share a tet face.
                let (a, b) = (inside[0], inside[1]);
                let (c, d) = (outside[0], outside[1]);
                let cycle =
                    [slot_of(a, c), slot_of(a, d), slot_of(b, d), slot_of(b, c)];
                let mut t1 = [cycle[0], cycle[1], cycle[2]];
                let mut t2 = [cycle[0], cycle[2], cycle[3]];
                orient(&mut t1);
                orient(&mut t2);
                tris.push(t1);
                tris.push(t2);
            }
            _ => unreachable!("mask 1..15 has 1-3 inside vertices"),
        }
        table[mask] = SignCase { tris };
    }
    table
}

/// Extracted triangle surface. Vertex positions live on the tape and are
/// differentiable w.r.t. the SDF and deformation inputs; connectivity is a
/// frozen decision of the current sign pattern.
#[derive(Debug)]
pub struct TriMesh {
    pub vertices: TensorId,
    pub faces: Vec<[usize; 3]>,
    /// Grid-vertex pair (lo, hi) that each mesh vertex interpolates.
    pub src_edges: Vec<(usize, usize)>,
}

impl TriMesh {
    pub fn vertex_count(&self) -> usize {
        self.src_edges.len()
    }
}

/// Marching tetrahedra over per-vertex `s` (`[V,1]`) and offsets `delta`
/// (`[V,3]`). Vertices with `s >= 0` count as outside (zero is outside).
/// Crossing vertices are deduplicated per grid edge, so a closed field
/// yields a watertight mesh. An empty mesh is a valid result.
pub fn marching_tets(
    tape: &mut Tape,
    grid: &TetGrid,
    s: TensorId,
    delta: TensorId,
) -> Result<TriMesh, GeometryError> {
    let vcount = grid.vertices.len();
    if tape.shape(s) != [vcount, 1] || tape.shape(delta) != [vcount, 3] {
        return Err(GeometryError::Invalid(format!(
            "field shapes {:?}/{:?} do not match {vcount} grid vertices",
            tape.shape(s),
            tape.shape(delta)
        )));
    }
    let s_vals = tape.data(s).to_vec();
    let inside = |v: usize| s_vals[v] < 0.0;

    // A crossing that lands (numerically) on a grid vertex is produced by
    // every edge reaching that vertex; weld those to one mesh vertex and
    // drop the resulting topologically degenerate triangles, so closed
    // fields stay watertight even when the level set grazes the lattice.
    const SNAP: f64 = 1e-9;
    #[derive(PartialEq, Eq, Hash)]
    enum VertexKey {
        Edge(usize, usize),
        Grid(usize),
    }

    let table = case_table();
    let mut vertex_ids: HashMap<VertexKey, usize> = HashMap::new();
    let mut src_edges: Vec<(usize, usize)> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    for tet in &grid.tets {
        let mask = (0..4).fold(0usize, |m, i| m | (usize::from(inside(tet[i])) << i));
        for tri in &table[mask].tris {
            let mut face = [0usize; 3];
            for (corner, &slot) in tri.iter().enumerate() {
                let (la, lb) = TET_EDGES[slot];
                let (ga, gb) = (tet[la].min(tet[lb]), tet[la].max(tet[lb]));
                // Fraction of the way from ga to gb at which the crossing
                // sits; snap near-endpoint crossings to the endpoint.
                let lambda = s_vals[ga] / (s_vals[ga] - s_vals[gb]);
                let key = if lambda <= SNAP {
                    VertexKey::Grid(ga)
                } else if lambda >= 1.0 - SNAP {
                    VertexKey::Grid(gb)
                } else {
                    VertexKey::Edge(ga, gb)
                };
                let next = src_edges.len();
                let vid = *vertex_ids.entry(key).or_insert_with(|| {
                    src_edges.push((ga, gb));
                    next
                });
                face[corner] = vid;
            }
            if face[0] != face[1] && face[1] != face[2] && face[0] != face[2] {
                faces.push(face);
            }
        }
    }

    let m = src_edges.len();
    let (idx_a, idx_b): (Vec<usize>, Vec<usize>) = src_edges.iter().copied().unzip();
    let vertices = if m == 0 {
        tape.constant(Vec::new(), vec![0, 3])?
    } else {
        let sa = tape.gather_rows(s, &idx_a)?;
        let sb = tape.gather_rows(s, &idx_b)?;
        let da = tape.gather_rows(delta, &idx_a)?;
        let db = tape.gather_rows(delta, &idx_b)?;
        let flat = |ids: &[usize]| {
            ids.iter().flat_map(|&i| grid.vertices[i]).collect::<Vec<f64>>()
        };
        let va = tape.constant(flat(&idx_a), vec![m, 3])?;
        let vb = tape.constant(flat(&idx_b), vec![m, 3])?;
        let pa = tape.add(va, da)?;
        let pb = tape.add(vb, db)?;
        // Crossing point (s_b p_a - s_a p_b) / (s_b - s_a): a convex
        // combination because the endpoint signs differ strictly.
        let sa3 = nn::tile_cols(tape, sa, 3)?;
        let sb3 = nn::tile_cols(tape, sb, 3)?;
        let lhs = tape.mul(sb3, pa)?;
        let rhs = tape.mul(sa3, pb)?;
        let num = tape.sub(lhs, rhs)?;
        let den = tape.sub(sb, sa)?;
        let den3 = nn::tile_cols(tape, den, 3)?;
        tape.div(num, den3)?
    };

    // Drop degenerate faces (area at or below 1e-12).
    let vdata = tape.data(vertices);
    faces.retain(|f| {
        let p = |i: usize| [vdata[f[i] * 3], vdata[f[i] * 3 + 1], vdata[f[i] * 3 + 2]];
        triangle_area(p(0), p(1), p(2)) > 1e-12
    });

    Ok(TriMesh { vertices, faces, src_edges })
}

pub fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

/// Unit face normals and area-weighted unit vertex normals, both
/// differentiable w.r.t. the mesh vertices.
pub fn face_and_vertex_normals(
    tape: &mut Tape,
    mesh: &TriMesh,
) -> Result<(TensorId, TensorId), GeometryError> {
    let m = mesh.vertex_count();
    if mesh.faces.is_empty() {
        let f = tape.constant(Vec::new(), vec![0, 3])?;
        let v = tape.constant(vec![0.0; m * 3], vec![m, 3])?;
        return Ok((f, v));
    }
    let i0: Vec<usize> = mesh.faces.iter().map(|f| f[0]).collect();
    let i1: Vec<usize> = mesh.faces.iter().map(|f| f[1]).collect();
    let i2: Vec<usize> = mesh.faces.iter().map(|f| f[2]).collect();
    let v0 = tape.gather_rows(mesh.vertices, &i0)?;
    let v1 = tape.gather_rows(mesh.vertices, &i1)?;
    let v2 = tape.gather_rows(mesh.vertices, &i2)?;
    let e1 = tape.sub(v1, v0)?;
    let e2 = tape.sub(v2, v0)?;
    let raw = nn::cross_rows(tape, e1, e2)?; // length = 2 * face area
    let face_normals = nn::normalize_rows(tape, raw, 1e-12)?;

    let s0 = tape.scatter_add_rows(raw, &i0, m)?;
    let s1 = tape.scatter_add_rows(raw, &i1, m)?;
    let s2 = tape.scatter_add_rows(raw, &i2, m)?;
    let sum01 = tape.add(s0, s1)?;
    let sum = tape.add(sum01, s2)?;
    let vertex_normals = nn::normalize_rows(tape, sum, 1e-12)?;
    Ok((face_normals, vertex_normals))
}

/// True when every edge of `faces` is shared by exactly two faces.
pub fn is_watertight(faces: &[[usize; 3]]) -> bool {
    if faces.is_empty() {
        return false;
    }
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts.values().all(|&c| c == 2)
}

/// `V - E + F` over the face list (vertex count taken from the faces).
pub fn euler_characteristic(faces: &[[usize; 3]]) -> i64 {
    let mut verts = std::collections::HashSet::new();
    let mut edges = std::collections::HashSet::new();
    for f in faces {
        for &v in f {
            verts.insert(v);
        }
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    verts.len() as i64 - edges.len() as i64 + faces.len() as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_at_resolution_two() {
        let grid = build_tet_grid(2);
        assert_eq!(grid.vertices.len(), 27);
        assert_eq!(grid.tets.len(), 48);
        assert!((grid.cell_size - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_tets_positively_oriented() {
        let grid = build_tet_grid(3);
        for tet in &grid.tets {
            let vol = signed_volume(
                grid.vertices[tet[0]],
                grid.vertices[tet[1]],
                grid.vertices[tet[2]],
                grid.vertices[tet[3]],
            );
            assert!(vol > 0.0);
        }
    }

    #[test]
    fn tet_volumes_fill_the_cube() {
        let grid = build_tet_grid(4);
        let total: f64 = grid
            .tets
            .iter()
            .map(|t| {
                signed_volume(
                    grid.vertices[t[0]],
                    grid.vertices[t[1]],
                    grid.vertices[t[2]],
                    grid.vertices[t[3]],
                )
            })
            .sum();
        assert!((total - 8.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn ellipsoid_sdf_center_and_surface() {
        let radii = [0.5, 0.5, 0.8];
        assert!((ellipsoid_sdf([0.0, 0.0, 0.0], radii) + 0.5).abs() < 1e-12);
        assert!(ellipsoid_sdf([0.5, 0.0, 0.0], radii).abs() < 1e-12);
        assert!(ellipsoid_sdf([0.9, 0.0, 0.0], radii) > 0.0);
    }

    #[test]
    fn surface_samples_lie_on_surface_and_are_deterministic() {
        let radii = [0.4, 0.5, 0.6];
        let mut r1 = crate::rng::stream(3, "surface", &[]);
        let mut r2 = crate::rng::stream(3, "surface", &[]);
        let a = sample_ellipsoid_surface(64, radii, &mut r1);
        let b = sample_ellipsoid_surface(64, radii, &mut r2);
        assert_eq!(a, b);
        for p in &a {
            let n =
                (p[0] / radii[0]).powi(2) + (p[1] / radii[1]).powi(2) + (p[2] / radii[2]).powi(2);
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    fn field_tensors(
        tape: &mut Tape,
        grid: &TetGrid,
        f: impl Fn([f64; 3]) -> f64,
    ) -> (TensorId, TensorId) {
        let v = grid.vertices.len();
        let s: Vec<f64> = grid.vertices.iter().map(|&p| f(p)).collect();
        let s = tape.leaf(s, vec![v, 1]).unwrap();
        let delta = tape.leaf(vec![0.0; v * 3], vec![v, 3]).unwrap();
        (s, delta)
    }

    #[test]
    fn single_tet_cases_match_table() {
        let table = case_table();
        for mask in 1usize..15 {
            let inside = (mask as u32).count_ones();
            let expected = if inside == 2 { 2 } else { 1 };
            assert_eq!(table[mask].tris.len(), expected, "mask {mask}");
        }
        assert!(table[0].tris.is_empty());
        assert!(table[15].tris.is_empty());
    }

    #[test]
    fn sphere_extraction_is_closed() {
        let grid = build_tet_grid(16);
        let mut tape = Tape::new();
        let (s, delta) = field_tensors(&mut tape, &grid, |p| {
            (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.6
        });
        let mesh = marching_tets(&mut tape, &grid, s, delta).unwrap();
        assert!(is_watertight(&mesh.faces));
        assert_eq!(euler_characteristic(&mesh.faces), 2);
    }

    #[test]
    fn sign_flip_mirrors_geometry_and_normals() {
        let grid = build_tet_grid(6);
        let sphere = |p: [f64; 3]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.55;

        let mut tape = Tape::new();
        let (s, d) = field_tensors(&mut tape, &grid, sphere);
        let mesh = marching_tets(&mut tape, &grid, s, d).unwrap();
        let (_, vn) = face_and_vertex_normals(&mut tape, &mesh).unwrap();

        let mut tape2 = Tape::new();
        let (s2, d2) = field_tensors(&mut tape2, &grid, |p| -sphere(p));
        let mesh2 = marching_tets(&mut tape2, &grid, s2, d2).unwrap();
        let (_, vn2) = face_and_vertex_normals(&mut tape2, &mesh2).unwrap();

        // Mirrored cases emit edges in a different order; compare per edge.
        let lookup: HashMap<(usize, usize), usize> =
            mesh2.src_edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        assert_eq!(mesh.src_edges.len(), mesh2.src_edges.len());
        assert_eq!(mesh.faces.len(), mesh2.faces.len());
        let (a, b) = (tape.data(mesh.vertices), tape2.data(mesh2.vertices));
        let (na, nb) = (tape.data(vn), tape2.data(vn2));
        for (i, edge) in mesh.src_edges.iter().enumerate() {
            let j = lookup[edge];
            for d in 0..3 {
                assert!((a[i * 3 + d] - b[j * 3 + d]).abs() < 1e-12);
                assert!(
                    (na[i * 3 + d] + nb[j * 3 + d]).abs() < 1e-9,
                    "normals should be opposite"
                );
            }
        }
    }

    #[test]
    fn empty_mesh_is_valid() {
        let grid = build_tet_grid(2);
        let mut tape = Tape::new();
        let (s, delta) = field_tensors(&mut tape, &grid, |_| 1.0);
        let mesh = marching_tets(&mut tape, &grid, s, delta).unwrap();
        assert!(mesh.faces.is_empty());
        assert_eq!(mesh.vertex_count(), 0);
    }

    #[test]
    fn axis_aligned_triangle_normal() {
        let mut tape = Tape::new();
        let verts = tape
            .leaf(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0], vec![3, 3])
            .unwrap();
        let mesh = TriMesh { vertices: verts, faces: vec![[0, 1, 2]], src_edges: vec![(0, 0); 3] };
        let (fnorm, vnorm) = face_and_vertex_normals(&mut tape, &mesh).unwrap();
        assert_eq!(tape.data(fnorm), &[0.0, 0.0, 1.0]);
        for v in 0..3 {
            assert_eq!(&tape.data(vnorm)[v * 3..v * 3 + 3], &[0.0, 0.0, 1.0]);
        }
    }
}
