//! Pinhole camera and differentiable rasterization.
//!
//! Visibility (which face wins a pixel) is decided from forward values and
//! held fixed; gradients flow through the screen-space barycentric weights
//! and the per-vertex attributes, in the style of attribute-gradient
//! differentiable rasterizers.

use thiserror::Error;

use crate::tensor::{CustomOp, Tape, TensorError, TensorId, TensorView};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

pub const NEAR_PLANE: f64 = 0.1;
pub const FAR_PLANE: f64 = 100.0;

/// Position plus yaw/pitch/fov; roll is fixed to zero and the aspect ratio
/// of the projection plane is 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub fov: f64,
}

impl CameraPose {
    /// Camera on a sphere of `radius` looking at the origin.
    pub fn orbit(radius: f64, yaw: f64, pitch: f64, fov: f64) -> Self {
        let position = [
            radius * pitch.cos() * yaw.sin(),
            radius * pitch.sin(),
            radius * pitch.cos() * yaw.cos(),
        ];
        Self { position, yaw, pitch, fov }
    }

    /// Unit view direction derived from yaw and pitch.
    pub fn forward(&self) -> [f64; 3] {
        [
            -self.pitch.cos() * self.yaw.sin(),
            -self.pitch.sin(),
            -self.pitch.cos() * self.yaw.cos(),
        ]
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(RenderError::Invalid(format!("fov {} out of (0, pi)", self.fov)));
        }
        if self.pitch.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(RenderError::Invalid(format!("pitch {} out of (-pi/2, pi/2)", self.pitch)));
        }
        Ok(())
    }
}

/// Row-major 4x4 matrix.
pub type Mat4 = [f64; 16];

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [0.0; 16];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                out[i * 4 + j] += a[i * 4 + k] * b[k * 4 + j];
            }
        }
    }
    out
}

pub fn mat4_apply(m: &Mat4, v: [f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (i, o) in out.iter_mut().enumerate() {
        for k in 0..4 {
            *o += m[i * 4 + k] * v[k];
        }
    }
    out
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Right-handed look-along view composed with a perspective projection
/// (vertical fov, aspect 1, near 0.1, far 100).
pub fn view_projection(camera: &CameraPose) -> Mat4 {
    let f = camera.forward();
    let up = [0.0, 1.0, 0.0];
    let r = normalize(cross(f, up));
    let u = cross(r, f);
    let eye = camera.position;
    let view: Mat4 = [
        r[0], r[1], r[2], -dot(r, eye),
        u[0], u[1], u[2], -dot(u, eye),
        -f[0], -f[1], -f[2], dot(f, eye),
        0.0, 0.0, 0.0, 1.0,
    ];
    let t = 1.0 / (camera.fov * 0.5).tan();
    let (n, fp) = (NEAR_PLANE, FAR_PLANE);
    let proj: Mat4 = [
        t, 0.0, 0.0, 0.0,
        0.0, t, 0.0, 0.0,
        0.0, 0.0, -(fp + n) / (fp - n), -2.0 * fp * n / (fp - n),
        0.0, 0.0, -1.0, 0.0,
    ];
    mat4_mul(&proj, &view)
}

/// Differentiable projection of `[V,3]` vertices to pixel coordinates.
/// Also returns the per-vertex clip-space `w` (camera depth) as plain
/// values for the non-differentiable visibility pass.
pub fn project_vertices(
    tape: &mut Tape,
    vertices: TensorId,
    camera: &CameraPose,
    res: usize,
) -> Result<(TensorId, Vec<f64>), RenderError> {
    let v = tape.shape(vertices)[0];
    let mvp = view_projection(camera);
    let mut mvp_t = [0.0; 16];
    for i in 0..4 {
        for j in 0..4 {
            mvp_t[j * 4 + i] = mvp[i * 4 + j];
        }
    }
    let ones = tape.constant(vec![1.0; v], vec![v, 1])?;
    let hom = tape.concat(&[vertices, ones], 1)?;
    let mt = tape.constant(mvp_t.to_vec(), vec![4, 4])?;
    let clip = tape.matmul(hom, mt)?;
    let w = tape.slice(clip, 1, 3, 1)?;
    let xy = tape.slice(clip, 1, 0, 2)?;
    let w2 = crate::nn::tile_cols(tape, w, 2)?;
    let ndc = tape.div(xy, w2)?;
    let half = res as f64 * 0.5;
    let nx = tape.slice(ndc, 1, 0, 1)?;
    let ny = tape.slice(ndc, 1, 1, 1)?;
    let sx_scaled = tape.scalar_mul(nx, half);
    let sx = tape.scalar_add(sx_scaled, half);
    let sy_scaled = tape.scalar_mul(ny, -half);
    let sy = tape.scalar_add(sy_scaled, half);
    let screen = tape.concat(&[sx, sy], 1)?;
    let wv = tape.data(w).to_vec();
    Ok((screen, wv))
}

/// Plain-value projection for passes where the mesh is frozen: pixel
/// coordinates and clip `w` per vertex, matching [`project_vertices`].
pub fn project_values(vertices: &[f64], camera: &CameraPose, res: usize) -> (Vec<f64>, Vec<f64>) {
    let mvp = view_projection(camera);
    let half = res as f64 * 0.5;
    let count = vertices.len() / 3;
    let mut screen = Vec::with_capacity(count * 2);
    let mut ws = Vec::with_capacity(count);
    for v in vertices.chunks_exact(3) {
        let clip = mat4_apply(&mvp, [v[0], v[1], v[2], 1.0]);
        screen.push(clip[0] / clip[3] * half + half);
        screen.push(clip[1] / clip[3] * -half + half);
        ws.push(clip[3]);
    }
    (screen, ws)
}

/// One covered pixel: winning face and its screen-space barycentrics.
#[derive(Debug, Clone, Copy)]
pub struct PixelHit {
    pub pixel: usize,
    pub face: usize,
    pub bary: [f64; 3],
}

/// Frozen visibility of one frame, in pixel order.
#[derive(Debug, Clone, Default)]
pub struct Coverage {
    pub res: usize,
    pub hits: Vec<PixelHit>,
}

/// Hard mask and perspective-correct depth buffers.
#[derive(Debug, Clone)]
pub struct FrameBuffers {
    pub res: usize,
    pub mask: Vec<f64>,
    pub depth: Vec<f64>,
}

impl FrameBuffers {
    pub fn mask_pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }
}

/// Barycentric weights of `p` in triangle `(a, b, c)` plus the gradient of
/// each weight w.r.t. the six triangle coordinates (ax, ay, bx, by, cx, cy).
pub fn barycentric_with_grads(
    a: [f64; 2],
    b: [f64; 2],
    c: [f64; 2],
    p: [f64; 2],
) -> Option<([f64; 3], [[f64; 6]; 3])> {
    let k0x = b[1] - c[1];
    let k0y = c[0] - b[0];
    let k1x = c[1] - a[1];
    let k1y = a[0] - c[0];
    let d = k0x * (a[0] - c[0]) + k0y * (a[1] - c[1]);
    if d.abs() < 1e-12 {
        return None;
    }
    let n0 = k0x * (p[0] - c[0]) + k0y * (p[1] - c[1]);
    let n1 = k1x * (p[0] - c[0]) + k1y * (p[1] - c[1]);
    let w0 = n0 / d;
    let w1 = n1 / d;
    let w2 = 1.0 - w0 - w1;

    let dn0 = [
        0.0,
        0.0,
        -(p[1] - c[1]),
        p[0] - c[0],
        (p[1] - c[1]) - k0x,
        -(p[0] - c[0]) - k0y,
    ];
    let dn1 = [
        p[1] - c[1],
        -(p[0] - c[0]),
        0.0,
        0.0,
        -k1x - (p[1] - c[1]),
        (p[0] - c[0]) - k1y,
    ];
    let dd = [
        k0x,
        k0y,
        -(a[1] - c[1]),
        a[0] - c[0],
        (a[1] - c[1]) - k0x,
        -(a[0] - c[0]) - k0y,
    ];
    let mut grads = [[0.0; 6]; 3];
    for i in 0..6 {
        grads[0][i] = (dn0[i] - w0 * dd[i]) / d;
        grads[1][i] = (dn1[i] - w1 * dd[i]) / d;
        grads[2][i] = -grads[0][i] - grads[1][i];
    }
    Some(([w0, w1, w2], grads))
}

/// Z-buffered coverage pass over forward values. Depth interpolates the
/// reciprocal clip `w`, ties go to the lowest face index, and pixels are
/// sampled at their centers.
pub fn compute_coverage(
    screen: &[f64],
    clip_w: &[f64],
    faces: &[[usize; 3]],
    res: usize,
) -> (Coverage, FrameBuffers) {
    let mut depth = vec![f64::INFINITY; res * res];
    let mut winner: Vec<Option<(usize, [f64; 3])>> = vec![None; res * res];

    for (fi, face) in faces.iter().enumerate() {
        let pt = |v: usize| [screen[v * 2], screen[v * 2 + 1]];
        let (a, b, c) = (pt(face[0]), pt(face[1]), pt(face[2]));
        let ws = [clip_w[face[0]], clip_w[face[1]], clip_w[face[2]]];
        if ws.iter().any(|&w| w <= NEAR_PLANE * 1e-3) {
            continue;
        }
        let xs = [a[0], b[0], c[0]];
        let ys = [a[1], b[1], c[1]];
        let min_x = xs.iter().copied().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x =
            (xs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil() as isize).min(res as isize - 1);
        let min_y = ys.iter().copied().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y =
            (ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil() as isize).min(res as isize - 1);
        if max_x < 0 || max_y < 0 {
            continue;
        }
        for py in min_y..=max_y as usize {
            for px in min_x..=max_x as usize {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let Some((bary, _)) = barycentric_with_grads(a, b, c, p) else {
                    continue;
                };
                if bary.iter().any(|&w| w < 0.0) {
                    continue;
                }
                let inv_w = bary[0] / ws[0] + bary[1] / ws[1] + bary[2] / ws[2];
                let z = 1.0 / inv_w;
                if z < NEAR_PLANE || z > FAR_PLANE {
                    continue;
                }
                let pix = py * res + px;
                if z < depth[pix] {
                    depth[pix] = z;
                    winner[pix] = Some((fi, bary));
                }
            }
        }
    }

    let mut mask = vec![0.0; res * res];
    let mut hits = Vec::new();
    for (pix, w) in winner.into_iter().enumerate() {
        if let Some((face, bary)) = w {
            mask[pix] = 1.0;
            hits.push(PixelHit { pixel: pix, face, bary });
        }
    }
    (Coverage { res, hits }, FrameBuffers { res, mask, depth })
}

/// Tape op interpolating per-vertex attributes over a fixed coverage.
#[derive(Debug)]
struct RasterInterp {
    res: usize,
    channels: usize,
    faces: Vec<[usize; 3]>,
    hits: Vec<PixelHit>,
}

impl RasterInterp {
    fn forward(&self, screen: &[f64], attrs: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let mut image = vec![0.0; self.res * self.res * c];
        for hit in &self.hits {
            let face = self.faces[hit.face];
            let pt = |v: usize| [screen[v * 2], screen[v * 2 + 1]];
            let p = self.pixel_center(hit.pixel);
            // Recompute weights from the current positions so the value
            // stays consistent under perturbation of the inputs.
            let bary = barycentric_with_grads(pt(face[0]), pt(face[1]), pt(face[2]), p)
                .map(|(w, _)| w)
                .unwrap_or(hit.bary);
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += bary[k] * attrs[face[k] * c + ch];
                }
                image[hit.pixel * c + ch] = acc;
            }
        }
        image
    }

    fn pixel_center(&self, pixel: usize) -> [f64; 2] {
        let (py, px) = (pixel / self.res, pixel % self.res);
        [px as f64 + 0.5, py as f64 + 0.5]
    }
}

impl CustomOp for RasterInterp {
    fn name(&self) -> &'static str {
        "raster_interp"
    }

    fn backward(
        &self,
        upstream: &[f64],
        inputs: &[TensorView<'_>],
        _output: TensorView<'_>,
    ) -> Vec<Option<Vec<f64>>> {
        let screen = inputs[0].data;
        let attrs = inputs[1].data;
        let c = self.channels;
        let mut d_screen = vec![0.0; screen.len()];
        let mut d_attrs = vec![0.0; attrs.len()];
        for hit in &self.hits {
            let face = self.faces[hit.face];
            let pt = |v: usize| [screen[v * 2], screen[v * 2 + 1]];
            let p = self.pixel_center(hit.pixel);
            let Some((bary, grads)) =
                barycentric_with_grads(pt(face[0]), pt(face[1]), pt(face[2]), p)
            else {
                continue;
            };
            let g = &upstream[hit.pixel * c..(hit.pixel + 1) * c];
            let mut dw = [0.0; 3];
            for k in 0..3 {
                for ch in 0..c {
                    d_attrs[face[k] * c + ch] += bary[k] * g[ch];
                    dw[k] += g[ch] * attrs[face[k] * c + ch];
                }
            }
            for k in 0..3 {
                for (coord, &dwdx) in grads[k].iter().enumerate() {
                    let vertex = face[coord / 2];
                    d_screen[vertex * 2 + coord % 2] += dw[k] * dwdx;
                }
            }
        }
        vec![Some(d_screen), Some(d_attrs)]
    }
}

/// One rendered frame: attribute image on the tape plus hard buffers.
#[derive(Debug)]
pub struct RenderedFrame {
    pub image: TensorId,
    pub buffers: FrameBuffers,
    pub coverage: Coverage,
}

/// Rasterize `attrs` (`[V,C]`) over the projected mesh. The mask/depth
/// buffers and the coverage are forward-value decisions; the attribute
/// image is differentiable w.r.t. mesh vertices and attributes.
pub fn rasterize(
    tape: &mut Tape,
    vertices: TensorId,
    faces: &[[usize; 3]],
    attrs: TensorId,
    camera: &CameraPose,
    res: usize,
) -> Result<RenderedFrame, RenderError> {
    camera.validate()?;
    if res < 8 {
        return Err(RenderError::Invalid(format!("render resolution {res} below 8")));
    }
    let c = tape.shape(attrs).get(1).copied().unwrap_or(0);
    if faces.is_empty() {
        let image = tape.constant(vec![0.0; res * res * c], vec![res, res, c])?;
        return Ok(RenderedFrame {
            image,
            buffers: FrameBuffers {
                res,
                mask: vec![0.0; res * res],
                depth: vec![f64::INFINITY; res * res],
            },
            coverage: Coverage { res, hits: Vec::new() },
        });
    }
    let (screen, clip_w) = project_vertices(tape, vertices, camera, res)?;
    let (coverage, buffers) = compute_coverage(tape.data(screen), &clip_w, faces, res);
    let image = raster_image(tape, screen, attrs, faces, &coverage, res)?;
    Ok(RenderedFrame { image, buffers, coverage })
}

/// Interpolate attributes under an externally fixed coverage (used for
/// frozen-visibility gradient checks and staged renders).
pub fn rasterize_fixed(
    tape: &mut Tape,
    vertices: TensorId,
    faces: &[[usize; 3]],
    attrs: TensorId,
    camera: &CameraPose,
    coverage: &Coverage,
) -> Result<TensorId, RenderError> {
    let (screen, _) = project_vertices(tape, vertices, camera, coverage.res)?;
    raster_image(tape, screen, attrs, faces, coverage, coverage.res)
}

fn raster_image(
    tape: &mut Tape,
    screen: TensorId,
    attrs: TensorId,
    faces: &[[usize; 3]],
    coverage: &Coverage,
    res: usize,
) -> Result<TensorId, RenderError> {
    let c = tape.shape(attrs)[1];
    let rule = RasterInterp {
        res,
        channels: c,
        faces: faces.to_vec(),
        hits: coverage.hits.clone(),
    };
    let data = rule.forward(tape.data(screen), tape.data(attrs));
    Ok(tape.custom(vec![screen, attrs], Box::new(rule), data, vec![res, res, c])?)
}

/// Plain (non-tape) attribute interpolation over a coverage, for stages
/// where the mesh is frozen.
pub fn coverage_attribute_values(
    coverage: &Coverage,
    faces: &[[usize; 3]],
    attrs: &[f64],
    channels: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; coverage.hits.len() * channels];
    for (i, hit) in coverage.hits.iter().enumerate() {
        let face = faces[hit.face];
        for ch in 0..channels {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += hit.bary[k] * attrs[face[k] * channels + ch];
            }
            out[i * channels + ch] = acc;
        }
    }
    out
}

/// Average-pool a `res x res` mask down to `th x tw`; the target extents
/// must divide the source. The result is a plain value vector because the
/// resized mask is a gradient-stopped training target.
pub fn eta_resize(mask: &[f64], res: usize, th: usize, tw: usize) -> Result<Vec<f64>, RenderError> {
    if th == 0 || tw == 0 || res % th != 0 || res % tw != 0 {
        return Err(RenderError::Invalid(format!(
            "target {th}x{tw} must divide source {res}x{res}"
        )));
    }
    let (ky, kx) = (res / th, res / tw);
    let inv = 1.0 / (ky * kx) as f64;
    let mut out = vec![0.0; th * tw];
    for ty in 0..th {
        for tx in 0..tw {
            let mut acc = 0.0;
            for dy in 0..ky {
                for dx in 0..kx {
                    acc += mask[(ty * ky + dy) * res + (tx * kx + dx)];
                }
            }
            out[ty * tw + tx] = acc * inv;
        }
    }
    Ok(out)
}
