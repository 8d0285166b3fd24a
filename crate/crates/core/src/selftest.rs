//! Quick oracle suites behind the `selftest` CLI command: finite-difference
//! gradient checks, geometry/render/shading oracles, and adapter algebra,
//! each printed as one pass/fail line.

use rand::Rng;

use crate::denoiser::NoiseSchedule;
use crate::fdiff;
use crate::geometry;
use crate::losses;
use crate::material::{self, BrdfModel, BrdfParams, EnvMap};
use crate::params::{LeafSet, ParamStore};
use crate::render::{self, CameraPose};
use crate::rng;
use crate::tensor::Tape;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            println!("PASS  {name}");
        } else {
            println!("FAIL  {name}: {detail}");
            self.failures += 1;
        }
    }
}

/// Run every quick suite; returns true when everything passed.
pub fn run() -> bool {
    let mut report = Report { failures: 0 };
    tensor_gradients(&mut report);
    geometry_suite(&mut report);
    render_suite(&mut report);
    shading_suite(&mut report);
    adapter_suite(&mut report);
    schedule_suite(&mut report);
    loss_suite(&mut report);
    println!(
        "selftest: {}",
        if report.failures == 0 { "all suites passed".into() } else { format!("{} failure(s)", report.failures) }
    );
    report.failures == 0
}

fn tensor_gradients(report: &mut Report) {
    let mut r = rng::stream(0x5eed, "selftest-grad", &[]);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut run_case = |name: &str, build: &dyn Fn(&mut Tape, crate::tensor::TensorId) -> crate::tensor::TensorId,
                        r: &mut rand_chacha::ChaCha8Rng| {
        let n = 6;
        let x0: Vec<f64> = (0..n).map(|_| r.gen_range(0.25..1.5)).collect();
        let eval = |vals: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(vals.to_vec(), vec![2, 3]).unwrap();
            let y = build(&mut tape, x);
            tape.item(y)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), vec![2, 3]).unwrap();
        let y = build(&mut tape, x);
        let grads = tape.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().to_vec();
        let res = fdiff::check_gradient(eval, &x0, &analytic, 1e-6);
        worst = worst.max(res.max_rel_err);
        count += 1;
        (name.to_string(), res.max_rel_err < 1e-5, format!("rel err {:.2e}", res.max_rel_err))
    };

    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, crate::tensor::TensorId) -> crate::tensor::TensorId>)> = vec![
        ("exp", Box::new(|t, x| { let e = t.exp(x); t.sum(e) })),
        ("sqrt", Box::new(|t, x| { let e = t.sqrt(x); t.sum(e) })),
        ("sigmoid", Box::new(|t, x| { let e = t.sigmoid(x); t.sum(e) })),
        ("silu", Box::new(|t, x| { let e = t.silu(x); t.sum(e) })),
        ("softmax", Box::new(|t, x| { let s = t.softmax(x, 1).unwrap(); let sq = t.mul(s, s).unwrap(); t.sum(sq) })),
        ("matmul", Box::new(|t, x| { let w = t.constant(vec![0.3, -0.7, 0.2, 0.9, -0.1, 0.4], vec![3, 2]).unwrap(); let p = t.matmul(x, w).unwrap(); t.sum(p) })),
        ("mean", Box::new(|t, x| t.mean(x))),
        ("div", Box::new(|t, x| { let c = t.constant(vec![1.5; 6], vec![2, 3]).unwrap(); let d = t.div(x, c).unwrap(); t.sum(d) })),
    ];
    let mut all_ok = true;
    let mut details = String::new();
    for (name, build) in &cases {
        let (_, ok, detail) = run_case(name, build.as_ref(), &mut r);
        if !ok {
            all_ok = false;
            details.push_str(&format!("{name}: {detail}; "));
        }
    }
    report.check(
        "tensor gradient checks vs central differences",
        all_ok,
        if details.is_empty() { format!("worst rel err {worst:.2e}") } else { details },
    );
}

fn geometry_suite(report: &mut Report) {
    let grid = geometry::build_tet_grid(2);
    report.check(
        "tet grid counts (resolution 2)",
        grid.vertices.len() == 27 && grid.tets.len() == 48,
        format!("{} verts {} tets", grid.vertices.len(), grid.tets.len()),
    );

    for res in [8usize, 12] {
        let grid = geometry::build_tet_grid(res);
        let mut tape = Tape::new();
        let v = grid.vertices.len();
        let s: Vec<f64> = grid
            .vertices
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.6)
            .collect();
        let s = tape.leaf(s, vec![v, 1]).unwrap();
        let d = tape.leaf(vec![0.0; v * 3], vec![v, 3]).unwrap();
        let mesh = geometry::marching_tets(&mut tape, &grid, s, d).unwrap();
        let closed = geometry::is_watertight(&mesh.faces);
        let euler = geometry::euler_characteristic(&mesh.faces);
        report.check(
            &format!("sphere extraction closed at resolution {res}"),
            closed && euler == 2,
            format!("watertight {closed}, euler {euler}"),
        );
    }
}

fn render_suite(report: &mut Report) {
    // Projected disc radius of a sphere against the pinhole formula.
    let res = 64usize;
    let (verts, faces) = test_sphere_mesh(0.5, 24, 48);
    let mut tape = Tape::new();
    let v = tape.constant(verts.clone(), vec![verts.len() / 3, 3]).unwrap();
    let attrs = tape.constant(vec![1.0; verts.len() / 3], vec![verts.len() / 3, 1]).unwrap();
    let mut worst = 0.0f64;
    let mut r = rng::stream(11, "selftest-render", &[]);
    for _ in 0..3 {
        let yaw = r.gen_range(-3.0..3.0);
        let pitch = r.gen_range(-0.2..0.6);
        let fov = r.gen_range(0.45..0.75);
        let cam = CameraPose::orbit(2.5, yaw, pitch, fov);
        let frame = render::rasterize(&mut tape, v, &faces, attrs, &cam, res).unwrap();
        let count = frame.buffers.mask_pixel_count() as f64;
        let measured = (count / std::f64::consts::PI).sqrt();
        let expected = (res as f64 / 2.0) * (0.5 / 2.5) / (fov / 2.0).tan();
        worst = worst.max((measured - expected).abs());
    }
    report.check(
        "pinhole disc radius within 1.5 px",
        worst < 1.5,
        format!("worst deviation {worst:.3} px"),
    );
}

fn shading_suite(report: &mut Report) {
    // Lambertian delta light against the analytic value.
    let kd = [0.75, 0.5, 0.25];
    let n = [0.0, 0.0, 1.0];
    let light = [0.3f64, 0.4, 0.86];
    let norm = (light[0] * light[0] + light[1] * light[1] + light[2] * light[2]).sqrt();
    let dir = [light[0] / norm, light[1] / norm, light[2] / norm];
    let radiance = [2.0, 1.5, 1.0];
    let env = EnvMap::directional(dir, radiance);
    let params = BrdfParams { diffuse: kd, roughness: 1.0, metallic: 0.0 };
    let got = material::shade_point(n, [0.0, 0.0, 1.0], &params, &env, BrdfModel::DiffuseOnly);
    let cos = dir[2];
    let mut worst = 0.0f64;
    for c in 0..3 {
        let want = kd[c] * radiance[c] * cos / std::f64::consts::PI;
        worst = worst.max((got[c] - want).abs());
    }
    report.check("lambertian delta light analytic", worst < 1e-9, format!("max err {worst:.2e}"));

    // Reciprocity on random pairs.
    let mut r = rng::stream(12, "selftest-brdf", &[]);
    let mut max_asym = 0.0f64;
    for _ in 0..1000 {
        let sample_dir = |r: &mut rand_chacha::ChaCha8Rng| loop {
            let v: [f64; 3] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.05..1.0)];
            let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            if n2 > 1e-3 {
                let l = n2.sqrt();
                return [v[0] / l, v[1] / l, v[2] / l];
            }
        };
        let wi = sample_dir(&mut r);
        let wo = sample_dir(&mut r);
        let p = BrdfParams {
            diffuse: [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)],
            roughness: r.gen_range(0.08..1.0),
            metallic: r.gen_range(0.0..1.0),
        };
        let a = material::brdf_eval(wi, wo, n, &p);
        let b = material::brdf_eval(wo, wi, n, &p);
        for c in 0..3 {
            max_asym = max_asym.max((a[c] - b[c]).abs());
        }
    }
    report.check("brdf reciprocity", max_asym < 1e-9, format!("max asymmetry {max_asym:.2e}"));

    // White furnace: directional-hemispherical albedo stays near or below 1.
    let mut r = rng::stream(13, "selftest-furnace", &[]);
    let p = BrdfParams { diffuse: [1.0; 3], roughness: 0.5, metallic: 0.0 };
    let wo = [0.0f64, 0.3, 0.954];
    let wol = (wo[0] * wo[0] + wo[1] * wo[1] + wo[2] * wo[2]).sqrt();
    let wo = [wo[0] / wol, wo[1] / wol, wo[2] / wol];
    let samples = 10_000;
    let mut albedo = 0.0;
    for _ in 0..samples {
        // Uniform hemisphere by rejection.
        let wi = loop {
            let v: [f64; 3] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            if n2 <= 1.0 && n2 > 1e-6 && v[2] > 0.0 {
                let l = n2.sqrt();
                break [v[0] / l, v[1] / l, v[2] / l];
            }
        };
        let f = material::brdf_eval(wi, wo, n, &p);
        // pdf of uniform hemisphere = 1 / (2 pi)
        albedo += f[0] * wi[2] * 2.0 * std::f64::consts::PI / samples as f64;
    }
    report.check("white furnace albedo <= 1.05", albedo <= 1.05, format!("albedo {albedo:.4}"));
}

fn adapter_suite(report: &mut Report) {
    use crate::cglora::{lora_forward, CgLoraLayer};
    let layer = CgLoraLayer::new("st.q", 16, 4, 4, 24, 24).unwrap();
    let mut store = ParamStore::new();
    layer.init_params(&mut store, 31);
    report.check(
        "adapter parameter count",
        layer.param_count() == 4 * 48 + 2 * 4 * 32 + 64,
        format!("{}", layer.param_count()),
    );

    // Dense equivalence: x W + [xA;xA'] B == x (W + [A;A'] B).
    let mut r = rng::stream(14, "selftest-lora", &[]);
    store.get_mut("st.q.b").unwrap().data.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
    let mut tape = Tape::new();
    let mut leafs = LeafSet::new();
    let t = tape.constant((0..24).map(|_| r.gen_range(-1.0..1.0)).collect(), vec![1, 24]).unwrap();
    let c = tape.constant((0..24).map(|_| r.gen_range(-1.0..1.0)).collect(), vec![1, 24]).unwrap();
    let ad = layer.generate(&mut tape, &store, &mut leafs, t, c, true).unwrap();
    let x_data: Vec<f64> = (0..5 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w_data: Vec<f64> = (0..16 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let x = tape.constant(x_data.clone(), vec![5, 16]).unwrap();
    let w = tape.constant(w_data.clone(), vec![16, 16]).unwrap();
    let y = lora_forward(&mut tape, x, w, Some(&ad)).unwrap();

    // Dense route: fold the adapter into the weight matrix first.
    let a_txt = tape.data(ad.a_txt).to_vec();
    let a_cam = tape.data(ad.a_cam).to_vec();
    let b = tape.data(ad.b).to_vec();
    let mut w_dense = w_data.clone();
    for i in 0..16 {
        for j in 0..16 {
            let mut acc = 0.0;
            for k in 0..2 {
                acc += a_txt[i * 2 + k] * b[k * 16 + j];
                acc += a_cam[i * 2 + k] * b[(k + 2) * 16 + j];
            }
            w_dense[i * 16 + j] += acc;
        }
    }
    let mut worst = 0.0f64;
    for i in 0..5 {
        for j in 0..16 {
            let mut acc = 0.0;
            for k in 0..16 {
                acc += x_data[i * 16 + k] * w_dense[k * 16 + j];
            }
            worst = worst.max((acc - tape.data(y)[i * 16 + j]).abs());
        }
    }
    report.check("adapter forward equals dense route", worst < 1e-12, format!("max diff {worst:.2e}"));
}

fn schedule_suite(report: &mut Report) {
    let s = NoiseSchedule::new(1000);
    let mut ok = true;
    for t in 0..1000 {
        let (a, sg) = (s.alpha(t), s.sigma(t));
        if (a * a + sg * sg - 1.0).abs() > 1e-12 {
            ok = false;
        }
        if t > 0 && s.alpha_bar(t) >= s.alpha_bar(t - 1) {
            ok = false;
        }
    }
    report.check("noise schedule identities", ok, "alpha/sigma mismatch".into());
}

fn loss_suite(report: &mut Report) {
    let mut tape = Tape::new();
    let raw = tape.leaf(vec![0.2, 0.5, 0.8], vec![3]).unwrap();
    let norm = losses::normalize_attention(&mut tape, raw).unwrap();
    let d = tape.data(norm);
    let denom = 0.6 + losses::NORM_NU;
    let ok = d[0] == 0.0 && (d[1] - 0.3 / denom).abs() < 1e-12 && (d[2] - 0.6 / denom).abs() < 1e-12;
    report.check("attention normalization fixed points", ok, format!("{d:?}"));

    let m = tape.leaf(vec![1.0; 4], vec![2, 2]).unwrap();
    let z = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
    let (l, _) = losses::ama_loss(&mut tape, &[m], &[z], 1).unwrap();
    report.check("alignment loss bounds", tape.item(l) == 1.0, format!("{}", tape.item(l)));
}

/// Latitude/longitude sphere used by the renderer oracle.
pub fn test_sphere_mesh(radius: f64, stacks: usize, slices: usize) -> (Vec<f64>, Vec<[usize; 3]>) {
    let mut verts = Vec::new();
    for i in 0..=stacks {
        let theta = std::f64::consts::PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let phi = std::f64::consts::TAU * j as f64 / slices as f64;
            verts.extend_from_slice(&[
                radius * theta.sin() * phi.cos(),
                radius * theta.cos(),
                radius * theta.sin() * phi.sin(),
            ]);
        }
    }
    let at = |i: usize, j: usize| i * slices + (j % slices);
    let mut faces = Vec::new();
    for i in 0..stacks {
        for j in 0..slices {
            let (a, b, c, d) = (at(i, j), at(i, j + 1), at(i + 1, j + 1), at(i + 1, j));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    (verts, faces)
}
