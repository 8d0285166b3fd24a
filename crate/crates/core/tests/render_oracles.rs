//! Renderer oracles: the projection matrix against an independently
//! constructed reference, the projected sphere against the pinhole
//! formula, and frozen-visibility gradients against finite differences.

use nalgebra::{Matrix4, Perspective3, Point3, Vector3};
use rand::Rng;

use tetsculpt::fdiff;
use tetsculpt::render::{
    self, rasterize, rasterize_fixed, CameraPose, FAR_PLANE, NEAR_PLANE,
};
use tetsculpt::rng;
use tetsculpt::selftest::test_sphere_mesh;
use tetsculpt::tensor::Tape;

/// Reference view-projection built from nalgebra's look-at and
/// perspective constructors rather than our hand-rolled matrices.
fn reference_view_projection(cam: &CameraPose) -> Matrix4<f64> {
    let eye = Point3::new(cam.position[0], cam.position[1], cam.position[2]);
    let f = cam.forward();
    let target = Point3::new(eye.x + f[0], eye.y + f[1], eye.z + f[2]);
    let view = Matrix4::look_at_rh(&eye, &target, &Vector3::y());
    let proj = Perspective3::new(1.0, cam.fov, NEAR_PLANE, FAR_PLANE);
    proj.as_matrix() * view
}

#[test]
fn view_projection_matches_reference_construction() {
    let mut r = rng::stream(30, "vp-ref", &[]);
    for _ in 0..20 {
        let cam = CameraPose::orbit(
            r.gen_range(1.5..4.0),
            r.gen_range(-3.1..3.1),
            r.gen_range(-0.6..0.9),
            r.gen_range(0.3..1.2),
        );
        let ours = render::view_projection(&cam);
        let reference = reference_view_projection(&cam);
        for i in 0..4 {
            for j in 0..4 {
                let diff = (ours[i * 4 + j] - reference[(i, j)]).abs();
                assert!(diff < 1e-9, "entry ({i},{j}): {} vs {}", ours[i * 4 + j], reference[(i, j)]);
            }
        }
    }
}

#[test]
fn projected_sphere_matches_pinhole_radius() {
    let res = 64usize;
    let (verts, faces) = test_sphere_mesh(0.5, 32, 64);
    let n = verts.len() / 3;
    let mut r = rng::stream(31, "pinhole", &[]);
    let deg = std::f64::consts::PI / 180.0;
    for trial in 0..10 {
        let mut tape = Tape::new();
        let v = tape.constant(verts.clone(), vec![n, 3]).unwrap();
        let attrs = tape.constant(vec![1.0; n], vec![n, 1]).unwrap();
        let cam = CameraPose::orbit(
            2.5,
            r.gen_range(-180.0..180.0) * deg,
            r.gen_range(-15.0..45.0) * deg,
            r.gen_range(25.0..45.0) * deg,
        );
        let frame = rasterize(&mut tape, v, &faces, attrs, &cam, res).unwrap();
        let count = frame.buffers.mask_pixel_count() as f64;
        let measured_radius = (count / std::f64::consts::PI).sqrt();
        let expected = (res as f64 / 2.0) * (0.5 / 2.5) / (cam.fov / 2.0).tan();
        assert!(
            (measured_radius - expected).abs() < 1.5,
            "trial {trial}: disc radius {measured_radius:.2} px vs pinhole {expected:.2} px"
        );
    }
}

#[test]
fn mask_and_depth_stay_consistent() {
    let (verts, faces) = test_sphere_mesh(0.45, 12, 24);
    let n = verts.len() / 3;
    let mut r = rng::stream(32, "mask-depth", &[]);
    for _ in 0..5 {
        let mut tape = Tape::new();
        let v = tape.constant(verts.clone(), vec![n, 3]).unwrap();
        let attrs = tape.constant(vec![1.0; n], vec![n, 1]).unwrap();
        let cam = CameraPose::orbit(2.5, r.gen_range(-3.0..3.0), r.gen_range(-0.2..0.7), 0.6);
        let frame = rasterize(&mut tape, v, &faces, attrs, &cam, 48).unwrap();
        for (m, d) in frame.buffers.mask.iter().zip(&frame.buffers.depth) {
            assert_eq!(*m == 1.0, d.is_finite());
            assert!(*m == 0.0 || *m == 1.0);
        }
    }
}

#[test]
fn quarter_turn_preserves_symmetric_mask_area() {
    let res = 64usize;
    let (verts, faces) = test_sphere_mesh(0.5, 24, 48);
    let n = verts.len() / 3;
    let render_count = |yaw: f64| {
        let mut tape = Tape::new();
        let v = tape.constant(verts.clone(), vec![n, 3]).unwrap();
        let attrs = tape.constant(vec![1.0; n], vec![n, 1]).unwrap();
        let cam = CameraPose::orbit(2.5, yaw, 0.15, 0.6);
        let frame = rasterize(&mut tape, v, &faces, attrs, &cam, res).unwrap();
        frame.buffers.mask_pixel_count() as f64
    };
    let a = render_count(0.35);
    let b = render_count(0.35 + std::f64::consts::FRAC_PI_2);
    let rel = (a - b).abs() / a.max(b);
    assert!(rel < 0.02, "mask pixel counts {a} vs {b} differ by {:.2}%", rel * 100.0);
}

#[test]
fn attribute_image_gradient_matches_finite_differences() {
    // Mean attribute-image value as a function of mesh vertex positions,
    // with coverage frozen at the base configuration.
    let base = vec![
        -0.45, -0.4, 0.05, 0.5, -0.35, 0.0, 0.05, 0.55, -0.02, 0.6, 0.5, 0.12,
    ];
    let faces = vec![[0usize, 1, 2], [1, 3, 2]];
    let attr_values = vec![0.8, 0.1, 0.4, 0.9];
    let cam = CameraPose { position: [0.2, 0.1, 2.3], yaw: 0.05, pitch: 0.04, fov: 0.8 };
    let res = 32;

    // Coverage of the unperturbed scene.
    let coverage = {
        let mut tape = Tape::new();
        let v = tape.constant(base.clone(), vec![4, 3]).unwrap();
        let a = tape.constant(attr_values.clone(), vec![4, 1]).unwrap();
        rasterize(&mut tape, v, &faces, a, &cam, res).unwrap().coverage
    };
    assert!(!coverage.hits.is_empty());

    let eval = |vals: &[f64]| {
        let mut tape = Tape::new();
        let v = tape.leaf(vals.to_vec(), vec![4, 3]).unwrap();
        let a = tape.constant(attr_values.clone(), vec![4, 1]).unwrap();
        let img = rasterize_fixed(&mut tape, v, &faces, a, &cam, &coverage).unwrap();
        let m = tape.mean(img);
        tape.item(m)
    };
    let mut tape = Tape::new();
    let v = tape.leaf(base.clone(), vec![4, 3]).unwrap();
    let a = tape.constant(attr_values.clone(), vec![4, 1]).unwrap();
    let img = rasterize_fixed(&mut tape, v, &faces, a, &cam, &coverage).unwrap();
    let m = tape.mean(img);
    let grads = tape.backward(m).unwrap();
    fdiff::assert_gradient(eval, &base, grads.get(v).unwrap(), 1e-6, 1e-3, "raster positions");
}

#[test]
fn attribute_gradient_reaches_vertex_attributes() {
    let base_attrs = vec![0.8, 0.1, 0.4];
    let verts = vec![-0.5, -0.5, 0.0, 0.5, -0.5, 0.0, 0.0, 0.6, 0.0];
    let faces = vec![[0usize, 1, 2]];
    let cam = CameraPose { position: [0.0, 0.0, 2.0], yaw: 0.0, pitch: 0.0, fov: 0.9 };
    let eval = |vals: &[f64]| {
        let mut tape = Tape::new();
        let v = tape.constant(verts.clone(), vec![3, 3]).unwrap();
        let a = tape.leaf(vals.to_vec(), vec![3, 1]).unwrap();
        let frame = rasterize(&mut tape, v, &faces, a, &cam, 24).unwrap();
        let m = tape.mean(frame.image);
        tape.item(m)
    };
    let mut tape = Tape::new();
    let v = tape.constant(verts.clone(), vec![3, 3]).unwrap();
    let a = tape.leaf(base_attrs.clone(), vec![3, 1]).unwrap();
    let frame = rasterize(&mut tape, v, &faces, a, &cam, 24).unwrap();
    let m = tape.mean(frame.image);
    let grads = tape.backward(m).unwrap();
    fdiff::assert_gradient(eval, &base_attrs, grads.get(a).unwrap(), 1e-6, 1e-6, "raster attrs");
}

#[test]
fn projection_values_match_tape_projection() {
    let (verts, _) = test_sphere_mesh(0.5, 6, 12);
    let n = verts.len() / 3;
    let cam = CameraPose::orbit(2.5, 0.7, 0.2, 0.6);
    let mut tape = Tape::new();
    let v = tape.constant(verts.clone(), vec![n, 3]).unwrap();
    let (screen_t, w_t) = render::project_vertices(&mut tape, v, &cam, 64).unwrap();
    let (screen_v, w_v) = render::project_values(&verts, &cam, 64);
    for (a, b) in tape.data(screen_t).iter().zip(&screen_v) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in w_t.iter().zip(&w_v) {
        assert!((a - b).abs() < 1e-12);
    }
}
