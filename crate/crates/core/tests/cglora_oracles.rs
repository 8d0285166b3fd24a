//! Adapter algebra oracles: dense-route equivalence, rank bounds by SVD,
//! pose sensitivity, and gradient flow into the generators.

use nalgebra::DMatrix;
use rand::Rng;

use tetsculpt::cglora::{lora_forward, CameraEncoder, CgLoraLayer, CgLoraSet};
use tetsculpt::fdiff;
use tetsculpt::params::{LeafSet, ParamStore};
use tetsculpt::render::CameraPose;
use tetsculpt::rng;
use tetsculpt::tensor::Tape;

fn layer_with_live_b(seed: u64) -> (CgLoraLayer, ParamStore) {
    let layer = CgLoraLayer::new("lora.b0.q", 32, 4, 4, 64, 64).unwrap();
    let mut store = ParamStore::new();
    layer.init_params(&mut store, seed);
    let mut r = rng::stream(seed, "live-b", &[]);
    store
        .get_mut("lora.b0.q.b")
        .unwrap()
        .data
        .iter_mut()
        .for_each(|v| *v = r.gen_range(-0.3..0.3));
    (layer, store)
}

#[test]
fn adapter_forward_equals_dense_route_on_50_instances() {
    let mut r = rng::stream(70, "dense", &[]);
    for trial in 0..50 {
        let (layer, store) = layer_with_live_b(100 + trial);
        let mut tape = Tape::new();
        let mut leafs = LeafSet::new();
        let tf: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cf: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let t = tape.constant(tf, vec![1, 64]).unwrap();
        let c = tape.constant(cf, vec![1, 64]).unwrap();
        let ad = layer.generate(&mut tape, &store, &mut leafs, t, c, true).unwrap();

        let n = 5;
        let x_data: Vec<f64> = (0..n * 32).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w_data: Vec<f64> = (0..32 * 32).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(x_data.clone(), vec![n, 32]).unwrap();
        let w = tape.constant(w_data.clone(), vec![32, 32]).unwrap();
        let y = lora_forward(&mut tape, x, w, Some(&ad)).unwrap();

        // Dense route: y = x (W + [A_txt; A_cam] B).
        let a_txt = tape.data(ad.a_txt);
        let a_cam = tape.data(ad.a_cam);
        let b = tape.data(ad.b);
        let mut w_dense = w_data.clone();
        for i in 0..32 {
            for j in 0..32 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += a_txt[i * 2 + k] * b[k * 32 + j];
                    acc += a_cam[i * 2 + k] * b[(k + 2) * 32 + j];
                }
                w_dense[i * 32 + j] += acc;
            }
        }
        let got = tape.data(y);
        for i in 0..n {
            for j in 0..32 {
                let mut acc = 0.0;
                for k in 0..32 {
                    acc += x_data[i * 32 + k] * w_dense[k * 32 + j];
                }
                assert!(
                    (acc - got[i * 32 + j]).abs() < 1e-12,
                    "trial {trial}: dense mismatch at ({i},{j})"
                );
            }
        }
    }
}

#[test]
fn adapter_update_rank_bounded_by_svd() {
    let (layer, store) = layer_with_live_b(200);
    let mut tape = Tape::new();
    let mut leafs = LeafSet::new();
    let mut r = rng::stream(71, "rank", &[]);
    let tf: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
    let cf: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
    let t = tape.constant(tf, vec![1, 64]).unwrap();
    let c = tape.constant(cf, vec![1, 64]).unwrap();
    let ad = layer.generate(&mut tape, &store, &mut leafs, t, c, true).unwrap();

    // Update matrix [A_txt; A_cam] B is d x d with rank at most r = 4.
    let a_txt = tape.data(ad.a_txt);
    let a_cam = tape.data(ad.a_cam);
    let b = tape.data(ad.b);
    let mut update = vec![0.0; 32 * 32];
    for i in 0..32 {
        for j in 0..32 {
            for k in 0..2 {
                update[i * 32 + j] += a_txt[i * 2 + k] * b[k * 32 + j];
                update[i * 32 + j] += a_cam[i * 2 + k] * b[(k + 2) * 32 + j];
            }
        }
    }
    let m = DMatrix::from_row_slice(32, 32, &update);
    let svd = m.svd(false, false);
    let mut singular: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert!(singular[0] > 1e-6, "update should be nonzero");
    for (i, &s) in singular.iter().enumerate().skip(4) {
        assert!(s < 1e-10, "singular value {i} = {s:e} exceeds rank bound");
    }
}

#[test]
fn pose_changes_camera_half_but_not_text_half() {
    let layers = CgLoraSet::new(1, 16, 4, 4, 16, 16).unwrap();
    let mut store = ParamStore::new();
    layers.init_params(&mut store, 77);
    let enc = CameraEncoder::new(16);
    enc.init_params(&mut store, 77);

    let gen_for = |yaw: f64| {
        let mut tape = Tape::new();
        let mut leafs = LeafSet::new();
        let pose = CameraPose::orbit(2.5, yaw, 0.2, 0.6);
        let c = enc.encode(&mut tape, &store, &mut leafs, &pose, true).unwrap();
        let t = tape.constant(vec![0.25; 16], vec![1, 16]).unwrap();
        let ad = layers.generate(&mut tape, &store, &mut leafs, t, c, true).unwrap();
        (
            tape.data(ad.blocks[0].q.a_txt).to_vec(),
            tape.data(ad.blocks[0].q.a_cam).to_vec(),
        )
    };
    let (txt_a, cam_a) = gen_for(0.3);
    let (txt_b, cam_b) = gen_for(0.3 + std::f64::consts::FRAC_PI_2);
    assert_eq!(txt_a, txt_b, "text half is pose-independent bitwise");
    let max_diff = cam_a
        .iter()
        .zip(&cam_b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff > 1e-9, "camera half must react to the pose");
}

#[test]
fn zeroed_generators_make_adapters_pose_invariant() {
    let layers = CgLoraSet::new(1, 16, 4, 4, 16, 16).unwrap();
    let mut store = ParamStore::new();
    layers.init_params(&mut store, 78);
    layers.zero_generators(&mut store);
    let enc = CameraEncoder::new(16);
    enc.init_params(&mut store, 78);

    let forward = |yaw: f64| {
        let mut tape = Tape::new();
        let mut leafs = LeafSet::new();
        let pose = CameraPose::orbit(2.5, yaw, 0.1, 0.6);
        let c = enc.encode(&mut tape, &store, &mut leafs, &pose, true).unwrap();
        let t = tape.constant(vec![0.5; 16], vec![1, 16]).unwrap();
        let ad = layers.generate(&mut tape, &store, &mut leafs, t, c, true).unwrap();
        let x = tape.constant((0..3 * 16).map(|i| (i as f64) * 0.01).collect(), vec![3, 16]).unwrap();
        let w = tape.constant(vec![0.02; 16 * 16], vec![16, 16]).unwrap();
        let y = lora_forward(&mut tape, x, w, Some(&ad.blocks[0].q)).unwrap();
        tape.data(y).to_vec()
    };
    assert_eq!(forward(0.0), forward(2.0), "zero generators ignore the pose bitwise");
}

#[test]
fn gradients_reach_generators_and_encoder_but_not_frozen_weight() {
    let layers = CgLoraSet::new(1, 16, 4, 4, 16, 16).unwrap();
    let mut store = ParamStore::new();
    layers.init_params(&mut store, 79);
    // Live B so every generator participates.
    let mut r = rng::stream(79, "live", &[]);
    store
        .get_mut("lora.b0.q.b")
        .unwrap()
        .data
        .iter_mut()
        .for_each(|v| *v = r.gen_range(-0.3..0.3));
    let enc = CameraEncoder::new(16);
    enc.init_params(&mut store, 79);

    let mut tape = Tape::new();
    let mut leafs = LeafSet::new();
    let pose = CameraPose::orbit(2.5, 0.8, 0.3, 0.7);
    let c = enc.encode(&mut tape, &store, &mut leafs, &pose, true).unwrap();
    let t = tape.constant(vec![0.4; 16], vec![1, 16]).unwrap();
    let ad = layers.generate(&mut tape, &store, &mut leafs, t, c, true).unwrap();
    let x = tape.constant(vec![0.1; 2 * 16], vec![2, 16]).unwrap();
    let w = tape.constant(vec![0.05; 16 * 16], vec![16, 16]).unwrap();
    let y = lora_forward(&mut tape, x, w, Some(&ad.blocks[0].q)).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();

    let by_name = leafs.gradients(&tape, &grads);
    for name in ["lora.b0.q.u_txt", "lora.b0.q.v_txt", "lora.b0.q.u_cam", "lora.b0.q.v_cam", "lora.b0.q.b"] {
        let g = by_name.get(name).unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "{name} received no gradient");
    }
    for name in enc.param_names() {
        let g = by_name.get(&name).unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "{name} received no gradient");
    }
    assert!(grads.get(w).is_none(), "frozen projection must not accumulate gradient");
}

#[test]
fn camera_encoder_gradient_matches_finite_differences() {
    let enc = CameraEncoder::new(16);
    let mut store = ParamStore::new();
    enc.init_params(&mut store, 80);
    let pose = CameraPose::orbit(2.5, -1.2, 0.4, 0.55);
    let target = "cam.enc.w1";
    let theta0 = store.get(target).unwrap().data.clone();

    let eval = |vals: &[f64]| {
        let mut probe = store.clone();
        probe.get_mut(target).unwrap().data = vals.to_vec();
        let mut tape = Tape::new();
        let mut leafs = LeafSet::new();
        let c = enc.encode(&mut tape, &probe, &mut leafs, &pose, true).unwrap();
        let sq = tape.mul(c, c).unwrap();
        let s = tape.sum(sq);
        tape.item(s)
    };
    let mut tape = Tape::new();
    let mut leafs = LeafSet::new();
    let c = enc.encode(&mut tape, &store, &mut leafs, &pose, true).unwrap();
    let sq = tape.mul(c, c).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    let id = leafs.id(target).unwrap();
    fdiff::assert_gradient(eval, &theta0, grads.get(id).unwrap(), 1e-6, 1e-5, "camera encoder");
}
