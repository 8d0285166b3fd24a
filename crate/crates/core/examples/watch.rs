use tetsculpt::pipeline::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sds_w: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let ama_w: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let full_path: bool = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(true);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let mut cfg = RunConfig::default();
    cfg.appearance_iters = 0;
    cfg.sds_weight = sds_w;
    cfg.ama_weight = ama_w;
    cfg.ama_full_path = full_path;
    cfg.lr_fields = lr;
    eprintln!("sds_weight={sds_w} ama_weight={ama_w} full_path={full_path} lr={lr}");
    let mut state = RunState::new(cfg).unwrap();
    let mut sink = RunSink::memory();
    run_geometry_stage(&mut state, &mut sink).unwrap();
    for t in sink.trace.iter().step_by(25) {
        eprintln!("iter {:3}: mask px {:6.1} | sds {:+.3e} ama {:.3} g_geo {:.2e} g_lora {:.2e}",
            t.iteration, t.mask_pixels, t.report.sds, t.report.ama, t.report.grad_norm_geo, t.report.grad_norm_lora);
    }
    let (v, f, _) = state.extract_mesh_values().unwrap();
    eprintln!("final mesh: {} verts {} faces", v.len()/3, f.len());
}
