use tetsculpt::params::LeafSet;
use tetsculpt::pipeline::*;
use tetsculpt::tensor::Tape;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.appearance_iters = 0;
    cfg.geometry_iters = 60;
    let mut state = RunState::new(cfg).unwrap();
    let mut sink = RunSink::memory();
    // init only
    {
        let mut c = state.config.clone();
        c.geometry_iters = 0;
        state.config = c;
        run_geometry_stage(&mut state, &mut sink).unwrap();
        state.stage = Stage::Geometry;
        let mut c = state.config.clone();
        c.geometry_iters = 60;
        state.config = c;
    }
    let stats = |state: &RunState| {
        let mut tape = Tape::new();
        let mut leafs = LeafSet::new();
        let (s, _) = state
            .geometry
            .evaluate(&mut tape, &state.params, &mut leafs, &state.grid.vertices, 0.05, false)
            .unwrap();
        let d = tape.data(s);
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let neg = d.iter().filter(|&&v| v < 0.0).count();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        (mean, neg, min)
    };
    let (m0, n0, min0) = stats(&state);
    eprintln!("after init: mean s {m0:+.4} neg verts {n0} min {min0:+.4}");
    for chunk in 0..12 {
        let upto = (chunk + 1) * 5;
        let mut c = state.config.clone();
        c.geometry_iters = upto;
        // keep the gate where the real 400-iteration run has it
        state.config = c;
        if state.stage != Stage::Geometry { break; }
        run_geometry_stage(&mut state, &mut sink).unwrap();
        state.stage = Stage::Geometry;
        state.iteration = upto;
        let (m, neg, mn) = stats(&state);
        let t = sink.trace.last().unwrap();
        eprintln!("iter {upto:3}: mean s {m:+.4} neg {neg:4} min {mn:+.4} mask {:6.1}", t.mask_pixels);
    }
}
