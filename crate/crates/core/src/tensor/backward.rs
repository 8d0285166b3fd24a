//! Reverse sweep. Tape order is already topological, so one backwards walk
//! over the node list visits every node exactly once.

use super::ops::{axis_lanes, matmul_raw, Op};
use super::{Result, Tape, TensorError, TensorId, TensorView};

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, or zeros of the node's size if it never received one.
    pub fn get_or_zeros(&self, id: TensorId, len: usize) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Gradients of a scalar `root` w.r.t. every node that requires grad.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        if self.data(root).len() != 1 {
            return Err(TensorError::NonScalarRoot { shape: self.shape(root).to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes().len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.requires_grad(TensorId(id)) {
                continue;
            }
            let upstream = grads[id].take().expect("checked above");
            self.propagate(TensorId(id), &upstream, &mut grads);
            // Outputs keep their gradient for inspection; leaves are what
            // callers read, intermediate buffers stay available for tests.
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: TensorId, upstream: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = self.node(id);
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    // da = g . b^T
                    let bt = transpose_raw(self.data(*b), k, n);
                    let da = matmul_raw(upstream, &bt, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    // db = a^T . g
                    let at = transpose_raw(self.data(*a), m, k);
                    let db = matmul_raw(&at, upstream, k, m, n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate_if(grads, *a, upstream.iter().copied());
                self.accumulate_if(grads, *b, upstream.iter().copied());
            }
            Op::Sub { a, b } => {
                self.accumulate_if(grads, *a, upstream.iter().copied());
                self.accumulate_if(grads, *b, upstream.iter().map(|&g| -g));
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate_if(grads, *a, upstream.iter().zip(db).map(|(&g, &y)| g * y));
                self.accumulate_if(grads, *b, upstream.iter().zip(da).map(|(&g, &x)| g * x));
            }
            Op::Div { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate_if(grads, *a, upstream.iter().zip(db).map(|(&g, &y)| g / y));
                self.accumulate_if(
                    grads,
                    *b,
                    upstream
                        .iter()
                        .zip(da.iter().zip(db))
                        .map(|(&g, (&x, &y))| -g * x / (y * y)),
                );
            }
            Op::AddScalar { a } => {
                self.accumulate_if(grads, *a, upstream.iter().copied());
            }
            Op::MulScalar { a, k } => {
                self.accumulate_if(grads, *a, upstream.iter().map(|&g| g * k));
            }
            Op::Abs { a } => {
                let src = self.data(*a);
                self.accumulate_if(
                    grads,
                    *a,
                    upstream.iter().zip(src).map(|(&g, &x)| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Exp { a } => {
                let out = &node.data;
                self.accumulate_if(grads, *a, upstream.iter().zip(out).map(|(&g, &y)| g * y));
            }
            Op::Sqrt { a } => {
                let out = &node.data;
                self.accumulate_if(grads, *a, upstream.iter().zip(out).map(|(&g, &y)| g * 0.5 / y));
            }
            Op::Sigmoid { a } => {
                let out = &node.data;
                self.accumulate_if(
                    grads,
                    *a,
                    upstream.iter().zip(out).map(|(&g, &y)| g * y * (1.0 - y)),
                );
            }
            Op::Silu { a } => {
                let src = self.data(*a);
                self.accumulate_if(
                    grads,
                    *a,
                    upstream.iter().zip(src).map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    }),
                );
            }
            Op::Clamp { a, lo, hi } => {
                let src = self.data(*a);
                self.accumulate_if(
                    grads,
                    *a,
                    upstream
                        .iter()
                        .zip(src)
                        .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 }),
                );
            }
            Op::Sum { a } => {
                let g = upstream[0];
                let n = self.data(*a).len();
                self.accumulate_if(grads, *a, std::iter::repeat(g).take(n));
            }
            Op::Mean { a } => {
                let n = self.data(*a).len();
                let g = upstream[0] / n as f64;
                self.accumulate_if(grads, *a, std::iter::repeat(g).take(n));
            }
            Op::ReduceMin { a } | Op::ReduceMax { a } => {
                if !self.requires_grad(*a) {
                    return;
                }
                let src = self.data(*a);
                let target = node.data[0];
                let hit = src
                    .iter()
                    .position(|&x| x == target)
                    .expect("reduced value comes from the input");
                let mut g = vec![0.0; src.len()];
                g[hit] = upstream[0];
                accumulate(grads, *a, &g);
            }
            Op::Reshape { a } => {
                self.accumulate_if(grads, *a, upstream.iter().copied());
            }
            Op::Transpose { a } => {
                if !self.requires_grad(*a) {
                    return;
                }
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                // upstream has shape [c, r]
                let g = transpose_raw(upstream, c, r);
                accumulate(grads, *a, &g);
            }
            Op::Concat { parts, axis } => {
                let lanes = axis_lanes(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut g = vec![0.0; self.data(p).len()];
                        for o in 0..lanes.outer {
                            for i in 0..plen {
                                let src_base = (o * lanes.len + offset + i) * lanes.inner;
                                let dst_base = (o * plen + i) * lanes.inner;
                                g[dst_base..dst_base + lanes.inner]
                                    .copy_from_slice(&upstream[src_base..src_base + lanes.inner]);
                            }
                        }
                        accumulate(grads, p, &g);
                    }
                    offset += plen;
                }
            }
            Op::Slice { a, axis, start, len } => {
                if !self.requires_grad(*a) {
                    return;
                }
                let src_shape = self.shape(*a);
                let lanes = axis_lanes(src_shape, *axis);
                let mut g = vec![0.0; self.data(*a).len()];
                for o in 0..lanes.outer {
                    for i in 0..*len {
                        let dst_base = (o * lanes.len + start + i) * lanes.inner;
                        let src_base = (o * len + i) * lanes.inner;
                        g[dst_base..dst_base + lanes.inner]
                            .copy_from_slice(&upstream[src_base..src_base + lanes.inner]);
                    }
                }
                accumulate(grads, *a, &g);
            }
            Op::Softmax { a, axis } => {
                if !self.requires_grad(*a) {
                    return;
                }
                let out = &node.data;
                let lanes = axis_lanes(&node.shape, *axis);
                let mut g = vec![0.0; out.len()];
                for o in 0..lanes.outer {
                    for inr in 0..lanes.inner {
                        let idx = |i: usize| (o * lanes.len + i) * lanes.inner + inr;
                        let mut dot = 0.0;
                        for i in 0..lanes.len {
                            dot += upstream[idx(i)] * out[idx(i)];
                        }
                        for i in 0..lanes.len {
                            let j = idx(i);
                            g[j] = out[j] * (upstream[j] - dot);
                        }
                    }
                }
                accumulate(grads, *a, &g);
            }
            Op::GatherRows { a, rows } => {
                if !self.requires_grad(*a) {
                    return;
                }
                let c = self.shape(*a)[1];
                let mut g = vec![0.0; self.data(*a).len()];
                for (i, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        g[row * c + j] += upstream[i * c + j];
                    }
                }
                accumulate(grads, *a, &g);
            }
            Op::ScatterAddRows { a, rows } => {
                if !self.requires_grad(*a) {
                    return;
                }
                let c = self.shape(*a)[1];
                let mut g = vec![0.0; self.data(*a).len()];
                for (i, &row) in rows.iter().enumerate() {
                    g[i * c..(i + 1) * c].copy_from_slice(&upstream[row * c..(row + 1) * c]);
                }
                accumulate(grads, *a, &g);
            }
            Op::AddBias { a, bias } => {
                self.accumulate_if(grads, *a, upstream.iter().copied());
                if self.requires_grad(*bias) {
                    let d = self.shape(*bias)[0];
                    let n = self.shape(*a)[0];
                    let mut g = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            g[j] += upstream[i * d + j];
                        }
                    }
                    accumulate(grads, *bias, &g);
                }
            }
            Op::AvgPool2d { a, k } => {
                if !self.requires_grad(*a) {
                    return;
                }
                let s = self.shape(*a);
                let (h, w, c) = (s[0], s[1], s[2]);
                let ow = w / k;
                let inv = 1.0 / (k * k) as f64;
                let mut g = vec![0.0; h * w * c];
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            g[(y * w + x) * c + ch] =
                                upstream[((y / k) * ow + (x / k)) * c + ch] * inv;
                        }
                    }
                }
                accumulate(grads, *a, &g);
            }
            Op::Custom { inputs, rule } => {
                let views: Vec<TensorView<'_>> = inputs
                    .iter()
                    .map(|&p| TensorView { shape: self.shape(p), data: self.data(p) })
                    .collect();
                let out_view = TensorView { shape: &node.shape, data: &node.data };
                let input_grads = rule.backward(upstream, &views, out_view);
                debug_assert_eq!(input_grads.len(), inputs.len(), "{}", rule.name());
                for (&p, g) in inputs.iter().zip(input_grads) {
                    if let Some(g) = g {
                        if self.requires_grad(p) {
                            debug_assert_eq!(g.len(), self.data(p).len(), "{}", rule.name());
                            accumulate(grads, p, &g);
                        }
                    }
                }
            }
        }
    }

    fn accumulate_if(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: TensorId,
        values: impl Iterator<Item = f64>,
    ) {
        if !self.requires_grad(id) {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.data(id).len()]);
        for (dst, v) in slot.iter_mut().zip(values) {
            *dst += v;
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: TensorId, values: &[f64]) {
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; values.len()]);
    for (dst, &v) in slot.iter_mut().zip(values) {
        *dst += v;
    }
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
