//! Forward kernels. Each constructor validates shapes, computes the value
//! eagerly, and records the node for the backward pass.

use super::{numel, CustomOp, Node, Result, Tape, TensorError, TensorId};

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddScalar { a: TensorId },
    MulScalar { a: TensorId, k: f64 },
    Abs { a: TensorId },
    Exp { a: TensorId },
    Sqrt { a: TensorId },
    Sigmoid { a: TensorId },
    Silu { a: TensorId },
    Clamp { a: TensorId, lo: f64, hi: f64 },
    Sum { a: TensorId },
    Mean { a: TensorId },
    ReduceMin { a: TensorId },
    ReduceMax { a: TensorId },
    Reshape { a: TensorId },
    Transpose { a: TensorId },
    Concat { parts: Vec<TensorId>, axis: usize },
    Slice { a: TensorId, axis: usize, start: usize, len: usize },
    Softmax { a: TensorId, axis: usize },
    GatherRows { a: TensorId, rows: Vec<usize> },
    ScatterAddRows { a: TensorId, rows: Vec<usize> },
    AddBias { a: TensorId, bias: TensorId },
    AvgPool2d { a: TensorId, k: usize },
    Custom { inputs: Vec<TensorId>, rule: Box<dyn CustomOp> },
}

/// Lane decomposition for iterating along one axis of a row-major array.
pub(crate) struct AxisLanes {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

pub(crate) fn axis_lanes(shape: &[usize], axis: usize) -> AxisLanes {
    AxisLanes {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
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
    fn check_axis(&self, op: &'static str, id: TensorId, axis: usize) -> Result<()> {
        let shape = self.shape(id);
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op, axis, shape: shape.to_vec() });
        }
        Ok(())
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let requires_grad = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Node { shape: self.shape(a).to_vec(), data, requires_grad, op }))
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let requires_grad = self.requires_grad(a);
        self.push(Node { shape: self.shape(a).to_vec(), data, requires_grad, op })
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let requires_grad = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Node { shape: vec![m, n], data, requires_grad, op: Op::Matmul { a, b } }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn scalar_add(&mut self, a: TensorId, k: f64) -> TensorId {
        self.unary(a, |x| x + k, Op::AddScalar { a })
    }

    pub fn scalar_mul(&mut self, a: TensorId, k: f64) -> TensorId {
        self.unary(a, move |x| x * k, Op::MulScalar { a, k })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scalar_mul(a, -1.0)
    }

    /// |x|; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::abs, Op::Abs { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::sqrt, Op::Sqrt { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x * sigmoid(x), Op::Silu { a })
    }

    /// Clamp to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let requires_grad = self.requires_grad(a);
        self.push(Node { shape: vec![1], data: vec![s], requires_grad, op: Op::Sum { a } })
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        let requires_grad = self.requires_grad(a);
        self.push(Node { shape: vec![1], data: vec![s / n], requires_grad, op: Op::Mean { a } })
    }

    /// Global minimum, shape `[1]`. Gradient goes to the first attaining
    /// flat index (ties broken deterministically).
    pub fn reduce_min(&mut self, a: TensorId) -> TensorId {
        let m = self.data(a).iter().copied().fold(f64::INFINITY, f64::min);
        let requires_grad = self.requires_grad(a);
        self.push(Node { shape: vec![1], data: vec![m], requires_grad, op: Op::ReduceMin { a } })
    }

    /// Global maximum, shape `[1]`; same tie-break as [`Tape::reduce_min`].
    pub fn reduce_max(&mut self, a: TensorId) -> TensorId {
        let m = self.data(a).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let requires_grad = self.requires_grad(a);
        self.push(Node { shape: vec![1], data: vec![m], requires_grad, op: Op::ReduceMax { a } })
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.data(a).len() {
            return Err(TensorError::LengthMismatch { len: self.data(a).len(), shape });
        }
        let requires_grad = self.requires_grad(a);
        Ok(self.push(Node { shape, data: self.data(a).to_vec(), requires_grad, op: Op::Reshape { a } }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!("transpose expects rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let requires_grad = self.requires_grad(a);
        Ok(self.push(Node { shape: vec![c, r], data, requires_grad, op: Op::Transpose { a } }))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = base;
        shape[axis] = axis_total;

        let lanes = axis_lanes(&shape, axis);
        let mut data = vec![0.0; numel(&shape)];
        let mut offset = 0;
        for &p in parts {
            let plen = self.shape(p)[axis];
            let src = self.data(p);
            for o in 0..lanes.outer {
                for i in 0..plen {
                    let dst_base = (o * lanes.len + offset + i) * lanes.inner;
                    let src_base = (o * plen + i) * lanes.inner;
                    data[dst_base..dst_base + lanes.inner]
                        .copy_from_slice(&src[src_base..src_base + lanes.inner]);
                }
            }
            offset += plen;
        }
        let requires_grad = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Node {
            shape,
            data,
            requires_grad,
            op: Op::Concat { parts: parts.to_vec(), axis },
        }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        self.check_axis("slice", a, axis)?;
        let src_shape = self.shape(a).to_vec();
        if start + len > src_shape[axis] {
            return Err(TensorError::Invalid(format!(
                "slice [{start}, {}) exceeds axis {axis} of {src_shape:?}",
                start + len
            )));
        }
        let mut shape = src_shape.clone();
        shape[axis] = len;
        let lanes = axis_lanes(&src_shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; numel(&shape)];
        for o in 0..lanes.outer {
            for i in 0..len {
                let src_base = (o * lanes.len + start + i) * lanes.inner;
                let dst_base = (o * len + i) * lanes.inner;
                data[dst_base..dst_base + lanes.inner]
                    .copy_from_slice(&src[src_base..src_base + lanes.inner]);
            }
        }
        let requires_grad = self.requires_grad(a);
        Ok(self.push(Node { shape, data, requires_grad, op: Op::Slice { a, axis, start, len } }))
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let lanes = axis_lanes(&shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..lanes.outer {
            for inr in 0..lanes.inner {
                let idx = |i: usize| (o * lanes.len + i) * lanes.inner + inr;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..lanes.len {
                    mx = mx.max(src[idx(i)]);
                }
                let mut denom = 0.0;
                for i in 0..lanes.len {
                    let e = (src[idx(i)] - mx).exp();
                    data[idx(i)] = e;
                    denom += e;
                }
                for i in 0..lanes.len {
                    data[idx(i)] /= denom;
                }
            }
        }
        let requires_grad = self.requires_grad(a);
        Ok(self.push(Node { shape, data, requires_grad, op: Op::Softmax { a, axis } }))
    }

    /// Select rows of a 2-D tensor; rows may repeat.
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!("gather_rows expects rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid(format!("gather_rows index {bad} out of {r} rows")));
        }
        let src = self.data(a);
        let mut data = vec![0.0; rows.len() * c];
        for (i, &row) in rows.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&src[row * c..(row + 1) * c]);
        }
        let requires_grad = self.requires_grad(a);
        Ok(self.push(Node {
            shape: vec![rows.len(), c],
            data,
            requires_grad,
            op: Op::GatherRows { a, rows: rows.to_vec() },
        }))
    }

    /// Accumulate rows of a 2-D tensor into `out_rows` target rows.
    pub fn scatter_add_rows(&mut self, a: TensorId, rows: &[usize], out_rows: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != rows.len() {
            return Err(TensorError::Invalid(format!(
                "scatter_add_rows: {} indices for shape {s:?}",
                rows.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = rows.iter().find(|&&i| i >= out_rows) {
            return Err(TensorError::Invalid(format!(
                "scatter_add_rows index {bad} out of {out_rows} rows"
            )));
        }
        let src = self.data(a);
        let mut data = vec![0.0; out_rows * c];
        for (i, &row) in rows.iter().enumerate() {
            for j in 0..c {
                data[row * c + j] += src[i * c + j];
            }
        }
        let requires_grad = self.requires_grad(a);
        Ok(self.push(Node {
            shape: vec![out_rows, c],
            data,
            requires_grad,
            op: Op::ScatterAddRows { a, rows: rows.to_vec() },
        }))
    }

    /// Add a length-`d` bias to every row of an `[n, d]` tensor.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb != [sa[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, d) = (sa[0], sa[1]);
        let src = self.data(a);
        let b = self.data(bias);
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = src[i * d + j] + b[j];
            }
        }
        let requires_grad = self.requires_grad(a) || self.requires_grad(bias);
        Ok(self.push(Node { shape: vec![n, d], data, requires_grad, op: Op::AddBias { a, bias } }))
    }

    /// Average pooling of an `[h, w, c]` tensor with a `k x k` window.
    pub fn avg_pool2d(&mut self, a: TensorId, k: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 3 || k == 0 || s[0] % k != 0 || s[1] % k != 0 {
            return Err(TensorError::Invalid(format!("avg_pool2d: window {k} on shape {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / k, w / k);
        let src = self.data(a);
        let mut data = vec![0.0; oh * ow * c];
        let inv = 1.0 / (k * k) as f64;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += src[((oy * k + dy) * w + (ox * k + dx)) * c + ch];
                        }
                    }
                    data[(oy * ow + ox) * c + ch] = acc * inv;
                }
            }
        }
        let requires_grad = self.requires_grad(a);
        Ok(self.push(Node {
            shape: vec![oh, ow, c],
            data,
            requires_grad,
            op: Op::AvgPool2d { a, k },
        }))
    }

    /// Record an externally computed value with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: Vec<TensorId>,
        rule: Box<dyn CustomOp>,
        data: Vec<f64>,
        shape: Vec<usize>,
    ) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(TensorError::LengthMismatch { len: data.len(), shape });
        }
        let requires_grad = inputs.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Node { shape, data, requires_grad, op: Op::Custom { inputs, rule } }))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3]).unwrap();
        let m = tape.constant((1..=9).map(f64::from).collect(), vec![3, 3]).unwrap();
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(p), tape.data(m));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = tape.constant(vec![0.0, 1.0], vec![2, 1]).unwrap();
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(p), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 8], vec![4, 2]).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut tape = Tape::new();
        let u = tape.constant(vec![0.7; 5], vec![5]).unwrap();
        let s = tape.softmax(u, 0).unwrap();
        for &v in tape.data(s) {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let x = tape.constant(vec![0.0, 3.0f64.ln()], vec![2]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert!((tape.data(s)[0] - 0.25).abs() < 1e-15);
        assert!((tape.data(s)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![5.0, -3.0, 0.5, 2.0, 60.0, -60.0], vec![2, 3]).unwrap();
        let s = tape.softmax(x, 1).unwrap();
        let d = tape.data(s);
        for r in 0..2 {
            let sum: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(d[r * 3..(r + 1) * 3].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn abs_at_zero_and_negative() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![-3.5, 0.0], vec![2]).unwrap();
        let y = tape.abs(x);
        assert_eq!(tape.data(y), &[3.5, 0.0]);
    }

    #[test]
    fn concat_axis1_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = tape.constant(vec![1.0; 10], vec![2, 5]).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
        assert_eq!(&tape.data(c)[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&tape.data(c)[3..8], &[1.0; 5]);
    }

    #[test]
    fn slice_middle_axis() {
        let mut tape = Tape::new();
        let x = tape.constant((0..24).map(f64::from).collect(), vec![2, 3, 4]).unwrap();
        let y = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 4]);
        assert_eq!(&tape.data(y)[..4], &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn avg_pool_means_window() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 1.0, 0.0, 0.0], vec![2, 2, 1]).unwrap();
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.data(y), &[0.5]);
    }

    #[test]
    fn gather_then_scatter_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let g = tape.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(tape.data(g), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.scatter_add_rows(g, &[0, 0, 2], 3).unwrap();
        assert_eq!(tape.data(s), &[6.0, 8.0, 0.0, 0.0, 1.0, 2.0]);
    }
}
