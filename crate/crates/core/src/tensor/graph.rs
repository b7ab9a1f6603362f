use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var },
    Silu(Var),
    // node value holds the normalized output, rstd is per group
    GroupNorm { x: Var, groups: usize, rstd: Vec<f64> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order and `backward` simply walks it in reverse. A node only
/// keeps its operation (and thus participates in backward) when at least one
/// input requires a gradient; otherwise it is recorded as a constant.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf of a graph.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// dLoss/dLeaf, or `None` when the leaf did not influence the loss or
    /// does not require a gradient.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`] but returns zeros for non-participating leaves.
    pub fn get(&self, v: Var) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Registers a leaf. Its gradient is tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        value.set_requires_grad(grad);
        let op = if grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape(), data);
        }
        let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| self.shape_err(op, a, b))?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let n: usize = out.iter().product();
        let mut data = vec![0.0; n];
        let (da, db) = (ta.data(), tb.data());
        walk(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Tensor::new(&out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise minimum of two same-shaped tensors.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("minimum", a, b));
        }
        let v = self.binary("minimum", a, b, f64::min)?;
        Ok(self.push(v, Op::Minimum(a, b), &[a, b]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, 0.0);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Stride-1, zero-padded ("same") convolution of `x: [cin, h, w]` with a
    /// square odd kernel `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(self.shape_err("conv2d", x, w));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let hw = h * wd;
        let mut out = vec![0.0; cout * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if k == 1 {
            gemm(cout, cin, hw, wv, (cin, 1), xv, (hw, 1), &mut out, 0.0);
        } else {
            let cols = im2col(xv, cin, h, wd, k);
            gemm(cout, cin * k * k, hw, wv, (cin * k * k, 1), &cols, (hw, 1), &mut out, 0.0);
        }
        let v = Tensor::new(&[cout, h, wd], out)?;
        Ok(self.push(v, Op::Conv2d { x, w }, &[x, w]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z / (1.0 + (-z).exp()));
        self.push(v, Op::Silu(x), &[x])
    }

    /// Group normalization without affine parameters over `[c, ...]`,
    /// splitting the leading channel axis into `groups` groups.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || groups == 0 || shape[0] % groups != 0 {
            return invalid(format!("group_norm: {groups} groups do not divide shape {shape:?}"));
        }
        let data = self.value(x).data();
        let gsize = data.len() / groups;
        let mut out = vec![0.0; data.len()];
        let mut rstd = Vec::with_capacity(groups);
        for g in 0..groups {
            let chunk = &data[g * gsize..(g + 1) * gsize];
            let mean = chunk.iter().sum::<f64>() / gsize as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out[g * gsize..(g + 1) * gsize].iter_mut().zip(chunk) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::GroupNorm { x, groups, rstd }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return invalid("concat: no inputs"),
        };
        if axis >= first.len() {
            return invalid(format!("concat: axis {axis} out of range for {first:?}"));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(self.shape_err("concat", parts[0], p));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return invalid(format!("slice: {start}..{} on axis {axis} of {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|z| z + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|z| z * c);
        self.push(v, Op::MulScalar(x, c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Log(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * z);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|z| z.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi }, &[x])
    }

    /// 2x2 average pooling of `[c, h, w]` with even `h`, `w`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return invalid(format!("avg_pool2: expected [c, even h, even w], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let b = ch * h * w + 2 * i * w + 2 * j;
                    out[ch * ho * wo + i * wo + j] = 0.25 * (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]);
                }
            }
        }
        let v = Tensor::new(&[c, ho, wo], out)?;
        Ok(self.push(v, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour 2x upsampling of `[c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return invalid(format!("upsample2: expected [c, h, w], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[ch * ho * wo + i * wo + j] = src[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let v = Tensor::new(&[c, ho, wo], out)?;
        Ok(self.push(v, Op::Upsample2(x), &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaves: Vec<Option<Tensor>> = vec![None; n];
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { leaves, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out = node.value.shape();
                if wants(*a) {
                    reduce_into(acc(grads, *a, val(*a).numel()), g, out, val(*a).shape(), 1.0);
                }
                if wants(*b) {
                    reduce_into(acc(grads, *b, val(*b).numel()), g, out, val(*b).shape(), sign);
                }
            }
            Op::Mul(a, b) => {
                let out = node.value.shape();
                let (ta, tb) = (val(*a), val(*b));
                let sa = broadcast_strides(ta.shape(), out);
                let sb = broadcast_strides(tb.shape(), out);
                if wants(*a) {
                    let buf = acc(grads, *a, ta.numel());
                    let db = tb.data();
                    walk(out, &sa, &sb, |o, ia, ib| buf[ia] += g[o] * db[ib]);
                }
                if wants(*b) {
                    let buf = acc(grads, *b, tb.numel());
                    let da = ta.data();
                    walk(out, &sa, &sb, |o, ia, ib| buf[ib] += g[o] * da[ia]);
                }
            }
            Op::Minimum(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let buf = acc(grads, *a, da.len());
                    for i in 0..da.len() {
                        if da[i] <= db[i] {
                            buf[i] += g[i];
                        }
                    }
                }
                if wants(*b) {
                    let buf = acc(grads, *b, db.len());
                    for i in 0..db.len() {
                        if da[i] > db[i] {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    // dA = G * B^T
                    let buf = acc(grads, *a, m * k);
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), buf, 1.0);
                }
                if wants(*b) {
                    // dB = A^T * G
                    let buf = acc(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), buf, 1.0);
                }
            }
            Op::Conv2d { x, w } => {
                let (tx, tw) = (val(*x), val(*w));
                let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                let hw = h * wd;
                let ck = cin * k * k;
                if k == 1 {
                    if wants(*w) {
                        let buf = acc(grads, *w, cout * cin);
                        gemm(cout, hw, cin, g, (hw, 1), tx.data(), (1, hw), buf, 1.0);
                    }
                    if wants(*x) {
                        let buf = acc(grads, *x, cin * hw);
                        gemm(cin, cout, hw, tw.data(), (1, cin), g, (hw, 1), buf, 1.0);
                    }
                } else {
                    if wants(*w) {
                        let cols = im2col(tx.data(), cin, h, wd, k);
                        let buf = acc(grads, *w, cout * ck);
                        gemm(cout, hw, ck, g, (hw, 1), &cols, (1, hw), buf, 1.0);
                    }
                    if wants(*x) {
                        let mut dcols = vec![0.0; ck * hw];
                        gemm(ck, cout, hw, tw.data(), (1, ck), g, (hw, 1), &mut dcols, 0.0);
                        col2im_add(&dcols, cin, h, wd, k, acc(grads, *x, cin * hw));
                    }
                }
            }
            Op::Silu(x) => {
                let buf = acc(grads, *x, g.len());
                for (i, &z) in val(*x).data().iter().enumerate() {
                    let s = 1.0 / (1.0 + (-z).exp());
                    buf[i] += g[i] * s * (1.0 + z * (1.0 - s));
                }
            }
            Op::GroupNorm { x, groups, rstd } => {
                let xhat = node.value.data();
                let gsize = xhat.len() / groups;
                let buf = acc(grads, *x, xhat.len());
                for (grp, &r) in rstd.iter().enumerate() {
                    let range = grp * gsize..(grp + 1) * gsize;
                    let (gs, xs) = (&g[range.clone()], &xhat[range.clone()]);
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    let nf = gsize as f64;
                    for (j, o) in buf[range].iter_mut().enumerate() {
                        *o += r / nf * (nf * gs[j] - sum_g - xs[j] * sum_gx);
                    }
                }
            }
            Op::Reshape(x) => add_slice(acc(grads, *x, g.len()), g, 1.0),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    if wants(p) {
                        let buf = acc(grads, p, outer * chunk);
                        for o in 0..outer {
                            add_slice(&mut buf[o * chunk..(o + 1) * chunk], &g[o * row + offset..o * row + offset + chunk], 1.0);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = val(*x).shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let buf = acc(grads, *x, val(*x).numel());
                for o in 0..outer {
                    let base = (o * src_shape[*axis] + start) * inner;
                    add_slice(&mut buf[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner], 1.0);
                }
            }
            Op::Sum(x) => {
                let buf = acc(grads, *x, val(*x).numel());
                buf.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let buf = acc(grads, *x, n);
                let s = g[0] / n as f64;
                buf.iter_mut().for_each(|v| *v += s);
            }
            Op::AddScalar(x) => add_slice(acc(grads, *x, g.len()), g, 1.0),
            Op::MulScalar(x, c) => add_slice(acc(grads, *x, g.len()), g, *c),
            Op::Exp(x) => {
                let buf = acc(grads, *x, g.len());
                for (i, &y) in node.value.data().iter().enumerate() {
                    buf[i] += g[i] * y;
                }
            }
            Op::Log(x) => {
                let buf = acc(grads, *x, g.len());
                for (i, &z) in val(*x).data().iter().enumerate() {
                    buf[i] += g[i] / z;
                }
            }
            Op::Square(x) => {
                let buf = acc(grads, *x, g.len());
                for (i, &z) in val(*x).data().iter().enumerate() {
                    buf[i] += 2.0 * z * g[i];
                }
            }
            Op::Clamp { x, lo, hi } => {
                let buf = acc(grads, *x, g.len());
                for (i, &z) in val(*x).data().iter().enumerate() {
                    if z >= *lo && z <= *hi {
                        buf[i] += g[i];
                    }
                }
            }
            Op::AvgPool2(x) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / 2, w / 2);
                let buf = acc(grads, *x, c * h * w);
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let q = 0.25 * g[ch * ho * wo + i * wo + j];
                            let b = ch * h * w + 2 * i * w + 2 * j;
                            buf[b] += q;
                            buf[b + 1] += q;
                            buf[b + w] += q;
                            buf[b + w + 1] += q;
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (2 * h, 2 * w);
                let buf = acc(grads, *x, c * h * w);
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            buf[ch * h * w + (i / 2) * w + j / 2] += g[ch * ho * wo + i * wo + j];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_slice(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Sums `g` (shaped `out`) down to a broadcast operand of shape `to`.
fn reduce_into(dst: &mut [f64], g: &[f64], out: &[usize], to: &[usize], scale: f64) {
    if out == to {
        add_slice(dst, g, scale);
        return;
    }
    let s = broadcast_strides(to, out);
    walk(out, &s, &s, |o, i, _| dst[i] += scale * g[o]);
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed as broadcast to `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        let od = d + rank - shape.len();
        strides[od] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output index with the matching offsets into two operands.
fn walk(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// `c = a * b + beta * c` for row-major `c: [m, n]`; `a`/`b` strides are
/// `(row, col)` so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || (a.len() > (m - 1) * rsa + (k - 1) * csa && b.len() > (k - 1) * rsb + (n - 1) * csb));
    // SAFETY: bounds of every operand are asserted above and the slices do
    // not alias (c is borrowed mutably).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `[cin, h, w]` into `[cin * k * k, h * w]` patches for a same-padded conv.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &x[c * hw + si as usize * w..c * hw + (si as usize + 1) * w];
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj).min(w as isize) as usize;
                    for j in j0..j1 {
                        dst[i * w + j] = src[(j as isize + dj) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let base = c * hw + si as usize * w;
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj).min(w as isize) as usize;
                    for j in j0..j1 {
                        dx[base + (j as isize + dj) as usize] += src[i * w + j];
                    }
                }
            }
        }
    }
}
