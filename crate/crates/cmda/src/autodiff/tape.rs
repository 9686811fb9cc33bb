use super::tensor::{AdError, AdResult, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a * x + c with f64 constants; only the scale matters in backward.
    Affine(Var, f64),
    MatMul(Var, Var),
    /// x[..., c] + b[c], bias broadcast over leading axes.
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Square(Var),
    Sqrt(Var),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// a[n, d] ⊗ b[n, c] → out[n, d, c].
    OuterLast(Var, Var),
    /// 3×3 same-padding convolution: x[h, w, cin] * k[3, 3, cin, cout].
    Conv3x3(Var, Var),
    /// Rows of x averaged into out rows per `map`; usize::MAX drops a row.
    ScatterMean(Var, Vec<usize>, usize),
    Reshape(Var),
    GradReverse(Var),
    /// Mean binary cross-entropy of logits against fixed targets.
    BceWithLogits(Var, Var),
    /// Elementwise smooth-L1 (Huber) of (pred − target) with threshold beta.
    SmoothL1(Var, Var, f64),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Record of one forward pass. Every op appends a node; [`Tape::backward`]
/// replays them in reverse and is allowed once per tape.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn contract(op: &'static str, msg: String) -> AdError {
    AdError::Contract { op, msg }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor that does not need gradients (data, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, false, Op::Leaf)
    }

    /// Register a trainable tensor; its gradient is available after backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the loss w.r.t. `v`, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, parents: &[Var], op: Op) -> AdResult<Var> {
        if !value.all_finite() {
            return Err(AdError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn binary_same_shape(&self, name: &'static str, a: Var, b: Var) -> AdResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(contract(
                name,
                format!("shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self.zip(a, b, |x, y| x + y);
        self.push("add", data, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.zip(a, b, |x, y| x - y);
        self.push("sub", data, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.zip(a, b, |x, y| x * y);
        self.push("mul", data, &[a, b], Op::Mul(a, b))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> AdResult<Var> {
        let value = self.map(x, |v| scale * v + shift);
        self.push("affine", value, &[x], Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> AdResult<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(contract("matmul", format!("cannot multiply {:?} by {:?}", sa, sb)));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// Broadcast-add a `[c]` bias over the last axis of `x[..., c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> AdResult<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.is_empty() || *sx.last().unwrap() != sb[0] {
            return Err(contract("add_bias", format!("bias {:?} does not fit {:?}", sb, sx)));
        }
        let c = sb[0];
        let bd = self.nodes[bias.0].value.data().to_vec();
        let value = {
            let xd = self.nodes[x.0].value.data();
            let mut out = Vec::with_capacity(xd.len());
            for (i, v) in xd.iter().enumerate() {
                out.push(v + bd[i % c]);
            }
            Tensor::new(sx.to_vec(), out)?
        };
        self.push("add_bias", value, &[x, bias], Op::AddBias(x, bias))
    }

    pub fn relu(&mut self, x: Var) -> AdResult<Var> {
        let value = self.map(x, |v| v.max(0.0));
        self.push("relu", value, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> AdResult<Var> {
        let value = self.map(x, sigmoid_scalar);
        self.push("sigmoid", value, &[x], Op::Sigmoid(x))
    }

    pub fn softmax_last(&mut self, x: Var) -> AdResult<Var> {
        let value = self.softmax_values(x, false)?;
        self.push("softmax_last", value, &[x], Op::SoftmaxLast(x))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> AdResult<Var> {
        let value = self.softmax_values(x, true)?;
        self.push("log_softmax_last", value, &[x], Op::LogSoftmaxLast(x))
    }

    fn softmax_values(&self, x: Var, log: bool) -> AdResult<Tensor> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(contract("softmax_last", "needs at least one axis".into()));
        }
        let c = *shape.last().unwrap();
        if c == 0 {
            return Err(contract("softmax_last", "last axis is empty".into()));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - m).exp();
            }
            if log {
                let lse = m + denom.ln();
                out.extend(row.iter().map(|&v| v - lse));
            } else {
                out.extend(row.iter().map(|&v| (v - m).exp() / denom));
            }
        }
        Tensor::new(shape, out)
    }

    pub fn log(&mut self, x: Var) -> AdResult<Var> {
        let value = self.map(x, f64::ln);
        self.push("log", value, &[x], Op::Log(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> AdResult<Var> {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> AdResult<Var> {
        let d = self.nodes[x.0].value.data();
        if d.is_empty() {
            return Err(contract("mean", "mean of empty tensor".into()));
        }
        let s: f64 = d.iter().sum();
        let value = Tensor::scalar(s / d.len() as f64);
        self.push("mean", value, &[x], Op::Mean(x))
    }

    /// Sum over the last axis: `[..., c]` → `[...]`.
    pub fn sum_last(&mut self, x: Var) -> AdResult<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(contract("sum_last", "needs at least one axis".into()));
        }
        let c = *shape.last().unwrap();
        if c == 0 {
            return Err(contract("sum_last", "last axis is empty".into()));
        }
        let xd = self.nodes[x.0].value.data();
        let out: Vec<f64> = xd.chunks_exact(c).map(|row| row.iter().sum()).collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        self.push("sum_last", value, &[x], Op::SumLast(x))
    }

    pub fn square(&mut self, x: Var) -> AdResult<Var> {
        let value = self.map(x, |v| v * v);
        self.push("square", value, &[x], Op::Square(x))
    }

    /// Elementwise square root; the gradient at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> AdResult<Var> {
        let value = self.map(x, f64::sqrt);
        self.push("sqrt", value, &[x], Op::Sqrt(x))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> AdResult<Var> {
        if parts.is_empty() {
            return Err(contract("concat", "no tensors given".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || sp[1..] != tail[..] {
                return Err(contract("concat", format!("incompatible part shape {:?}", sp)));
            }
            rows += sp[0];
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, parts, Op::Concat(parts.to_vec()))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> AdResult<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(contract(
                "slice_rows",
                format!("range {}..{} out of bounds for {:?}", start, end, shape),
            ));
        }
        let stride: usize = shape[1..].iter().product();
        let xd = self.nodes[x.0].value.data();
        let data = xd[start * stride..end * stride].to_vec();
        let mut out_shape = vec![end - start];
        out_shape.extend_from_slice(&shape[1..]);
        let value = Tensor::new(out_shape, data)?;
        self.push("slice_rows", value, &[x], Op::SliceRows(x, start))
    }

    /// Select rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> AdResult<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(contract("gather_rows", "needs at least one axis".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(contract(
                "gather_rows",
                format!("index {} out of bounds for {} rows", bad, shape[0]),
            ));
        }
        let stride: usize = shape[1..].iter().product();
        let xd = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&xd[i * stride..(i + 1) * stride]);
        }
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let value = Tensor::new(out_shape, data)?;
        self.push("gather_rows", value, &[x], Op::GatherRows(x, indices.to_vec()))
    }

    /// Pairwise outer product over the last axes: `a[n, d]`, `b[n, c]` → `[n, d, c]`.
    pub fn outer_last(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(contract("outer_last", format!("want [n,d] and [n,c], got {:?} {:?}", sa, sb)));
        }
        let (n, d, c) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(n * d * c);
        for i in 0..n {
            for p in 0..d {
                let av = da[i * d + p];
                for q in 0..c {
                    out.push(av * db[i * c + q]);
                }
            }
        }
        let value = Tensor::new(vec![n, d, c], out)?;
        self.push("outer_last", value, &[a, b], Op::OuterLast(a, b))
    }

    /// 3×3 convolution with zero padding: `x[h, w, cin]`, `k[3, 3, cin, cout]` → `[h, w, cout]`.
    pub fn conv3x3(&mut self, x: Var, kernel: Var) -> AdResult<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 4 || sk[0] != 3 || sk[1] != 3 || sk[2] != sx[2] {
            return Err(contract("conv3x3", format!("want x[h,w,cin], k[3,3,cin,cout], got {:?} {:?}", sx, sk)));
        }
        let (h, w, cin, cout) = (sx[0], sx[1], sx[2], sk[3]);
        let (xd, kd) = (self.nodes[x.0].value.data(), self.nodes[kernel.0].value.data());
        let mut out = vec![0.0; h * w * cout];
        for i in 0..h {
            for j in 0..w {
                for (di, dj, pix) in conv_taps(i, j, h, w) {
                    let xpix = &xd[pix * cin..(pix + 1) * cin];
                    let kbase = (di * 3 + dj) * cin * cout;
                    let opix = &mut out[(i * w + j) * cout..(i * w + j + 1) * cout];
                    for (ci, &xv) in xpix.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for co in 0..cout {
                            opix[co] += xv * krow[co];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![h, w, cout], out)?;
        self.push("conv3x3", value, &[x, kernel], Op::Conv3x3(x, kernel))
    }

    /// Average input rows into `out_rows` buckets. `map[i]` gives the output
    /// row for input row `i`; `usize::MAX` drops the row. Empty buckets stay 0.
    pub fn scatter_mean(&mut self, x: Var, map: &[usize], out_rows: usize) -> AdResult<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(contract("scatter_mean", format!("want [n, c], got {:?}", shape)));
        }
        if map.len() != shape[0] {
            return Err(contract(
                "scatter_mean",
                format!("map has {} entries for {} rows", map.len(), shape[0]),
            ));
        }
        if let Some(&bad) = map.iter().find(|&&m| m != usize::MAX && m >= out_rows) {
            return Err(contract(
                "scatter_mean",
                format!("target row {} out of bounds for {} buckets", bad, out_rows),
            ));
        }
        let c = shape[1];
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; out_rows * c];
        let mut counts = vec![0usize; out_rows];
        for (i, &m) in map.iter().enumerate() {
            if m == usize::MAX {
                continue;
            }
            counts[m] += 1;
            for q in 0..c {
                out[m * c + q] += xd[i * c + q];
            }
        }
        for (m, &cnt) in counts.iter().enumerate() {
            if cnt > 1 {
                let inv = 1.0 / cnt as f64;
                for v in &mut out[m * c..(m + 1) * c] {
                    *v *= inv;
                }
            }
        }
        let value = Tensor::new(vec![out_rows, c], out)?;
        self.push("scatter_mean", value, &[x], Op::ScatterMean(x, map.to_vec(), out_rows))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> AdResult<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    /// Identity in the forward pass; negates the gradient in the backward pass.
    pub fn grad_reverse(&mut self, x: Var) -> AdResult<Var> {
        let value = self.nodes[x.0].value.clone();
        self.push("grad_reverse", value, &[x], Op::GradReverse(x))
    }

    /// Numerically stable mean binary cross-entropy of `logits` against
    /// `targets` in [0, 1]. Returns a scalar.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> AdResult<Var> {
        self.binary_same_shape("bce_with_logits", logits, targets)?;
        let zd = self.nodes[logits.0].value.data();
        if zd.is_empty() {
            return Err(contract("bce_with_logits", "empty input".into()));
        }
        let td = self.nodes[targets.0].value.data();
        let mut total = 0.0;
        for (&z, &t) in zd.iter().zip(td) {
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / zd.len() as f64);
        self.push("bce_with_logits", value, &[logits, targets], Op::BceWithLogits(logits, targets))
    }

    /// Elementwise Huber penalty of `pred − target` with quadratic zone `|r| < beta`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> AdResult<Var> {
        self.binary_same_shape("smooth_l1", pred, target)?;
        if !(beta > 0.0) {
            return Err(contract("smooth_l1", format!("beta must be positive, got {}", beta)));
        }
        let value = self.zip(pred, target, |p, t| {
            let r = p - t;
            if r.abs() < beta {
                r * r / (2.0 * beta)
            } else {
                r.abs() - beta / 2.0
            }
        });
        self.push("smooth_l1", value, &[pred, target], Op::SmoothL1(pred, target, beta))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let node = &self.nodes[x.0];
        let data = node.value.data().iter().map(|&v| f(v)).collect();
        Tensor::new(node.value.shape().to_vec(), data).expect("same shape")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let data = na.value.data().iter().zip(nb.value.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(na.value.shape().to_vec(), data).expect("same shape")
    }

    /// Reverse pass from a scalar `loss`. Populates `grad` on every node that
    /// requires gradients and marks the tape consumed.
    pub fn backward(&mut self, loss: Var) -> AdResult<()> {
        if self.consumed {
            return Err(AdError::TapeConsumed);
        }
        if !self.shape(loss).is_empty() {
            return Err(AdError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            self.apply_vjp(i, &op, &g)?;
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(AdError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, update: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
        update(grad);
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        self.accumulate(v, |g| {
            for (gv, dv) in g.iter_mut().zip(delta) {
                *gv += dv;
            }
        });
    }

    fn apply_vjp(&mut self, out: usize, op: &Op, g: &[f64]) -> AdResult<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.nodes[b.0].value.data()).map(|(gv, bv)| gv * bv).collect();
                let db: Vec<f64> = g.iter().zip(self.nodes[a.0].value.data()).map(|(gv, av)| gv * av).collect();
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::Affine(x, scale) => {
                let dx: Vec<f64> = g.iter().map(|v| scale * v).collect();
                self.add_grad(*x, &dx);
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                let (da_needed, db_needed) =
                    (self.nodes[a.0].requires_grad, self.nodes[b.0].requires_grad);
                if da_needed {
                    // dA = g · Bᵀ
                    let bd = self.nodes[b.0].value.data();
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g[i * m + j] * bd[p * m + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.add_grad(*a, &da);
                }
                if db_needed {
                    // dB = Aᵀ · g
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[p * m + j] += av * g[i * m + j];
                            }
                        }
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::AddBias(x, bias) => {
                self.add_grad(*x, g);
                let c = self.nodes[bias.0].value.len();
                let mut db = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    db[i % c] += gv;
                }
                self.add_grad(*bias, &db);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::Sigmoid(x) => {
                let yd = self.nodes[out].value.data();
                let dx: Vec<f64> = g.iter().zip(yd).map(|(gv, &y)| gv * y * (1.0 - y)).collect();
                self.add_grad(*x, &dx);
            }
            Op::SoftmaxLast(x) => {
                let yd = self.nodes[out].value.data().to_vec();
                let c = *self.nodes[out].value.shape().last().unwrap();
                let mut dx = vec![0.0; yd.len()];
                for (row, (ys, gs)) in yd.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    let dot: f64 = ys.iter().zip(gs).map(|(y, gv)| y * gv).sum();
                    for q in 0..c {
                        dx[row * c + q] = ys[q] * (gs[q] - dot);
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::LogSoftmaxLast(x) => {
                let yd = self.nodes[out].value.data().to_vec();
                let c = *self.nodes[out].value.shape().last().unwrap();
                let mut dx = vec![0.0; yd.len()];
                for (row, (ys, gs)) in yd.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    let gsum: f64 = gs.iter().sum();
                    for q in 0..c {
                        dx[row * c + q] = gs[q] - ys[q].exp() * gsum;
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::Log(x) => {
                let dx: Vec<f64> =
                    g.iter().zip(self.nodes[x.0].value.data()).map(|(gv, &xv)| gv / xv).collect();
                self.add_grad(*x, &dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                let dx = vec![g[0]; n];
                self.add_grad(*x, &dx);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let dx = vec![g[0] / n as f64; n];
                self.add_grad(*x, &dx);
            }
            Op::SumLast(x) => {
                let c = *self.nodes[x.0].value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len() * c);
                for gv in g {
                    dx.extend(std::iter::repeat(*gv).take(c));
                }
                self.add_grad(*x, &dx);
            }
            Op::Square(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(gv, &xv)| 2.0 * gv * xv)
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::Sqrt(x) => {
                let yd = self.nodes[out].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(yd)
                    .map(|(gv, &y)| if y == 0.0 { 0.0 } else { gv / (2.0 * y) })
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts.clone().iter() {
                    let len = self.nodes[p.0].value.len();
                    let slice = g[offset..offset + len].to_vec();
                    self.add_grad(p, &slice);
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let shape = self.nodes[x.0].value.shape();
                let stride: usize = shape[1..].iter().product();
                let total = self.nodes[x.0].value.len();
                let mut dx = vec![0.0; total];
                dx[start * stride..start * stride + g.len()].copy_from_slice(g);
                self.add_grad(*x, &dx);
            }
            Op::GatherRows(x, indices) => {
                let shape = self.nodes[x.0].value.shape();
                let stride: usize = shape[1..].iter().product();
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                for (pos, &i) in indices.iter().enumerate() {
                    for q in 0..stride {
                        dx[i * stride + q] += g[pos * stride + q];
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::OuterLast(a, b) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let c = self.shape(*b)[1];
                let ad = self.nodes[a.0].value.data().to_vec();
                let bd = self.nodes[b.0].value.data().to_vec();
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * c];
                for i in 0..n {
                    for p in 0..d {
                        let gbase = (i * d + p) * c;
                        let mut acc = 0.0;
                        for q in 0..c {
                            acc += g[gbase + q] * bd[i * c + q];
                            db[i * c + q] += g[gbase + q] * ad[i * d + p];
                        }
                        da[i * d + p] = acc;
                    }
                }
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::Conv3x3(x, kernel) => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (h, w, cin) = (sx[0], sx[1], sx[2]);
                let cout = self.nodes[kernel.0].value.shape()[3];
                let xd = self.nodes[x.0].value.data().to_vec();
                let kd = self.nodes[kernel.0].value.data().to_vec();
                let mut dx = vec![0.0; h * w * cin];
                let mut dk = vec![0.0; 9 * cin * cout];
                for i in 0..h {
                    for j in 0..w {
                        let gpix = &g[(i * w + j) * cout..(i * w + j + 1) * cout];
                        for (di, dj, pix) in conv_taps(i, j, h, w) {
                            let kbase = (di * 3 + dj) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[pix * cin + ci];
                                let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += gpix[co] * krow[co];
                                    dk[kbase + ci * cout + co] += gpix[co] * xv;
                                }
                                dx[pix * cin + ci] += acc;
                            }
                        }
                    }
                }
                self.add_grad(*x, &dx);
                self.add_grad(*kernel, &dk);
            }
            Op::ScatterMean(x, map, out_rows) => {
                let c = self.nodes[x.0].value.shape()[1];
                let mut counts = vec![0usize; *out_rows];
                for &m in map {
                    if m != usize::MAX {
                        counts[m] += 1;
                    }
                }
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                for (i, &m) in map.iter().enumerate() {
                    if m == usize::MAX {
                        continue;
                    }
                    let inv = 1.0 / counts[m] as f64;
                    for q in 0..c {
                        dx[i * c + q] = g[m * c + q] * inv;
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::Reshape(x) => {
                self.add_grad(*x, g);
            }
            Op::GradReverse(x) => {
                let dx: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(*x, &dx);
            }
            Op::BceWithLogits(logits, targets) => {
                let zd = self.nodes[logits.0].value.data().to_vec();
                let td = self.nodes[targets.0].value.data().to_vec();
                let n = zd.len() as f64;
                if self.nodes[logits.0].requires_grad {
                    let dz: Vec<f64> = zd
                        .iter()
                        .zip(&td)
                        .map(|(&z, &t)| g[0] * (sigmoid_scalar(z) - t) / n)
                        .collect();
                    self.add_grad(*logits, &dz);
                }
                if self.nodes[targets.0].requires_grad {
                    let dt: Vec<f64> = zd.iter().map(|&z| g[0] * (-z) / n).collect();
                    self.add_grad(*targets, &dt);
                }
            }
            Op::SmoothL1(pred, target, beta) => {
                let pd = self.nodes[pred.0].value.data().to_vec();
                let td = self.nodes[target.0].value.data().to_vec();
                let dp: Vec<f64> = pd
                    .iter()
                    .zip(&td)
                    .zip(g)
                    .map(|((&p, &t), &gv)| gv * ((p - t) / beta).clamp(-1.0, 1.0))
                    .collect();
                if self.nodes[target.0].requires_grad {
                    let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                    self.add_grad(*target, &dt);
                }
                self.add_grad(*pred, &dp);
            }
        }
        Ok(())
    }
}

fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// In-bounds 3×3 neighbourhood taps for pixel (i, j): (kernel row, kernel col,
/// flat pixel index of the neighbour).
fn conv_taps(i: usize, j: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..3).flat_map(move |di| {
        (0..3).filter_map(move |dj| {
            let ni = i as isize + di as isize - 1;
            let nj = j as isize + dj as isize - 1;
            if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                None
            } else {
                Some((di, dj, ni as usize * w + nj as usize))
            }
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(t: &Tape, v: Var) -> f64 {
        t.value(v).item()
    }

    #[test]
    fn relu_matches_definition() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_slice(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_slice(&[0.0, 0.0]));
        let y = t.softmax_last(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_returns_vector() {
        let mut t = Tape::new();
        let eye = t.constant(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let v = t.constant(Tensor::new(vec![3, 1], vec![2.0, -3.0, 5.0]).unwrap());
        let y = t.matmul(eye, v).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, -3.0, 5.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[1.0, 2.0]));
        let sq = t.square(x).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[3.0, 1.0, -2.0, 8.0]));
        let loss = t.mean(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn grad_reverse_is_identity_forward() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[3.0, -1.0]));
        let y = t.grad_reverse(x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn grad_reverse_negates_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[5.0, 7.0]));
        let y = t.grad_reverse(x).unwrap();
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-1.0, -1.0]);
    }

    #[test]
    fn grad_reverse_of_square_flips_sign() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[2.0]));
        let y = t.grad_reverse(x).unwrap();
        let sq = t.square(y).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-4.0]);
    }

    #[test]
    fn double_grad_reverse_restores_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[2.0, -1.0]));
        let y1 = t.grad_reverse(x).unwrap();
        let y2 = t.grad_reverse(y1).unwrap();
        let sq = t.square(y2).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, -2.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[1.0]));
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(AdError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(AdError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_slice(&[1.0, 2.0]));
        let b = t.constant(Tensor::from_slice(&[1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(AdError::Contract { .. })));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_slice(&[0.0]));
        assert!(matches!(t.log(x), Err(AdError::NonFinite { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[2.0]));
        let c = t.constant(Tensor::from_slice(&[3.0]));
        let y = t.mul(x, c).unwrap();
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = x·x + 3x → d/dx = 2x + 3
        let mut t = Tape::new();
        let x = t.param(Tensor::from_slice(&[4.0]));
        let sq = t.mul(x, x).unwrap();
        let lin = t.scale(x, 3.0).unwrap();
        let both = t.add(sq, lin).unwrap();
        let loss = t.sum(both).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[11.0]);
    }

    #[test]
    fn bce_with_logits_matches_closed_form() {
        // z = 0, t = 1 → ln 2
        let mut t = Tape::new();
        let z = t.param(Tensor::from_slice(&[0.0]));
        let tgt = t.constant(Tensor::from_slice(&[1.0]));
        let loss = t.bce_with_logits(z, tgt).unwrap();
        assert!((scalar_loss(&t, loss) - std::f64::consts::LN_2).abs() < 1e-12);
        t.backward(loss).unwrap();
        assert!((t.grad(z).unwrap()[0] - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn bce_with_logits_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let z = t.param(Tensor::from_slice(&[500.0, -500.0]));
        let tgt = t.constant(Tensor::from_slice(&[1.0, 0.0]));
        let loss = t.bce_with_logits(z, tgt).unwrap();
        assert!(scalar_loss(&t, loss).abs() < 1e-12);
        t.backward(loss).unwrap();
    }

    #[test]
    fn smooth_l1_value_at_unit_residual() {
        // beta = 1/9 and r = 1 → 1 − beta/2
        let beta = 1.0 / 9.0;
        let mut t = Tape::new();
        let p = t.param(Tensor::from_slice(&[1.0]));
        let q = t.constant(Tensor::from_slice(&[0.0]));
        let h = t.smooth_l1(p, q, beta).unwrap();
        assert!((t.value(h).data()[0] - (1.0 - beta / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_is_quadratic_inside_beta() {
        let beta = 1.0;
        let mut t = Tape::new();
        let p = t.param(Tensor::from_slice(&[0.3]));
        let q = t.constant(Tensor::from_slice(&[0.0]));
        let h = t.smooth_l1(p, q, beta).unwrap();
        assert!((t.value(h).data()[0] - 0.045).abs() < 1e-12);
        let loss = t.sum(h).unwrap();
        t.backward(loss).unwrap();
        assert!((t.grad(p).unwrap()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn scatter_mean_averages_and_drops() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap());
        let map = [0, 0, usize::MAX];
        let y = t.scatter_mean(x, &map, 2).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 3.0, 0.0, 0.0]);
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_repeats_rows_and_accumulates_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.param(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let cat = t.concat(&[a, b]).unwrap();
        assert_eq!(t.shape(cat), &[3, 2]);
        let back = t.slice_rows(cat, 1, 3).unwrap();
        assert_eq!(t.value(back).data(), &[3.0, 4.0, 5.0, 6.0]);
        let loss = t.sum(back).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn outer_last_shapes_and_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let b = t.constant(Tensor::new(vec![1, 3], vec![1.0, 10.0, 100.0]).unwrap());
        let y = t.outer_last(a, b).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 3]);
        assert_eq!(t.value(y).data(), &[2.0, 20.0, 200.0, 3.0, 30.0, 300.0]);
    }

    #[test]
    fn conv3x3_identity_kernel_passes_through() {
        // Kernel with 1 at the centre tap reproduces the input away from edges
        // and at them (zero padding contributes nothing to the centre tap).
        let (h, w, c) = (4, 5, 2);
        let mut kernel = Tensor::zeros(&[3, 3, c, c]);
        for ch in 0..c {
            kernel.set(&[1, 1, ch, ch], 1.0);
        }
        let x_data: Vec<f64> = (0..h * w * c).map(|v| v as f64 * 0.1).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![h, w, c], x_data.clone()).unwrap());
        let k = t.constant(kernel);
        let y = t.conv3x3(x, k).unwrap();
        assert_eq!(t.value(y).data(), &x_data[..]);
    }

    #[test]
    fn conv3x3_sums_neighbourhood_with_ones_kernel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = t.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = t.conv3x3(x, k).unwrap();
        // Every output cell sees all four values (zero padding outside).
        assert_eq!(t.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_slice(&[1.0, -2.0, 0.5]));
        let p = t.softmax_last(x).unwrap();
        let lp = t.log_softmax_last(x).unwrap();
        for (pv, lv) in t.value(p).data().iter().zip(t.value(lp).data()) {
            assert!((pv.ln() - lv).abs() < 1e-12);
        }
        let sum: f64 = t.value(p).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}
