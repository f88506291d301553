//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] evaluates operations eagerly and records enough of each one to
//! replay it backwards. Nodes created from constants (or depending only on
//! constants) are skipped by the backward pass.

use crate::error::{shape_err, Error, Result};
use crate::numerics::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanCenter(Var),
    Standardize {
        input: Var,
        eps: f64,
        centered: Tensor,
        std: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    UpsampleNearest(Var, usize),
    ChannelsToRows(Var),
    RepeatRows(Var, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    WeightedSqDist {
        input: Var,
        anchor: Tensor,
        weight: Tensor,
        coef: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the loss (or is a constant).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
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

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Adds a length-`M` bias to every row of an `N×M` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, m) = xv.dims2()?;
        let bv = self.value(bias);
        if bv.len() != m {
            return shape_err(format!("bias of {} for {m} columns", bv.len()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(m) {
            for (d, b) in row.iter_mut().zip(bv.data()) {
                *d += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        self.push(out, Op::Div(a, b), &[a, b], "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a], "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a], "relu")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a], "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a), &[a], "mean")
    }

    /// Column sums of an `N×M` input, as a length-`M` vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (_, m) = v.dims2()?;
        let mut sums = vec![0.0; m];
        for row in v.data().chunks_exact(m) {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        self.push(Tensor::from_parts(vec![m], sums), Op::SumRows(a), &[a], "sum_rows")
    }

    pub fn mean_center(&mut self, a: Var) -> Result<Var> {
        let out = tensor::mean_center(self.value(a))?;
        self.push(out, Op::MeanCenter(a), &[a], "mean_center")
    }

    pub fn standardize_columns(&mut self, a: Var, eps: f64) -> Result<Var> {
        let parts = tensor::standardize_parts(self.value(a), eps)?;
        let op = Op::Standardize {
            input: a,
            eps,
            centered: parts.centered,
            std: parts.std,
        };
        self.push(parts.out, op, &[a], "standardize_columns")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        self.push(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    /// 2-D convolution. `input` is `B×C×H×W`, `weight` is `O×C×K×K`, `bias`
    /// has length `O`; zero padding of `pad` pixels on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        let op = Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        };
        self.push(out, op, &[input, weight, bias], "conv2d")
    }

    /// Averages `B×C×H×W` over the spatial axes, giving `B×C`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (b, c, h, w) = v.dims4()?;
        let hw = h * w;
        let data = v
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(
            Tensor::from_parts(vec![b, c], data),
            Op::GlobalAvgPool(a),
            &[a],
            "global_avg_pool",
        )
    }

    /// Nearest-neighbour upsampling of `B×C×H×W` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let v = self.value(a);
        let (b, c, h, w) = v.dims4()?;
        if factor == 0 {
            return shape_err("upsample factor 0");
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(b * c * oh * ow);
        for plane in v.data().chunks_exact(h * w) {
            for y in 0..oh {
                let src = &plane[(y / factor) * w..(y / factor + 1) * w];
                for x in 0..ow {
                    data.push(src[x / factor]);
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c, oh, ow], data);
        self.push(out, Op::UpsampleNearest(a, factor), &[a], "upsample_nearest")
    }

    /// Rearranges `B×C×H×W` into `(B·H·W)×C`, one row per pixel.
    pub fn channels_to_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (b, c, h, w) = v.dims4()?;
        let hw = h * w;
        let mut data = vec![0.0; b * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &v.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (p, &x) in plane.iter().enumerate() {
                    data[(bi * hw + p) * c + ci] = x;
                }
            }
        }
        let out = Tensor::from_parts(vec![b * hw, c], data);
        self.push(out, Op::ChannelsToRows(a), &[a], "channels_to_rows")
    }

    /// Repeats each row of an `N×F` input `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let v = self.value(a);
        let (n, f) = v.dims2()?;
        let mut data = Vec::with_capacity(n * times * f);
        for row in v.data().chunks_exact(f) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::from_parts(vec![n * times, f], data);
        self.push(out, Op::RepeatRows(a, times), &[a], "repeat_rows")
    }

    /// Concatenates `N×A_i` inputs along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let n = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pw) = self.value(p).dims2()?;
            if pn != n {
                return shape_err(format!("concat rows {pn} vs {n}"));
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &pw) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * pw..(r + 1) * pw]);
            }
        }
        let out = Tensor::from_parts(vec![n, total], data);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Row-wise softmax of an `N×K` input.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (_, k) = v.dims2()?;
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(k) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(out, Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    /// `Σ (coef/2)·weight_i·(x_i − anchor_i)²` with gradient
    /// `coef·weight_i·(x_i − anchor_i)`.
    pub fn weighted_sq_dist(&mut self, x: Var, anchor: &Tensor, weight: &Tensor, coef: f64) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_same_shape(anchor)?;
        xv.expect_same_shape(weight)?;
        let half = coef / 2.0;
        let mut total = 0.0;
        for ((&t, &a), &w) in xv.data().iter().zip(anchor.data()).zip(weight.data()) {
            let d = t - a;
            total += half * w * d * d;
        }
        let op = Op::WeightedSqDist {
            input: x,
            anchor: anchor.clone(),
            weight: weight.clone(),
            coef,
        };
        self.push(Tensor::scalar(total), op, &[x], "weighted_sq_dist")
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return shape_err(format!("loss must be scalar, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        for (g, n) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if n.needs_grad {
                    g.check_finite("backward pass")?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].needs_grad {
                    let bt = tensor::transpose(bv)?;
                    self.accumulate(grads, *a, tensor::matmul(g, &bt)?);
                }
                if self.nodes[b.0].needs_grad {
                    let at = tensor::transpose(av)?;
                    self.accumulate(grads, *b, tensor::matmul(&at, g)?);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let m = self.value(*b).len();
                let mut gb = vec![0.0; m];
                for row in g.data().chunks_exact(m) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                let shape = self.value(*b).shape().to_vec();
                self.accumulate(grads, *b, Tensor::from_parts(shape, gb));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, g.zip_map(bv, |gi, bi| gi * bi)?);
                self.accumulate(grads, *b, g.zip_map(av, |gi, ai| gi * ai)?);
            }
            Op::Div(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, g.zip_map(bv, |gi, bi| gi / bi)?);
                let gb = g.zip_map(av, |gi, ai| gi * ai)?.zip_map(bv, |ga, bi| -ga / (bi * bi))?;
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?),
            Op::Relu(a) => {
                let gx = g.zip_map(self.value(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                self.accumulate(grads, *a, gx);
            }
            Op::Square(a) => {
                let gx = g.zip_map(self.value(*a), |gi, xi| 2.0 * xi * gi)?;
                self.accumulate(grads, *a, gx);
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gs));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gs = g.data()[0] / av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(av.shape(), gs));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let (n, _) = av.dims2()?;
                let data = g.data().repeat(n);
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::MeanCenter(a) => {
                self.accumulate(grads, *a, tensor::mean_center(g)?);
            }
            Op::Standardize {
                input,
                eps,
                centered,
                std,
            } => {
                let (b, d) = centered.dims2()?;
                // d/dc of c_j/(s+eps) with s = sqrt(mean(c²)) including the
                // dependence of s on every entry of the column.
                let mut dot = vec![0.0; d];
                for (grow, crow) in g.data().chunks_exact(d).zip(centered.data().chunks_exact(d)) {
                    for j in 0..d {
                        dot[j] += grow[j] * crow[j];
                    }
                }
                let mut gc = vec![0.0; b * d];
                for ((out, grow), crow) in gc
                    .chunks_exact_mut(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(centered.data().chunks_exact(d))
                {
                    for j in 0..d {
                        let denom = std[j] + eps;
                        let mut v = grow[j] / denom;
                        if std[j] > 0.0 {
                            let gs = -dot[j] / (denom * denom);
                            v += gs * crow[j] / (b as f64 * std[j]);
                        }
                        out[j] = v;
                    }
                }
                let gc = Tensor::from_parts(vec![b, d], gc);
                self.accumulate(grads, *input, tensor::mean_center(&gc)?);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, tensor::transpose(g)?),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(&shape)?);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (gi, gw, gb) = conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *pad,
                    self.nodes[input.0].needs_grad,
                )?;
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi);
                }
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::GlobalAvgPool(a) => {
                let av = self.value(*a);
                let (_, _, h, w) = av.dims4()?;
                let hw = h * w;
                let mut data = Vec::with_capacity(av.len());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::UpsampleNearest(a, factor) => {
                let av = self.value(*a);
                let (_, _, h, w) = av.dims4()?;
                let (oh, ow) = (h * factor, w * factor);
                let mut data = vec![0.0; av.len()];
                for (dst, src) in data.chunks_exact_mut(h * w).zip(g.data().chunks_exact(oh * ow)) {
                    for y in 0..oh {
                        for x in 0..ow {
                            dst[(y / factor) * w + x / factor] += src[y * ow + x];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::ChannelsToRows(a) => {
                let av = self.value(*a);
                let (b, c, h, w) = av.dims4()?;
                let hw = h * w;
                let mut data = vec![0.0; av.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            data[(bi * c + ci) * hw + p] = g.data()[(bi * hw + p) * c + ci];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::RepeatRows(a, times) => {
                let av = self.value(*a);
                let (_, f) = av.dims2()?;
                let mut data = vec![0.0; av.len()];
                for (r, grow) in g.data().chunks_exact(f).enumerate() {
                    let dst = &mut data[(r / times) * f..(r / times + 1) * f];
                    for (d, v) in dst.iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::ConcatCols(parts) => {
                let (n, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let pw = self.value(p).dims2()?.1;
                    if self.nodes[p.0].needs_grad {
                        let mut data = Vec::with_capacity(n * pw);
                        for r in 0..n {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + pw]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![n, pw], data));
                    }
                    offset += pw;
                }
            }
            Op::SoftmaxRows(a) => {
                let (_, k) = y.dims2()?;
                let mut data = Vec::with_capacity(y.len());
                for (yrow, grow) in y.data().chunks_exact(k).zip(g.data().chunks_exact(k)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    data.extend(yrow.iter().zip(grow).map(|(yi, gi)| yi * (gi - dot)));
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::WeightedSqDist {
                input,
                anchor,
                weight,
                coef,
            } => {
                let gs = g.data()[0];
                let xv = self.value(*input);
                let data = xv
                    .data()
                    .iter()
                    .zip(anchor.data())
                    .zip(weight.data())
                    .map(|((&t, &a), &w)| {
                        let gi = coef * w * (t - a);
                        if gs == 1.0 {
                            gi
                        } else {
                            gs * gi
                        }
                    })
                    .collect();
                self.accumulate(grads, *input, Tensor::from_parts(xv.shape().to_vec(), data));
            }
        }
        Ok(())
    }
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || size + 2 * pad < k {
        return shape_err(format!(
            "convolution of size {size} with kernel {k}, stride {stride}, pad {pad}"
        ));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != kw || bias.len() != o {
        return shape_err(format!(
            "conv2d input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        ));
    }
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(w, kw, stride, pad)?;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            let dst = &mut out[(bi * o + oc) * oh * ow..(bi * o + oc + 1) * oh * ow];
            dst.iter_mut().for_each(|v| *v = bias.data()[oc]);
            for ic in 0..c {
                let plane = &x[(bi * c + ic) * h * w..(bi * c + ic + 1) * h * w];
                let kern = &wt[(oc * c + ic) * kh * kw..(oc * c + ic + 1) * kh * kw];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += kern[ky * kw + kx] * plane[iy as usize * w + ix as usize];
                            }
                        }
                        dst[oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, o, oh, ow], out))
}

type ConvGrads = (Option<Tensor>, Tensor, Tensor);

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<ConvGrads> {
    let (b, c, h, w) = input.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    let (_, _, oh, ow) = g.dims4()?;
    let x = input.data();
    let wt = weight.data();
    let gd = g.data();
    let mut gx = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; o];
    for bi in 0..b {
        for oc in 0..o {
            let gplane = &gd[(bi * o + oc) * oh * ow..(bi * o + oc + 1) * oh * ow];
            gb[oc] += gplane.iter().sum::<f64>();
            for ic in 0..c {
                let base = (bi * c + ic) * h * w;
                let kbase = (oc * c + ic) * k * k;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gplane[oy * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = base + iy as usize * w + ix as usize;
                                gw[kbase + ky * k + kx] += gv * x[xi];
                                if want_input {
                                    gx[xi] += gv * wt[kbase + ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = want_input.then(|| Tensor::from_parts(input.shape().to_vec(), gx));
    Ok((
        gx,
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![o], gb),
    ))
}
