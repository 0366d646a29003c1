//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value. Nodes are appended after their inputs, so reverse index order is a
//! valid reverse topological order and `backward` is a single sweep.

use std::collections::BTreeMap;

use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels::{col2im_add, gemm, im2col};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Relu(usize),
    Sigmoid(usize),
    Linear {
        weight: usize,
        input: usize,
        bias: Option<usize>,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    AddScalar(usize),
    ScaleBy {
        input: usize,
        factor: usize,
    },
    Sum(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Recip(usize),
    EuclideanDistance(usize, usize),
    LogSumExp(usize),
    Stack(Vec<usize>),
    Select {
        input: usize,
        index: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// All-zero gradients shaped like `params`.
    pub fn zeros_like(params: &ParamSet) -> Self {
        let grads = params
            .iter()
            .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds zero entries for every parameter in `params` that is missing here.
    pub fn fill_missing(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.grads
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(t.shape()));
        }
    }

    /// Euclidean norm over every entry of every gradient.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for t in self.grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// Elementwise accumulation of `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(dst) => {
                    if dst.shape() != g.shape() {
                        return Err(shape_err(
                            "accumulate",
                            format!("{name}: {:?} vs {:?}", dst.shape(), g.shape()),
                        ));
                    }
                    for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub(crate) fn insert(&mut self, name: String, t: Tensor) {
        self.grads.insert(name, t);
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn scalar_of(op: &'static str, t: &Tensor) -> Result<f64> {
    t.item()
        .ok_or_else(|| shape_err(op, format!("expected a scalar, got {:?}", t.shape())))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; receives no gradient entry.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Named trainable leaf. Gradients are reported under `name`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let v = self.push(t.clone().with_requires_grad(true), Op::Leaf);
        self.params.push((name.to_string(), v.0));
        Ok(v)
    }

    /// Binds `name` from a parameter set.
    pub fn param_from(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let t = params
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        self.param(name, t)
    }

    /// 2D convolution of a `C_in×H×W` input with `C_out×C_in×k×k` kernels,
    /// zero padding `pad` on every side.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?} must be C×H×W, kernels {ws:?} must be C_out×C_in×k×k"),
            ));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, kc, k) = (ws[0], ws[1], ws[2]);
        if kc != c_in || ws[3] != k {
            return Err(shape_err(
                "conv2d",
                format!("kernels {ws:?} incompatible with input channels {c_in}"),
            ));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?} too small for kernel {k} (pad {pad}, stride {stride})"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [c_out] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {bs:?}, expected [{c_out}]"),
                ));
            }
        }
        let cols = im2col(x.data(), c_in, h, wd, k, stride, pad, oh, ow);
        let n = oh * ow;
        let mut out = vec![0.0; c_out * n];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (c, row) in out.chunks_mut(n).enumerate() {
                row.fill(bv[c]);
            }
        }
        gemm(
            c_out,
            c_in * k * k,
            n,
            w.data(),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
        let value = Tensor::new(&[c_out, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Sigmoid(x.0))
    }

    /// `weight · input + bias` with `weight` of shape `out×in` and a length-`in` vector.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let ws = w.shape();
        if ws.len() != 2 || x.shape().len() != 1 || ws[1] != x.len() {
            return Err(shape_err(
                "linear",
                format!("weight {ws:?} and input {:?}", x.shape()),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let mut out = match bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [m] {
                    return Err(shape_err(
                        "linear",
                        format!("bias {:?}, expected [{m}]", bt.shape()),
                    ));
                }
                bt.data().to_vec()
            }
            None => vec![0.0; m],
        };
        let xd = x.data();
        for (o, row) in out.iter_mut().zip(w.data().chunks(n)) {
            *o += row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::Linear {
                weight: weight.0,
                input: input.0,
                bias: bias.map(|b| b.0),
            },
        ))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(shape_err(
                "max_pool",
                format!("input {s:?} must be C×H×W with H,W ≥ 2"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let d = t.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let cand = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input: x.0, argmax }))
    }

    /// Mean over the spatial axes of a `C×H×W` tensor.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || s[1] * s[2] == 0 {
            return Err(shape_err(
                "global_avg_pool",
                format!("input {s:?} must be C×H×W"),
            ));
        }
        let n = s[1] * s[2];
        let out = t
            .data()
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        Ok(self.push(Tensor::vector(out), Op::GlobalAvgPool(x.0)))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in xs {
            let t = self.value(*v);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(shape_err(
                    "concat",
                    format!("trailing dims {:?} vs {tail:?}", t.shape()),
                ));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat(xs.iter().map(|v| v.0).collect())))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let n = t.len();
        let value = t.reshape(&[n]).expect("flatten keeps length");
        self.push(value, Op::Reshape(x.0))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("elementwise_mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::ScalarMul(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::AddScalar(x.0))
    }

    /// Multiplies every element of `x` by the one-element tensor `factor`.
    pub fn scale_by(&mut self, x: Var, factor: Var) -> Result<Var> {
        let s = scalar_of("scale_by", self.value(factor))?;
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.push(
            value,
            Op::ScaleBy {
                input: x.0,
                factor: factor.0,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scalar_mul(s, 1.0 / n as f64)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Ln(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * v).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Square(x.0))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| 1.0 / v).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Recip(x.0))
    }

    /// `sqrt(Σ (a − b)²)` as a one-element tensor. The gradient at `a = b` is taken as 0.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("euclidean_distance", ta, tb)?;
        let d = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        Ok(self.push(Tensor::scalar(d), Op::EuclideanDistance(a.0, b.0)))
    }

    /// Numerically stable `log Σ exp(x_i)` over all elements.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("log_sum_exp", "empty input"));
        }
        let v = log_sum_exp(t.data());
        Ok(self.push(Tensor::scalar(v), Op::LogSumExp(x.0)))
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(xs.len());
        for v in xs {
            data.push(scalar_of("stack", self.value(*v))?);
        }
        if data.is_empty() {
            return Err(shape_err("stack", "no inputs"));
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::Stack(xs.iter().map(|v| v.0).collect()),
        ))
    }

    /// Element `index` of the flattened tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t.data().get(index).ok_or_else(|| {
            shape_err(
                "select",
                format!("index {index} out of range for {:?}", t.shape()),
            )
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Select { input: x.0, index }))
    }

    /// Reverse sweep from a scalar loss. Returns gradients of every bound parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(t.shape().to_vec()));
        }
        self.backward_from(loss, &[1.0])
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_from(&mut self, root: Var, seed: &[f64]) -> Result<Gradients> {
        if self.backward_done {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        if seed.len() != self.value(root).len() {
            return Err(shape_err(
                "backward",
                format!(
                    "seed length {} vs root {:?}",
                    seed.len(),
                    self.value(root).shape()
                ),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.to_vec());

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (name, idx) in &self.params {
            let shape = self.nodes[*idx].value.shape();
            let t = match grads[*idx].take() {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
                cols,
            } => {
                let xs = self.nodes[*input].value.shape();
                let ws = self.nodes[*kernel].value.shape();
                let (c_in, h, w) = (xs[0], xs[1], xs[2]);
                let (c_out, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let (oh, ow) = (os[1], os[2]);
                let n = oh * ow;
                let ckk = c_in * k * k;

                let mut dw = vec![0.0; c_out * ckk];
                gemm(c_out, n, ckk, g, false, cols, true, &mut dw, 0.0);
                accumulate(grads, *kernel, &dw);

                let mut dcols = vec![0.0; ckk * n];
                gemm(ckk, c_out, n, val(*kernel), true, g, false, &mut dcols, 0.0);
                let mut dx = vec![0.0; c_in * h * w];
                col2im_add(&dcols, &mut dx, c_in, h, w, k, *stride, *pad, oh, ow);
                accumulate(grads, *input, &dx);

                if let Some(b) = bias {
                    let db: Vec<f64> = g.chunks(n).map(|c| c.iter().sum()).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Relu(x) => {
                let d: Vec<f64> = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(v, gi)| if *v > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, gi)| gi * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Linear {
                weight,
                input,
                bias,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let n = x.len();
                let mut dw = vec![0.0; w.len()];
                for (row, gi) in dw.chunks_mut(n).zip(g) {
                    for (d, xv) in row.iter_mut().zip(x) {
                        *d = gi * xv;
                    }
                }
                accumulate(grads, *weight, &dw);
                let mut dx = vec![0.0; n];
                for (row, gi) in w.chunks(n).zip(g) {
                    for (d, wv) in dx.iter_mut().zip(row) {
                        *d += gi * wv;
                    }
                }
                accumulate(grads, *input, &dx);
                if let Some(b) = bias {
                    accumulate(grads, *b, g);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.nodes[*input].value.len()];
                for (src, gi) in argmax.iter().zip(g) {
                    dx[*src] += gi;
                }
                accumulate(grads, *input, &dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[*x].value.shape();
                let n = s[1] * s[2];
                let mut dx = Vec::with_capacity(s[0] * n);
                for gi in g {
                    dx.extend(std::iter::repeat_n(gi / n as f64, n));
                }
                accumulate(grads, *x, &dx);
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = self.nodes[*x].value.len();
                    accumulate(grads, *x, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(val(*b)).map(|(gi, y)| gi * y).collect();
                let db: Vec<f64> = g.iter().zip(val(*a)).map(|(gi, x)| gi * x).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::ScalarMul(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *x, &d);
            }
            Op::AddScalar(x) => accumulate(grads, *x, g),
            Op::ScaleBy { input, factor } => {
                let s = val(*factor)[0];
                let dx: Vec<f64> = g.iter().map(|v| v * s).collect();
                let ds: f64 = g.iter().zip(val(*input)).map(|(gi, x)| gi * x).sum();
                accumulate(grads, *input, &dx);
                accumulate(grads, *factor, &[ds]);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.nodes[*x].value.len()];
                accumulate(grads, *x, &d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gi, y)| gi * y)
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Ln(x) => {
                let d: Vec<f64> = g.iter().zip(val(*x)).map(|(gi, v)| gi / v).collect();
                accumulate(grads, *x, &d);
            }
            Op::Square(x) => {
                let d: Vec<f64> = g.iter().zip(val(*x)).map(|(gi, v)| 2.0 * gi * v).collect();
                accumulate(grads, *x, &d);
            }
            Op::Recip(x) => {
                let d: Vec<f64> = g.iter().zip(val(*x)).map(|(gi, v)| -gi / (v * v)).collect();
                accumulate(grads, *x, &d);
            }
            Op::EuclideanDistance(a, b) => {
                let d = node.value.data()[0];
                let (va, vb) = (val(*a), val(*b));
                let da: Vec<f64> = if d > 0.0 {
                    va.iter().zip(vb).map(|(x, y)| g[0] * (x - y) / d).collect()
                } else {
                    vec![0.0; va.len()]
                };
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::LogSumExp(x) => {
                let y = node.value.data()[0];
                let d: Vec<f64> = val(*x).iter().map(|v| g[0] * (v - y).exp()).collect();
                accumulate(grads, *x, &d);
            }
            Op::Stack(xs) => {
                for (x, gi) in xs.iter().zip(g) {
                    accumulate(grads, *x, &[*gi]);
                }
            }
            Op::Select { input, index } => {
                let mut d = vec![0.0; self.nodes[*input].value.len()];
                d[*index] = g[0];
                accumulate(grads, *input, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contrib: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
