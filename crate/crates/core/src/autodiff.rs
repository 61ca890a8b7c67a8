//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: nodes are appended in creation order, so node ids
//! are already a topological order. Ops evaluate eagerly when all of their
//! inputs hold values; graphs built on top of [`Graph::placeholder`] inputs
//! stay unevaluated until [`Graph::evaluate`] supplies feeds. `evaluate` can
//! also be called again with new feeds to recompute every node, which is what
//! the finite-difference checks rely on.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, AxisTaps, Conv2dGeometry};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`]. Ids grow with creation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv2d,
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    DenseAffine,
    Softmax,
    Log,
    NegSqEuclidean,
    Sum,
    Mean,
    BilinearUpsample,
    ClampMin,
    ScalarMul,
    AddScalar,
    StopGradient,
    Reshape,
    SelectRows,
    GroupMean,
    Gather,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Input => "input",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::DenseAffine => "dense_affine",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::NegSqEuclidean => "neg_sq_euclidean",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::BilinearUpsample => "bilinear_upsample",
            OpKind::ClampMin => "clamp_min",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::StopGradient => "stop_gradient",
            OpKind::Reshape => "reshape",
            OpKind::SelectRows => "select_rows",
            OpKind::GroupMean => "group_mean",
            OpKind::Gather => "gather",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: Conv2dGeometry,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    DenseAffine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    Log(Var),
    NegSqEuclidean(Var, Var),
    Sum(Var),
    Mean(Var),
    BilinearUpsample {
        input: Var,
        rows: AxisTaps,
        cols: AxisTaps,
    },
    ClampMin(Var, f64),
    ScalarMul(Var, f64),
    AddScalar(Var, f64),
    StopGradient(Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    GroupMean(Var, Vec<Vec<usize>>),
    Gather(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::DenseAffine { .. } => OpKind::DenseAffine,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Log(_) => OpKind::Log,
            Op::NegSqEuclidean(..) => OpKind::NegSqEuclidean,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::BilinearUpsample { .. } => OpKind::BilinearUpsample,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::StopGradient(_) => OpKind::StopGradient,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SelectRows(..) => OpKind::SelectRows,
            Op::GroupMean(..) => OpKind::GroupMean,
            Op::Gather(..) => OpKind::Gather,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Input => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::NegSqEuclidean(a, b) => vec![a, b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::DenseAffine {
                input,
                weight,
                bias,
            } => vec![input, weight, bias],
            Op::Relu(a)
            | Op::GlobalAvgPool(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::ClampMin(a, _)
            | Op::ScalarMul(a, _)
            | Op::AddScalar(a, _)
            | Op::StopGradient(a)
            | Op::Reshape(a)
            | Op::MaxPool2d { input: a, .. }
            | Op::BilinearUpsample { input: a, .. } => vec![a],
            Op::SelectRows(a, _) | Op::GroupMean(a, _) | Op::Gather(a, _) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    evaluated: bool,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    // maxpool argmax (flat input indices), recorded by the forward pass
    argmax: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf holding `value`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Input,
            shape,
            value: value.into_data(),
            evaluated: true,
            requires_grad,
            grad: None,
            argmax: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf without a value; it must be fed through [`Graph::evaluate`].
    pub fn placeholder(&mut self, shape: &[usize], requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            shape: shape.to_vec(),
            value: Vec::new(),
            evaluated: false,
            requires_grad,
            grad: None,
            argmax: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_evaluated(&self, v: Var) -> bool {
        self.nodes[v.0].evaluated
    }

    /// Forward value of `v`. Empty when the node is unevaluated.
    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor> {
        let node = &self.nodes[v.0];
        if !node.evaluated {
            return Err(Error::NotEvaluated { node: v.0 });
        }
        Tensor::new(&node.shape, node.value.clone())
    }

    /// Accumulated gradient, if any backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn name(&self, v: Var) -> String {
        format!("{}#{}", self.kind(v), v.0)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> Var {
        let inputs = op.inputs();
        let requires_grad = !matches!(op, Op::StopGradient(_))
            && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let ready = inputs.iter().all(|i| self.nodes[i.0].evaluated);
        let (value, argmax) = if ready {
            self.compute(&op, &shape)
        } else {
            (Vec::new(), Vec::new())
        };
        self.nodes.push(Node {
            op,
            shape,
            value,
            evaluated: ready,
            requires_grad,
            grad: None,
            argmax,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{op}({})", self.name(b)), sa, sb));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("div", a, b)?;
        Ok(self.push(Op::Div(a, b), shape))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let shape = self.shape(a).to_vec();
        self.push(Op::ScalarMul(a, k), shape)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, k), shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            let expected = [sa.get(1).copied().unwrap_or(0), sb.get(1).copied().unwrap_or(0)];
            return Err(Error::shape(format!("matmul({})", self.name(b)), &expected, &sb));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]` plus a
    /// per-channel bias, zero padding on every side.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw, sb) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 4 {
            return Err(Error::shape(self.name(input), &[0, 0, 0, 0], &si));
        }
        if sw.len() != 4 || sw[1] != si[1] {
            return Err(Error::shape(
                format!("conv2d weight {}", self.name(weight)),
                &[sw.first().copied().unwrap_or(0), si[1], 0, 0],
                &sw,
            ));
        }
        if sb != [sw[0]] {
            return Err(Error::shape(format!("conv2d bias {}", self.name(bias)), &[sw[0]], &sb));
        }
        if stride == 0 || si[2] + 2 * padding < sw[2] || si[3] + 2 * padding < sw[3] {
            return Err(Error::Config(format!(
                "conv2d: kernel {}x{} stride {stride} padding {padding} does not fit input {}x{}",
                sw[2], sw[3], si[2], si[3]
            )));
        }
        let geometry = Conv2dGeometry {
            in_channels: si[1],
            height: si[2],
            width: si[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        let shape = vec![si[0], sw[0], geometry.out_height(), geometry.out_width()];
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            shape,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape)
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(Error::shape(
                format!("maxpool2d({})", self.name(input)),
                &[0, 0, kernel, kernel],
                &s,
            ));
        }
        let shape = vec![s[0], s[1], (s[2] - kernel) / stride + 1, (s[3] - kernel) / stride + 1];
        Ok(self.push(
            Op::MaxPool2d {
                input,
                kernel,
                stride,
            },
            shape,
        ))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(self.name(input), &[0, 0, 0, 0], &s));
        }
        Ok(self.push(Op::GlobalAvgPool(input), vec![s[0], s[1]]))
    }

    /// `x · Wᵀ + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense_affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if sx.len() != 2 {
            return Err(Error::shape(self.name(input), &[0, 0], &sx));
        }
        if sw.len() != 2 || sw[1] != sx[1] {
            return Err(Error::shape(
                format!("dense_affine weight {}", self.name(weight)),
                &[sw.first().copied().unwrap_or(0), sx[1]],
                &sw,
            ));
        }
        if sb != [sw[0]] {
            return Err(Error::shape(format!("dense_affine bias {}", self.name(bias)), &[sw[0]], &sb));
        }
        Ok(self.push(
            Op::DenseAffine {
                input,
                weight,
                bias,
            },
            vec![sx[0], sw[0]],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a), shape)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    /// `out[i, j] = -‖a_i - b_j‖²` for `a: [m, d]`, `b: [n, d]`.
    pub fn neg_sq_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(
                format!("neg_sq_euclidean({})", self.name(b)),
                &[sb.first().copied().unwrap_or(0), sa.get(1).copied().unwrap_or(0)],
                &sb,
            ));
        }
        Ok(self.push(Op::NegSqEuclidean(a, b), vec![sa[0], sb[0]]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a), vec![1])
    }

    /// Half-pixel bilinear resize of the two trailing axes.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(self.name(input), &[out_h, out_w], &s));
        }
        let n = s.len();
        let rows = kernels::bilinear_taps(s[n - 2], out_h);
        let cols = kernels::bilinear_taps(s[n - 1], out_w);
        let mut shape = s[..n - 2].to_vec();
        shape.extend([out_h, out_w]);
        Ok(self.push(Op::BilinearUpsample { input, rows, cols }, shape))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let shape = self.shape(a).to_vec();
        self.push(Op::ClampMin(a, floor), shape)
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        self.push(Op::StopGradient(a), shape)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::shape(format!("reshape({})", self.name(a)), shape, self.shape(a)));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Rows (leading-axis slices) of `a` at `indices`, in that order.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape(format!("select_rows({})", self.name(a)), &[bad + 1], &s[..1]));
        }
        if indices.is_empty() {
            return Err(Error::Config("select_rows: empty index list".into()));
        }
        let mut shape = s.clone();
        shape[0] = indices.len();
        Ok(self.push(Op::SelectRows(a, indices.to_vec()), shape))
    }

    /// Row `g` of the output is the mean of the rows of `a` listed in
    /// `groups[g]`, summed in the listed order.
    pub fn group_mean(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::EmptyClass(g));
            }
            if let Some(&bad) = members.iter().find(|&&i| i >= s[0]) {
                return Err(Error::shape(format!("group_mean({})", self.name(a)), &[bad + 1], &s[..1]));
            }
        }
        if groups.is_empty() {
            return Err(Error::Config("group_mean: no groups".into()));
        }
        let mut shape = s.clone();
        shape[0] = groups.len();
        Ok(self.push(Op::GroupMean(a, groups.to_vec()), shape))
    }

    /// Flat gather: `out[j] = a.flat[indices[j]]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = numel(self.shape(a));
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather({})", self.name(a)), &[bad + 1], &[n]));
        }
        if indices.is_empty() {
            return Err(Error::Config("gather: empty index list".into()));
        }
        Ok(self.push(Op::Gather(a, indices.to_vec()), vec![indices.len()]))
    }

    fn compute(&self, op: &Op, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let v = |x: &Var| self.nodes[x.0].value.as_slice();
        let s = |x: &Var| self.nodes[x.0].shape.as_slice();
        let values = match op {
            Op::Input => unreachable!("inputs are never recomputed"),
            Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
            Op::Sub(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x - y).collect(),
            Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x * y).collect(),
            Op::Div(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x / y).collect(),
            Op::ScalarMul(a, k) => v(a).iter().map(|x| x * k).collect(),
            Op::AddScalar(a, k) => v(a).iter().map(|x| x + k).collect(),
            Op::MatMul(a, b) => {
                let (m, k, n) = (s(a)[0], s(a)[1], s(b)[1]);
                let mut out = vec![0.0; m * n];
                kernels::gemm(m, k, n, v(a), false, v(b), false, &mut out, 0.0);
                out
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => kernels::conv2d_forward(v(input), v(weight), v(bias), s(input)[0], geometry),
            Op::Relu(a) => v(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            Op::MaxPool2d {
                input,
                kernel,
                stride,
            } => {
                let si = s(input);
                let (values, argmax) =
                    kernels::maxpool_forward(v(input), si[0] * si[1], si[2], si[3], *kernel, *stride);
                return (values, argmax);
            }
            Op::GlobalAvgPool(a) => {
                let si = s(a);
                let area = si[2] * si[3];
                v(a).chunks(area)
                    .map(|plane| plane.iter().sum::<f64>() / area as f64)
                    .collect()
            }
            Op::DenseAffine {
                input,
                weight,
                bias,
            } => {
                let (rows, fan_in, fan_out) = (s(input)[0], s(input)[1], s(weight)[0]);
                let mut out: Vec<f64> = (0..rows).flat_map(|_| v(bias).iter().copied()).collect();
                kernels::gemm(rows, fan_in, fan_out, v(input), false, v(weight), true, &mut out, 1.0);
                out
            }
            Op::Softmax(a) => {
                let width = *s(a).last().unwrap();
                let mut out = Vec::with_capacity(v(a).len());
                for row in v(a).chunks(width) {
                    out.extend(softmax_row(row));
                }
                out
            }
            Op::Log(a) => v(a).iter().map(|x| x.ln()).collect(),
            Op::NegSqEuclidean(a, b) => {
                let d = s(a)[1];
                let mut out = Vec::with_capacity(shape[0] * shape[1]);
                for ra in v(a).chunks(d) {
                    for rb in v(b).chunks(d) {
                        let dist: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
                        out.push(-dist);
                    }
                }
                out
            }
            Op::Sum(a) => vec![v(a).iter().sum()],
            Op::Mean(a) => vec![v(a).iter().sum::<f64>() / v(a).len() as f64],
            Op::BilinearUpsample { input, rows, cols } => {
                let si = s(input);
                let n = si.len();
                let planes = numel(&si[..n - 2]);
                kernels::bilinear_forward(v(input), planes, rows, cols, si[n - 1], si[n - 2])
            }
            Op::ClampMin(a, floor) => v(a).iter().map(|&x| if x > *floor { x } else { *floor }).collect(),
            Op::StopGradient(a) | Op::Reshape(a) => v(a).to_vec(),
            Op::SelectRows(a, idx) => {
                let row = numel(&s(a)[1..]);
                let mut out = Vec::with_capacity(idx.len() * row);
                for &i in idx {
                    out.extend_from_slice(&v(a)[i * row..(i + 1) * row]);
                }
                out
            }
            Op::GroupMean(a, groups) => {
                let row = numel(&s(a)[1..]);
                let mut out = Vec::with_capacity(groups.len() * row);
                for members in groups {
                    let mut acc = vec![0.0; row];
                    for &i in members {
                        add_into(&mut acc, &v(a)[i * row..(i + 1) * row]);
                    }
                    let n = members.len() as f64;
                    out.extend(acc.into_iter().map(|x| x / n));
                }
                out
            }
            Op::Gather(a, idx) => idx.iter().map(|&i| v(a)[i]).collect(),
        };
        (values, Vec::new())
    }

    /// Re-runs the forward pass in creation order. Each feed replaces the
    /// value of an input node; unfed inputs keep their current value.
    pub fn evaluate(&mut self, feeds: &[(Var, &Tensor)]) -> Result<()> {
        for (var, value) in feeds {
            let node = &self.nodes[var.0];
            if !matches!(node.op, Op::Input) {
                return Err(Error::Config(format!("node {} is not an input", self.name(*var))));
            }
            if node.shape != value.shape() {
                return Err(Error::shape(self.name(*var), &node.shape, value.shape()));
            }
        }
        for (var, value) in feeds {
            let node = &mut self.nodes[var.0];
            node.value.clear();
            node.value.extend_from_slice(value.data());
            node.evaluated = true;
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input) {
                if !self.nodes[i].evaluated {
                    return Err(Error::NotEvaluated { node: i });
                }
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, argmax) = self.compute(&op, &self.nodes[i].shape);
            let node = &mut self.nodes[i];
            node.value = value;
            node.argmax = argmax;
            node.evaluated = true;
        }
        Ok(())
    }

    fn check_scalar(&self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if numel(&node.shape) != 1 {
            return Err(Error::NotScalar {
                node: loss.0,
                shape: node.shape.clone(),
            });
        }
        if !node.evaluated {
            return Err(Error::NotEvaluated { node: loss.0 });
        }
        Ok(())
    }

    /// Accumulates `∂loss/∂v` into the grad slot of every node that requires
    /// gradients. Repeated calls add up until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_scalar(loss)?;
        let flags: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let grads = self.reverse(loss, 0, |id| flags[id]);
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                match node.grad.as_mut() {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradients of a scalar `output` with respect to `wrt`, regardless of
    /// their `requires_grad` flags, leaving grad slots untouched. Only nodes
    /// created at or after the earliest `wrt` node are visited, so this is
    /// cheap for late nodes such as the last conv activations.
    pub fn grad_of(&self, output: Var, wrt: &[Var]) -> Result<Vec<Vec<f64>>> {
        self.check_scalar(output)?;
        let lowest = wrt.iter().map(|v| v.0).min().unwrap_or(output.0);
        let grads = self.reverse(output, lowest, |id| id >= lowest);
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
            })
            .collect())
    }

    fn reverse(&self, output: Var, lowest: usize, want: impl Fn(usize) -> bool) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for id in (lowest..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads, &want);
            grads[id] = Some(g);
        }
        grads
    }

    fn slot<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        x: Var,
        want: &impl Fn(usize) -> bool,
    ) -> Option<&'g mut Vec<f64>> {
        if !want(x.0) {
            return None;
        }
        let len = self.nodes[x.0].value.len();
        Some(grads[x.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        want: &impl Fn(usize) -> bool,
    ) {
        let v = |x: Var| self.nodes[x.0].value.as_slice();
        let s = |x: Var| self.nodes[x.0].shape.as_slice();
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Input | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a, want) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b, want) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a, want) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b, want) {
                    gb.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (v(*a).to_vec(), v(*b).to_vec());
                if let Some(ga) = self.slot(grads, *a, want) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b, want) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (v(*a).to_vec(), v(*b).to_vec());
                if let Some(ga) = self.slot(grads, *a, want) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / vb[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b, want) {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                }
            }
            Op::ScalarMul(a, k) => {
                if let Some(ga) = self.slot(grads, *a, want) {
                    ga.iter_mut().zip(g).for_each(|(d, x)| *d += k * x);
                }
            }
            Op::AddScalar(a, _) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a, want) {
                    add_into(ga, g);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k, n) = (s(*a)[0], s(*a)[1], s(*b)[1]);
                let (va, vb) = (v(*a), v(*b));
                if let Some(ga) = self.slot(grads, *a, want) {
                    kernels::gemm(m, n, k, g, false, vb, true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b, want) {
                    kernels::gemm(k, m, n, va, true, g, false, gb, 1.0);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let batch = s(*input)[0];
                let (x, w) = (v(*input), v(*weight));
                // three distinct slots; borrowed one at a time
                let mut dx = self.slot(grads, *input, want).map(std::mem::take);
                let mut dw = self.slot(grads, *weight, want).map(std::mem::take);
                let mut db = self.slot(grads, *bias, want).map(std::mem::take);
                kernels::conv2d_backward(
                    x,
                    w,
                    g,
                    batch,
                    geometry,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (var, buf) in [(*input, dx), (*weight, dw), (*bias, db)] {
                    if let Some(buf) = buf {
                        grads[var.0] = Some(buf);
                    }
                }
            }
            Op::Relu(a) => {
                let va = v(*a);
                if let Some(ga) = self.slot(grads, *a, want) {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::MaxPool2d { input, .. } => {
                let argmax = &self.nodes[id].argmax;
                if let Some(gi) = self.slot(grads, *input, want) {
                    for (j, &src) in argmax.iter().enumerate() {
                        gi[src] += g[j];
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let si = s(*a);
                let area = si[2] * si[3];
                if let Some(ga) = self.slot(grads, *a, want) {
                    for (plane, &gv) in ga.chunks_mut(area).zip(g) {
                        let share = gv / area as f64;
                        plane.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::DenseAffine {
                input,
                weight,
                bias,
            } => {
                let (rows, fan_in, fan_out) = (s(*input)[0], s(*input)[1], s(*weight)[0]);
                let (x, w) = (v(*input), v(*weight));
                if let Some(gx) = self.slot(grads, *input, want) {
                    kernels::gemm(rows, fan_out, fan_in, g, false, w, false, gx, 1.0);
                }
                if let Some(gw) = self.slot(grads, *weight, want) {
                    kernels::gemm(fan_out, rows, fan_in, g, true, x, false, gw, 1.0);
                }
                if let Some(gb) = self.slot(grads, *bias, want) {
                    for row in g.chunks(fan_out) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Softmax(a) => {
                let width = *s(*a).last().unwrap();
                if let Some(ga) = self.slot(grads, *a, want) {
                    for ((dst, y), gy) in ga.chunks_mut(width).zip(out.chunks(width)).zip(g.chunks(width)) {
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for i in 0..width {
                            dst[i] += y[i] * (gy[i] - dot);
                        }
                    }
                }
            }
            Op::Log(a) => {
                let va = v(*a);
                if let Some(ga) = self.slot(grads, *a, want) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / va[i];
                    }
                }
            }
            Op::NegSqEuclidean(a, b) => {
                let d = s(*a)[1];
                let n = s(*b)[0];
                let (va, vb) = (v(*a).to_vec(), v(*b).to_vec());
                if let Some(ga) = self.slot(grads, *a, want) {
                    for (i, ra) in va.chunks(d).enumerate() {
                        for (j, rb) in vb.chunks(d).enumerate() {
                            let gij = g[i * n + j];
                            for t in 0..d {
                                ga[i * d + t] -= 2.0 * gij * (ra[t] - rb[t]);
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b, want) {
                    for (i, ra) in va.chunks(d).enumerate() {
                        for (j, rb) in vb.chunks(d).enumerate() {
                            let gij = g[i * n + j];
                            for t in 0..d {
                                gb[j * d + t] += 2.0 * gij * (ra[t] - rb[t]);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a, want) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a, want) {
                    let share = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::BilinearUpsample { input, rows, cols } => {
                let si = s(*input).to_vec();
                let n = si.len();
                let planes = numel(&si[..n - 2]);
                if let Some(gi) = self.slot(grads, *input, want) {
                    kernels::bilinear_backward(g, planes, rows, cols, si[n - 1], si[n - 2], gi);
                }
            }
            Op::ClampMin(a, floor) => {
                let va = v(*a);
                if let Some(ga) = self.slot(grads, *a, want) {
                    for i in 0..g.len() {
                        if va[i] > *floor {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::SelectRows(a, idx) => {
                let row = numel(&s(*a)[1..]);
                if let Some(ga) = self.slot(grads, *a, want) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * row..(i + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                }
            }
            Op::GroupMean(a, groups) => {
                let row = numel(&s(*a)[1..]);
                if let Some(ga) = self.slot(grads, *a, want) {
                    for (r, members) in groups.iter().enumerate() {
                        let n = members.len() as f64;
                        for &i in members {
                            for t in 0..row {
                                ga[i * row + t] += g[r * row + t] / n;
                            }
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                if let Some(ga) = self.slot(grads, *a, want) {
                    for (j, &i) in idx.iter().enumerate() {
                        ga[i] += g[j];
                    }
                }
            }
        }
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Central differences `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every
/// coordinate of `point`.
pub fn finite_difference_gradient<F>(f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_difference_at(f, point, step, &coords)
}

/// Central differences restricted to `coords`; the result is aligned with
/// `coords`.
pub fn finite_difference_at<F>(mut f: F, point: &[f64], step: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x)?;
        x[i] = orig - step;
        let minus = f(&x)?;
        x[i] = orig;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(Error::NonFinite { coordinate: i, value });
            }
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}
