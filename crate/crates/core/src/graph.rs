//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its value and
//! the indices of its inputs, so the node list is already in topological
//! order. [`Graph::backward`] walks it once in reverse. Parameters enter the
//! tape as borrowed leaves, so building a graph never copies model weights.
//!
//! The graph is rebuilt for every forward pass and may only be
//! differentiated once.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{numel, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Descriptor of a primitive operation, for callers that dispatch
/// dynamically through [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Tanh,
    Square,
    Reshape(Vec<usize>),
    Conv2d { padding: usize },
    MaxPool2d,
    LogSoftmax,
    Sum,
    Mean,
    SumRows,
    Gather(Vec<usize>),
    MaxOther(Vec<usize>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Square(usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        padding: usize,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Gather {
        input: usize,
        index: Vec<usize>,
    },
    MaxOther {
        input: usize,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
}

/// Reverse-mode tape. `'a` is the lifetime of borrowed leaf data
/// (typically model parameters).
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
}

/// `c = a * b + beta * c` for row-major `a: [m, k]`, `b: [k, n]`, where either
/// operand may be supplied transposed through its strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices above have exactly the extents described by
    // (m, k, n) and the strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    fn cols_width(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let width = self.cols_width();
        for c in 0..self.in_c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for oy in 0..self.oh {
                        let iy = (oy + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy < 0
                                || ix < 0
                                || iy as usize >= self.h
                                || ix as usize >= self.w
                            {
                                0.0
                            } else {
                                img[(c * self.h + iy as usize) * self.w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let width = self.cols_width();
        for c in 0..self.in_c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * width..(row + 1) * width];
                    for oy in 0..self.oh {
                        let iy = (oy + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            img[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += libm::exp(v - max);
        }
        let lse = max + libm::log(sum);
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Cow<'a, [f64]>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; no copy of `t` is made.
    pub fn leaf(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            requires_grad,
        )
    }

    /// Owned leaf.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, Cow::Owned(t.into_data()), requires_grad)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Accumulated gradient of the last `backward` for `v`, or `None` when
    /// `v` does not require gradients or was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        if !n.requires_grad || !self.backward_done {
            return None;
        }
        let g = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; n.value.len()]);
        Some(Tensor::new(n.shape.clone(), g).expect("grad shape matches value"))
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Dispatches a primitive by descriptor.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match prim {
            Primitive::MatMul
            | Primitive::AddBias
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul => 2,
            Primitive::Conv2d { .. } => 3,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(shape_err(
                "apply",
                format!("{prim:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        let x = inputs[0];
        match prim {
            Primitive::MatMul => self.matmul(x, inputs[1]),
            Primitive::AddBias => self.add_bias(x, inputs[1]),
            Primitive::Add => self.add(x, inputs[1]),
            Primitive::Sub => self.sub(x, inputs[1]),
            Primitive::Mul => self.mul(x, inputs[1]),
            Primitive::Scale(s) => Ok(self.scale(x, *s)),
            Primitive::AddScalar(s) => Ok(self.add_scalar(x, *s)),
            Primitive::Relu => Ok(self.relu(x)),
            Primitive::Tanh => Ok(self.tanh(x)),
            Primitive::Square => Ok(self.square(x)),
            Primitive::Reshape(s) => self.reshape(x, s),
            Primitive::Conv2d { padding } => self.conv2d(x, inputs[1], inputs[2], *padding),
            Primitive::MaxPool2d => self.max_pool2d(x),
            Primitive::LogSoftmax => self.log_softmax(x),
            Primitive::Sum => Ok(self.sum(x)),
            Primitive::Mean => Ok(self.mean(x)),
            Primitive::SumRows => self.sum_rows(x),
            Primitive::Gather(idx) => self.gather(x, idx),
            Primitive::MaxOther(idx) => self.max_other(x, idx),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::MatMul(a.0, b.0), vec![m, n], Cow::Owned(out), rg))
    }

    /// `x: [B, n] + b: [n]`, the only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err(
                "add_bias",
                format!("bias {sb:?} does not match rows of {sx:?}"),
            ));
        }
        let cols = sx[1];
        let shape = sx.to_vec();
        let bias = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % cols])
            .collect();
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(Op::AddBias(x.0, b.0), shape, Cow::Owned(out), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(op, shape, Cow::Owned(out), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0]);
        self.push(op, shape, Cow::Owned(out), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x.0, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let value = Cow::Owned(self.value(x).to_vec());
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::Reshape(x.0), shape.to_vec(), value, rg))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s.first().copied().unwrap_or(1);
        let rest = if s.is_empty() { 1 } else { numel(&s[1..]) };
        self.reshape(x, &[b, rest])
    }

    fn conv_geom(&self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<ConvGeom> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 4 || sw.len() != 4 || sb.len() != 1 || si[1] != sw[1] || sb[0] != sw[0] {
            return Err(shape_err(
                "conv2d",
                format!("input {si:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let (h, w, kh, kw) = (si[2], si[3], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(ConvGeom {
            batch: si[0],
            in_c: si[1],
            h,
            w,
            out_c: sw[0],
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    /// Stride-1 2-D convolution (cross-correlation) with zero padding.
    /// `input: [B, C, H, W]`, `weight: [O, C, kh, kw]`, `bias: [O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let g = self.conv_geom(input, weight, bias, padding)?;
        let (rows, width) = (g.cols_rows(), g.cols_width());
        let mut cols = vec![0.0; rows * width];
        let in_sz = g.in_c * g.h * g.w;
        let out_sz = g.out_c * width;
        let mut out = vec![0.0; g.batch * out_sz];
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        for n in 0..g.batch {
            g.im2col(&x[n * in_sz..(n + 1) * in_sz], &mut cols);
            let dst = &mut out[n * out_sz..(n + 1) * out_sz];
            for (o, chunk) in dst.chunks_mut(width).enumerate() {
                chunk.fill(b[o]);
            }
            gemm(g.out_c, rows, width, wt, false, &cols, false, 1.0, dst);
        }
        let rg = self.rg(&[input.0, weight.0, bias.0]);
        Ok(self.push(
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                padding,
            },
            vec![g.batch, g.out_c, g.oh, g.ow],
            Cow::Owned(out),
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over `[B, C, H, W]`; odd trailing
    /// rows/columns are dropped. Ties pick the first element in scan order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool2d", format!("input {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let v = self.value(x);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if v[idx] > v[best] {
                            best = idx;
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Op::MaxPool2d { input: x.0, argmax },
            vec![b, c, oh, ow],
            Cow::Owned(out),
            rg,
        ))
    }

    /// Row-wise `log(softmax(x))` over `[B, n]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(shape_err("log_softmax", format!("expected [B, n], got {s:?}")));
        }
        let out = log_softmax_rows(self.value(x), s[1]);
        let shape = s.to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::LogSoftmax(x.0), shape, Cow::Owned(out), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Op::Sum(x.0), Vec::new(), Cow::Owned(vec![total]), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x.0]);
        self.push(Op::Mean(x.0), Vec::new(), Cow::Owned(vec![total]), rg)
    }

    /// Sums every axis but the leading one: `[B, ...] -> [B]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(shape_err("sum_rows", "scalar input".into()));
        }
        let b = s[0];
        let w = numel(&s[1..]);
        let out: Vec<f64> = if w == 0 {
            vec![0.0; b]
        } else {
            self.value(x).chunks(w).map(|r| r.iter().sum()).collect()
        };
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::SumRows(x.0), vec![b], Cow::Owned(out), rg))
    }

    fn check_index(&self, name: &'static str, x: Var, index: &[usize]) -> Result<usize> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != index.len() {
            return Err(shape_err(
                name,
                format!("input {s:?} with {} indices", index.len()),
            ));
        }
        if let Some((i, &l)) = index.iter().enumerate().find(|(_, &l)| l >= s[1]) {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l,
                num_classes: s[1],
            });
        }
        Ok(s[1])
    }

    /// Picks `x[b, index[b]]`: `[B, n] -> [B]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let n = self.check_index("gather", x, index)?;
        let v = self.value(x);
        let out: Vec<f64> = index.iter().enumerate().map(|(b, &j)| v[b * n + j]).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Op::Gather {
                input: x.0,
                index: index.to_vec(),
            },
            vec![index.len()],
            Cow::Owned(out),
            rg,
        ))
    }

    /// Largest entry of each row excluding column `index[b]`: `[B, n] -> [B]`.
    pub fn max_other(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let n = self.check_index("max_other", x, index)?;
        if n < 2 {
            return Err(shape_err("max_other", "needs at least two columns".into()));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(index.len());
        let mut argmax = Vec::with_capacity(index.len());
        for (b, &skip) in index.iter().enumerate() {
            let row = &v[b * n..(b + 1) * n];
            let mut best = usize::MAX;
            for (j, &val) in row.iter().enumerate() {
                if j != skip && (best == usize::MAX || val > row[best]) {
                    best = j;
                }
            }
            out.push(row[best]);
            argmax.push(b * n + best);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Op::MaxOther { input: x.0, argmax },
            vec![index.len()],
            Cow::Owned(out),
            rg,
        ))
    }

    fn acc(&mut self, target: usize, contribution: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.len();
        let g = self.grads[target].get_or_insert_with(|| vec![0.0; len]);
        contribution(g);
    }

    /// Backpropagates from a scalar `loss`, accumulating into every node
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        // Temporarily move the op out so input values can be read while
        // other nodes' gradient buffers are written.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, &self.nodes[b].value, true, 0.0, &mut da);
                    self.acc(a, |g| g.iter_mut().zip(&da).for_each(|(g, d)| *g += d));
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &self.nodes[a].value, true, dy, false, 0.0, &mut db);
                    self.acc(b, |g| g.iter_mut().zip(&db).for_each(|(g, d)| *g += d));
                }
            }
            &Op::AddBias(x, b) => {
                self.acc(x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                let cols = self.nodes[b].shape[0];
                self.acc(b, |g| {
                    for row in dy.chunks(cols) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                self.acc(b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            &Op::Sub(a, b) => {
                self.acc(a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                self.acc(b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            &Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let d: Vec<f64> = dy.iter().zip(self.nodes[b].value.iter()).map(|(d, v)| d * v).collect();
                    self.acc(a, |g| g.iter_mut().zip(&d).for_each(|(g, d)| *g += d));
                }
                if self.nodes[b].requires_grad {
                    let d: Vec<f64> = dy.iter().zip(self.nodes[a].value.iter()).map(|(d, v)| d * v).collect();
                    self.acc(b, |g| g.iter_mut().zip(&d).for_each(|(g, d)| *g += d));
                }
            }
            &Op::Scale(x, s) => {
                self.acc(x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s));
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                self.acc(x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            &Op::Relu(x) => {
                let mask: Vec<f64> = self.nodes[x]
                    .value
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                self.acc(x, |g| g.iter_mut().zip(&mask).for_each(|(g, d)| *g += d));
            }
            &Op::Tanh(x) => {
                let d: Vec<f64> = self.nodes[i]
                    .value
                    .iter()
                    .zip(dy)
                    .map(|(&y, &d)| d * (1.0 - y * y))
                    .collect();
                self.acc(x, |g| g.iter_mut().zip(&d).for_each(|(g, d)| *g += d));
            }
            &Op::Square(x) => {
                let d: Vec<f64> = self.nodes[x]
                    .value
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| 2.0 * v * d)
                    .collect();
                self.acc(x, |g| g.iter_mut().zip(&d).for_each(|(g, d)| *g += d));
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => self.conv2d_backward(input, weight, bias, padding, dy),
            Op::MaxPool2d { input, argmax } => {
                self.acc(*input, |g| {
                    for (&idx, &d) in argmax.iter().zip(dy) {
                        g[idx] += d;
                    }
                });
            }
            &Op::LogSoftmax(x) => {
                let cols = self.nodes[i].shape[1];
                let mut d = vec![0.0; dy.len()];
                for ((y, dyr), dr) in self.nodes[i]
                    .value
                    .chunks(cols)
                    .zip(dy.chunks(cols))
                    .zip(d.chunks_mut(cols))
                {
                    let s: f64 = dyr.iter().sum();
                    for ((dst, &yv), &dv) in dr.iter_mut().zip(y).zip(dyr) {
                        *dst = dv - libm::exp(yv) * s;
                    }
                }
                self.acc(x, |g| g.iter_mut().zip(&d).for_each(|(g, d)| *g += d));
            }
            &Op::Sum(x) => {
                let d = dy[0];
                self.acc(x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            &Op::Mean(x) => {
                let d = dy[0] / self.nodes[x].value.len() as f64;
                self.acc(x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            &Op::SumRows(x) => {
                let w = self.nodes[x].value.len() / dy.len().max(1);
                self.acc(x, |g| {
                    for (row, &d) in g.chunks_mut(w.max(1)).zip(dy) {
                        row.iter_mut().for_each(|g| *g += d);
                    }
                });
            }
            Op::Gather { input, index } => {
                let n = self.nodes[*input].shape[1];
                self.acc(*input, |g| {
                    for (b, (&j, &d)) in index.iter().zip(dy).enumerate() {
                        g[b * n + j] += d;
                    }
                });
            }
            Op::MaxOther { input, argmax } => {
                self.acc(*input, |g| {
                    for (&idx, &d) in argmax.iter().zip(dy) {
                        g[idx] += d;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn conv2d_backward(&mut self, input: usize, weight: usize, bias: usize, pad: usize, dy: &[f64]) {
        let g = self
            .conv_geom(Var(input), Var(weight), Var(bias), pad)
            .expect("validated in forward");
        let (rows, width) = (g.cols_rows(), g.cols_width());
        let in_sz = g.in_c * g.h * g.w;
        let out_sz = g.out_c * width;
        let need_x = self.nodes[input].requires_grad;
        let need_w = self.nodes[weight].requires_grad;
        let need_b = self.nodes[bias].requires_grad;

        if need_b {
            let mut db = vec![0.0; g.out_c];
            for n in 0..g.batch {
                for (o, chunk) in dy[n * out_sz..(n + 1) * out_sz].chunks(width).enumerate() {
                    db[o] += chunk.iter().sum::<f64>();
                }
            }
            self.acc(bias, |gb| gb.iter_mut().zip(&db).for_each(|(g, d)| *g += d));
        }
        if !need_x && !need_w {
            return;
        }
        let mut cols = vec![0.0; rows * width];
        let mut dw = vec![0.0; g.out_c * rows];
        let mut dx = if need_x { vec![0.0; g.batch * in_sz] } else { Vec::new() };
        for n in 0..g.batch {
            let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
            if need_w {
                g.im2col(&self.nodes[input].value[n * in_sz..(n + 1) * in_sz], &mut cols);
                gemm(g.out_c, width, rows, dyn_, false, &cols, true, 1.0, &mut dw);
            }
            if need_x {
                let mut dcols = vec![0.0; rows * width];
                gemm(rows, g.out_c, width, &self.nodes[weight].value, true, dyn_, false, 0.0, &mut dcols);
                g.col2im(&dcols, &mut dx[n * in_sz..(n + 1) * in_sz]);
            }
        }
        if need_w {
            self.acc(weight, |gw| gw.iter_mut().zip(&dw).for_each(|(g, d)| *g += d));
        }
        if need_x {
            self.acc(input, |gx| gx.iter_mut().zip(&dx).for_each(|(g, d)| *g += d));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::eye(3);
        let v = t(&[3, 1], &[1.5, -2.0, 7.0]);
        let mut g = Graph::new();
        let a = g.leaf(&eye, false);
        let b = g.leaf(&v, false);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y), v.data());
    }

    #[test]
    fn log_softmax_of_equal_logits() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[0.0, 0.0]), false);
        let y = g.log_softmax(x).unwrap();
        let ln2 = core::f64::consts::LN_2;
        for v in g.value(y) {
            assert!((v + ln2).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true);
        let sq = g.square(x);
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0), true);
        let y = g.relu(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // y = x * x + x  ->  dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0), true);
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true);
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(Error::BackwardTwice));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]), false);
        let b = g.input(Tensor::zeros(&[2, 3]), false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(g.add_bias(a, b).is_err());
    }

    #[test]
    fn apply_dispatches() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = g.apply(&Primitive::Relu, &[x]).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        assert!(g.apply(&Primitive::Add, &[x]).is_err());
    }

    #[test]
    fn max_other_skips_label() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[5.0, 1.0, 2.0, 0.0, 9.0, 3.0]), false);
        let y = g.max_other(x, &[0, 1]).unwrap();
        assert_eq!(g.value(y), &[2.0, 3.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1x1x3x3 input, 1x1x2x2 kernel, no padding.
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]), false);
        let w = g.input(t(&[1, 1, 2, 2], &[1., 0., 0., -1.]), false);
        let b = g.input(t(&[1], &[0.5]), false);
        let y = g.conv2d(x, w, b, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y), &[1. - 5. + 0.5, 2. - 6. + 0.5, 4. - 8. + 0.5, 5. - 9. + 0.5]);
    }
}
