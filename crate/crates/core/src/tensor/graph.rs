//! Eager reverse-mode tape.
//!
//! Every operation evaluates immediately and appends a node; node inputs always
//! precede the node, so the push order is a topological order and `backward`
//! is a single reverse sweep. A graph is built per forward pass and dropped
//! after `backward`.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `[B, n] + [n]`
    AddRowBias(Var, Var),
    /// `[B, C, H, W] + [C]`
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Elu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    /// `[B, ...] -> [B]`
    SumPerSample(Var),
    Reshape(Var),
    /// Concatenate `[B, n_i]` along the feature axis.
    ConcatCols(Vec<Var>),
    /// Feature slice of `[B, n]`.
    SliceCols(Var, usize, usize),
    /// Channel slice of `[B, C, H, W]`.
    SliceChannels(Var, usize, usize),
    /// Concatenate `[B, C_i, H, W]` along channels.
    ConcatChannels(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        c_out: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        c_out: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRowBias(..) => "add_row_bias",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::MatMul(..) => "matmul",
            Op::Elu(..) => "elu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumPerSample(..) => "sum_per_sample",
            Op::Reshape(..) => "reshape",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceChannels(..) => "slice_channels",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::GroupNorm { .. } => "group_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Overflow-safe softplus; returns `x` above the switchover.
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
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

fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn get_tensor(&self, v: Var) -> Tensor {
        Tensor::from_raw(self.shapes[v.0].clone(), self.get(v))
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

    /// Total element count of nodes created at or after `mark`.
    pub fn numel_since(&self, mark: usize) -> usize {
        self.nodes[mark..].iter().map(|n| n.value.numel()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf. Gradients flow to it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.push_raw(
            Tensor::from_raw(t.shape().to_vec(), t.into_data()),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(
            Tensor::from_raw(t.shape().to_vec(), t.into_data()),
            Op::Leaf,
            false,
        )
    }

    /// Copy of `v` that is cut from the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "forward {} at node {}",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(Tensor::from_raw(shape, data), op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Elu(a), elu_scalar)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Softplus(a), softplus_scalar)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(vec![1], vec![s], Op::Mean(a), &[a])
    }

    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let b = t.shape()[0];
        let inner = t.numel() / b;
        let data = t.data().chunks(inner).map(|c| c.iter().sum()).collect();
        self.push(vec![b], data, Op::SumPerSample(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    fn check_rank(&self, op: &'static str, a: Var, rank: usize) -> Result<()> {
        if self.shape(a).len() != rank {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: vec![rank],
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_rank("matmul", a, 2)?;
        self.check_rank("matmul", b, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_rank("add_row_bias", x, 2)?;
        let n = self.shape(x)[1];
        if self.shape(bias) != [n] {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias).data();
        let data = self.value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::AddRowBias(x, bias), &[x, bias])
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_rank("add_channel_bias", x, 4)?;
        let s = self.shape(x).to_vec();
        if self.shape(bias) != [s[1]] {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                lhs: s,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let plane = s[2] * s[3];
        let bv = self.value(bias).data();
        let data = self.value(x)
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let b = bv[i % s[1]];
                p.iter().map(move |v| v + b)
            })
            .collect();
        self.push(s, data, Op::AddChannelBias(x, bias), &[x, bias])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let b = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check_rank("concat_cols", p, 2)?;
            if self.shape(p)[0] != b {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(self.shape(p)[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(b * total);
        for row in 0..b {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        self.push(vec![b, total], data, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check_rank("slice_cols", x, 2)?;
        let (b, n) = (self.shape(x)[0], self.shape(x)[1]);
        if start >= end || end > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, end],
            });
        }
        let data = self.value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        self.push(vec![b, end - start], data, Op::SliceCols(x, start, end), &[x])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check_rank("slice_channels", x, 4)?;
        let s = self.shape(x).to_vec();
        if start >= end || end > s[1] {
            return Err(Error::Dimension {
                op: "slice_channels",
                lhs: s,
                rhs: vec![start, end],
            });
        }
        let plane = s[2] * s[3];
        let data = self.value(x)
            .data()
            .chunks(s[1] * plane)
            .flat_map(|sample| sample[start * plane..end * plane].iter().copied())
            .collect();
        self.push(
            vec![s[0], end - start, s[2], s[3]],
            data,
            Op::SliceChannels(x, start, end),
            &[x],
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        self.check_rank("concat_channels", first, 4)?;
        let s0 = self.shape(first).to_vec();
        let plane = s0[2] * s0[3];
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check_rank("concat_channels", p, 4)?;
            let s = self.shape(p);
            if s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            chans.push(s[1]);
        }
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(s0[0] * total * plane);
        for b in 0..s0[0] {
            for (&p, &c) in parts.iter().zip(&chans) {
                let len = c * plane;
                data.extend_from_slice(&self.value(p).data()[b * len..(b + 1) * len]);
            }
        }
        self.push(
            vec![s0[0], total, s0[2], s0[3]],
            data,
            Op::ConcatChannels(parts.to_vec()),
            parts,
        )
    }

    fn conv_geom(&self, op: &'static str, img: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
        if w.len() != 4 || w[2] != w[3] {
            return Err(Error::Dimension {
                op,
                lhs: img.to_vec(),
                rhs: w.to_vec(),
            });
        }
        ConvGeom::new(w[1], img[2], img[3], w[2], stride, padding).ok_or_else(|| {
            Error::config(format!(
                "{op}: extent {}x{} with kernel {}, stride {stride}, padding {padding} gives a non-integer output size",
                img[2], img[3], w[2]
            ))
        })
    }

    /// Cross-correlation with zero padding. `x: [B,C_in,H,W]`, `w: [C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check_rank("conv2d", x, 4)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != xs[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let geom = self.conv_geom("conv2d", &xs, &ws, stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), xs[0], ws[0], &geom);
        self.push(
            vec![xs[0], ws[0], geom.out_h, geom.out_w],
            out,
            Op::Conv2d {
                x,
                w,
                geom,
                c_out: ws[0],
            },
            &[x, w],
        )
    }

    /// Adjoint of [`Graph::conv2d`] w.r.t. its input, for the same `w`, stride and padding.
    /// `x: [B,C_out,H,W]` → `[B,C_in,(H−1)·stride − 2·padding + k, …]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check_rank("conv_transpose2d", x, 4)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(Error::Dimension {
                op: "conv_transpose2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let k = ws[2];
        let extent = |e: usize| -> Result<usize> {
            let full = (e - 1) * stride + k;
            full.checked_sub(2 * padding)
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::config(format!("conv_transpose2d: padding {padding} too large for extent {e}")))
        };
        let (oh, ow) = (extent(xs[2])?, extent(xs[3])?);
        let geom = ConvGeom::new(ws[1], oh, ow, k, stride, padding)
            .filter(|g| g.out_h == xs[2] && g.out_w == xs[3])
            .ok_or_else(|| Error::config("conv_transpose2d: inconsistent geometry"))?;
        let out = kernels::conv_transpose2d_forward(self.value(x).data(), self.value(w).data(), xs[0], ws[0], &geom);
        self.push(
            vec![xs[0], ws[1], oh, ow],
            out,
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                c_out: ws[0],
            },
            &[x, w],
        )
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_rank("group_norm", x, 4)?;
        let s = self.shape(x).to_vec();
        if groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(Error::config(format!(
                "group_norm: {} channels not divisible into {groups} groups",
                s[1]
            )));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [s[1]] {
                return Err(Error::Dimension {
                    op: "group_norm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let plane = s[2] * s[3];
        let (xhat, rstd) = kernels::group_norm_forward(self.value(x).data(), s[0], s[1], plane, groups, eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let c = i % s[1];
                let (gc, bc) = (g[c], b[c]);
                p.iter().map(move |v| v * gc + bc)
            })
            .collect();
        self.push(
            s,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if gout.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("backward {} at node {i}", node.op.name())));
            }
            self.propagate(node, &gout, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &|g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
                acc(grads, *b, &|g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d));
                acc(grads, *b, &|g| g.iter_mut().zip(gout).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                acc(grads, *b, &|g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / bv[i];
                    }
                });
                acc(grads, *b, &|g| {
                    for i in 0..g.len() {
                        g[i] -= gout[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &|g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += c * d)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(grads, *a, &|g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += d))
            }
            Op::AddRowBias(x, b) => {
                let n = self.nodes[b.0].value.numel();
                acc(grads, *x, &|g| g.iter_mut().zip(gout).for_each(|(v, d)| *v += d));
                acc(grads, *b, &|g| {
                    for row in gout.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(v, d)| *v += d);
                    }
                });
            }
            Op::AddChannelBias(x, b) => {
                let s = self.nodes[x.0].value.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                acc(grads, *x, &|g| g.iter_mut().zip(gout).for_each(|(v, d)| *v += d));
                acc(grads, *b, &|g| {
                    for (i, p) in gout.chunks(plane).enumerate() {
                        g[i % c] += p.iter().sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, &|g| kernels::gemm_nt_acc(gout, bv, g, m, n, k));
                acc(grads, *b, &|g| kernels::gemm_tn_acc(av, gout, g, k, m, n));
            }
            Op::Elu(a) => {
                let av = val(*a);
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        let x = av[i];
                        g[i] += gout[i] * if x > 0.0 { 1.0 } else { x.exp() };
                    }
                });
            }
            Op::Softplus(a) => {
                let av = val(*a);
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        let x = av[i];
                        g[i] += gout[i] * if x > 30.0 { 1.0 } else { sigmoid(x) };
                    }
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * out[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / av[i];
                    }
                });
            }
            Op::Square(a) => {
                let av = val(*a);
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * gout[i] * av[i];
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[i] += gout[i] * s;
                    }
                });
            }
            Op::Sum(a) => acc(grads, *a, &|g| g.iter_mut().for_each(|v| *v += gout[0])),
            Op::Mean(a) => {
                let scale = gout[0] / self.nodes[a.0].value.numel() as f64;
                acc(grads, *a, &|g| g.iter_mut().for_each(|v| *v += scale));
            }
            Op::SumPerSample(a) => {
                let inner = self.nodes[a.0].value.numel() / gout.len();
                acc(grads, *a, &|g| {
                    for (chunk, d) in g.chunks_mut(inner).zip(gout) {
                        chunk.iter_mut().for_each(|v| *v += d);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let b = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc(grads, p, &|g| {
                        for row in 0..b {
                            for j in 0..w {
                                g[row * w + j] += gout[row * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let n = self.nodes[x.0].value.shape()[1];
                let w = end - start;
                acc(grads, *x, &|g| {
                    for (row, d) in gout.chunks(w).enumerate() {
                        for j in 0..w {
                            g[row * n + start + j] += d[j];
                        }
                    }
                });
            }
            Op::SliceChannels(x, start, end) => {
                let s = self.nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                let (full, part) = (s[1] * plane, (end - start) * plane);
                acc(grads, *x, &|g| {
                    for (b, d) in gout.chunks(part).enumerate() {
                        let dst = &mut g[b * full + start * plane..b * full + end * plane];
                        dst.iter_mut().zip(d).for_each(|(v, dd)| *v += dd);
                    }
                });
            }
            Op::ConcatChannels(parts) => {
                let s = node.value.shape();
                let plane = s[2] * s[3];
                let full = s[1] * plane;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[1] * plane;
                    acc(grads, p, &|g| {
                        for b in 0..s[0] {
                            let src = &gout[b * full + offset..b * full + offset + len];
                            g[b * len..(b + 1) * len].iter_mut().zip(src).for_each(|(v, d)| *v += d);
                        }
                    });
                    offset += len;
                }
            }
            Op::Conv2d { x, w, geom, c_out } => {
                let batch = self.nodes[x.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                if wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    kernels::conv2d_backward(xv, wv, gout, batch, *c_out, geom, Some(&mut dx), None);
                    acc(grads, *x, &|g| g.iter_mut().zip(&dx).for_each(|(v, d)| *v += d));
                }
                if wants(*w) {
                    let mut dw = vec![0.0; wv.len()];
                    kernels::conv2d_backward(xv, wv, gout, batch, *c_out, geom, None, Some(&mut dw));
                    acc(grads, *w, &|g| g.iter_mut().zip(&dw).for_each(|(v, d)| *v += d));
                }
            }
            Op::ConvTranspose2d { x, w, geom, c_out } => {
                let batch = self.nodes[x.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = wants(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = wants(*w).then(|| vec![0.0; wv.len()]);
                kernels::conv_transpose2d_backward(
                    xv,
                    wv,
                    gout,
                    batch,
                    *c_out,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, &|g| g.iter_mut().zip(&dx).for_each(|(v, d)| *v += d));
                }
                if let Some(dw) = dw {
                    acc(grads, *w, &|g| g.iter_mut().zip(&dw).for_each(|(v, d)| *v += d));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let s = self.nodes[x.0].value.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let gv = val(*gamma);
                acc(grads, *gamma, &|g| {
                    for (i, (d, h)) in gout.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        g[i % c] += d.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(grads, *beta, &|g| {
                    for (i, d) in gout.chunks(plane).enumerate() {
                        g[i % c] += d.iter().sum::<f64>();
                    }
                });
                if wants(*x) {
                    let mut dxhat = gout.to_vec();
                    for (i, chunk) in dxhat.chunks_mut(plane).enumerate() {
                        let gc = gv[i % c];
                        chunk.iter_mut().for_each(|v| *v *= gc);
                    }
                    let dx = kernels::group_norm_backward(&dxhat, xhat, rstd, c / groups * plane);
                    acc(grads, *x, &|g| g.iter_mut().zip(&dx).for_each(|(v, d)| *v += d));
                }
            }
        }
        Ok(())
    }
}
