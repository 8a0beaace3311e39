//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! loaded through [`Tape::param`], which returns the same node on repeated
//! calls, so a module reused across time steps is literally one set of leaves.

use std::sync::Arc;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{self, col2im, gemm, im2col, ConvGeometry, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MulChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Number of distinct parameter leaves recorded on this tape.
    pub fn param_leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.param.is_some()).count()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false, None)
    }

    /// An input that receives a gradient (used by input-sensitivity checks).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true, None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let v = self.leaf(store.shared(id), true, Some(id));
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect());
        self.push(out, op, &[x])
    }

    fn zip_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape(), data);
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map_unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, tensor::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, tensor::gelu, Op::Gelu(x))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).rc();
        let (k2, n) = self.value(b).rc();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            1.0,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            &mut out,
        );
        self.push(Tensor::new([m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `[m, k] x [n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).rc();
        let (n, k2) = self.value(b).rc();
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            false,
            true,
            m,
            n,
            k,
            1.0,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            &mut out,
        );
        self.push(Tensor::new([m, n], out), Op::MatMulNt(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.value(x).rc();
        assert_eq!(self.value(bias).len(), n);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        self.push(
            Tensor::new([m, n], data),
            Op::AddRowBias(x, bias),
            &[x, bias],
        )
    }

    /// `x @ w + b` for a row-vector batch `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_bias(y, b)
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(bias).len(), c);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (plane, bb) in data.chunks_mut(h * w).zip(b) {
            plane.iter_mut().for_each(|v| *v += bb);
        }
        self.push(
            Tensor::new([c, h, w], data),
            Op::AddChannelBias(x, bias),
            &[x, bias],
        )
    }

    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(scale).len(), c);
        let s = self.value(scale).data();
        let mut data = self.value(x).data().to_vec();
        for (plane, ss) in data.chunks_mut(h * w).zip(s) {
            plane.iter_mut().for_each(|v| *v *= ss);
        }
        self.push(
            Tensor::new([c, h, w], data),
            Op::MulChannel(x, scale),
            &[x, scale],
        )
    }

    /// Convolution of a `[C, H, W]` map with `[O, C, k, k]` weights (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(ws[1], c, "conv input channels mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (o, k) = (ws[0], ws[2]);
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        assert!(
            h + 2 * pad >= k && wd + 2 * pad >= k,
            "kernel larger than padded input"
        );
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(self.value(x).data(), &geom))
        };
        let mut out = vec![0.0; o * ho * wo];
        {
            let col_data = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            gemm(
                false,
                false,
                o,
                ho * wo,
                geom.patch_len(),
                1.0,
                self.value(w).data(),
                col_data,
                0.0,
                &mut out,
            );
        }
        self.push(
            Tensor::new([o, ho, wo], out),
            Op::Conv2d { x, w, geom, cols },
            &[x, w],
        )
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool_3x3_s2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
        let src = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (ch * ho + oy) * wo + ox;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = (ch * h + iy as usize) * w + ix as usize;
                            if src[i] > out[o] {
                                out[o] = src[i];
                                argmax[o] = i;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new([c, ho, wo], out),
            Op::MaxPool { x, argmax },
            &[x],
        )
    }

    /// Spatial mean of a `[C, H, W]` map, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let inv = 1.0 / (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() * inv)
            .collect();
        debug_assert_eq!(c, self.value(x).shape()[0]);
        self.push(Tensor::vector(data), Op::GlobalAvgPool(x), &[x])
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Var {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(Tensor::new(shape, data), Op::Gather { x, index }, &[x])
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).rc();
        assert!(start + len <= m);
        let index = (start * n..(start + len) * n).collect();
        self.gather(x, index, [len, n])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).rc();
        assert!(start + len <= n);
        let index = (0..m)
            .flat_map(|r| (start..start + len).map(move |c| r * n + c))
            .collect();
        self.gather(x, index, [m, len])
    }

    /// Channels `start..start + len` of a `[C, H, W]` map.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(start + len <= c);
        let index = (start * h * w..(start + len) * h * w).collect();
        self.gather(x, index, [len, h, w])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).rc();
        let index = (0..n)
            .flat_map(|c| (0..m).map(move |r| r * n + c))
            .collect();
        self.gather(x, index, [n, m])
    }

    /// Flat concatenation of the inputs into shape `shape`.
    pub fn concat(&mut self, xs: &[Var], shape: impl Into<Vec<usize>>) -> Var {
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        self.push(Tensor::new(shape, data), Op::Concat(xs.to_vec()), xs)
    }

    /// Concatenates `[m, n_i]` matrices along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let m = self.value(xs[0]).rc().0;
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).rc().1).collect();
        assert!(xs.iter().all(|&x| self.value(x).rc().0 == m));
        let total: usize = widths.iter().sum();
        let flat = self.concat(xs, [m * total]);
        let mut offsets = Vec::with_capacity(widths.len());
        let mut acc = 0;
        for w in &widths {
            offsets.push(acc);
            acc += m * w;
        }
        let mut index = Vec::with_capacity(m * total);
        for r in 0..m {
            for (off, w) in offsets.iter().zip(&widths) {
                index.extend((0..*w).map(|c| off + r * w + c));
            }
        }
        self.gather(flat, index, [m, total])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let t = (*self.nodes[x.0].value).clone().reshape(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).rc();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(Tensor::new([m, n], data), Op::SoftmaxRows(x), &[x])
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.value(x).rc();
        assert_eq!(self.value(gamma).len(), n);
        assert_eq!(self.value(beta).len(), n);
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let xh = (row[c] - mean) * rs;
                xhat[r * n + c] = xh;
                out[r * n + c] = xh * g[c] + b[c];
            }
        }
        self.push(
            Tensor::new([m, n], out),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Backpropagates from `root`, seeded with an all-ones upstream gradient.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Tensor::filled(self.shape(root), 1.0);
        self.backward_seeded(&[(root, seed)])
    }

    /// Backpropagates the given upstream gradients, accumulating overlapping seeds.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(*v), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.data());
        }
        let top = seeds.iter().map(|(v, _)| v.0 + 1).max().unwrap_or(0);
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if self.needs(*b) {
                    let d: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Affine(x, scale) => {
                let d: Vec<f64> = g.iter().map(|v| v * scale).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(xs)
                    .map(|(g, x)| g * tensor::gelu_grad(*x))
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).rc();
                let n = self.value(*b).rc().1;
                if self.needs(*a) {
                    let buf = grad_buffer(&mut grads[a.0], m * k);
                    gemm(
                        false,
                        true,
                        m,
                        k,
                        n,
                        1.0,
                        g,
                        self.value(*b).data(),
                        1.0,
                        buf,
                    );
                }
                if self.needs(*b) {
                    let buf = grad_buffer(&mut grads[b.0], k * n);
                    gemm(
                        true,
                        false,
                        k,
                        n,
                        m,
                        1.0,
                        self.value(*a).data(),
                        g,
                        1.0,
                        buf,
                    );
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).rc();
                let n = self.value(*b).rc().0;
                if self.needs(*a) {
                    let buf = grad_buffer(&mut grads[a.0], m * k);
                    gemm(
                        false,
                        false,
                        m,
                        k,
                        n,
                        1.0,
                        g,
                        self.value(*b).data(),
                        1.0,
                        buf,
                    );
                }
                if self.needs(*b) {
                    let buf = grad_buffer(&mut grads[b.0], n * k);
                    gemm(
                        true,
                        false,
                        n,
                        k,
                        m,
                        1.0,
                        g,
                        self.value(*a).data(),
                        1.0,
                        buf,
                    );
                }
            }
            Op::AddRowBias(x, bias) => {
                let n = self.value(*bias).len();
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.needs(*bias) {
                    let buf = grad_buffer(&mut grads[bias.0], n);
                    for row in g.chunks(n) {
                        buf.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                    }
                }
            }
            Op::AddChannelBias(x, bias) => {
                let c = self.value(*bias).len();
                let hw = g.len() / c;
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.needs(*bias) {
                    let buf = grad_buffer(&mut grads[bias.0], c);
                    for (b, plane) in buf.iter_mut().zip(g.chunks(hw)) {
                        *b += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::MulChannel(x, scale) => {
                let c = self.value(*scale).len();
                let hw = g.len() / c;
                let s = self.value(*scale).data();
                if self.needs(*x) {
                    let buf = grad_buffer(&mut grads[x.0], g.len());
                    for ((b, gp), ss) in buf.chunks_mut(hw).zip(g.chunks(hw)).zip(s) {
                        b.iter_mut().zip(gp).for_each(|(b, v)| *b += v * ss);
                    }
                }
                if self.needs(*scale) {
                    let xs = self.value(*x).data();
                    let buf = grad_buffer(&mut grads[scale.0], c);
                    for ((b, gp), xp) in buf.iter_mut().zip(g.chunks(hw)).zip(xs.chunks(hw)) {
                        *b += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let o = self.value(*w).shape()[0];
                let p = geom.out_height() * geom.out_width();
                let kk = geom.patch_len();
                if self.needs(*w) {
                    let col_data = cols.as_deref().unwrap_or_else(|| self.value(*x).data());
                    let buf = grad_buffer(&mut grads[w.0], o * kk);
                    gemm(false, true, o, kk, p, 1.0, g, col_data, 1.0, buf);
                }
                if self.needs(*x) {
                    let wdata = self.value(*w).data();
                    let xlen = self.value(*x).len();
                    if geom.is_pointwise() {
                        let buf = grad_buffer(&mut grads[x.0], xlen);
                        gemm(true, false, kk, p, o, 1.0, wdata, g, 1.0, buf);
                    } else {
                        let mut dcols = vec![0.0; kk * p];
                        gemm(true, false, kk, p, o, 1.0, wdata, g, 0.0, &mut dcols);
                        let buf = grad_buffer(&mut grads[x.0], xlen);
                        col2im(&dcols, geom, buf);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let buf = grad_buffer(&mut grads[x.0], self.value(*x).len());
                for (gv, &src) in g.iter().zip(argmax) {
                    buf[src] += gv;
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w) = self.value(*x).chw();
                let inv = 1.0 / (h * w) as f64;
                let buf = grad_buffer(&mut grads[x.0], self.value(*x).len());
                for (plane, gv) in buf.chunks_mut(h * w).zip(g) {
                    plane.iter_mut().for_each(|b| *b += gv * inv);
                }
            }
            Op::Gather { x, index } => {
                let buf = grad_buffer(&mut grads[x.0], self.value(*x).len());
                for (gv, &src) in g.iter().zip(index) {
                    buf[src] += gv;
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for x in xs {
                    let len = self.value(*x).len();
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.rc().1;
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        drow[c] = yrow[c] * (grow[c] - dot);
                    }
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.rc().1;
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let buf = grad_buffer(&mut grads[gamma.0], n);
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            buf[c] += grow[c] * xrow[c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let buf = grad_buffer(&mut grads[beta.0], n);
                    for grow in g.chunks(n) {
                        buf.iter_mut().zip(grow).for_each(|(b, v)| *b += v);
                    }
                }
                if self.needs(*x) {
                    let buf = grad_buffer(&mut grads[x.0], g.len());
                    for (r, (grow, xrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            buf[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xrow[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn grad_buffer(slot: &mut Option<Vec<f64>>, len: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Gradients of every node reached by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient of every parameter leaf on `tape` into `out`.
    pub fn accumulate_params(&self, tape: &Tape, out: &mut ParamGrads) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &self.grads[i]) {
                out.get_mut(id).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at `x` against the tape gradient from `build`.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor) {
        let mut tape = Tape::new();
        let xv = tape.variable(x.clone());
        let y = build(&mut tape, xv);
        // Weighted sum so every output element matters.
        let weights: Vec<f64> = (0..tape.value(y).len())
            .map(|i| 0.3 + 0.1 * i as f64)
            .collect();
        let seed = Tensor::new(tape.shape(y), weights.clone());
        let grads = tape.backward_seeded(&[(y, seed)]);
        let analytic = grads.wrt(xv).unwrap().to_vec();
        let eval = |t: Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(t);
            let y = build(&mut tape, xv);
            tape.value(y)
                .data()
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "component {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.23).collect(),
        )
    }

    #[test]
    fn elementwise_ops_backprop() {
        check_unary(|t, x| t.sigmoid(x), ramp(&[2, 3]));
        check_unary(|t, x| t.tanh(x), ramp(&[2, 3]));
        check_unary(|t, x| t.gelu(x), ramp(&[2, 3]));
        check_unary(|t, x| t.affine(x, -1.5, 2.0), ramp(&[4]));
        check_unary(
            |t, x| {
                let s = t.sigmoid(x);
                let m = t.mul(s, x);
                t.sub(m, x)
            },
            ramp(&[5]),
        );
    }

    #[test]
    fn matrix_ops_backprop() {
        let w = ramp(&[3, 4]);
        check_unary(
            move |t, x| {
                let wv = t.constant(w.clone());
                t.matmul(x, wv)
            },
            ramp(&[2, 3]),
        );
        let b = ramp(&[5, 3]);
        check_unary(
            move |t, x| {
                let bv = t.constant(b.clone());
                t.matmul_nt(x, bv)
            },
            ramp(&[2, 3]),
        );
        check_unary(|t, x| t.matmul_nt(x, x), ramp(&[3, 2]));
        check_unary(|t, x| t.softmax_rows(x), ramp(&[3, 4]));
        check_unary(|t, x| t.transpose(x), ramp(&[3, 4]));
        check_unary(
            |t, x| {
                let a = t.slice_cols(x, 1, 2);
                let b = t.slice_cols(x, 0, 1);
                t.concat_cols(&[a, b])
            },
            ramp(&[3, 4]),
        );
        let gamma = Tensor::vector(vec![0.5, 1.5, -1.0, 2.0]);
        let beta = Tensor::vector(vec![0.1, 0.0, 0.2, -0.3]);
        check_unary(
            move |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                t.layer_norm_rows(x, g, b)
            },
            ramp(&[3, 4]),
        );
    }

    #[test]
    fn conv_and_pooling_backprop() {
        let w = ramp(&[3, 2, 3, 3]);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
            let w = w.clone();
            check_unary(
                move |t, x| {
                    let wv = t.constant(w.clone());
                    t.conv2d(x, wv, stride, pad)
                },
                ramp(&[2, 5, 6]),
            );
        }
        let pw = ramp(&[4, 2, 1, 1]);
        check_unary(
            move |t, x| {
                let wv = t.constant(pw.clone());
                t.conv2d(x, wv, 1, 0)
            },
            ramp(&[2, 3, 3]),
        );
        // distinct values so the max is unique
        let x = Tensor::new(
            [2, 5, 5],
            (0..50).map(|i| ((i * 37) % 50) as f64 * 0.1).collect(),
        );
        check_unary(|t, x| t.max_pool_3x3_s2(x), x);
        check_unary(|t, x| t.global_avg_pool(x), ramp(&[3, 2, 2]));
        let bias = Tensor::vector(vec![0.5, -0.5, 1.0]);
        check_unary(
            move |t, x| {
                let b = t.constant(bias.clone());
                let y = t.add_channel_bias(x, b);
                t.mul_channel(y, b)
            },
            ramp(&[3, 2, 2]),
        );
    }

    #[test]
    fn conv_weight_gradient_matches_differences() {
        let x = ramp(&[2, 4, 4]);
        check_unary(
            move |t, w| {
                let xv = t.constant(x.clone());
                t.conv2d(xv, w, 2, 1)
            },
            ramp(&[3, 2, 3, 3]),
        );
    }

    #[test]
    fn param_leaves_are_shared() {
        let mut store = ParamStore::new();
        let id = store.add(
            "w",
            crate::params::ParamGroup::Other,
            Tensor::vector(vec![1.0, 2.0]),
        );
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        assert_eq!(tape.param_leaf_count(), 1);
        let y = tape.mul(a, b);
        let grads = tape.backward(y);
        let mut pg = store.zero_grads();
        grads.accumulate_params(&tape, &mut pg);
        assert_eq!(pg.get(id), &[2.0, 4.0]);
    }
}
