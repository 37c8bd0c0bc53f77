use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(S),
    AddScalar,
    MatMul,
    AddRowBias,
    AddChannelBias,
    Conv2d(ConvGeometry),
    Relu,
    LeakyRelu(S),
    BatchNorm {
        x_hat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    MaxPool {
        argmax: Vec<usize>,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Concat {
        channels: Vec<usize>,
    },
    Reshape,
    Softmax,
    Log,
    ClampMin(S),
    Square,
    Sum,
    Mean,
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    inputs: Vec<Var>,
}

/// A reverse-mode tape: nodes are appended in evaluation order, so the node
/// list is always a topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Adds a leaf; it records gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            inputs: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op, inputs });
        Var(self.nodes.len() - 1)
    }

    fn zip_map(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, op, vec![a, b]))
    }

    fn map(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), data, op, vec![a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.map(a, Op::Scale(c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        self.map(a, Op::AddScalar, |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu, |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        self.map(a, Op::LeakyRelu(slope), |x| if x > S::zero() { x } else { x * slope })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log, |x| x.ln())
    }

    pub fn clamp_min(&mut self, a: Var, lo: S) -> Var {
        self.map(a, Op::ClampMin(lo), |x| if x < lo { lo } else { x })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square, |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: S = t.data().iter().copied().sum();
        let m = s / S::from_f64(t.len() as f64);
        self.push(Vec::new(), vec![m], Op::Mean, vec![a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(a).data().to_vec();
        Ok(self.push(shape, data, Op::Reshape, vec![a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul, vec![a, b]))
    }

    /// `x[N×M] + bias[M]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let cols = sx[1];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        Ok(self.push(sx.to_vec(), data, Op::AddRowBias, vec![x, bias]))
    }

    /// `x[N×C×H×W] + bias[C]` broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / hw) % c])
            .collect();
        Ok(self.push(sx.to_vec(), data, Op::AddChannelBias, vec![x, bias]))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = kernels::conv2d_forward(&geo, self.value(input).data(), self.value(kernel).data());
        Ok(self.push(geo.out_shape(), out, Op::Conv2d(geo), vec![input, kernel]))
    }

    /// Training-mode batch norm over (N, H, W) per channel. Returns the
    /// batch statistics (biased variance) so callers can update running stats.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let (n, c, h, w) = kernels::nchw(self.shape(x), "batch_norm")?;
        self.check_affine(c, gamma, beta)?;
        let count = n * h * w;
        if count < 2 {
            return Err(Error::usage(format!(
                "training-mode batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let xs = self.value(x).data();
        let hw = h * w;
        let inv_count = S::one() / S::from_f64(count as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut acc = S::zero();
            for b in 0..n {
                for &v in &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    acc += v;
                }
            }
            mean[ch] = acc * inv_count;
            let mut acc = S::zero();
            for b in 0..n {
                for &v in &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    let d = v - mean[ch];
                    acc += d * d;
                }
            }
            var[ch] = acc * inv_count;
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, true);
        Ok((out, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<Var> {
        let (_, c, _, _) = kernels::nchw(self.shape(x), "batch_norm")?;
        self.check_affine(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: vec![c],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        Ok(self.normalize(x, gamma, beta, running_mean, &inv_std, false))
    }

    fn check_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        same_shape("batch_norm", &[c], self.shape(gamma))?;
        same_shape("batch_norm", &[c], self.shape(beta))
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], inv_std: &[S], train: bool) -> Var {
        let shape = self.shape(x).to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let mut x_hat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let ch = (i / hw) % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            x_hat.push(xh);
            out.push(g[ch] * xh + b[ch]);
        }
        let op = Op::BatchNorm {
            x_hat,
            inv_std: inv_std.to_vec(),
            train,
        };
        self.push(shape, out, op, vec![x, gamma, beta])
    }

    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (shape, out, argmax) = kernels::max_pool_forward(self.shape(x), self.value(x).data(), window, stride)?;
        Ok(self.push(shape, out, Op::MaxPool { argmax }, vec![x]))
    }

    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (shape, out) = kernels::avg_pool_forward(self.shape(x), self.value(x).data(), window, stride)?;
        Ok(self.push(shape, out, Op::AvgPool { window, stride }, vec![x]))
    }

    /// Mean over spatial positions: `[N×C×H×W] -> [N×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = kernels::nchw(self.shape(x), "global_avg_pool")?;
        let hw = h * w;
        let scale = S::one() / S::from_f64(hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<S>() * scale)
            .collect();
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool, vec![x]))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat_channels needs at least one input"))?;
        let (n, _, h, w) = kernels::nchw(self.shape(*first), "concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            channels.push(s[1]);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&self.value(p).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        Ok(self.push(vec![n, total, h, w], out, Op::Concat { channels }, parts.to_vec()))
    }

    /// Row-wise softmax of a matrix, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        let cols = s[1];
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(cols) {
            out.extend(softmax_row(row));
        }
        Ok(self.push(s.to_vec(), out, Op::Softmax, vec![x]))
    }

    /// Clears every leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Accumulates `d loss / d leaf` into every gradient-recording leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, None)
    }

    /// Like [`Graph::backward`] but only propagates along paths that reach
    /// one of `wrt`; other leaves are left untouched.
    pub fn backward_wrt(&mut self, loss: Var, wrt: &[Var]) -> Result<()> {
        self.backward_impl(loss, Some(wrt))
    }

    fn backward_impl(&mut self, loss: Var, wrt: Option<&[Var]>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut needed: Vec<bool> = (0..end).map(|i| self.nodes[i].value.requires_grad()).collect();
        if let Some(wrt) = wrt {
            let mut reaches = vec![false; end];
            for v in wrt {
                if v.0 < end {
                    reaches[v.0] = true;
                }
            }
            for i in 0..end {
                if !reaches[i] {
                    reaches[i] = self.nodes[i].inputs.iter().any(|v| reaches[v.0]);
                }
            }
            for (n, r) in needed.iter_mut().zip(reaches) {
                *n &= r;
            }
        }
        if !needed[loss.0] {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<S>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let want: Vec<bool> = node.inputs.iter().map(|v| needed[v.0]).collect();
            let input_grads = self.op_backward(i, &g, &want);
            for (input, ig) in self.nodes[i].inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    fn op_backward(&self, i: usize, g: &[S], want: &[bool]) -> Vec<Option<Vec<S>>> {
        let node = &self.nodes[i];
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let only = |k: usize, f: &dyn Fn() -> Vec<S>| -> Option<Vec<S>> { want[k].then(f) };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![only(0, &|| g.to_vec()), only(1, &|| g.to_vec())],
            Op::Sub => vec![only(0, &|| g.to_vec()), only(1, &|| g.iter().map(|&v| -v).collect())],
            Op::Mul => vec![
                only(0, &|| mul_elem(g, input(1).data())),
                only(1, &|| mul_elem(g, input(0).data())),
            ],
            Op::Scale(c) => vec![only(0, &|| g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar | Op::Reshape => vec![only(0, &|| g.to_vec())],
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                vec![
                    only(0, &|| {
                        let mut d = vec![S::zero(); m * k];
                        kernels::gemm_nt(m, n, k, g, b.data(), &mut d);
                        d
                    }),
                    only(1, &|| {
                        let mut d = vec![S::zero(); k * n];
                        kernels::gemm_tn(m, k, n, a.data(), g, &mut d);
                        d
                    }),
                ]
            }
            Op::AddRowBias => {
                let cols = input(1).len();
                vec![
                    only(0, &|| g.to_vec()),
                    only(1, &|| {
                        let mut d = vec![S::zero(); cols];
                        for row in g.chunks(cols) {
                            d.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                        }
                        d
                    }),
                ]
            }
            Op::AddChannelBias => {
                let s = input(0).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                vec![
                    only(0, &|| g.to_vec()),
                    only(1, &|| {
                        let mut d = vec![S::zero(); c];
                        for (p, plane) in g.chunks(hw).enumerate() {
                            d[p % c] += plane.iter().copied().sum::<S>();
                        }
                        d
                    }),
                ]
            }
            Op::Conv2d(geo) => {
                let (di, dk) = kernels::conv2d_backward(geo, input(0).data(), input(1).data(), g, want[0], want[1]);
                vec![di, dk]
            }
            Op::Relu => vec![only(0, &|| {
                g.iter()
                    .zip(input(0).data())
                    .map(|(&gv, &x)| if x > S::zero() { gv } else { S::zero() })
                    .collect()
            })],
            Op::LeakyRelu(slope) => vec![only(0, &|| {
                g.iter()
                    .zip(input(0).data())
                    .map(|(&gv, &x)| if x > S::zero() { gv } else { gv * *slope })
                    .collect()
            })],
            Op::BatchNorm { x_hat, inv_std, train } => {
                let s = input(0).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gamma = input(1).data();
                // Per-channel sums of dy and dy·x̂.
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for (p, (gp, xp)) in g.chunks(hw).zip(x_hat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                }
                let count = S::from_f64((n * hw) as f64);
                let dx = only(0, &|| {
                    g.iter()
                        .zip(x_hat)
                        .enumerate()
                        .map(|(i, (&gv, &xv))| {
                            let ch = (i / hw) % c;
                            let scale = gamma[ch] * inv_std[ch];
                            if *train {
                                scale * (gv - sum_g[ch] / count - xv * sum_gx[ch] / count)
                            } else {
                                scale * gv
                            }
                        })
                        .collect()
                });
                vec![dx, only(1, &|| sum_gx.clone()), only(2, &|| sum_g.clone())]
            }
            Op::MaxPool { argmax } => vec![only(0, &|| {
                let mut d = vec![S::zero(); input(0).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    d[idx] += gv;
                }
                d
            })],
            Op::AvgPool { window, stride } => vec![only(0, &|| {
                kernels::avg_pool_backward(input(0).shape(), node.value.shape(), g, *window, *stride)
            })],
            Op::GlobalAvgPool => vec![only(0, &|| {
                let s = input(0).shape();
                let hw = s[2] * s[3];
                let scale = S::one() / S::from_f64(hw as f64);
                let mut d = Vec::with_capacity(input(0).len());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv * scale, hw));
                }
                d
            })],
            Op::Concat { channels } => {
                let s = node.value.shape();
                let (n, total, hw) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                let mut out = Vec::with_capacity(channels.len());
                for (k, &c) in channels.iter().enumerate() {
                    if want[k] {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total + offset) * hw;
                            d.extend_from_slice(&g[start..start + c * hw]);
                        }
                        out.push(Some(d));
                    } else {
                        out.push(None);
                    }
                    offset += c;
                }
                out
            }
            Op::Softmax => vec![only(0, &|| {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                d
            })],
            Op::Log => vec![only(0, &|| {
                g.iter().zip(input(0).data()).map(|(&gv, &x)| gv / x).collect()
            })],
            Op::ClampMin(lo) => vec![only(0, &|| {
                g.iter()
                    .zip(input(0).data())
                    .map(|(&gv, &x)| if x < *lo { S::zero() } else { gv })
                    .collect()
            })],
            Op::Square => vec![only(0, &|| {
                g.iter()
                    .zip(input(0).data())
                    .map(|(&gv, &x)| S::from_f64(2.0) * x * gv)
                    .collect()
            })],
            Op::Sum => vec![only(0, &|| vec![g[0]; input(0).len()])],
            Op::Mean => vec![only(0, &|| {
                let n = input(0).len();
                vec![g[0] / S::from_f64(n as f64); n]
            })],
        }
    }
}

fn mul_elem<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
