use super::conv::{self, col2im, im2col, matmul, matmul_nt, matmul_tn, Geometry};
use super::{Real, Result, Tensor, TensorError, INSTANCE_NORM_EPS, LOG_CLAMP_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    ConcatChannels(Vec<Var>),
    UpsampleNearest(Var, usize),
    ResizeBilinear(Var),
    InstanceNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Mean(Var),
    Sum(Var),
    MeanSquaredError(Var, Var),
    MeanAbsError(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Append-only record of differentiable operations.
///
/// Nodes are stored in execution order, so every node's inputs precede it
/// and a single reverse sweep is a valid topological traversal. Gradients
/// of leaves accumulate additively; gradients of intermediate nodes are
/// released once they have been propagated.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Option<T> {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, op))
    }

    fn binary(&mut self, opname: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(opname, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { x * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Natural log of the input clamped to `[LOG_CLAMP_EPS, 1]`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let lo = T::lit(LOG_CLAMP_EPS);
        self.unary(a, |x| clamp(x, lo, T::one()).ln(), Op::Log(a))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_channels",
            detail: "nothing to concatenate".into(),
        })?;
        self.check(first)?;
        let [n, _, h, w] = self.value(first).dims4("concat_channels")?;
        let mut total_c = 0;
        for &p in parts {
            self.check(p)?;
            let [pn, pc, ph, pw] = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                data.extend_from_slice(&v.data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatChannels(parts.to_vec())))
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        self.check(a)?;
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_nearest",
                detail: "factor must be at least 1".into(),
            });
        }
        let [n, c, h, w] = self.value(a).dims4("upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    data.push(plane[(y / factor) * w + x / factor]);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::UpsampleNearest(a, factor)))
    }

    /// Bilinear resize with half-pixel centres (edge-clamped).
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(a)?;
        let [n, c, h, w] = self.value(a).dims4("resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidShape(vec![n, c, out_h, out_w]));
        }
        let ys = bilinear_taps(h, out_h);
        let xs = bilinear_taps(w, out_w);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1, ly) in &ys {
                for &(x0, x1, lx) in &xs {
                    let ly = T::lit(ly);
                    let lx = T::lit(lx);
                    let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                    data.push(top * (T::one() - ly) + bot * ly);
                }
            }
        }
        let value = Tensor::new(&[n, c, out_h, out_w], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::ResizeBilinear(a)))
    }

    /// Per-sample, per-channel normalization followed by a learnable affine
    /// map (`gain`, `bias` of shape `[C]`).
    pub fn instance_norm(&mut self, input: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check(input)?;
        self.check(gain)?;
        self.check(bias)?;
        let [n, c, h, w] = self.value(input).dims4("instance_norm")?;
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "instance_norm",
                    lhs: self.shape(input).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let plane = h * w;
        let count = T::from_usize(plane).expect("plane size");
        let eps = T::lit(INSTANCE_NORM_EPS);
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(x.len());
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let xs = &x[off..off + plane];
                let mut mean = T::zero();
                for &v in xs {
                    mean += v;
                }
                mean = mean / count;
                let mut var = T::zero();
                for &v in xs {
                    let d = v - mean;
                    var += d * d;
                }
                var = var / count;
                let istd = T::one() / (var + eps).sqrt();
                inv_std.push(istd);
                for &v in xs {
                    let xh = (v - mean) * istd;
                    normalized.push(xh);
                    out.push(g[ch] * xh + b[ch]);
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[input, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::InstanceNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        let m = ordered_sum(v.data()) / T::from_usize(v.numel()).expect("count");
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(m), rg, Op::Mean(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = ordered_sum(self.value(a).data());
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(a)))
    }

    /// `mean((a − b)²)` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut acc = T::zero();
        for (&p, &q) in x.iter().zip(y) {
            let d = p - q;
            acc += d * d;
        }
        let m = acc / T::from_usize(x.len()).expect("count");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(m), rg, Op::MeanSquaredError(a, b)))
    }

    /// `mean(|a − b|)` over all elements.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mae", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut acc = T::zero();
        for (&p, &q) in x.iter().zip(y) {
            acc += (p - q).abs();
        }
        let m = acc / T::from_usize(x.len()).expect("count");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(m), rg, Op::MeanAbsError(a, b)))
    }

    /// 2-D cross-correlation. `input: [N,C,H,W]`, `kernel: [F,C,kh,kw]`,
    /// `bias: [F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, geo, f) = self.conv2d_geometry(input, kernel, bias, stride, padding)?;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let in_step = geo.channels * geo.height * geo.width;
        let out_step = f * geo.col_cols();
        let mut out = vec![T::zero(); n * out_step];
        let mut cols = vec![T::zero(); geo.col_rows() * geo.col_cols()];
        for s in 0..n {
            im2col(&x[s * in_step..(s + 1) * in_step], &geo, &mut cols);
            matmul(
                f,
                geo.col_rows(),
                geo.col_cols(),
                k,
                &cols,
                T::zero(),
                &mut out[s * out_step..(s + 1) * out_step],
            );
        }
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.value(b).data(), geo.col_cols());
        }
        let value = Tensor::new(&[n, f, geo.out_h, geo.out_w], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    fn conv2d_geometry(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<(usize, Geometry, usize)> {
        self.check(input)?;
        self.check(kernel)?;
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [f, kc, kh, kw] = self.value(kernel).dims4("conv2d")?;
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [f] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(kernel).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geo = Geometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: conv::conv2d_output_size(h, kh, stride, padding)?,
            out_w: conv::conv2d_output_size(w, kw, stride, padding)?,
        };
        Ok((n, geo, f))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// kernel. `input: [N,Fin,H,W]`, `kernel: [Fin,Cout,kh,kw]`, `bias: [Cout]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, geo, fin) = self.conv_transpose2d_geometry(input, kernel, bias, stride, padding)?;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let in_step = fin * geo.col_cols();
        let out_step = geo.channels * geo.height * geo.width;
        let mut out = vec![T::zero(); n * out_step];
        let mut cols = vec![T::zero(); geo.col_rows() * geo.col_cols()];
        for s in 0..n {
            // cols = kᵀ · x_s, then scatter onto the (larger) output image
            matmul_tn(
                geo.col_rows(),
                fin,
                geo.col_cols(),
                k,
                &x[s * in_step..(s + 1) * in_step],
                T::zero(),
                &mut cols,
            );
            col2im(&cols, &geo, &mut out[s * out_step..(s + 1) * out_step]);
        }
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.value(b).data(), geo.height * geo.width);
        }
        let value = Tensor::new(&[n, geo.channels, geo.height, geo.width], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            rg,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Geometry of the *forward* convolution whose adjoint this is: the
    /// output image plays the role of the conv input.
    fn conv_transpose2d_geometry(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<(usize, Geometry, usize)> {
        self.check(input)?;
        self.check(kernel)?;
        let [n, fin, h, w] = self.value(input).dims4("conv_transpose2d")?;
        let [kf, cout, kh, kw] = self.value(kernel).dims4("conv_transpose2d")?;
        if kf != fin {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    lhs: self.shape(kernel).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geo = Geometry {
            channels: cout,
            height: conv::conv_transpose2d_output_size(h, kh, stride, padding)?,
            width: conv::conv_transpose2d_output_size(w, kw, stride, padding)?,
            kh,
            kw,
            stride,
            padding,
            out_h: h,
            out_w: w,
        };
        Ok((n, geo, fin))
    }

    /// Mean per-pixel cross-entropy of softmax(`logits`) against integer
    /// labels. `logits: [N,K,H,W]`, `labels.len() == N·H·W`, ids `< K`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let [n, k, h, w] = self.value(logits).dims4("softmax_cross_entropy")?;
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for logits of shape {:?}", labels.len(), self.shape(logits)),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut loss = T::zero();
        for s in 0..n {
            for p in 0..plane {
                let at = |c: usize| (s * k + c) * plane + p;
                let mut mx = z[at(0)];
                for c in 1..k {
                    mx = mx.max(z[at(c)]);
                }
                let mut denom = T::zero();
                for c in 0..k {
                    let e = (z[at(c)] - mx).exp();
                    probs[at(c)] = e;
                    denom += e;
                }
                for c in 0..k {
                    probs[at(c)] = probs[at(c)] / denom;
                }
                let label = labels[s * plane + p];
                loss += denom.ln() - (z[at(label)] - mx);
            }
        }
        loss = loss / T::from_usize(n * plane).expect("count");
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Populates `∂loss/∂v` for every `requires_grad` node reachable from
    /// `loss`. Leaves that require gradients but are not reached receive a
    /// zero buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if self.nodes[loss.0].requires_grad {
            self.accumulate(loss, vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (v, contrib) in self.input_grads(i, &g) {
                self.accumulate(v, contrib);
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += *b;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Vector-Jacobian products of node `i` for each of its inputs that
    /// requires a gradient.
    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(*b) {
                    out.push((*b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect()));
                }
                if wants(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect()));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&d| d * *c).collect())),
            Op::AddScalar(a) => out.push((*a, g.to_vec())),
            Op::Relu(a) => out.push((
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect(),
            )),
            Op::LeakyRelu(a, slope) => out.push((
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { d * *slope })
                    .collect(),
            )),
            Op::Tanh(a) => out.push((
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * (T::one() - y * y))
                    .collect(),
            )),
            Op::Sigmoid(a) => out.push((
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect(),
            )),
            Op::Log(a) => {
                let lo = T::lit(LOG_CLAMP_EPS);
                out.push((
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&d, &x)| if x < lo || x > T::one() { T::zero() } else { d / x })
                        .collect(),
                ))
            }
            Op::ConcatChannels(parts) => {
                let [n, total_c, h, w] = node.value.dims4("concat_channels").expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.shape()[1];
                    if wants(p) {
                        let mut gp = Vec::with_capacity(n * pc * plane);
                        for s in 0..n {
                            let start = (s * total_c + offset) * plane;
                            gp.extend_from_slice(&g[start..start + pc * plane]);
                        }
                        out.push((p, gp));
                    }
                    offset += pc;
                }
            }
            Op::UpsampleNearest(a, factor) => {
                let [n, c, h, w] = self.nodes[a.0].value.dims4("upsample").expect("rank 4");
                let (oh, ow) = (h * factor, w * factor);
                let mut ga = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            ga[p * h * w + (y / factor) * w + x / factor] += g[p * oh * ow + y * ow + x];
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::ResizeBilinear(a) => {
                let [n, c, h, w] = self.nodes[a.0].value.dims4("resize").expect("rank 4");
                let [_, _, oh, ow] = node.value.dims4("resize").expect("rank 4");
                let ys = bilinear_taps(h, oh);
                let xs = bilinear_taps(w, ow);
                let mut ga = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let plane = &mut ga[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let d = g[p * oh * ow + oy * ow + ox];
                            let ly = T::lit(ly);
                            let lx = T::lit(lx);
                            plane[y0 * w + x0] += d * (T::one() - ly) * (T::one() - lx);
                            plane[y0 * w + x1] += d * (T::one() - ly) * lx;
                            plane[y1 * w + x0] += d * ly * (T::one() - lx);
                            plane[y1 * w + x1] += d * ly * lx;
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::InstanceNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let [n, c, h, w] = node.value.dims4("instance_norm").expect("rank 4");
                let plane = h * w;
                let count = T::from_usize(plane).expect("plane");
                let gv = val(*gain);
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut dx = if wants(*input) { Some(vec![T::zero(); n * c * plane]) } else { None };
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        let gs = &g[off..off + plane];
                        let xh = &normalized[off..off + plane];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for (&d, &x) in gs.iter().zip(xh) {
                            sum_d += d;
                            sum_dx += d * x;
                        }
                        dbias[ch] += sum_d;
                        dgain[ch] += sum_dx;
                        if let Some(dx) = dx.as_mut() {
                            // d x̂ = gain·d ; dx = istd·(dx̂ − mean(dx̂) − x̂·mean(dx̂·x̂))
                            let k = gv[ch] * inv_std[s * c + ch];
                            let mean_d = sum_d / count;
                            let mean_dx = sum_dx / count;
                            for (j, (&d, &x)) in gs.iter().zip(xh).enumerate() {
                                dx[off + j] = k * (d - mean_d - x * mean_dx);
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if wants(*gain) {
                    out.push((*gain, dgain));
                }
                if wants(*bias) {
                    out.push((*bias, dbias));
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let d = g[0] / T::from_usize(n).expect("count");
                out.push((*a, vec![d; n]));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.nodes[a.0].value.numel()])),
            Op::MeanSquaredError(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let k = g[0] * T::lit(2.0) / T::from_usize(x.len()).expect("count");
                let diff: Vec<T> = x.iter().zip(y).map(|(&p, &q)| k * (p - q)).collect();
                if wants(*b) {
                    out.push((*b, diff.iter().map(|&d| -d).collect()));
                }
                if wants(*a) {
                    out.push((*a, diff));
                }
            }
            Op::MeanAbsError(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let k = g[0] / T::from_usize(x.len()).expect("count");
                let sgn: Vec<T> = x
                    .iter()
                    .zip(y)
                    .map(|(&p, &q)| {
                        if p > q {
                            k
                        } else if p < q {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if wants(*b) {
                    out.push((*b, sgn.iter().map(|&d| -d).collect()));
                }
                if wants(*a) {
                    out.push((*a, sgn));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (n, geo, f) = self
                    .conv2d_geometry(*input, *kernel, *bias, *stride, *padding)
                    .expect("validated in forward");
                let x = val(*input);
                let k = val(*kernel);
                let (rows, ncols) = (geo.col_rows(), geo.col_cols());
                let in_step = geo.channels * geo.height * geo.width;
                let out_step = f * ncols;
                let mut cols = vec![T::zero(); rows * ncols];
                let mut dk = wants(*kernel).then(|| vec![T::zero(); f * rows]);
                let mut dx = wants(*input).then(|| vec![T::zero(); n * in_step]);
                let mut dcols = vec![T::zero(); rows * ncols];
                for s in 0..n {
                    let gs = &g[s * out_step..(s + 1) * out_step];
                    if let Some(dk) = dk.as_mut() {
                        im2col(&x[s * in_step..(s + 1) * in_step], &geo, &mut cols);
                        matmul_nt(f, ncols, rows, gs, &cols, T::one(), dk);
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul_tn(rows, f, ncols, k, gs, T::zero(), &mut dcols);
                        col2im(&dcols, &geo, &mut dx[s * in_step..(s + 1) * in_step]);
                    }
                }
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, dk));
                }
                if let Some(b) = bias.filter(|&b| wants(b)) {
                    out.push((b, channel_sums(g, n, f, ncols)));
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (n, geo, fin) = self
                    .conv_transpose2d_geometry(*input, *kernel, *bias, *stride, *padding)
                    .expect("validated in forward");
                let x = val(*input);
                let k = val(*kernel);
                let (rows, ncols) = (geo.col_rows(), geo.col_cols());
                let in_step = fin * ncols;
                let out_step = geo.channels * geo.height * geo.width;
                let mut cols = vec![T::zero(); rows * ncols];
                let mut dk = wants(*kernel).then(|| vec![T::zero(); fin * rows]);
                let mut dx = wants(*input).then(|| vec![T::zero(); n * in_step]);
                for s in 0..n {
                    im2col(&g[s * out_step..(s + 1) * out_step], &geo, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        matmul(fin, rows, ncols, k, &cols, T::zero(), &mut dx[s * in_step..(s + 1) * in_step]);
                    }
                    if let Some(dk) = dk.as_mut() {
                        matmul_nt(fin, ncols, rows, &x[s * in_step..(s + 1) * in_step], &cols, T::one(), dk);
                    }
                }
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, dk));
                }
                if let Some(b) = bias.filter(|&b| wants(b)) {
                    out.push((b, channel_sums(g, n, geo.channels, geo.height * geo.width)));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let [n, k, h, w] = self.nodes[logits.0].value.dims4("ce").expect("rank 4");
                let plane = h * w;
                let scale = g[0] / T::from_usize(n * plane).expect("count");
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for s in 0..n {
                    for p in 0..plane {
                        dz[(s * k + labels[s * plane + p]) * plane + p] -= scale;
                    }
                }
                out.push((*logits, dz));
            }
        }
        out
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn clamp<T: Real>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Left-to-right sum; the fixed order keeps training traces reproducible.
fn ordered_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = T::zero();
    for &x in xs {
        acc += x;
    }
    acc
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for s in 0..n {
        for (ch, slot) in sums.iter_mut().enumerate() {
            let off = (s * c + ch) * plane;
            *slot += ordered_sum(&g[off..off + plane]);
        }
    }
    sums
}

/// For each output index: (low source index, high source index, weight of high).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_sums_a_full_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn delta_kernels_are_identities() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.3 - 1.0).unwrap());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap());
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let z = tape.conv_transpose2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn conv_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]).unwrap());
        let k = tape.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        let y = tape.conv2d(x, k, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        let z = tape.conv_transpose2d(y, k, None, 2, 0).unwrap();
        assert_eq!(tape.shape(z), &[1, 1, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
        let k = tape.constant(Tensor::zeros(&[2, 2, 3, 3]).unwrap());
        let err = tape.conv2d(x, k, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 1.0, 1.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn duplicate_use_doubles_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.2, -0.4, 0.9]));
        let y = tape.tanh(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let single = tape.grad(x).unwrap().to_vec();

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.2, -0.4, 0.9]));
        let y = tape.tanh(x).unwrap();
        let yy = tape.add(y, y).unwrap();
        let s = tape.sum(yy).unwrap();
        tape.backward(s).unwrap();
        for (d, s) in tape.grad(x).unwrap().iter().zip(&single) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(x), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn instance_norm_of_constant_channel_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 3], 4.0).unwrap());
        let g = tape.constant(Tensor::ones(&[2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        let y = tape.instance_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.1, 0.7, -3.0]));
        let m = tape.mse(x, x).unwrap();
        assert_eq!(tape.scalar(m), Some(0.0));
    }

    #[test]
    fn log_clamps_its_argument() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, -1.0, 2.0]));
        let y = tape.log(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - LOG_CLAMP_EPS.ln()).abs() < 1e-12);
        assert_eq!(v[1], v[0]);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // two classes with logits (0, ln 3): p = (1/4, 3/4)
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 2, 1, 1], &[0.0, 3f64.ln()]));
        let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((tape.scalar(l).unwrap() - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(tape.softmax_cross_entropy(z, &[2]).is_err());
    }

    #[test]
    fn upsample_and_bilinear_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64).unwrap());
        let u = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.value(u).data()[..4], [0.0, 0.0, 1.0, 1.0]);
        let b = tape.resize_bilinear(x, 2, 2).unwrap();
        assert_eq!(tape.value(b), tape.value(x));
        let c = tape.resize_bilinear(x, 4, 3).unwrap();
        assert_eq!(tape.shape(c), &[1, 1, 4, 3]);
    }
}
