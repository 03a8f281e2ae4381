use crate::kernels::{conv2d_output_size, conv_transpose2d_output_size, Window};
use crate::{Scalar, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Linear,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm,
    Relu,
    Sigmoid,
    Exp,
    Abs,
    Square,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sum,
    Reshape,
    Concat,
    SoftmaxCrossEntropy,
}

impl OpKind {
    /// Every differentiable operation.
    pub const DIFFERENTIABLE: [OpKind; 18] = [
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::InstanceNorm,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv2d_transpose",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        win: Window,
        cout: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        // read pattern over the *output* image
        win: Window,
        cin: usize,
    },
    InstanceNorm {
        x: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Abs(usize),
    Square(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sum(usize),
    Reshape(usize),
    Concat {
        a: usize,
        b: usize,
        a_cols: usize,
        b_cols: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Exp(_) => OpKind::Exp,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Sum(_) => OpKind::Sum,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a computation, in creation (and therefore topological) order.
///
/// A graph is built for one forward evaluation, differentiated once and
/// dropped. It is not shared between threads.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of `kind` (upstream gradient scaled by 1.5).
    /// Only meant for exercising gradient checkers.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        let kind = op.kind();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `out[b, o] = sum_i x[b, i] * w[o, i] + bias[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(TensorError::shape(
                "linear",
                &[xs, ws, bs],
                "input [batch, in], weight [out, in], bias [out]",
            ));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(batch * out);
        let bias = self.value(b).data();
        for _ in 0..batch {
            y.extend_from_slice(bias);
        }
        T::gemm(batch, inp, out, self.value(x).data(), false, self.value(w).data(), true, &mut y, true);
        self.push(vec![batch, out], y, Op::Linear { x: x.0, w: w.0, b: b.0 }, &[x.0, w.0, b.0])
    }

    /// Zero-padded strided 2-D convolution, kernel `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] {
            return Err(TensorError::shape(
                "conv2d",
                &[&xs, &ks],
                "input [batch, cin, h, w] and square kernel [cout, cin, k, k]",
            ));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ks[0], ks[2]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::shape("conv2d", &[self.shape(b)], format!("bias [{cout}]")));
            }
        }
        let oh = conv2d_output_size(h, k, stride, padding)?;
        let ow = conv2d_output_size(w, k, stride, padding)?;
        let win = Window {
            channels: cin,
            h,
            w,
            k,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let (rows, plane) = (win.col_rows(), win.col_cols());
        let mut cols = vec![T::zero(); n * rows * plane];
        let mut y = vec![T::zero(); n * cout * plane];
        {
            let xv = self.value(x).data();
            let kv = self.value(kernel).data();
            for s in 0..n {
                let c = &mut cols[s * rows * plane..(s + 1) * rows * plane];
                win.im2col(&xv[s * cin * h * w..(s + 1) * cin * h * w], c);
                T::gemm(cout, rows, plane, kv, false, c, false, &mut y[s * cout * plane..(s + 1) * cout * plane], false);
            }
            if let Some(b) = bias {
                add_channel_bias(&mut y, self.value(b).data(), plane);
            }
        }
        let mut inputs = vec![x.0, kernel.0];
        inputs.extend(bias.map(|b| b.0));
        self.push(
            vec![n, cout, oh, ow],
            y,
            Op::Conv2d {
                x: x.0,
                k: kernel.0,
                bias: bias.map(|b| b.0),
                win,
                cout,
                cols,
            },
            &inputs,
        )
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] in its input),
    /// kernel `[cin, cout, k, k]`. `output_padding` (0 or 1, below `stride`)
    /// extends the bottom/right edge so that strided upsampling can hit an
    /// exact target size.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 || ks[0] != xs[1] || ks[2] != ks[3] {
            return Err(TensorError::shape(
                "conv2d_transpose",
                &[&xs, &ks],
                "input [batch, cin, h, w] and square kernel [cin, cout, k, k]",
            ));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ks[1], ks[2]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::shape("conv2d_transpose", &[self.shape(b)], format!("bias [{cout}]")));
            }
        }
        let out_h = conv_transpose2d_output_size(h, k, stride, padding, output_padding)?;
        let out_w = conv_transpose2d_output_size(w, k, stride, padding, output_padding)?;
        let win = Window {
            channels: cout,
            h: out_h,
            w: out_w,
            k,
            stride,
            pad: padding,
            oh: h,
            ow: w,
        };
        debug_assert_eq!(conv2d_output_size(out_h, k, stride, padding).ok(), Some(h));
        let (rows, plane) = (win.col_rows(), win.col_cols());
        let out_plane = out_h * out_w;
        let mut cols = vec![T::zero(); rows * plane];
        let mut y = vec![T::zero(); n * cout * out_plane];
        {
            let xv = self.value(x).data();
            let kv = self.value(kernel).data();
            for s in 0..n {
                T::gemm(rows, cin, plane, kv, true, &xv[s * cin * plane..(s + 1) * cin * plane], false, &mut cols, false);
                win.col2im(&cols, &mut y[s * cout * out_plane..(s + 1) * cout * out_plane]);
            }
            if let Some(b) = bias {
                add_channel_bias(&mut y, self.value(b).data(), out_plane);
            }
        }
        let mut inputs = vec![x.0, kernel.0];
        inputs.extend(bias.map(|b| b.0));
        self.push(
            vec![n, cout, out_h, out_w],
            y,
            Op::ConvTranspose2d {
                x: x.0,
                k: kernel.0,
                bias: bias.map(|b| b.0),
                win,
                cin,
            },
            &inputs,
        )
    }

    /// Per-(sample, channel) normalization to zero mean and unit variance,
    /// without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape("instance_norm", &[&xs], "[batch, c, h, w]"));
        }
        if !(eps > 0.0) {
            return Err(TensorError::Usage(format!("instance_norm eps must be positive, got {eps}")));
        }
        let plane = xs[2] * xs[3];
        let slices = xs[0] * xs[1];
        let eps = T::from_f64_lossy(eps);
        let count = T::from_usize(plane).unwrap();
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); slices];
        for s in 0..slices {
            let src = &xv[s * plane..(s + 1) * plane];
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = (var + eps).sqrt().recip();
            inv_std[s] = inv;
            for (o, &v) in xhat[s * plane..(s + 1) * plane].iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
        self.push(xs, xhat.clone(), Op::InstanceNorm { x: x.0, xhat, inv_std }, &[x.0])
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x);
        let shape = value.shape().to_vec();
        let data = value.data().iter().map(|&v| f(v)).collect();
        self.push(shape, data, op, &[x.0])
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x.0), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x.0), |v| {
            if v >= T::zero() {
                (T::one() + (-v).exp()).recip()
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x.0), |v| v.exp())
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x.0), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.unary(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.unary(x, Op::AddScalar(x.0), |v| v + c)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape(name, &[av.shape(), bv.shape()], "identical shapes"));
        }
        let shape = av.shape().to_vec();
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(shape, data, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum(x.0), &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x);
        if shape.iter().product::<usize>() != value.numel() || shape.contains(&0) {
            return Err(TensorError::shape("reshape", &[value.shape(), shape], format!("{} elements", value.numel())));
        }
        let data = value.data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x.0), &[x.0])
    }

    /// Concatenates two `[batch, n]` matrices along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asz, bsz) = (self.shape(a), self.shape(b));
        if asz.len() != 2 || bsz.len() != 2 || asz[0] != bsz[0] {
            return Err(TensorError::shape("concat", &[asz, bsz], "[batch, n] and [batch, m]"));
        }
        let (rows, a_cols, b_cols) = (asz[0], asz[1], bsz[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (a_cols + b_cols));
        for r in 0..rows {
            data.extend_from_slice(&av[r * a_cols..(r + 1) * a_cols]);
            data.extend_from_slice(&bv[r * b_cols..(r + 1) * b_cols]);
        }
        self.push(
            vec![rows, a_cols + b_cols],
            data,
            Op::Concat {
                a: a.0,
                b: b.0,
                a_cols,
                b_cols,
            },
            &[a.0, b.0],
        )
    }

    /// Mean over the batch of `-log softmax(logits[b])[labels[b]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                &[ls, &[labels.len()]],
                "logits [batch, classes] and one label per row",
            ));
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Dimension {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            total = total - (row[label] - max - denom.ln());
        }
        let mean = total / T::from_usize(labels.len().max(1)).unwrap();
        self.push(
            vec![1],
            vec![mean],
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            &[logits.0],
        )
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Every node reachable from `loss` that depends on a parameter is visited
    /// exactly once; contributions from multiple uses of a value are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            visited += 1;
            if self.fault == Some(node.op.kind()) {
                let k = T::from_f64_lossy(1.5);
                g.iter_mut().for_each(|v| *v = *v * k);
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            stats: BackwardStats { visited },
        })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let wants = |j: usize| self.nodes[j].requires_grad;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.nodes[*x].value.shape(), self.nodes[*w].value.shape());
                let (batch, inp, out) = (xs[0], xs[1], ws[0]);
                if wants(*x) {
                    let dx = slot(grads, &self.nodes, *x);
                    T::gemm(batch, out, inp, g, false, self.nodes[*w].value.data(), false, dx, true);
                }
                if wants(*w) {
                    let dw = slot(grads, &self.nodes, *w);
                    T::gemm(out, batch, inp, g, true, self.nodes[*x].value.data(), false, dw, true);
                }
                if wants(*b) {
                    let db = slot(grads, &self.nodes, *b);
                    for row in g.chunks_exact(out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, bias, win, cout, cols } => {
                let (rows, plane) = (win.col_rows(), win.col_cols());
                let n = self.nodes[*x].value.shape()[0];
                let in_size = win.channels * win.h * win.w;
                let out_size = cout * plane;
                if wants(*k) {
                    let dk = slot(grads, &self.nodes, *k);
                    for s in 0..n {
                        T::gemm(
                            *cout,
                            plane,
                            rows,
                            &g[s * out_size..(s + 1) * out_size],
                            false,
                            &cols[s * rows * plane..(s + 1) * rows * plane],
                            true,
                            dk,
                            true,
                        );
                    }
                }
                if wants(*x) {
                    let kv = self.nodes[*k].value.data();
                    let mut dcols = vec![T::zero(); rows * plane];
                    let dx = slot(grads, &self.nodes, *x);
                    for s in 0..n {
                        T::gemm(rows, *cout, plane, kv, true, &g[s * out_size..(s + 1) * out_size], false, &mut dcols, false);
                        win.col2im(&dcols, &mut dx[s * in_size..(s + 1) * in_size]);
                    }
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        let db = slot(grads, &self.nodes, *b);
                        channel_sums(g, db, plane);
                    }
                }
            }
            Op::ConvTranspose2d { x, k, bias, win, cin } => {
                let (rows, plane) = (win.col_rows(), win.col_cols());
                let n = self.nodes[*x].value.shape()[0];
                let out_size = win.channels * win.h * win.w;
                let in_size = cin * plane;
                let mut dcols = vec![T::zero(); rows * plane];
                let need_x = wants(*x);
                let need_k = wants(*k);
                if need_x || need_k {
                    let xv = self.nodes[*x].value.data();
                    let kv = self.nodes[*k].value.data();
                    for s in 0..n {
                        win.im2col(&g[s * out_size..(s + 1) * out_size], &mut dcols);
                        if need_x {
                            let dx = slot(grads, &self.nodes, *x);
                            T::gemm(*cin, rows, plane, kv, false, &dcols, false, &mut dx[s * in_size..(s + 1) * in_size], true);
                        }
                        if need_k {
                            let dk = slot(grads, &self.nodes, *k);
                            T::gemm(*cin, plane, rows, &xv[s * in_size..(s + 1) * in_size], false, &dcols, true, dk, true);
                        }
                    }
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        let db = slot(grads, &self.nodes, *b);
                        channel_sums(g, db, win.h * win.w);
                    }
                }
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                if wants(*x) {
                    let s = self.nodes[*x].value.shape();
                    let plane = s[2] * s[3];
                    let count = T::from_usize(plane).unwrap();
                    let dx = slot(grads, &self.nodes, *x);
                    for (sl, &inv) in inv_std.iter().enumerate() {
                        let range = sl * plane..(sl + 1) * plane;
                        let (gs, xh) = (&g[range.clone()], &xhat[range.clone()]);
                        let sum_g: T = gs.iter().copied().sum();
                        let sum_gx: T = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        let scale = inv / count;
                        for ((d, &gv), &xv) in dx[range].iter_mut().zip(gs).zip(xh) {
                            *d = *d + scale * (count * gv - sum_g - xv * sum_gx);
                        }
                    }
                }
            }
            Op::Relu(x) => self.elementwise(*x, g, grads, |j, gv| {
                if self.nodes[*x].value.data()[j] > T::zero() {
                    gv
                } else {
                    T::zero()
                }
            }),
            Op::Sigmoid(x) => self.elementwise(*x, g, grads, |j, gv| gv * y[j] * (T::one() - y[j])),
            Op::Exp(x) => self.elementwise(*x, g, grads, |j, gv| gv * y[j]),
            Op::Abs(x) => {
                let xv = self.nodes[*x].value.data();
                self.elementwise(*x, g, grads, |j, gv| {
                    if xv[j] > T::zero() {
                        gv
                    } else if xv[j] < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Square(x) => {
                let xv = self.nodes[*x].value.data();
                let two = T::from_f64_lossy(2.0);
                self.elementwise(*x, g, grads, |j, gv| two * xv[j] * gv)
            }
            Op::Add(a, b) => {
                self.elementwise(*a, g, grads, |_, gv| gv);
                self.elementwise(*b, g, grads, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.elementwise(*a, g, grads, |_, gv| gv);
                self.elementwise(*b, g, grads, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.elementwise(*a, g, grads, |j, gv| gv * bv[j]);
                self.elementwise(*b, g, grads, |j, gv| gv * av[j]);
            }
            Op::Scale(x, c) => self.elementwise(*x, g, grads, |_, gv| gv * *c),
            Op::AddScalar(x) | Op::Reshape(x) => self.elementwise(*x, g, grads, |_, gv| gv),
            Op::Sum(x) => self.elementwise(*x, g, grads, |_, _| g[0]),
            Op::Concat { a, b, a_cols, b_cols } => {
                let width = a_cols + b_cols;
                if wants(*a) {
                    let da = slot(grads, &self.nodes, *a);
                    for (dst, row) in da.chunks_exact_mut(*a_cols).zip(g.chunks_exact(width)) {
                        for (d, &v) in dst.iter_mut().zip(&row[..*a_cols]) {
                            *d = *d + v;
                        }
                    }
                }
                if wants(*b) {
                    let db = slot(grads, &self.nodes, *b);
                    for (dst, row) in db.chunks_exact_mut(*b_cols).zip(g.chunks_exact(width)) {
                        for (d, &v) in dst.iter_mut().zip(&row[*a_cols..]) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let classes = probs.len() / labels.len();
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let dl = slot(grads, &self.nodes, *logits);
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let j = b * classes + c;
                            let onehot = if c == label { T::one() } else { T::zero() };
                            dl[j] = dl[j] + scale * (probs[j] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Accumulates `f(j, g[j])` into the gradient of same-shaped input `x`.
    fn elementwise(&self, x: usize, g: &[T], grads: &mut [Option<Vec<T>>], f: impl Fn(usize, T) -> T) {
        if !self.nodes[x].requires_grad {
            return;
        }
        let dx = slot(grads, &self.nodes, x);
        if g.len() == 1 && dx.len() != 1 {
            // broadcast from a reduction
            for (j, d) in dx.iter_mut().enumerate() {
                *d = *d + f(j, g[0]);
            }
        } else {
            for (j, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                *d = *d + f(j, gv);
            }
        }
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], j: usize) -> &'a mut Vec<T> {
    grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.numel()])
}

fn add_channel_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    let channels = bias.len();
    for (idx, chunk) in y.chunks_exact_mut(plane).enumerate() {
        let b = bias[idx % channels];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn channel_sums<T: Scalar>(g: &[T], db: &mut [T], plane: usize) {
    let channels = db.len();
    for (idx, chunk) in g.chunks_exact(plane).enumerate() {
        let c = idx % channels;
        db[c] = db[c] + chunk.iter().copied().sum::<T>();
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Non-leaf nodes whose backward rule ran.
    pub visited: usize,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    stats: BackwardStats,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer of `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value, zero when the loss does not
    /// depend on it.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = graph.shape(v);
        match self.get(v) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient of `v` out.
    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn stats(&self) -> BackwardStats {
        self.stats
    }
}
