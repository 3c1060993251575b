use crate::kernels::{self, ConvDims};
use crate::{DiffError, Result, Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary<T> {
    Relu,
    Sigmoid,
    Log,
    Exp,
    Abs,
    Softplus,
    Pow(T),
    Clamp(T, T),
    SmoothL1(T),
    Scale(T),
    AddScalar(T),
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Maximum,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        cols: Vec<T>,
    },
    Deconv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Unary {
        input: Var,
        kind: Unary<T>,
    },
    Binary {
        lhs: Var,
        rhs: Var,
        kind: Binary,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    PadRows {
        input: Var,
    },
    MaskRows {
        input: Var,
        valid: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Column {
        input: Var,
        col: usize,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Max {
        input: Var,
        argmax: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of primitive applications with per-node gradient accumulators.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// the backward pass is a single reverse sweep. A graph is single-threaded;
/// build one per sample or per thread.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(DiffError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `[t, c_in]` input, `[c_out, c_in, kernel]` weight, `[c_out]` bias, same padding.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let dims = self.conv_dims("conv1d", input, weight, bias, stride, false)?;
        let (out, cols) = kernels::conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &dims,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let cols = if self.rg(weight) { cols } else { Vec::new() };
        let value = Tensor::new(vec![dims.t_out, dims.c_out], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution, `[t, c_in]` to `[stride * t, c_out]`, weight
    /// `[c_in, c_out, kernel]`. Adjoint of [`Graph::conv1d`] with the same weight.
    pub fn deconv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let dims = self.conv_dims("deconv1d", input, weight, bias, stride, true)?;
        let out = kernels::deconv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &dims,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(vec![dims.t_out, dims.c_out], out)?;
        Ok(self.push(
            value,
            Op::Deconv1d {
                input,
                weight,
                bias,
                stride,
            },
            rg,
        ))
    }

    fn conv_dims(
        &self,
        op: &'static str,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        transposed: bool,
    ) -> Result<ConvDims> {
        let x = self.value(input).shape();
        let w = self.value(weight).shape();
        let b = self.value(bias).shape();
        if x.len() != 2 || w.len() != 3 || b.len() != 1 {
            return Err(DiffError::shape(
                op,
                format!("input {x:?}, weight {w:?}, bias {b:?}"),
            ));
        }
        if stride == 0 {
            return Err(DiffError::arg(op, "stride must be positive"));
        }
        if w[2] % 2 == 0 {
            return Err(DiffError::arg(op, format!("kernel size {} is even", w[2])));
        }
        let (c_in, c_out) = if transposed { (w[0], w[1]) } else { (w[1], w[0]) };
        if x[1] != c_in || b[0] != c_out {
            return Err(DiffError::shape(
                op,
                format!("input {x:?}, weight {w:?}, bias {b:?}"),
            ));
        }
        let t_out = if transposed {
            x[0] * stride
        } else {
            kernels::conv_out_len(x[0], stride)
        };
        Ok(ConvDims {
            t_in: x[0],
            c_in,
            c_out,
            kernel: w[2],
            stride,
            t_out,
        })
    }

    /// Normalises each row of `[t, c]` over its channels, then applies `gain`/`shift`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let x = self.value(input).shape().to_vec();
        let c = *x.last().unwrap_or(&0);
        if x.len() != 2 || c == 0 {
            return Err(DiffError::shape("layer_norm", format!("input {x:?}")));
        }
        same_shape("layer_norm", self.value(gain).shape(), &[c])?;
        same_shape("layer_norm", self.value(shift).shape(), &[c])?;
        if eps <= T::zero() {
            return Err(DiffError::arg("layer_norm", "eps must be positive"));
        }
        let (out, xhat, inv_std) = kernels::layer_norm_forward(
            self.value(input).data(),
            c,
            self.value(gain).data(),
            self.value(shift).data(),
            eps,
        );
        let rg = self.rg(input) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            Tensor::new(x, out)?,
            Op::LayerNorm {
                input,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn unary(&mut self, input: Var, kind: Unary<T>) -> Var {
        let f = |x: T| -> T {
            match kind {
                Unary::Relu => x.max(T::zero()),
                Unary::Sigmoid => sigmoid(x),
                Unary::Log => x.ln(),
                Unary::Exp => x.exp(),
                Unary::Abs => x.abs(),
                Unary::Softplus => softplus(x),
                Unary::Pow(p) => x.powf(p),
                Unary::Clamp(lo, hi) => x.max(lo).min(hi),
                Unary::SmoothL1(beta) => {
                    let a = x.abs();
                    if a < beta {
                        T::lit(0.5) * x * x / beta
                    } else {
                        a - T::lit(0.5) * beta
                    }
                }
                Unary::Scale(c) => x * c,
                Unary::AddScalar(c) => x + c,
            }
        };
        let value = self.value(input).map(f);
        let rg = self.rg(input);
        self.push(value, Op::Unary { input, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn pow(&mut self, x: Var, exponent: T) -> Var {
        self.unary(x, Unary::Pow(exponent))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    /// Huber-style penalty: `0.5 x² / beta` below `beta`, `|x| - 0.5 beta` above.
    pub fn smooth_l1(&mut self, x: Var, beta: T) -> Var {
        self.unary(x, Unary::SmoothL1(beta))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Unary::AddScalar(c))
    }

    fn binary(&mut self, lhs: Var, rhs: Var, kind: Binary) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "subtract",
            Binary::Mul => "multiply",
            Binary::Div => "divide",
            Binary::Minimum => "minimum",
            Binary::Maximum => "maximum",
        };
        same_shape(name, self.value(lhs).shape(), self.value(rhs).shape())?;
        let a = self.value(lhs);
        let b = self.value(rhs);
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Minimum => x.min(y),
                Binary::Maximum => x.max(y),
            })
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(value, Op::Binary { lhs, rhs, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Minimum)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Maximum)
    }

    /// Concatenates `[t, c_i]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| DiffError::arg("concat", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut width = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(DiffError::shape("concat", format!("{s:?} with {rows} rows")));
            }
            width += s[1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &v in inputs {
                let t = self.value(v);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    fn row_shape(&self, v: Var, rows: usize) -> Vec<usize> {
        let mut s = self.value(v).shape().to_vec();
        s[0] = rows;
        s
    }

    fn check_rowwise(&self, op: &'static str, v: Var) -> Result<usize> {
        match self.value(v).rank() {
            1 | 2 => Ok(self.value(v).cols()),
            r => Err(DiffError::shape(op, format!("rank {r} is not row-indexable"))),
        }
    }

    /// Rows `start .. start + len` of a vector or matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let w = self.check_rowwise("slice_rows", x)?;
        let rows = self.value(x).rows();
        if start + len > rows {
            return Err(DiffError::shape(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let data = self.value(x).data()[start * w..(start + len) * w].to_vec();
        let value = Tensor::new(self.row_shape(x, len), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { input: x, start }, rg))
    }

    /// Appends zero rows up to `total` rows.
    pub fn pad_rows(&mut self, x: Var, total: usize) -> Result<Var> {
        let w = self.check_rowwise("pad_rows", x)?;
        let rows = self.value(x).rows();
        if total < rows {
            return Err(DiffError::shape(
                "pad_rows",
                format!("cannot pad {rows} rows to {total}"),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        data.resize(total * w, T::zero());
        let value = Tensor::new(self.row_shape(x, total), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::PadRows { input: x }, rg))
    }

    /// Zeroes every row at or beyond `valid`.
    pub fn mask_rows(&mut self, x: Var, valid: usize) -> Result<Var> {
        let w = self.check_rowwise("mask_rows", x)?;
        let rows = self.value(x).rows();
        let mut value = self.value(x).clone();
        if valid < rows {
            for v in &mut value.data_mut()[valid * w..] {
                *v = T::zero();
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaskRows { input: x, valid }, rg))
    }

    /// Nearest-neighbour upsampling by `factor`, cropped to `out_len` rows.
    pub fn upsample_rows(&mut self, x: Var, factor: usize, out_len: usize) -> Result<Var> {
        let w = self.check_rowwise("upsample_rows", x)?;
        let rows = self.value(x).rows();
        if factor == 0 || out_len > rows * factor {
            return Err(DiffError::shape(
                "upsample_rows",
                format!("{rows} rows x{factor} cannot cover {out_len}"),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(out_len * w);
        for r in 0..out_len {
            let s = r / factor;
            data.extend_from_slice(&src[s * w..(s + 1) * w]);
        }
        let value = Tensor::new(self.row_shape(x, out_len), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample { input: x, factor }, rg))
    }

    /// Column `col` of a `[t, c]` matrix as a `[t]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || col >= s[1] {
            return Err(DiffError::shape("column", format!("column {col} of {s:?}")));
        }
        let data = self.value(x).data().iter().skip(col).step_by(s[1]).copied().collect();
        let value = Tensor::new(vec![s[0]], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Column { input: x, col }, rg))
    }

    /// Rows at `indices`, in order; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let w = self.check_rowwise("gather_rows", x)?;
        let rows = self.value(x).rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DiffError::shape(
                "gather_rows",
                format!("row {bad} of {rows}"),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let value = Tensor::new(self.row_shape(x, indices.len()), data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Gather {
                input: x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { input: x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { input: x }, rg)
    }

    /// Mean over all elements; zero for an empty tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len();
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v);
        let m = if n == 0 { T::zero() } else { s / T::from_usize(n).unwrap() };
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { input: x }, rg)
    }

    /// Maximum over all elements; the first maximal element takes the gradient.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(DiffError::arg("max", "empty tensor"));
        }
        let (argmax, m) = t
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, bv), (i, v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Max { input: x, argmax }, rg))
    }

    /// Accumulated gradient of `v`; zeros when `v` never received one.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.value(v).shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Back-propagates from a one-element `loss`, adding into the accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(DiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut pass: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        pass[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pass);
            match &mut self.grads[i] {
                Some(acc) => add_into(acc, &g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn deposit(&self, pass: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut pass[v.0] {
            Some(acc) => add_into(acc, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn zeros_for(&self, v: Var) -> Option<Vec<T>> {
        self.rg(v).then(|| vec![T::zero(); self.value(v).len()])
    }

    fn propagate(&self, i: usize, g: &[T], pass: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                cols,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let dims = ConvDims {
                    t_in: x.rows(),
                    c_in: x.cols(),
                    c_out: w.shape()[0],
                    kernel: w.shape()[2],
                    stride: *stride,
                    t_out: node.value.rows(),
                };
                let mut gi = self.zeros_for(*input);
                let mut gw = self.zeros_for(*weight);
                let mut gb = self.zeros_for(*bias);
                kernels::conv_backward(
                    g,
                    cols,
                    w.data(),
                    &dims,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, c) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                    if let Some(c) = c {
                        self.deposit(pass, v, c);
                    }
                }
            }
            Op::Deconv1d {
                input,
                weight,
                bias,
                stride,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let dims = ConvDims {
                    t_in: x.rows(),
                    c_in: x.cols(),
                    c_out: w.shape()[1],
                    kernel: w.shape()[2],
                    stride: *stride,
                    t_out: node.value.rows(),
                };
                let mut gi = self.zeros_for(*input);
                let mut gw = self.zeros_for(*weight);
                let mut gb = self.zeros_for(*bias);
                kernels::deconv_backward(
                    g,
                    x.data(),
                    w.data(),
                    &dims,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, c) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                    if let Some(c) = c {
                        self.deposit(pass, v, c);
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let mut gi = self.zeros_for(*input);
                let mut gg = self.zeros_for(*gain);
                let mut gs = self.zeros_for(*shift);
                kernels::layer_norm_backward(
                    g,
                    xhat,
                    inv_std,
                    self.value(*gain).data(),
                    c,
                    gi.as_deref_mut(),
                    gg.as_deref_mut(),
                    gs.as_deref_mut(),
                );
                for (v, c) in [(*input, gi), (*gain, gg), (*shift, gs)] {
                    if let Some(c) = c {
                        self.deposit(pass, v, c);
                    }
                }
            }
            Op::Unary { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let contrib = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&x, &y))| {
                        g * match *kind {
                            Unary::Relu => {
                                if x > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => y * (T::one() - y),
                            Unary::Log => x.recip(),
                            Unary::Exp => y,
                            Unary::Abs => {
                                if x > T::zero() {
                                    T::one()
                                } else if x < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Softplus => sigmoid(x),
                            Unary::Pow(p) => p * x.powf(p - T::one()),
                            Unary::Clamp(lo, hi) => {
                                if x >= lo && x <= hi {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::SmoothL1(beta) => {
                                if x.abs() < beta {
                                    x / beta
                                } else {
                                    x.signum()
                                }
                            }
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => T::one(),
                        }
                    })
                    .collect();
                self.deposit(pass, *input, contrib);
            }
            Op::Binary { lhs, rhs, kind } => {
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                if self.rg(*lhs) {
                    let contrib = (0..g.len())
                        .map(|k| match kind {
                            Binary::Add | Binary::Sub => g[k],
                            Binary::Mul => g[k] * b[k],
                            Binary::Div => g[k] / b[k],
                            Binary::Minimum => {
                                if a[k] <= b[k] {
                                    g[k]
                                } else {
                                    T::zero()
                                }
                            }
                            Binary::Maximum => {
                                if a[k] >= b[k] {
                                    g[k]
                                } else {
                                    T::zero()
                                }
                            }
                        })
                        .collect();
                    self.deposit(pass, *lhs, contrib);
                }
                if self.rg(*rhs) {
                    let contrib = (0..g.len())
                        .map(|k| match kind {
                            Binary::Add => g[k],
                            Binary::Sub => -g[k],
                            Binary::Mul => g[k] * a[k],
                            Binary::Div => -g[k] * a[k] / (b[k] * b[k]),
                            Binary::Minimum => {
                                if a[k] <= b[k] {
                                    T::zero()
                                } else {
                                    g[k]
                                }
                            }
                            Binary::Maximum => {
                                if a[k] >= b[k] {
                                    T::zero()
                                } else {
                                    g[k]
                                }
                            }
                        })
                        .collect();
                    self.deposit(pass, *rhs, contrib);
                }
            }
            Op::Concat { inputs } => {
                let rows = node.value.rows();
                let width = node.value.cols();
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).cols();
                    if self.rg(v) {
                        let mut contrib = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            contrib.extend_from_slice(&g[r * width + offset..r * width + offset + c]);
                        }
                        self.deposit(pass, v, contrib);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { input, start } => {
                let w = node.value.cols();
                let mut contrib = vec![T::zero(); self.value(*input).len()];
                contrib[start * w..start * w + g.len()].copy_from_slice(g);
                self.deposit(pass, *input, contrib);
            }
            Op::PadRows { input } => {
                let n = self.value(*input).len();
                self.deposit(pass, *input, g[..n].to_vec());
            }
            Op::MaskRows { input, valid } => {
                let w = node.value.cols();
                let mut contrib = g.to_vec();
                let cut = (valid * w).min(contrib.len());
                for v in &mut contrib[cut..] {
                    *v = T::zero();
                }
                self.deposit(pass, *input, contrib);
            }
            Op::Upsample { input, factor } => {
                let w = node.value.cols();
                let mut contrib = vec![T::zero(); self.value(*input).len()];
                for (r, row) in g.chunks_exact(w).enumerate() {
                    let s = r / factor;
                    add_into(&mut contrib[s * w..(s + 1) * w], row);
                }
                self.deposit(pass, *input, contrib);
            }
            Op::Column { input, col } => {
                let w = self.value(*input).cols();
                let mut contrib = vec![T::zero(); self.value(*input).len()];
                for (r, &gv) in g.iter().enumerate() {
                    contrib[r * w + col] = gv;
                }
                self.deposit(pass, *input, contrib);
            }
            Op::Gather { input, indices } => {
                let w = self.value(*input).cols();
                let mut contrib = vec![T::zero(); self.value(*input).len()];
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut contrib[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                }
                self.deposit(pass, *input, contrib);
            }
            Op::Reshape { input } => self.deposit(pass, *input, g.to_vec()),
            Op::Sum { input } => {
                let n = self.value(*input).len();
                self.deposit(pass, *input, vec![g[0]; n]);
            }
            Op::Mean { input } => {
                let n = self.value(*input).len();
                if n > 0 {
                    let v = g[0] / T::from_usize(n).unwrap();
                    self.deposit(pass, *input, vec![v; n]);
                }
            }
            Op::Max { input, argmax } => {
                let mut contrib = vec![T::zero(); self.value(*input).len()];
                contrib[*argmax] = g[0];
                self.deposit(pass, *input, contrib);
            }
        }
    }
}
