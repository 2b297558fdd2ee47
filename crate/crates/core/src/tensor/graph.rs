use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Pow(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, T, T),
    /// `map[i]` is the output slot of input element `i`.
    Sum(Var, Arc<Vec<usize>>),
    /// `map[i]` is the input slot feeding output element `i`.
    Expand(Var, Arc<Vec<usize>>),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    AvgPool2(Var),
    IndexSelect(Var, Vec<usize>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d(a, b, _) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Pow(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a, _)
            | Op::Expand(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::AvgPool2(a)
            | Op::IndexSelect(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    name: &'static str,
}

/// Define-by-run tape. Every operation appends one node; [`Graph::backward`]
/// replays the adjoints once each, in reverse order of recording.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    detached: Vec<Var>,
    pinned: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            detached: Vec::new(),
            pinned: None,
        }
    }

    /// A graph whose `k`-th [`Graph::detach`] yields `values[k]` instead of
    /// its operand's value (when the shapes agree).
    pub fn with_pinned_detach(values: Vec<Tensor<T>>) -> Self {
        Self {
            pinned: Some(values),
            ..Self::new()
        }
    }

    /// Values of every stop-gradient node, in recording order.
    pub fn detached_values(&self) -> Vec<Tensor<T>> {
        self.detached
            .iter()
            .map(|&v| self.value(v).clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Tensor {
                grad: None,
                ..tensor
            },
            op: Op::Leaf,
            name: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    /// Records a leaf that never receives an adjoint.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
    ) -> Result<Var> {
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} (element {} of shape {:?})",
                name, bad, shape
            )));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.requires_grad(i));
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
            name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        self.push(name, shape, data, op)
    }

    /// Binary elementwise op with equal shapes or a scalar (single element)
    /// on either side.
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data): (Vec<usize>, Vec<T>) = if ta.shape == tb.shape {
            (
                ta.shape.clone(),
                ta.data
                    .iter()
                    .zip(&tb.data)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            )
        } else if tb.numel() == 1 {
            let y = tb.data[0];
            (ta.shape.clone(), ta.data.iter().map(|&x| f(x, y)).collect())
        } else if ta.numel() == 1 {
            let x = ta.data[0];
            (tb.shape.clone(), tb.data.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::shape(format!(
                "{}: shapes {:?} and {:?} differ",
                name, ta.shape, tb.shape
            )));
        };
        self.push(name, shape, data, op)
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data.iter().any(|&y| y == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("mul_scalar", a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                msg: "non-positive input".into(),
            });
        }
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: "negative input".into(),
            });
        }
        self.unary("sqrt", a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn pow(&mut self, a: Var, e: T) -> Result<Var> {
        self.unary("pow", a, |x| x.powf(e), Op::Pow(a, e))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// Clamps into `[lo, hi]`; the adjoint is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Stop-gradient: same value, recorded as a constant leaf.
    pub fn detach(&mut self, a: Var) -> Var {
        let pinned = self
            .pinned
            .as_ref()
            .and_then(|p| p.get(self.detached.len()))
            .filter(|p| p.shape() == self.shape(a));
        let t = pinned.cloned().unwrap_or_else(|| self.value(a).clone());
        let v = self.constant(t);
        self.detached.push(v);
        v
    }

    /// Dispatches an elementwise operator by name.
    pub fn elementwise(&mut self, op: &str, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::shape(format!("{op} needs a second operand")));
        match op {
            "add" => self.add(a, need_b()?),
            "sub" => self.sub(a, need_b()?),
            "mul" => self.mul(a, need_b()?),
            "div" => self.div(a, need_b()?),
            "pow" => {
                let e = self.value(need_b()?).clone();
                if e.numel() != 1 {
                    return Err(Error::shape("pow exponent must be a scalar"));
                }
                self.pow(a, e.item())
            }
            "exp" => self.exp(a),
            "log" => self.log(a),
            "sqrt" => self.sqrt(a),
            "neg" => self.neg(a),
            "relu" => self.relu(a),
            "sigmoid" => self.sigmoid(a),
            other => Err(Error::config(format!("unknown elementwise op {other:?}"))),
        }
    }

    fn check_axes(&self, a: Var, axes: &[usize]) -> Result<()> {
        let nd = self.value(a).ndim();
        for (i, &ax) in axes.iter().enumerate() {
            if ax >= nd || axes[..i].contains(&ax) {
                return Err(Error::shape(format!(
                    "invalid axis {} for shape {:?}",
                    ax,
                    self.shape(a)
                )));
            }
        }
        Ok(())
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(a, axes)?;
        let t = self.value(a);
        let (map, out_shape) = kernels::reduction_map(&t.shape, axes);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&x, &m) in t.data.iter().zip(&map) {
            out[m] += x;
        }
        self.push("sum", out_shape, out, Op::Sum(a, Arc::new(map)))
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(a, axes)?;
        let count: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        if count == 0 {
            return Err(Error::shape("mean over an empty extent"));
        }
        let s = self.sum(a, axes)?;
        self.mul_scalar(s, T::one() / T::lit(count as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).ndim()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).ndim()).collect();
        self.mean(a, &axes)
    }

    /// Dispatches a reduction by name.
    pub fn reduce(&mut self, op: &str, a: Var, axes: &[usize]) -> Result<Var> {
        match op {
            "sum" => self.sum(a, axes),
            "mean" => self.mean(a, axes),
            other => Err(Error::config(format!("unknown reduction {other:?}"))),
        }
    }

    /// Broadcasts `a` to `shape` along `axes`; `a`'s shape must equal
    /// `shape` with those axes removed. Adjoint is [`Graph::sum`].
    pub fn expand(&mut self, a: Var, shape: &[usize], axes: &[usize]) -> Result<Var> {
        let (map, reduced) = kernels::reduction_map(shape, axes);
        if reduced.as_slice() != self.shape(a) || axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(Error::shape(format!(
                "cannot expand {:?} to {:?} along {:?}",
                self.shape(a),
                shape,
                axes
            )));
        }
        let src = &self.value(a).data;
        let data = map.iter().map(|&m| src[m]).collect();
        self.push("expand", shape.to_vec(), data, Op::Expand(a, Arc::new(map)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                t.shape, shape
            )));
        }
        let data = t.data.clone();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::shape(format!(
                "transpose needs 2-D, got {:?}",
                t.shape
            )));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let data = kernels::transpose(r, c, &t.data);
        self.push("transpose", vec![c, r], data, Op::Transpose(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(m, k, n, &ta.data, &tb.data, &mut out);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// 2-D cross-correlation of `[B,C,H,W]` input with `[O,C,kh,kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        if ti.ndim() != 4 || tk.ndim() != 4 {
            return Err(Error::shape(format!(
                "conv2d needs 4-D operands, got {:?} and {:?}",
                ti.shape, tk.shape
            )));
        }
        let [batch, in_ch, h, w] = [ti.shape[0], ti.shape[1], ti.shape[2], ti.shape[3]];
        let [out_ch, kc, kh, kw] = [tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]];
        if kc != in_ch {
            return Err(Error::shape(format!(
                "conv2d: input has {in_ch} channels, kernel expects {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d: non-integral output extent for {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            out_ch,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let mut out = vec![T::zero(); batch * out_ch * geom.oh * geom.ow];
        kernels::conv2d_forward(&geom, &ti.data, &tk.data, &mut out);
        self.push(
            "conv2d",
            vec![batch, out_ch, geom.oh, geom.ow],
            out,
            Op::Conv2d(input, kernel, geom),
        )
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 4 || t.shape[2] < 2 || t.shape[3] < 2 {
            return Err(Error::shape(format!("avg_pool2 on {:?}", t.shape)));
        }
        let [b, c, h, w] = [t.shape[0], t.shape[1], t.shape[2], t.shape[3]];
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let src = &t.data[p * h * w..][..h * w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                    dst[y * ow + x] = quarter
                        * (src[r0 + 2 * x]
                            + src[r0 + 2 * x + 1]
                            + src[r1 + 2 * x]
                            + src[r1 + 2 * x + 1]);
                }
            }
        }
        self.push("avg_pool2", vec![b, c, oh, ow], out, Op::AvgPool2(a))
    }

    /// Per-channel spatial mean: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::shape(format!(
                "global_avg_pool needs 4-D, got {s:?}"
            )));
        }
        if s[2] * s[3] == 0 {
            return Err(Error::shape("global_avg_pool over an empty spatial extent"));
        }
        self.mean(a, &[2, 3])
    }

    /// Gathers rows of the leading axis: `out[i] = a[indices[i]]`.
    pub fn index_select0(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() == 0 {
            return Err(Error::shape("index_select0 on a scalar"));
        }
        let inner: usize = t.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= t.shape[0] {
                return Err(Error::shape(format!(
                    "index {i} out of range for leading extent {}",
                    t.shape[0]
                )));
            }
            data.extend_from_slice(&t.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = t.shape.clone();
        shape[0] = indices.len();
        self.push(
            "index_select0",
            shape,
            data,
            Op::IndexSelect(a, indices.to_vec()),
        )
    }

    /// Populates gradients of every grad-requiring node reachable from
    /// `loss`. Earlier gradients on this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lt.shape
            )));
        }
        if !lt.requires_grad {
            return Err(Error::Backward(
                "loss is detached from every parameter".into(),
            ));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "adjoint of {} (node {}, element {})",
                    self.nodes[id].name, id, bad
                )));
            }
            self.propagate(id, &g, &mut grads);
            self.nodes[id].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].value.requires_grad;

        // Adds `f(i)` into the adjoint of `v`, folding scalar-broadcast
        // operands back to a single element.
        let acc = |v: Var, f: &dyn Fn(usize) -> T, grads: &mut [Option<Vec<T>>]| {
            if !wants(v) {
                return;
            }
            let n = val(v).numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            if n == g.len() {
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += f(i);
                }
            } else {
                let mut total = T::zero();
                for i in 0..g.len() {
                    total += f(i);
                }
                slot[0] += total;
            }
        };
        // Element `i` of an operand that may be scalar-broadcast.
        let at = |t: &Tensor<T>, i: usize| if t.numel() == 1 { t.data[0] } else { t.data[i] };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|i| g[i], grads);
                acc(*b, &|i| g[i], grads);
            }
            Op::Sub(a, b) => {
                acc(*a, &|i| g[i], grads);
                acc(*b, &|i| -g[i], grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &|i| g[i] * at(tb, i), grads);
                acc(*b, &|i| g[i] * at(ta, i), grads);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &|i| g[i] / at(tb, i), grads);
                acc(
                    *b,
                    &|i| {
                        let y = at(tb, i);
                        -g[i] * at(ta, i) / (y * y)
                    },
                    grads,
                );
            }
            Op::AddScalar(a) => acc(*a, &|i| g[i], grads),
            Op::MulScalar(a, s) => acc(*a, &|i| g[i] * *s, grads),
            Op::Neg(a) => acc(*a, &|i| -g[i], grads),
            Op::Exp(a) => acc(*a, &|i| g[i] * out.data[i], grads),
            Op::Log(a) => {
                let ta = val(*a);
                acc(*a, &|i| g[i] / ta.data[i], grads)
            }
            Op::Sqrt(a) => acc(*a, &|i| g[i] / (T::lit(2.0) * out.data[i]), grads),
            Op::Pow(a, e) => {
                let ta = val(*a);
                acc(*a, &|i| g[i] * *e * ta.data[i].powf(*e - T::one()), grads)
            }
            Op::Relu(a) => {
                let ta = val(*a);
                acc(
                    *a,
                    &|i| {
                        if ta.data[i] > T::zero() {
                            g[i]
                        } else {
                            T::zero()
                        }
                    },
                    grads,
                )
            }
            Op::Sigmoid(a) => acc(
                *a,
                &|i| {
                    let s = out.data[i];
                    g[i] * s * (T::one() - s)
                },
                grads,
            ),
            Op::Clamp(a, lo, hi) => {
                let ta = val(*a);
                acc(
                    *a,
                    &|i| {
                        let x = ta.data[i];
                        if x >= *lo && x <= *hi {
                            g[i]
                        } else {
                            T::zero()
                        }
                    },
                    grads,
                )
            }
            Op::Sum(a, map) => {
                if wants(*a) {
                    let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); map.len()]);
                    for (s, &m) in slot.iter_mut().zip(map.iter()) {
                        *s += g[m];
                    }
                }
            }
            Op::Expand(a, map) => {
                if wants(*a) {
                    let n = val(*a).numel();
                    let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); n]);
                    for (&gv, &m) in g.iter().zip(map.iter()) {
                        slot[m] += gv;
                    }
                }
            }
            Op::Reshape(a) => acc(*a, &|i| g[i], grads),
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
                    let gt = kernels::transpose(c, r, g);
                    acc(*a, &|i| gt[i], grads);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if wants(*a) {
                    // dA = G · Bᵀ
                    let bt = kernels::transpose(k, n, &tb.data);
                    let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); m * k]);
                    kernels::matmul_acc(m, n, k, g, &bt, slot);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let at_ = kernels::transpose(m, k, &ta.data);
                    let slot = grads[b.0].get_or_insert_with(|| vec![T::zero(); k * n]);
                    kernels::matmul_acc(k, m, n, &at_, g, slot);
                }
            }
            Op::Conv2d(input, kernel, geom) => {
                let (ti, tk) = (val(*input), val(*kernel));
                if wants(*input) {
                    let slot = grads[input.0].get_or_insert_with(|| vec![T::zero(); ti.numel()]);
                    kernels::conv2d_backward_input(geom, g, &tk.data, slot);
                }
                if wants(*kernel) {
                    let slot = grads[kernel.0].get_or_insert_with(|| vec![T::zero(); tk.numel()]);
                    kernels::conv2d_backward_kernel(geom, g, &ti.data, slot);
                }
            }
            Op::AvgPool2(a) => {
                if wants(*a) {
                    let ta = val(*a);
                    let [b, c, h, w] = [ta.shape[0], ta.shape[1], ta.shape[2], ta.shape[3]];
                    let (oh, ow) = (out.shape[2], out.shape[3]);
                    let quarter = T::lit(0.25);
                    let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); ta.numel()]);
                    for p in 0..b * c {
                        let dst = &mut slot[p * h * w..][..h * w];
                        let src = &g[p * oh * ow..][..oh * ow];
                        for y in 0..oh {
                            for x in 0..ow {
                                let q = quarter * src[y * ow + x];
                                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                                dst[r0 + 2 * x] += q;
                                dst[r0 + 2 * x + 1] += q;
                                dst[r1 + 2 * x] += q;
                                dst[r1 + 2 * x + 1] += q;
                            }
                        }
                    }
                }
            }
            Op::IndexSelect(a, indices) => {
                if wants(*a) {
                    let ta = val(*a);
                    let inner: usize = ta.shape[1..].iter().product();
                    let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); ta.numel()]);
                    for (row, &src) in indices.iter().enumerate() {
                        for j in 0..inner {
                            slot[src * inner + j] += g[row * inner + j];
                        }
                    }
                }
            }
        }
    }
}

/// Logistic function kept inside the open unit interval: saturated
/// arguments give the nearest representable values to 0 and 1.
#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    y.max(T::min_positive_value())
        .min(T::one() - T::epsilon() / T::lit(2.0))
}
