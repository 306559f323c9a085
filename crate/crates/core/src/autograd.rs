//! Tape-based reverse-mode differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every node that depends on a leaf created with
//! `requires_grad = true`. Fused loss terms enter the tape through
//! [`Tape::scalar_fn`], which stores the analytic gradient computed alongside
//! the value.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array3, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};

pub type Tensor = ArrayD<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;
const MINMAX_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, transpose_b: bool },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Slice { src: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    BroadcastTo(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Relu(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    MinMaxColumns(usize),
    ScalarFn { input: usize, local_grad: Tensor },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    id: usize,
    tape: &'t Tape,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed back.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(IxDyn(v.shape().as_slice())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            tape: self,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a scalar-valued function whose gradient with respect to
    /// `input` was computed together with its value.
    pub fn scalar_fn<'t>(&'t self, input: Var<'t>, value: f64, local_grad: Tensor) -> Var<'t> {
        debug_assert_eq!(local_grad.shape(), input.shape().as_slice());
        let rg = self.grad_flag(&[input.id]);
        self.push(
            Tensor::from_elem(IxDyn(&[]), value),
            Op::ScalarFn {
                input: input.id,
                local_grad,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::ones(nodes[output.id].value.raw_dim()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut send = |i: usize, gi: Tensor| {
                if nodes[i].requires_grad {
                    accumulate(&mut grads[i], gi);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, unbroadcast(g.clone(), val(*a).shape()));
                    send(*b, unbroadcast(g.clone(), val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, unbroadcast(g.clone(), val(*a).shape()));
                    send(*b, unbroadcast(-&g, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, unbroadcast(&g * val(*b), val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, unbroadcast(&g * val(*a), val(*b).shape()));
                    }
                }
                Op::Scale(a, c) => send(*a, g.mapv(|x| x * c)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let m = bv.shape()[0];
                    let p = bv.shape()[1];
                    let a_std = av.as_standard_layout();
                    let a2 = a_std.view().into_shape_with_order((av.len() / m, m)).unwrap();
                    let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                    let g_std = g.as_standard_layout();
                    let g2 = g_std.view().into_shape_with_order((g.len() / p, p)).unwrap();
                    if nodes[*a].requires_grad {
                        let ga = g2.dot(&b2.t());
                        send(*a, ga.into_shape_with_order(IxDyn(av.shape())).unwrap());
                    }
                    if nodes[*b].requires_grad {
                        send(*b, a2.t().dot(&g2).into_dyn());
                    }
                }
                Op::BatchMatMul { a, b, transpose_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (a3, b3, g3) = (as_batches(av), as_batches(bv), as_batches(&g));
                    if nodes[*a].requires_grad {
                        let ga = if *transpose_b {
                            batched(&g3, &b3, false, false)
                        } else {
                            batched(&g3, &b3, false, true)
                        };
                        send(*a, ga.into_shape_with_order(IxDyn(av.shape())).unwrap());
                    }
                    if nodes[*b].requires_grad {
                        let gb = if *transpose_b {
                            batched(&g3, &a3, true, false)
                        } else {
                            batched(&a3, &g3, true, false)
                        };
                        send(*b, gb.into_shape_with_order(IxDyn(bv.shape())).unwrap());
                    }
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    send(*a, g.permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned());
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    let g_std = g.as_standard_layout().into_owned();
                    send(*a, g_std.into_shape_with_order(IxDyn(&shape)).unwrap());
                }
                Op::Slice { src, axis, start } => {
                    let mut full = Tensor::zeros(val(*src).raw_dim());
                    let len = g.shape()[*axis];
                    full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                        .assign(&g);
                    send(*src, full);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if nodes[p].requires_grad {
                            let gp = g
                                .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                                .to_owned();
                            send(p, gp);
                        }
                        offset += len;
                    }
                }
                Op::BroadcastTo(a) => send(*a, unbroadcast(g.clone(), val(*a).shape())),
                Op::SumAxis(a, axis) => {
                    let shape = val(*a).shape().to_vec();
                    let b = g.insert_axis(Axis(*axis));
                    send(*a, b.broadcast(IxDyn(&shape)).unwrap().to_owned());
                }
                Op::MeanAxis(a, axis) => {
                    let shape = val(*a).shape().to_vec();
                    let n = shape[*axis] as f64;
                    let b = g.insert_axis(Axis(*axis)).mapv(|x| x / n);
                    send(*a, b.broadcast(IxDyn(&shape)).unwrap().to_owned());
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(val(*a), |gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    send(*a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(val(*a), |gi, &x| *gi *= gelu_grad(x));
                    send(*a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let y_std = y.as_standard_layout();
                    let ys = y_std.as_slice().unwrap();
                    let g_std = g.as_standard_layout();
                    let gs = g_std.as_slice().unwrap();
                    let mut out = vec![0.0; ys.len()];
                    for ((yr, gr), or) in ys.chunks(d).zip(gs.chunks(d)).zip(out.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    send(*a, Tensor::from_shape_vec(y.raw_dim(), out).unwrap());
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (gx, gg, gb) = layer_norm_backward(val(*x), val(*gamma), &g);
                    send(*x, gx);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::MinMaxColumns(a) => send(*a, minmax_columns_backward(val(*a), &node.value, &g)),
                Op::ScalarFn { input, local_grad } => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    send(*input, local_grad.mapv(|x| x * s));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Sums `g` down to `shape` after numpy-style broadcasting.
fn unbroadcast(mut g: Tensor, shape: &[usize]) -> Tensor {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Views a rank >= 2 tensor as `[batch, rows, cols]`.
fn as_batches(t: &Tensor) -> Array3<f64> {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let b = t.len() / (r * c).max(1);
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, r, c))
        .unwrap()
}

/// Per-batch `op(a) * op(b)` with optional transposes.
fn batched(a: &Array3<f64>, b: &Array3<f64>, ta: bool, tb: bool) -> Array3<f64> {
    let (batch, ar, ac) = a.dim();
    let (_, br, bc) = b.dim();
    let (n, k1) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, p) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k1, k2, "batched matmul inner dimensions differ");
    let mut out = Array3::<f64>::zeros((batch, n, p));
    for i in 0..batch {
        let ai: ArrayView2<f64> = a.index_axis(Axis(0), i);
        let bi: ArrayView2<f64> = b.index_axis(Axis(0), i);
        let ai = if ta { ai.t() } else { ai };
        let bi = if tb { bi.t() } else { bi };
        general_mat_mul(1.0, &ai, &bi, 0.0, &mut out.index_axis_mut(Axis(0), i));
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let mut out = vec![0.0; xs.len()];
    for (row, o) in xs.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            o[j] = (row[j] - mean) * rstd * gs[j] + bs[j];
        }
    }
    Tensor::from_shape_vec(x.raw_dim(), out).unwrap()
}

fn layer_norm_backward(x: &Tensor, gamma: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = *x.shape().last().unwrap();
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let g_std = g.as_standard_layout();
    let gsl = g_std.as_slice().unwrap();
    let gam = gamma.as_slice().unwrap();
    let mut gx = vec![0.0; xs.len()];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for ((row, grow), out) in xs.chunks(d).zip(gsl.chunks(d)).zip(gx.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            gg[j] += grow[j] * xhat[j];
            gb[j] += grow[j];
            gxhat[j] = grow[j] * gam[j];
            m1 += gxhat[j];
            m2 += gxhat[j] * xhat[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            out[j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (
        Tensor::from_shape_vec(x.raw_dim(), gx).unwrap(),
        Tensor::from_shape_vec(gamma.raw_dim(), gg).unwrap(),
        Tensor::from_shape_vec(gamma.raw_dim(), gb).unwrap(),
    )
}

/// Column-wise min-max scaling of a `[rows, cols]` tensor. Constant columns map to 0.
pub fn minmax_columns(x: &Tensor) -> Tensor {
    let x2 = x.view().into_dimensionality::<Ix2>().expect("minmax_columns needs rank 2");
    let mut out = x2.to_owned();
    for mut col in out.columns_mut() {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = hi - lo;
        if !(range > MINMAX_EPS) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - lo) / range);
        }
    }
    out.into_dyn()
}

fn minmax_columns_backward(x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
    let y2 = y.view().into_dimensionality::<Ix2>().unwrap();
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
    let mut gx = ndarray::Array2::<f64>::zeros(x2.raw_dim());
    for c in 0..x2.ncols() {
        let col = x2.column(c);
        let (mut imin, mut imax) = (0, 0);
        for (i, &v) in col.iter().enumerate() {
            if v < col[imin] {
                imin = i;
            }
            if v > col[imax] {
                imax = i;
            }
        }
        let range = col[imax] - col[imin];
        if !(range > MINMAX_EPS) {
            continue;
        }
        let mut to_min = 0.0;
        let mut to_max = 0.0;
        for i in 0..col.len() {
            let gi = g2[[i, c]];
            gx[[i, c]] += gi / range;
            to_min += gi * (y2[[i, c]] - 1.0) / range;
            to_max -= gi * y2[[i, c]] / range;
        }
        gx[[imin, c]] += to_min;
        gx[[imax, c]] += to_max;
    }
    gx.into_dyn()
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(self) -> f64 {
        *self.value().iter().next().expect("item() on empty tensor")
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.grad_flag(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.grad_flag(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() * &*other.value();
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// `[..., n, m] x [m, p] -> [..., n, p]`.
    pub fn matmul(self, w: Var<'t>) -> Var<'t> {
        let (av, wv) = (self.value(), w.value());
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("matmul weight must be rank 2");
        let m = w2.nrows();
        assert_eq!(*av.shape().last().unwrap(), m, "matmul inner dimensions differ");
        let a_std = av.as_standard_layout();
        let a2 = a_std.view().into_shape_with_order((av.len() / m, m)).unwrap();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = w2.ncols();
        let out = a2.dot(&w2).into_shape_with_order(IxDyn(&shape)).unwrap();
        self.binary(w, out, Op::MatMul(self.id, w.id))
    }

    /// Batched product over identical leading dimensions. With `transpose_b`
    /// the right operand is `[..., p, m]` and is used transposed.
    pub fn bmm(self, other: Var<'t>, transpose_b: bool) -> Var<'t> {
        let (av, bv) = (self.value(), other.value());
        let nd = av.ndim();
        assert!(nd >= 2 && bv.ndim() == nd, "bmm needs equal ranks >= 2");
        assert_eq!(av.shape()[..nd - 2], bv.shape()[..nd - 2], "bmm batch dims differ");
        let out = batched(&as_batches(&av), &as_batches(&bv), false, transpose_b);
        let mut shape = av.shape()[..nd - 2].to_vec();
        shape.push(out.dim().1);
        shape.push(out.dim().2);
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.binary(
            other,
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                transpose_b,
            },
        )
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let v = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.unary(v, Op::Permute(self.id, axes.to_vec()))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape changes element count");
        self.unary(v, Op::Reshape(self.id))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.unary(v, Op::Slice { src: self.id, axis, start })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shapes differ");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.grad_flag(&ids);
        tape.push(out, Op::Concat { parts: ids, axis }, rg)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        let v = self
            .value()
            .broadcast(IxDyn(shape))
            .expect("incompatible broadcast")
            .to_owned();
        self.unary(v, Op::BroadcastTo(self.id))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let v = self.value().sum_axis(Axis(axis));
        self.unary(v, Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let v = self.value().mean_axis(Axis(axis)).expect("mean over empty axis");
        self.unary(v, Op::MeanAxis(self.id, axis))
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t> {
        let n = self.value().len();
        let flat = self.reshape(&[n]);
        flat.sum_axis(0)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn gelu(self) -> Var<'t> {
        let v = self.value().mapv(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let xs = x.as_standard_layout();
        let mut out = xs.as_slice().unwrap().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let v = Tensor::from_shape_vec(x.raw_dim(), out).unwrap();
        self.unary(v, Op::Softmax(self.id))
    }

    /// Layer normalization over the last axis with affine parameters `[d]`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
        let v = layer_norm_forward(&self.value(), &gamma.value(), &beta.value());
        let rg = self.tape.grad_flag(&[self.id, gamma.id, beta.id]);
        self.tape.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
            },
            rg,
        )
    }

    /// Column-wise min-max normalization of a `[rows, cols]` tensor.
    pub fn minmax_columns(self) -> Var<'t> {
        let v = minmax_columns(&self.value());
        self.unary(v, Op::MinMaxColumns(self.id))
    }
}
