//! Reverse-mode tape. Every op evaluates eagerly, appends a node holding its
//! value, and knows how to push an output gradient back to its inputs. The
//! tape is consumed by [`Graph::backward`].

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{conv_backward, conv_forward, elu_scalar, Conv2dGeometry};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Conv {
        x: Var,
        k: Var,
        b: Var,
        geom: Conv2dGeometry,
        cols: Option<Vec<T>>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddLast(Var, Var),
    MulLast(Var, Var),
    AddRowChannel(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Elu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Gather {
        x: Var,
        idx: Rc<[usize]>,
    },
    Concat(Vec<Var>),
    SumRows(Var),
    SumAll(Var),
    Reshape(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param => "param",
            Op::Conv { .. } => "conv2d",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddLast(..) => "add_last",
            Op::MulLast(..) => "mul_last",
            Op::AddRowChannel(..) => "add_row_channel",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Elu(_) => "elu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Gather { .. } => "gather",
            Op::Concat(_) => "concat",
            Op::SumRows(_) => "sum_rows",
            Op::SumAll(_) => "sum_all",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// One forward pass over a borrowed parameter store.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    overrides: HashMap<ParamId, Tensor<T>>,
    nonfinite: Option<&'static str>,
    data_init: bool,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            overrides: HashMap::new(),
            nonfinite: None,
            data_init: false,
        }
    }

    /// Lets layers with data-dependent initialization (actnorm) initialize
    /// themselves from the activations seen during this pass.
    pub fn allow_data_init(&mut self, allow: bool) {
        self.data_init = allow;
    }

    pub fn data_init_allowed(&self) -> bool {
        self.data_init
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(op.name());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fails if any op so far produced a NaN or infinity.
    pub fn check(&self) -> Result<()> {
        match self.nonfinite {
            None => Ok(()),
            Some(op) => Err(Error::NonFinite(format!("{op} output"))),
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Leaf for a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = match self.overrides.get(&id) {
            Some(t) => t.clone(),
            None => self.store.value(id).clone(),
        };
        let v = self.push(value, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    /// Substitutes a parameter's value for the rest of this pass. Used for
    /// data-dependent initialization, which computes values mid-forward.
    pub fn override_param(&mut self, id: ParamId, value: Tensor<T>) {
        assert!(
            !self.param_vars.contains_key(&id),
            "parameter overridden after first use"
        );
        assert_eq!(value.shape(), self.store.value(id).shape());
        self.overrides.insert(id, value);
    }

    pub fn overridden(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.overrides.get(&id)
    }

    pub fn take_overrides(&mut self) -> HashMap<ParamId, Tensor<T>> {
        std::mem::take(&mut self.overrides)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Var {
        let geom =
            Conv2dGeometry::new(self.shape(x), self.shape(k), stride, pad).unwrap_or_else(|e| panic!("conv2d: {e}"));
        assert_eq!(self.value(b).len(), geom.c_out, "conv2d bias size");
        let (out, cols) = conv_forward(self.value(x).data(), self.value(k).data(), self.value(b).data(), &geom);
        let out = Tensor::new(&geom.out_shape(), out).expect("conv output shape");
        self.push(out, Op::Conv { x, k, b, geom, cols })
    }

    /// `a . b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let [m, k] = *self.shape(a) else {
            panic!("matmul lhs must be 2-D, got {:?}", self.shape(a))
        };
        let [k2, n] = *self.shape(b) else {
            panic!("matmul rhs must be 2-D, got {:?}", self.shape(b))
        };
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            false,
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let out = Tensor::new(&[m, n], out).unwrap();
        self.push(out, Op::MatMul { a, b, m, k, n })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = transpose(self.value(a));
        self.push(out, Op::Transpose(a))
    }

    /// `x . w + b` with `x: [.., n_in]`, `w: [n_in, n_out]`, `b: [n_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n_in = *shape.last().unwrap();
        let rows = self.value(x).len() / n_in;
        let flat = self.reshape(x, &[rows, n_in]);
        let y = self.matmul(flat, w);
        let y = self.add_last(y, b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.shape(w)[1];
        self.reshape(y, &out_shape)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "{} shape mismatch", op.name());
        let out = self.value(a).zip_map(self.value(b), f);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn broadcast_last(&mut self, x: Var, v: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let c = self.value(v).len();
        assert_eq!(self.value(x).last_dim(), c, "{} channel mismatch", op.name());
        let vv = self.value(v).data();
        let xs = self.value(x);
        let data = xs
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(vv).map(|(&a, &b)| f(a, b)))
            .collect();
        let out = Tensor::new(xs.shape(), data).unwrap();
        self.push(out, op)
    }

    /// Adds a `[c]` vector to every position of an `[.., c]` tensor.
    pub fn add_last(&mut self, x: Var, v: Var) -> Var {
        self.broadcast_last(x, v, |a, b| a + b, Op::AddLast(x, v))
    }

    /// Multiplies every position of an `[.., c]` tensor by a `[c]` vector.
    pub fn mul_last(&mut self, x: Var, v: Var) -> Var {
        self.broadcast_last(x, v, |a, b| a * b, Op::MulLast(x, v))
    }

    /// Adds per-example channel vectors `v: [n, c]` to every position of
    /// `x: [n, .., c]`.
    pub fn add_row_channel(&mut self, x: Var, v: Var) -> Var {
        let [n, c] = *self.shape(v) else {
            panic!("add_row_channel vector must be [n, c]")
        };
        let xs = self.value(x);
        assert_eq!(xs.shape()[0], n, "add_row_channel batch mismatch");
        assert_eq!(xs.last_dim(), c, "add_row_channel channel mismatch");
        let per = xs.len() / n;
        let vv = self.value(v).data();
        let mut data = xs.data().to_vec();
        for (b, ex) in data.chunks_mut(per).enumerate() {
            let row = &vv[b * c..(b + 1) * c];
            for px in ex.chunks_mut(c) {
                for (a, &r) in px.iter_mut().zip(row) {
                    *a += r;
                }
            }
        }
        let out = Tensor::new(xs.shape(), data).unwrap();
        self.push(out, Op::AddRowChannel(x, v))
    }

    /// Adds a one-element tensor to every element.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "add_scalar needs a scalar");
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|a| a + sv);
        self.push(out, Op::AddScalar(x, s))
    }

    /// Broadcasts a one-element tensor to shape `[n]`.
    pub fn broadcast_scalar(&mut self, s: Var, n: usize) -> Var {
        let zeros = self.input(Tensor::zeros(&[n]));
        self.add_scalar(zeros, s)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|a| a * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_const(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|a| a + k);
        self.push(out, Op::AddConst(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(elu_scalar);
        self.push(out, Op::Elu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|a| a.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|a| a.exp());
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|a| a.ln());
        self.push(out, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|a| a * a);
        self.push(out, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|a| a.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// `out[i] = x[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data).expect("gather shape");
        self.push(out, Op::Gather { x, idx })
    }

    /// Selects `channels` (in order) from the last axis.
    pub fn select_last(&mut self, x: Var, channels: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = self.value(x).len() / c;
        let idx: Rc<[usize]> = (0..rows)
            .flat_map(|r| channels.iter().map(move |&ch| r * c + ch))
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = channels.len();
        self.gather(x, idx, &out_shape)
    }

    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Var {
        let channels: Vec<usize> = (start..end).collect();
        self.select_last(x, &channels)
    }

    /// Concatenates along the last axis. Leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.shape(parts[0]);
        let lead = lead[..lead.len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading shape mismatch");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, data).unwrap();
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Sums everything but the leading axis: `[n, ..] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let n = xs.shape()[0];
        let data = (0..n).map(|i| xs.row(i).iter().copied().sum()).collect();
        let out = Tensor::new(&[n], data).unwrap();
        self.push(out, Op::SumRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        if self.shape(x) == shape {
            return x;
        }
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.push(out, Op::Reshape(x))
    }

    /// Gradients of a one-element `loss` with respect to every node.
    pub fn backward(self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Conv { x, k, b, geom, cols } => {
                    let cg = conv_backward(
                        g.data(),
                        self.value(*x).data(),
                        cols.as_deref(),
                        self.value(*k).data(),
                        geom,
                    );
                    accumulate(&mut grads, *x, self.value(*x).shape(), cg.dx);
                    accumulate(&mut grads, *k, self.value(*k).shape(), cg.dkernel);
                    accumulate(&mut grads, *b, self.value(*b).shape(), cg.dbias);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        false,
                        true,
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        self.value(b).data(),
                        T::zero(),
                        &mut da,
                    );
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        true,
                        false,
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(a).data(),
                        g.data(),
                        T::zero(),
                        &mut db,
                    );
                    accumulate(&mut grads, a, &[m, k], da);
                    accumulate(&mut grads, b, &[k, n], db);
                }
                Op::Transpose(a) => {
                    let gt = transpose(&g);
                    accumulate_t(&mut grads, *a, gt);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.shape(), g.data().to_vec());
                    accumulate_t(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.shape(), g.data().iter().map(|&v| -v).collect());
                    accumulate_t(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |gv, bv| gv * bv);
                    let db = g.zip_map(self.value(*a), |gv, av| gv * av);
                    accumulate(&mut grads, *a, g.shape(), da.into_data());
                    accumulate(&mut grads, *b, g.shape(), db.into_data());
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let da = g.zip_map(bv, |gv, bv| gv / bv);
                    let db: Vec<T> = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .zip(bv.data())
                        .map(|((&gv, &y), &bv)| -gv * y / bv)
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), da.into_data());
                    accumulate(&mut grads, *b, g.shape(), db);
                }
                Op::AddLast(x, v) => {
                    let c = self.value(*v).len();
                    let mut dv = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        dv.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    accumulate(&mut grads, *v, self.value(*v).shape(), dv);
                    accumulate_t(&mut grads, *x, g);
                }
                Op::MulLast(x, v) => {
                    let vv = self.value(*v).data();
                    let c = vv.len();
                    let mut dv = vec![T::zero(); c];
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, xrow) in g.data().chunks(c).zip(self.value(*x).data().chunks(c)) {
                        for j in 0..c {
                            dv[j] += grow[j] * xrow[j];
                            dx.push(grow[j] * vv[j]);
                        }
                    }
                    accumulate(&mut grads, *v, self.value(*v).shape(), dv);
                    accumulate(&mut grads, *x, g.shape(), dx);
                }
                Op::AddRowChannel(x, v) => {
                    let [n, c] = *self.shape(*v) else { unreachable!() };
                    let per = g.len() / n;
                    let mut dv = vec![T::zero(); n * c];
                    for (b, ex) in g.data().chunks(per).enumerate() {
                        for px in ex.chunks(c) {
                            for (d, &p) in dv[b * c..(b + 1) * c].iter_mut().zip(px) {
                                *d += p;
                            }
                        }
                    }
                    accumulate(&mut grads, *v, &[n, c], dv);
                    accumulate_t(&mut grads, *x, g);
                }
                Op::AddScalar(x, s) => {
                    accumulate(&mut grads, *s, &[1], vec![g.sum()]);
                    accumulate_t(&mut grads, *x, g);
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    accumulate(&mut grads, *x, g.shape(), g.data().iter().map(|&v| v * k).collect());
                }
                Op::AddConst(x) | Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, &shape, g.into_data());
                }
                Op::Elu(x) => {
                    let d = g.zip_map(
                        &node.value,
                        |gv, y| if y > T::zero() { gv } else { gv * (y + T::one()) },
                    );
                    accumulate(&mut grads, *x, g.shape(), d.into_data());
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y));
                    accumulate(&mut grads, *x, g.shape(), d.into_data());
                }
                Op::Exp(x) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y);
                    accumulate(&mut grads, *x, g.shape(), d.into_data());
                }
                Op::Log(x) => {
                    let d = g.zip_map(self.value(*x), |gv, xv| gv / xv);
                    accumulate(&mut grads, *x, g.shape(), d.into_data());
                }
                Op::Square(x) => {
                    let two = T::lit(2.0);
                    let d = g.zip_map(self.value(*x), |gv, xv| two * gv * xv);
                    accumulate(&mut grads, *x, g.shape(), d.into_data());
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let d = g.zip_map(
                        self.value(*x),
                        |gv, xv| {
                            if xv >= lo && xv <= hi {
                                gv
                            } else {
                                T::zero()
                            }
                        },
                    );
                    accumulate(&mut grads, *x, g.shape(), d.into_data());
                }
                Op::Gather { x, idx } => {
                    let xs = self.value(*x);
                    let mut dx = vec![T::zero(); xs.len()];
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        dx[i] += gv;
                    }
                    accumulate(&mut grads, *x, xs.shape(), dx);
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        accumulate(&mut grads, p, &shape, dp);
                        offset += w;
                    }
                }
                Op::SumRows(x) => {
                    let xs = self.value(*x);
                    let n = xs.shape()[0];
                    let per = xs.len() / n;
                    let dx = (0..n).flat_map(|i| std::iter::repeat_n(g.data()[i], per)).collect();
                    accumulate(&mut grads, *x, xs.shape(), dx);
                }
                Op::SumAll(x) => {
                    let xs = self.value(*x);
                    accumulate(&mut grads, *x, xs.shape(), vec![g.data()[0]; xs.len()]);
                }
            }
        }
        Grads {
            grads,
            param_vars: self.param_vars,
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, d).expect("gradient shape")),
    }
}

fn accumulate_t<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn transpose<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let [m, n] = *a.shape() else {
        panic!("transpose needs a 2-D tensor")
    };
    let src = a.data();
    Tensor::from_fn(&[n, m], |i| src[(i % m) * n + i / m])
}

/// Result of [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Grads<T> {
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// `None` when the parameter did not take part in the pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars.get(&id).and_then(|v| self.var(*v))
    }

    /// Adds `scale * grad` into each trainable parameter's `grad` slot.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, scale: T) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if let Some(g) = self.param(id) {
                let p = store.get_mut(id);
                if !p.trainable {
                    continue;
                }
                for (dst, &src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += scale * src;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone(), true)).collect();
        (s, ids)
    }

    #[test]
    fn square_gradient() {
        let (store, ids) = store_with(&[("w", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        let y = g.square(w);
        let grads = g.backward(y);
        assert_eq!(grads.param(ids[0]).unwrap().data(), &[6.0]);
    }

    #[test]
    fn shared_use_accumulates() {
        let (store, ids) = store_with(&[("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap())]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        let w2 = g.param(ids[0]);
        assert_eq!(w, w2);
        let p = g.mul(w, w2);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert_eq!(grads.param(ids[0]).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn nonfinite_is_reported() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
        let _ = g.log(x);
        assert!(matches!(g.check(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn concat_and_select_roundtrip() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let a = g.select_last(x, &[0, 2]);
        let b = g.select_last(x, &[1, 3]);
        let cat = g.concat_last(&[a, b]);
        assert_eq!(g.shape(cat), &[2, 3, 4]);
        let back = g.select_last(cat, &[0, 2, 1, 3]);
        assert_eq!(g.value(back), g.value(x));
    }
}
