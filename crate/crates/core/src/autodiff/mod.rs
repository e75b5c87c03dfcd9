//! Reverse-mode automatic differentiation on `f64` ndarrays.
//!
//! The engine is deliberately small: a dynamically built graph of
//! reference-counted nodes, each holding its forward value and a closure
//! that maps the output gradient to per-parent gradients. Everything runs
//! single-threaded in `f64`, which keeps training runs bit-reproducible
//! and makes central-difference verification meaningful.
//!
//! Shape errors inside the engine are programming errors and panic; the
//! public model APIs validate shapes up front and return typed errors.

mod image;
mod loss;

pub use image::{avg_pool2, bilinear_resize, conv2d, deconv2x};
pub use loss::{bce_with_logits_mean, softmax_ce_ignore_mean};

use ndarray::{ArrayD, Axis, IxDyn, Slice};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type GradFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    id: u64,
    data: ArrayD<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
}

/// A value in the computation graph.
///
/// Cloning is cheap (reference-counted). Tensors are immutable once
/// created; parameter updates happen outside the graph and a fresh leaf
/// is created per forward pass.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={})",
            self.0.id,
            self.shape(),
            self.0.requires_grad
        )
    }
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    /// A node that takes no gradient and carries no history.
    pub fn constant(data: ArrayD<f64>) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            data,
            requires_grad: false,
            parents: Vec::new(),
            grad_fn: None,
        }))
    }

    /// A differentiable leaf (a parameter snapshot).
    pub fn leaf(data: ArrayD<f64>) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            data,
            requires_grad: true,
            parents: Vec::new(),
            grad_fn: None,
        }))
    }

    pub(crate) fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, grad_fn: GradFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Tensor::constant(data);
        }
        Tensor(Rc::new(Node {
            id: next_id(),
            data,
            requires_grad,
            parents,
            grad_fn: Some(grad_fn),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.0.data.len(), 1, "scalar() on non-scalar tensor");
        *self.0.data.iter().next().unwrap()
    }

    // ---- elementwise binary ops (broadcasting) ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let data = bin_op(self.data(), other.data(), |x, y| x + y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(reduce_to_shape(g, &sa)),
                    Some(reduce_to_shape(g, &sb)),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let data = bin_op(self.data(), other.data(), |x, y| x - y);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let gb = reduce_to_shape(g, &sb).mapv(|v| -v);
                vec![Some(reduce_to_shape(g, &sa)), Some(gb)]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let data = bin_op(self.data(), other.data(), |x, y| x * y);
        let a = self.clone();
        let b = other.clone();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = a.requires_grad().then(|| {
                    reduce_to_shape(&bin_op(g, b.data(), |x, y| x * y), a.shape())
                });
                let gb = b.requires_grad().then(|| {
                    reduce_to_shape(&bin_op(g, a.data(), |x, y| x * y), b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let data = bin_op(self.data(), other.data(), |x, y| x / y);
        let a = self.clone();
        let b = other.clone();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = a.requires_grad().then(|| {
                    reduce_to_shape(&bin_op(g, b.data(), |x, y| x / y), a.shape())
                });
                let gb = b.requires_grad().then(|| {
                    let num = bin_op(g, a.data(), |x, y| x * y);
                    let gb = bin_op(&num, b.data(), |x, y| -x / (y * y));
                    reduce_to_shape(&gb, b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    // ---- scalar ops ----

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().mapv(|v| v * c);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.mapv(|v| v * c))]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().mapv(|v| v + c);
        Tensor::from_op(data, vec![self.clone()], Box::new(|g| vec![Some(g.clone())]))
    }

    // ---- elementwise nonlinearities ----

    pub fn sigmoid(&self) -> Tensor {
        let y = self.data().mapv(stable_sigmoid);
        let yc = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(bin_op(g, &yc, |gv, yv| gv * yv * (1.0 - yv)))]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let y = self.data().mapv(f64::tanh);
        let yc = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| vec![Some(bin_op(g, &yc, |gv, yv| gv * (1.0 - yv * yv)))]),
        )
    }

    /// GELU, tanh approximation. Smooth everywhere, which keeps
    /// central-difference checks clean.
    pub fn gelu(&self) -> Tensor {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C3: f64 = 0.044715;
        let y = self.data().mapv(|x| {
            let u = K * (x + C3 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let x = self.data().clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = bin_op(g, &x, |gv, xv| {
                    let u = K * (xv + C3 * xv * xv * xv);
                    let t = u.tanh();
                    let du = K * (1.0 + 3.0 * C3 * xv * xv);
                    gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du)
                });
                vec![Some(dx)]
            }),
        )
    }

    pub fn abs(&self) -> Tensor {
        let y = self.data().mapv(f64::abs);
        let x = self.data().clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = bin_op(g, &x, |gv, xv| gv * xv.signum() * (xv != 0.0) as u8 as f64);
                vec![Some(dx)]
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let y = self.data().mapv(f64::sqrt);
        let yc = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| vec![Some(bin_op(g, &yc, |gv, yv| gv * 0.5 / yv))]),
        )
    }

    pub fn exp(&self) -> Tensor {
        let y = self.data().mapv(f64::exp);
        let yc = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| vec![Some(bin_op(g, &yc, |gv, yv| gv * yv))]),
        )
    }

    /// Clamp values into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let y = self.data().mapv(|v| v.clamp(lo, hi));
        let x = self.data().clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = bin_op(g, &x, |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 });
                vec![Some(dx)]
            }),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a2 = as_2d(self.data());
        let b2 = as_2d(other.data());
        let out = a2.dot(&b2);
        let a = self.clone();
        let b = other.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let g2 = as_2d(g);
                let ga = a
                    .requires_grad()
                    .then(|| g2.dot(&as_2d(b.data()).t()).into_dyn());
                let gb = b
                    .requires_grad()
                    .then(|| as_2d(a.data()).t().dot(&g2).into_dyn());
                vec![ga, gb]
            }),
        )
    }

    /// Batched matrix product `[B,m,k] @ [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa.len(), 3, "bmm lhs must be 3-d");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        assert_eq!(sa[2], sb[1], "bmm inner dim mismatch");
        let batch = sa[0];
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[batch, sa[1], sb[2]]));
        for i in 0..batch {
            let ai = as_2d_view(self.data(), i);
            let bi = as_2d_view(other.data(), i);
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        let a = self.clone();
        let b = other.clone();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut da = ArrayD::<f64>::zeros(IxDyn(a.shape()));
                    for i in 0..batch {
                        let gi = as_2d_view(g, i);
                        let bi = as_2d_view(b.data(), i);
                        da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    }
                    da
                });
                let gb = b.requires_grad().then(|| {
                    let mut db = ArrayD::<f64>::zeros(IxDyn(b.shape()));
                    for i in 0..batch {
                        let gi = as_2d_view(g, i);
                        let ai = as_2d_view(a.data(), i);
                        db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                    }
                    db
                });
                vec![ga, gb]
            }),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let data = reshape_arr(self.data(), shape);
        let orig = self.shape().to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(reshape_arr(g, &orig))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let data = permute_arr(self.data(), axes);
        let mut inverse = vec![0usize; axes.len()];
        for (dst, &src) in axes.iter().enumerate() {
            inverse[src] = dst;
        }
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(permute_arr(g, &inverse))]),
        )
    }

    /// Select rows of a 2-D tensor.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let x = as_2d(self.data());
        let cols = x.ncols();
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), cols));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&x.row(i));
        }
        let ids = ids.to_vec();
        let vshape = self.shape().to_vec();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as_2d(g);
                let mut dx = ndarray::Array2::<f64>::zeros((vshape[0], vshape[1]));
                for (r, &i) in ids.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g2.row(r);
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let v = self.data().sum();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            ndarray::arr0(v).into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gs))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.data().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum along one axis, keeping it as size 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let data = self.data().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let shape = self.shape().to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gv = g
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis_keep backward broadcast")
                    .to_owned();
                vec![Some(gv)]
            }),
        )
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keep(axis).scale(1.0 / n)
    }

    // ---- softmax ----

    pub fn softmax(&self, axis: usize) -> Tensor {
        let x = self.data();
        let max = x
            .fold_axis(Axis(axis), f64::NEG_INFINITY, |m, &v| m.max(v))
            .insert_axis(Axis(axis));
        let e = bin_op(x, &max, |a, b| (a - b).exp());
        let sum = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let y = bin_op(&e, &sum, |a, b| a / b);
        let yc = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let gy = bin_op(g, &yc, |a, b| a * b);
                let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let gm = bin_op(g, &s, |a, b| a - b);
                vec![Some(bin_op(&gm, &yc, |a, b| a * b))]
            }),
        )
    }

    /// Row-wise L2 normalization of a 2-D tensor; all-zero rows map to
    /// all-zero rows.
    pub fn l2_normalize_rows(&self) -> Tensor {
        let x = as_2d(self.data());
        let rows = x.nrows();
        let mut inv = ndarray::Array1::<f64>::zeros(rows);
        let mut y = x.to_owned();
        for r in 0..rows {
            let n = x.row(r).dot(&x.row(r)).sqrt();
            if n > 0.0 {
                inv[r] = 1.0 / n;
                let mut row = y.row_mut(r);
                row *= inv[r];
            } else {
                y.row_mut(r).fill(0.0);
            }
        }
        let yc = y.clone();
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = as_2d(g);
                let mut dx = ndarray::Array2::<f64>::zeros(g2.raw_dim());
                for r in 0..rows {
                    if inv[r] == 0.0 {
                        continue;
                    }
                    let yr = yc.row(r);
                    let gr = g2.row(r);
                    let dot = gr.dot(&yr);
                    let mut out = dx.row_mut(r);
                    for c in 0..out.len() {
                        out[c] = inv[r] * (gr[c] - yr[c] * dot);
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    // ---- backward ----

    /// Reverse pass from a single-element tensor. Returns gradients for
    /// every reachable leaf.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.data().len(), 1, "backward() needs a scalar loss");
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes: Vec<Tensor> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !visited.insert(t.id()) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: HashMap<u64, ArrayD<f64>> = HashMap::new();
        pending.insert(self.id(), ArrayD::from_elem(self.data().raw_dim(), 1.0));
        let mut leaves: HashMap<u64, ArrayD<f64>> = HashMap::new();

        for node in nodes {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    leaves.insert(node.id(), g);
                }
                Some(f) => {
                    let pgrads = f(&g);
                    for (p, pg) in node.0.parents.iter().zip(pgrads) {
                        if let Some(pg) = pg {
                            if p.requires_grad() {
                                pending
                                    .entry(p.id())
                                    .and_modify(|e| *e += &pg)
                                    .or_insert(pg);
                            }
                        }
                    }
                }
            }
        }
        Gradients { map: leaves }
    }
}

/// Concatenate tensors along an axis.
pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let views: Vec<_> = parts.iter().map(|t| t.data().view()).collect();
    let data = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let sizes: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
    Tensor::from_op(
        data,
        parts.to_vec(),
        Box::new(move |g| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut off = 0isize;
            for &s in &sizes {
                out.push(Some(
                    g.slice_axis(Axis(axis), Slice::from(off..off + s as isize))
                        .to_owned(),
                ));
                off += s as isize;
            }
            out
        }),
    )
}

/// Leaf gradients produced by [`Tensor::backward`].
pub struct Gradients {
    map: HashMap<u64, ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&ArrayD<f64>> {
        self.map.get(&leaf.id())
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

// ---- array helpers ----

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn as_2d(x: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    x.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d tensor")
}

fn as_2d_view(x: &ArrayD<f64>, batch: usize) -> ndarray::ArrayView2<'_, f64> {
    x.index_axis(Axis(0), batch)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 3-d tensor")
}

pub(crate) fn reshape_arr(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let v: Vec<f64> = if let Some(s) = x.as_slice() {
        s.to_vec()
    } else {
        x.iter().copied().collect()
    };
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("reshape element count mismatch")
}

fn permute_arr(x: &ArrayD<f64>, axes: &[usize]) -> ArrayD<f64> {
    let v = x.view().permuted_axes(IxDyn(axes));
    let mut out = ArrayD::<f64>::zeros(v.raw_dim());
    out.assign(&v);
    out
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let av = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bv = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            av == bv || av == 1 || bv == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = av.max(bv);
    }
    out
}

pub(crate) fn bin_op(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let s = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&s)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&s)).expect("broadcast rhs");
    let mut out = ArrayD::<f64>::zeros(IxDyn(&s));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sum `g` down to `target` shape, undoing broadcasting.
pub(crate) fn reduce_to_shape(g: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut g = g.to_owned();
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Layer normalization over the last axis of a 2-D tensor.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let xd = as_2d(x.data());
    let (rows, cols) = (xd.nrows(), xd.ncols());
    let gam = gamma.data().as_slice().expect("gamma contiguous").to_vec();
    let bet = beta.data().as_slice().expect("beta contiguous").to_vec();
    assert_eq!(gam.len(), cols, "layer_norm gamma width");
    assert_eq!(bet.len(), cols, "layer_norm beta width");

    let mut xhat = ndarray::Array2::<f64>::zeros((rows, cols));
    let mut inv_std = ndarray::Array1::<f64>::zeros(rows);
    let mut y = ndarray::Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        let row = xd.row(r);
        let mean = row.sum() / cols as f64;
        let mut var = 0.0;
        for &v in row.iter() {
            let d = v - mean;
            var += d * d;
        }
        var /= cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for c in 0..cols {
            let xh = (row[c] - mean) * inv;
            xhat[(r, c)] = xh;
            y[(r, c)] = gam[c] * xh + bet[c];
        }
    }

    let need_x = x.requires_grad();
    let need_g = gamma.requires_grad();
    let need_b = beta.requires_grad();
    let gam_c = gam.clone();
    Tensor::from_op(
        y.into_dyn(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let g2 = as_2d(g);
            let dgamma = need_g.then(|| {
                let mut d = ndarray::Array1::<f64>::zeros(cols);
                for r in 0..rows {
                    for c in 0..cols {
                        d[c] += g2[(r, c)] * xhat[(r, c)];
                    }
                }
                d.into_dyn()
            });
            let dbeta = need_b.then(|| {
                let mut d = ndarray::Array1::<f64>::zeros(cols);
                for r in 0..rows {
                    for c in 0..cols {
                        d[c] += g2[(r, c)];
                    }
                }
                d.into_dyn()
            });
            let dx = need_x.then(|| {
                let mut d = ndarray::Array2::<f64>::zeros((rows, cols));
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..cols {
                        let gxh = g2[(r, c)] * gam_c[c];
                        m1 += gxh;
                        m2 += gxh * xhat[(r, c)];
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for c in 0..cols {
                        let gxh = g2[(r, c)] * gam_c[c];
                        d[(r, c)] = inv_std[r] * (gxh - m1 - xhat[(r, c)] * m2);
                    }
                }
                d.into_dyn()
            });
            vec![dx, dgamma, dbeta]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference gradient of `f` at `x`.
    fn num_grad(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, h: f64) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        for idx in ndarray::indices(x.raw_dim()) {
            let mut xp = x.clone();
            xp[&idx] += h;
            let fp = f(&xp);
            let mut xm = x.clone();
            xm[&idx] -= h;
            let fm = f(&xm);
            g[&idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_grad_close(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, tol: f64) {
        let diff = (analytic - numeric).mapv(f64::abs);
        let na = analytic.mapv(|v| v * v).sum().sqrt();
        let nn = numeric.mapv(|v| v * v).sum().sqrt();
        let nd = diff.mapv(|v| v * v).sum().sqrt();
        let rel = nd / na.max(nn).max(1e-12);
        assert!(
            rel < tol,
            "gradient mismatch: rel={rel:.3e} analytic_norm={na:.3e} numeric_norm={nn:.3e}"
        );
    }

    /// Checks d(weighted sum of op(x)) / dx against central differences.
    fn check_unary(op: impl Fn(&Tensor) -> Tensor, shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(shape, &mut rng);
        let w = randn(
            op(&Tensor::constant(x.clone())).shape().to_vec().as_slice(),
            &mut rng,
        );
        let f = |xv: &ArrayD<f64>| -> f64 {
            let t = op(&Tensor::constant(xv.clone()));
            (t.data() * &w).sum()
        };
        let leaf = Tensor::leaf(x.clone());
        let loss = op(&leaf).mul(&Tensor::constant(w.clone())).sum_all();
        let grads = loss.backward();
        let analytic = grads.get(&leaf).expect("leaf grad");
        let numeric = num_grad(&f, &x, 1e-6);
        assert_grad_close(analytic, &numeric, 1e-6);
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        check_unary(|t| t.sigmoid(), &[3, 4], 1);
        check_unary(|t| t.tanh(), &[3, 4], 2);
        check_unary(|t| t.gelu(), &[3, 4], 3);
        check_unary(|t| t.exp(), &[2, 3], 5);
        check_unary(|t| t.softmax(1), &[3, 5], 6);
        check_unary(|t| t.scale(2.5).add_scalar(-0.3), &[4], 7);
    }

    #[test]
    fn sqrt_grad_on_positive_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&[5], &mut rng).mapv(|v| v.abs() + 0.5);
        let w = randn(&[5], &mut rng);
        let f = |xv: &ArrayD<f64>| (Tensor::constant(xv.clone()).sqrt().data() * &w).sum();
        let leaf = Tensor::leaf(x.clone());
        let loss = leaf.sqrt().mul(&Tensor::constant(w.clone())).sum_all();
        let g = loss.backward();
        assert_grad_close(g.get(&leaf).unwrap(), &num_grad(&f, &x, 1e-6), 1e-6);
    }

    #[test]
    fn binary_broadcast_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = randn(&[4, 3], &mut rng);
        let b = randn(&[3], &mut rng).mapv(|v| v + 3.0); // away from zero for div
        let w = randn(&[4, 3], &mut rng);

        for op_idx in 0..4 {
            let apply = |x: &Tensor, y: &Tensor| match op_idx {
                0 => x.add(y),
                1 => x.sub(y),
                2 => x.mul(y),
                _ => x.div(y),
            };
            let la = Tensor::leaf(a.clone());
            let lb = Tensor::leaf(b.clone());
            let loss = apply(&la, &lb).mul(&Tensor::constant(w.clone())).sum_all();
            let g = loss.backward();

            let fa = |xv: &ArrayD<f64>| {
                let t = apply(&Tensor::constant(xv.clone()), &Tensor::constant(b.clone()));
                (t.data() * &w).sum()
            };
            let fb = |yv: &ArrayD<f64>| {
                let t = apply(&Tensor::constant(a.clone()), &Tensor::constant(yv.clone()));
                (t.data() * &w).sum()
            };
            assert_grad_close(g.get(&la).unwrap(), &num_grad(&fa, &a, 1e-6), 1e-6);
            assert_grad_close(g.get(&lb).unwrap(), &num_grad(&fb, &b, 1e-6), 1e-6);
        }
    }

    #[test]
    fn matmul_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = randn(&[4, 3], &mut rng);
        let b = randn(&[3, 5], &mut rng);
        let w = randn(&[4, 5], &mut rng);
        let la = Tensor::leaf(a.clone());
        let lb = Tensor::leaf(b.clone());
        let loss = la.matmul(&lb).mul(&Tensor::constant(w.clone())).sum_all();
        let g = loss.backward();
        let fa = |xv: &ArrayD<f64>| {
            (Tensor::constant(xv.clone())
                .matmul(&Tensor::constant(b.clone()))
                .data()
                * &w)
                .sum()
        };
        let fb = |yv: &ArrayD<f64>| {
            (Tensor::constant(a.clone())
                .matmul(&Tensor::constant(yv.clone()))
                .data()
                * &w)
                .sum()
        };
        assert_grad_close(g.get(&la).unwrap(), &num_grad(&fa, &a, 1e-6), 1e-6);
        assert_grad_close(g.get(&lb).unwrap(), &num_grad(&fb, &b, 1e-6), 1e-6);
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = randn(&[2, 3, 4], &mut rng);
        let b = randn(&[2, 4, 5], &mut rng);
        let w = randn(&[2, 3, 5], &mut rng);
        let la = Tensor::leaf(a.clone());
        let lb = Tensor::leaf(b.clone());
        let loss = la.bmm(&lb).mul(&Tensor::constant(w.clone())).sum_all();
        let g = loss.backward();
        let fa = |xv: &ArrayD<f64>| {
            (Tensor::constant(xv.clone())
                .bmm(&Tensor::constant(b.clone()))
                .data()
                * &w)
                .sum()
        };
        assert_grad_close(g.get(&la).unwrap(), &num_grad(&fa, &a, 1e-6), 1e-6);
        let fb = |yv: &ArrayD<f64>| {
            (Tensor::constant(a.clone())
                .bmm(&Tensor::constant(yv.clone()))
                .data()
                * &w)
                .sum()
        };
        assert_grad_close(g.get(&lb).unwrap(), &num_grad(&fb, &b, 1e-6), 1e-6);
    }

    #[test]
    fn shape_ops_roundtrip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let a = randn(&[2, 3, 4], &mut rng);
        let w = randn(&[4, 6], &mut rng);
        let la = Tensor::leaf(a.clone());
        let loss = la
            .permute(&[2, 0, 1])
            .reshape(&[4, 6])
            .mul(&Tensor::constant(w.clone()))
            .sum_all();
        let g = loss.backward();
        let f = |xv: &ArrayD<f64>| {
            (Tensor::constant(xv.clone())
                .permute(&[2, 0, 1])
                .reshape(&[4, 6])
                .data()
                * &w)
                .sum()
        };
        assert_grad_close(g.get(&la).unwrap(), &num_grad(&f, &a, 1e-6), 1e-6);
    }

    #[test]
    fn concat_and_gather_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let a = randn(&[2, 3], &mut rng);
        let b = randn(&[4, 3], &mut rng);
        let w = randn(&[6, 3], &mut rng);
        let la = Tensor::leaf(a.clone());
        let lb = Tensor::leaf(b.clone());
        let loss = concat(0, &[la.clone(), lb.clone()])
            .mul(&Tensor::constant(w.clone()))
            .sum_all();
        let g = loss.backward();
        let fa = |xv: &ArrayD<f64>| {
            (concat(
                0,
                &[Tensor::constant(xv.clone()), Tensor::constant(b.clone())],
            )
            .data()
                * &w)
                .sum()
        };
        assert_grad_close(g.get(&la).unwrap(), &num_grad(&fa, &a, 1e-6), 1e-6);

        let ids = vec![1usize, 3, 1];
        let w2 = randn(&[3, 3], &mut rng);
        let lb2 = Tensor::leaf(b.clone());
        let loss2 = lb2
            .gather_rows(&ids)
            .mul(&Tensor::constant(w2.clone()))
            .sum_all();
        let g2 = loss2.backward();
        let f2 = |xv: &ArrayD<f64>| {
            (Tensor::constant(xv.clone()).gather_rows(&ids).data() * &w2).sum()
        };
        assert_grad_close(g2.get(&lb2).unwrap(), &num_grad(&f2, &b, 1e-6), 1e-6);
    }

    #[test]
    fn layer_norm_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let x = randn(&[4, 6], &mut rng);
        let gamma = randn(&[6], &mut rng).mapv(|v| v + 1.5);
        let beta = randn(&[6], &mut rng);
        let w = randn(&[4, 6], &mut rng);

        let lx = Tensor::leaf(x.clone());
        let lg = Tensor::leaf(gamma.clone());
        let lb = Tensor::leaf(beta.clone());
        let loss = layer_norm(&lx, &lg, &lb, 1e-5)
            .mul(&Tensor::constant(w.clone()))
            .sum_all();
        let g = loss.backward();

        let fx = |xv: &ArrayD<f64>| {
            (layer_norm(
                &Tensor::constant(xv.clone()),
                &Tensor::constant(gamma.clone()),
                &Tensor::constant(beta.clone()),
                1e-5,
            )
            .data()
                * &w)
                .sum()
        };
        let fg = |gv: &ArrayD<f64>| {
            (layer_norm(
                &Tensor::constant(x.clone()),
                &Tensor::constant(gv.clone()),
                &Tensor::constant(beta.clone()),
                1e-5,
            )
            .data()
                * &w)
                .sum()
        };
        assert_grad_close(g.get(&lx).unwrap(), &num_grad(&fx, &x, 1e-6), 1e-5);
        assert_grad_close(g.get(&lg).unwrap(), &num_grad(&fg, &gamma, 1e-6), 1e-6);
        assert!(g.get(&lb).is_some());
    }

    #[test]
    fn l2_normalize_rows_unit_norm_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut x = randn(&[4, 5], &mut rng);
        // Force one zero row to hit the guard.
        for c in 0..5 {
            x[[2, c]] = 0.0;
        }
        let lx = Tensor::leaf(x.clone());
        let y = lx.l2_normalize_rows();
        let y2 = as_2d(y.data());
        for r in [0usize, 1, 3] {
            let n = y2.row(r).dot(&y2.row(r)).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(y2.row(2).iter().all(|&v| v == 0.0));

        let w = randn(&[4, 5], &mut rng);
        let loss = y.mul(&Tensor::constant(w.clone())).sum_all();
        let g = loss.backward();
        let f = |xv: &ArrayD<f64>| {
            (Tensor::constant(xv.clone()).l2_normalize_rows().data() * &w).sum()
        };
        // The zero row is a subgradient point; finite differences only make
        // sense on the other rows.
        let mut analytic = g.get(&lx).unwrap().clone();
        let mut numeric = num_grad(&f, &x, 1e-6);
        for c in 0..5 {
            analytic[[2, c]] = 0.0;
            numeric[[2, c]] = 0.0;
        }
        assert_grad_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn shared_subgraph_accumulates_gradient() {
        // loss = sum(x * x): grad must be 2x.
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let lx = Tensor::leaf(x.clone());
        let loss = lx.mul(&lx).sum_all();
        let g = loss.backward();
        let got = g.get(&lx).unwrap();
        for i in 0..3 {
            assert!((got[[i]] - 2.0 * x[[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_graph_prunes_gradients() {
        let a = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let b = a.add(&a).sigmoid();
        assert!(!b.requires_grad());
        let loss = b.sum_all();
        assert!(!loss.requires_grad());
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![-2.0, 0.3, 2.0]).unwrap();
        let lx = Tensor::leaf(x);
        let loss = lx.clamp(-1.0, 1.0).sum_all();
        let g = loss.backward();
        let got = g.get(&lx).unwrap();
        assert_eq!(got[[0]], 0.0);
        assert_eq!(got[[1]], 1.0);
        assert_eq!(got[[2]], 0.0);
    }
}
