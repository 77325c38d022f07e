use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice, Zip};

pub type Array = ArrayD<f64>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

type BackwardFn = Box<dyn Fn(&Array) -> Vec<Option<Array>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    value: Array,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A node of a reverse-mode computation graph.
///
/// Tensors are immutable and cheap to clone. A tensor records the operation
/// that produced it only when at least one input requires a gradient, so
/// inference passes build no graph at all.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Leaf gradients produced by [`Tensor::backward`].
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Array>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Array> {
        self.map.get(&t.0.id)
    }

    pub fn remove(&mut self, t: &Tensor) -> Option<Array> {
        self.map.remove(&t.0.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to_shape(mut g: Array, shape: &[usize]) -> Array {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            panic!("cannot broadcast shapes {a:?} and {b:?}");
        };
    }
    out
}

fn binary_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    let mut out = Array::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn as2(a: &Array) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected a 2-D array")
}

pub(crate) fn matmul2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    a.dot(&b)
}

impl Tensor {
    fn wrap(value: Array, requires_grad: bool, grad_fn: Option<GradFn>) -> Tensor {
        Tensor(Rc::new(Inner {
            id: next_id(),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Array) -> Tensor {
        Tensor::wrap(value, false, None)
    }

    /// A leaf that accumulates a gradient during [`Tensor::backward`].
    pub fn leaf(value: Array) -> Tensor {
        Tensor::wrap(value, true, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(Array::from_elem(IxDyn(&[]), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::constant(Array::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch"))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(Array::zeros(IxDyn(shape)))
    }

    /// Builds the output of a custom operation.
    ///
    /// `backward` maps the output gradient to one optional gradient per parent,
    /// in the order the parents were given.
    pub fn from_op(
        value: Array,
        parents: Vec<Tensor>,
        backward: impl Fn(&Array) -> Vec<Option<Array>> + 'static,
    ) -> Tensor {
        let rg = parents.iter().any(|p| p.requires_grad());
        if rg {
            Tensor::wrap(
                value,
                true,
                Some(GradFn {
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Tensor::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a tensor with {} elements", self.len());
        *self.0.value.iter().next().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.iter().copied().collect()
    }

    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep seeded with ones (the tensor is usually a scalar loss).
    pub fn backward(&self) -> Gradients {
        self.backward_with(Array::ones(self.0.value.raw_dim()))
    }

    pub fn backward_with(&self, seed: Array) -> Gradients {
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return out;
        }
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        // Parents are always created before their children, so descending ids
        // form a valid reverse topological order.
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));
        let mut grads: HashMap<u64, Array> = HashMap::new();
        grads.insert(self.id(), seed);
        for node in nodes {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    out.map.insert(node.id(), g);
                }
                Some(gf) => {
                    let pg = (gf.backward)(&g);
                    debug_assert_eq!(pg.len(), gf.parents.len());
                    for (p, pgrad) in gf.parents.iter().zip(pg) {
                        let Some(pgrad) = pgrad else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pgrad.shape(), p.shape(), "gradient shape mismatch");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => *acc += &pgrad,
                            None => {
                                grads.insert(p.id(), pgrad);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    // ----- elementwise -----

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Tensor {
        let value = self.value().mapv(&f);
        let x = self.clone();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let mut gx = g.clone();
            Zip::from(&mut gx).and(x.value()).for_each(|g, &x| *g *= df(x));
            vec![Some(gx)]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let value = self.value() * s;
        Tensor::from_op(value, vec![self.clone()], move |g| vec![Some(g * s)])
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let value = self.value() + s;
        Tensor::from_op(value, vec![self.clone()], |g| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x| 1.0 / x)
    }

    pub fn log10(&self) -> Tensor {
        let k = std::f64::consts::LN_10.recip();
        self.unary(f64::log10, move |x| k / x)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn sin(&self) -> Tensor {
        self.unary(f64::sin, f64::cos)
    }

    pub fn cos(&self) -> Tensor {
        self.unary(f64::cos, |x| -x.sin())
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn clamp_min(&self, min: f64) -> Tensor {
        self.unary(move |x| x.max(min), move |x| if x > min { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Parametric ReLU with one learned slope per channel (axis 1).
    pub fn prelu(&self, alpha: &Tensor) -> Tensor {
        assert!(self.ndim() >= 2, "prelu expects [batch, channels, ...]");
        let c = self.shape()[1];
        assert_eq!(alpha.len(), c, "prelu slope count must equal channel count");
        let a: Vec<f64> = alpha.to_vec();
        let mut value = self.value().clone();
        for (ci, mut lane) in value.axis_iter_mut(Axis(1)).enumerate() {
            let s = a[ci];
            lane.mapv_inplace(|x| if x > 0.0 { x } else { s * x });
        }
        let x = self.clone();
        let alpha_shape = alpha.shape().to_vec();
        Tensor::from_op(value, vec![self.clone(), alpha.clone()], move |g| {
            let mut gx = g.clone();
            let mut ga = vec![0.0; c];
            for (ci, (mut gl, xl)) in gx
                .axis_iter_mut(Axis(1))
                .zip(x.value().axis_iter(Axis(1)))
                .enumerate()
            {
                let s = a[ci];
                let mut acc = 0.0;
                Zip::from(&mut gl).and(&xl).for_each(|g, &x| {
                    if x <= 0.0 {
                        acc += *g * x;
                        *g *= s;
                    }
                });
                ga[ci] = acc;
            }
            let ga = Array::from_shape_vec(IxDyn(&alpha_shape), ga).unwrap();
            vec![Some(gx), Some(ga)]
        })
    }

    // ----- broadcasting binary ops -----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let value = binary_map(self.value(), other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op(value, vec![self.clone(), other.clone()], move |g| {
            vec![
                Some(reduce_to_shape(g.clone(), &sa)),
                Some(reduce_to_shape(g.clone(), &sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let value = binary_map(self.value(), other.value(), |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op(value, vec![self.clone(), other.clone()], move |g| {
            vec![
                Some(reduce_to_shape(g.clone(), &sa)),
                Some(reduce_to_shape(g.mapv(|v| -v), &sb)),
            ]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let value = binary_map(self.value(), other.value(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(value, vec![self.clone(), other.clone()], move |g| {
            let ga = a
                .requires_grad()
                .then(|| reduce_to_shape(binary_map(g, b.value(), |g, b| g * b), a.shape()));
            let gb = b
                .requires_grad()
                .then(|| reduce_to_shape(binary_map(g, a.value(), |g, a| g * a), b.shape()));
            vec![ga, gb]
        })
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let value = binary_map(self.value(), other.value(), |a, b| a / b);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(value, vec![self.clone(), other.clone()], move |g| {
            let ga = a
                .requires_grad()
                .then(|| reduce_to_shape(binary_map(g, b.value(), |g, b| g / b), a.shape()));
            let gb = b.requires_grad().then(|| {
                let t = binary_map(g, a.value(), |g, a| g * a);
                reduce_to_shape(binary_map(&t, b.value(), |t, b| -t / (b * b)), b.shape())
            });
            vec![ga, gb]
        })
    }

    // ----- reductions -----

    pub fn sum(&self) -> Tensor {
        let value = Array::from_elem(IxDyn(&[]), self.value().sum());
        let shape = self.shape().to_vec();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let gv = *g.iter().next().unwrap();
            vec![Some(Array::from_elem(IxDyn(&shape), gv))]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let mut value = self.value().sum_axis(Axis(axis));
        if keepdim {
            value = value.insert_axis(Axis(axis));
        }
        let shape = self.shape().to_vec();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let g = if keepdim {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(axis))
            };
            vec![Some(g.broadcast(IxDyn(&shape)).unwrap().to_owned())]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    /// Sum of squares of all elements.
    pub fn sum_squares(&self) -> Tensor {
        self.square().sum()
    }

    // ----- shape manipulation -----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let value = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} into {:?}", self.shape(), shape));
        let orig = self.shape().to_vec();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .unwrap(),
            )]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let value = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Tensor::from_op(value, vec![self.clone()], move |g| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned(),
            )]
        })
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Tensor {
        let n = self.ndim();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let shape = self.shape().to_vec();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let mut gx = Array::zeros(IxDyn(&shape));
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![Some(gx)]
        })
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty(), "concat of nothing");
        let views: Vec<_> = tensors.iter().map(|t| t.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Tensor::from_op(value, tensors.to_vec(), move |g| {
            let mut off = 0;
            lens.iter()
                .map(|&n| {
                    let s = g.slice_axis(Axis(axis), Slice::from(off..off + n)).to_owned();
                    off += n;
                    Some(s)
                })
                .collect()
        })
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(tensors: &[Tensor], axis: usize) -> Tensor {
        let expanded: Vec<Tensor> = tensors
            .iter()
            .map(|t| {
                let mut s = t.shape().to_vec();
                s.insert(axis, 1);
                t.reshape(&s)
            })
            .collect();
        Tensor::concat(&expanded, axis)
    }

    /// Zero padding along one axis.
    pub fn pad(&self, axis: usize, left: usize, right: usize) -> Tensor {
        if left == 0 && right == 0 {
            return self.clone();
        }
        let mut shape = self.shape().to_vec();
        let n = shape[axis];
        shape[axis] = n + left + right;
        let mut value = Array::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(left..left + n))
            .assign(self.value());
        Tensor::from_op(value, vec![self.clone()], move |g| {
            vec![Some(
                g.slice_axis(Axis(axis), Slice::from(left..left + n))
                    .to_owned(),
            )]
        })
    }

    /// Mean over non-overlapping windows of `factor` samples on the last axis.
    pub fn avg_pool_last(&self, factor: usize) -> Tensor {
        if factor == 1 {
            return self.clone();
        }
        let mut shape = self.shape().to_vec();
        let t = *shape.last().unwrap();
        assert_eq!(t % factor, 0, "avg_pool_last: length {t} not divisible by {factor}");
        let last = shape.len() - 1;
        shape[last] = t / factor;
        shape.push(factor);
        self.reshape(&shape).mean_axis(last + 1, false)
    }

    // ----- linear algebra -----

    /// Matrix product for `[m,k]x[k,n]`, `[b,m,k]x[k,n]` and `[b,m,k]x[b,k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        match (self.ndim(), other.ndim()) {
            (2, 2) => {
                let value = matmul2(as2(self.value()), as2(other.value())).into_dyn();
                let (a, b) = (self.clone(), other.clone());
                Tensor::from_op(value, vec![self.clone(), other.clone()], move |g| {
                    let g2 = as2(g);
                    let ga = a
                        .requires_grad()
                        .then(|| matmul2(g2, as2(b.value()).t()).into_dyn());
                    let gb = b
                        .requires_grad()
                        .then(|| matmul2(as2(a.value()).t(), g2).into_dyn());
                    vec![ga, gb]
                })
            }
            (3, 2) => {
                let (bsz, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
                let n = other.shape()[1];
                self.reshape(&[bsz * m, k])
                    .matmul(other)
                    .reshape(&[bsz, m, n])
            }
            (3, 3) => {
                let bsz = self.shape()[0];
                assert_eq!(other.shape()[0], bsz, "batched matmul batch mismatch");
                let parts: Vec<Tensor> = (0..bsz)
                    .map(|i| {
                        let a = self.narrow(0, i, 1);
                        let b = other.narrow(0, i, 1);
                        let (m, k) = (a.shape()[1], a.shape()[2]);
                        let n = b.shape()[2];
                        a.reshape(&[m, k]).matmul(&b.reshape(&[k, n])).reshape(&[1, m, n])
                    })
                    .collect();
                Tensor::concat(&parts, 0)
            }
            (a, b) => panic!("matmul not defined for ranks {a} and {b}"),
        }
    }

    // ----- normalisation helpers -----

    /// Log-sum-exp over `axis`.
    pub fn logsumexp(&self, axis: usize, keepdim: bool) -> Tensor {
        let x = self.value();
        let mx = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut lse = mx.clone();
        Zip::from(&mut lse)
            .and(x.lanes(Axis(axis)))
            .and(&mx)
            .for_each(|o, lane, &m| {
                if m == f64::NEG_INFINITY {
                    *o = f64::NEG_INFINITY;
                } else {
                    *o = m + lane.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                }
            });
        let lse_keep = lse.clone().insert_axis(Axis(axis));
        let value = if keepdim { lse_keep.clone() } else { lse };
        let xt = self.clone();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let g = if keepdim {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(axis))
            };
            let soft = binary_map(xt.value(), &lse_keep, |x, l| (x - l).exp());
            vec![Some(binary_map(&soft, &g, |s, g| s * g))]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor {
        let axis = self.ndim() - 1;
        let lse = self.logsumexp(axis, true);
        self.sub(&lse)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        Tensor::add(self, rhs)
    }
}

impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        Tensor::sub(self, rhs)
    }
}

impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        Tensor::mul(self, rhs)
    }
}

impl std::ops::Div for &Tensor {
    type Output = Tensor;
    fn div(self, rhs: &Tensor) -> Tensor {
        Tensor::div(self, rhs)
    }
}
