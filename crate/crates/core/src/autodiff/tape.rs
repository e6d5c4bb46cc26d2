//! Reverse-mode differentiation over grid-valued graphs.
//!
//! A [`Tape`] records a closed set of seven primitives (add, mul, conv2d,
//! matmul, activation, reduce-sum, broadcast). Nodes are appended in
//! evaluation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Values are `f64` throughout.

use crate::error::{Error, Result};
use crate::numerics::{Grid, Shape};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Value replication patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// `1x1xC` to `HxWxC`, or `1x1x1` to any shape.
    To(Shape),
    /// Nearest-neighbour spatial upsampling by an integer factor.
    Upsample(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Mul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        /// im2col matrix of the input, `(Ho*Wo) x (k*k*Cin)`.
        cols: Vec<f64>,
    },
    Matmul(Var, Var),
    Act(Var, Activation),
    Sum(Var),
    Broadcast(Var, Broadcast),
}

enum Value<'a> {
    Owned(Grid),
    Borrowed(&'a Grid),
}

impl Value<'_> {
    fn grid(&self) -> &Grid {
        match self {
            Value::Owned(g) => g,
            Value::Borrowed(g) => g,
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Value<'a>,
}

/// Recorded computation graph. Parameter leaves borrow their storage.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// `out[P x N] += a[P x K] * b[K x N]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, k: usize, n: usize) {
    for i in 0..p {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `db[K x N] += a^T * dout`.
fn matmul_grad_b(a: &[f64], dout: &[f64], db: &mut [f64], p: usize, k: usize, n: usize) {
    for i in 0..p {
        let drow = &dout[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[kk * n..(kk + 1) * n];
            for (o, &dv) in dbrow.iter_mut().zip(drow) {
                *o += av * dv;
            }
        }
    }
}

/// `da[P x K] += dout * b^T`.
fn matmul_grad_a(b: &[f64], dout: &[f64], da: &mut [f64], p: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; n * k];
    for kk in 0..k {
        for nn in 0..n {
            bt[nn * k + kk] = b[kk * n + nn];
        }
    }
    matmul_acc(dout, &bt, da, p, n, k);
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn im2col(x: &Grid, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let (h, w, c) = (x.height() as isize, x.width() as isize, x.channels());
    let kk = k * k * c;
    let mut cols = vec![0.0; ho * wo * kk];
    let xd = x.data();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    let src = ((iy * w + ix) as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], x_shape: Shape, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let (h, w, c) = (x_shape.h as isize, x_shape.w as isize, x_shape.c);
    let kk = k * k * c;
    let mut dx = vec![0.0; x_shape.len()];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &dcols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    let dst = ((iy * w + ix) as usize) * c;
                    let src = (ky * k + kx) * c;
                    for (d, s) in dx[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    dx
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Grid) -> Var {
        self.nodes.push(Node { op, value: Value::Owned(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Grid {
        self.nodes[v.0].value.grid()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, g: Grid) -> Var {
        self.push(Op::Leaf, g)
    }

    /// Trainable parameter `id`, borrowed from its store.
    pub fn param(&mut self, id: usize, g: &'a Grid) -> Var {
        self.nodes.push(Node { op: Op::Param(id), value: Value::Borrowed(g) });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// 2D convolution. `w` has shape `k x k x (Cin*Cout)` laid out as a
    /// row-major `(k*k*Cin) x Cout` matrix.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let k = ws.h;
        if ws.w != k || k == 0 || stride == 0 || ws.c % xs.c != 0 {
            return Err(Error::shape("conv2d", format!("k x k x (Cin*Cout) with Cin = {}", xs.c), ws));
        }
        let cout = ws.c / xs.c;
        let (ho, wo) = match (conv_out_dim(xs.h, k, stride, pad), conv_out_dim(xs.w, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv2d", format!("input at least {k}x{k}"), xs)),
        };
        let cols = im2col(self.value(x), k, stride, pad, ho, wo);
        let mut out = vec![0.0; ho * wo * cout];
        matmul_acc(&cols, self.value(w).data(), &mut out, ho * wo, k * k * xs.c, cout);
        let out = Grid::from_vec(ho, wo, cout, out)?;
        Ok(self.push(Op::Conv2d { x, w, stride, pad, cols }, out))
    }

    /// `(H*W) x K` times `K x N`: `a` is `H x W x K`, `b` is `K x N x 1`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if bs.h != as_.c || bs.c != 1 {
            return Err(Error::shape("matmul", format!("{} x N x 1", as_.c), bs));
        }
        let mut out = vec![0.0; as_.pixels() * bs.w];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, as_.pixels(), as_.c, bs.w);
        let out = Grid::from_vec(as_.h, as_.w, bs.w, out)?;
        Ok(self.push(Op::Matmul(a, b), out))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).map(|v| act.apply(v));
        self.push(Op::Act(x, act), out)
    }

    /// Sum of all elements, as a `1x1x1` grid.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Grid::scalar(s))
    }

    pub fn broadcast(&mut self, x: Var, how: Broadcast) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        let out = match how {
            Broadcast::To(to) => {
                let scalar = s == Shape::new(1, 1, 1);
                if !(scalar || (s.h == 1 && s.w == 1 && s.c == to.c)) {
                    return Err(Error::shape("broadcast", format!("1x1x1 or 1x1x{}", to.c), s));
                }
                if scalar {
                    Grid::filled(to.h, to.w, to.c, src.data()[0])
                } else {
                    let d = src.data();
                    Grid::from_fn(to.h, to.w, to.c, |_, _, c| d[c])
                }
            }
            Broadcast::Upsample(f) => {
                if f == 0 {
                    return Err(Error::InvalidArgument("upsample factor 0".into()));
                }
                Grid::from_fn(s.h * f, s.w * f, s.c, |y, x, c| src.get(y / f, x / f, c))
            }
        };
        Ok(self.push(Op::Broadcast(x, how), out))
    }

    // Composites built only from the primitives above.

    /// `x * c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.leaf(Grid::scalar(c));
        let shape = self.shape(x);
        let b = self.broadcast(s, Broadcast::To(shape))?;
        self.mul(x, b)
    }

    /// Adds a `1x1xC` vector to every pixel of `x`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x);
        let b = self.broadcast(bias, Broadcast::To(shape))?;
        self.add(x, b)
    }

    /// Mean squared difference between `x` and a constant `target`.
    pub fn mse(&mut self, x: Var, target: &Grid) -> Result<Var> {
        let shape = self.shape(x);
        if shape != target.shape() {
            return Err(Error::shape("mse", shape, target.shape()));
        }
        let neg = self.leaf(target.scale(-1.0));
        let diff = self.add(x, neg)?;
        let sq = self.mul(diff, diff)?;
        let total = self.sum(sq);
        self.scale(total, 1.0 / shape.len() as f64)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls != Shape::new(1, 1, 1) {
            return Err(Error::shape("backward", "scalar 1x1x1 loss", ls));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
            let buf = slot.get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    for v in [a, b] {
                        accumulate(&mut grads[v.0], g.len(), |d| d.iter_mut().zip(&g).for_each(|(o, x)| *o += x));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for ((o, x), y) in d.iter_mut().zip(&g).zip(bv) {
                            *o += x * y;
                        }
                    });
                    accumulate(&mut grads[b.0], g.len(), |d| {
                        for ((o, x), y) in d.iter_mut().zip(&g).zip(av) {
                            *o += x * y;
                        }
                    });
                }
                Op::Conv2d { x, w, stride, pad, cols } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let k = ws.h;
                    let cout = ws.c / xs.c;
                    let out = node.value.grid().shape();
                    let (p, kk) = (out.pixels(), k * k * xs.c);
                    accumulate(&mut grads[w.0], ws.len(), |d| matmul_grad_b(cols, &g, d, p, kk, cout));
                    let mut dcols = vec![0.0; p * kk];
                    matmul_grad_a(self.value(*w).data(), &g, &mut dcols, p, kk, cout);
                    let dx = col2im(&dcols, xs, k, *stride, *pad, out.h, out.w);
                    accumulate(&mut grads[x.0], xs.len(), |d| d.iter_mut().zip(&dx).for_each(|(o, v)| *o += v));
                }
                Op::Matmul(a, b) => {
                    let (as_, bs) = (self.shape(*a), self.shape(*b));
                    let (p, k, n) = (as_.pixels(), as_.c, bs.w);
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    accumulate(&mut grads[b.0], bs.len(), |d| matmul_grad_b(av, &g, d, p, k, n));
                    accumulate(&mut grads[a.0], as_.len(), |d| matmul_grad_a(bv, &g, d, p, k, n));
                }
                Op::Act(x, act) => {
                    let xv = self.value(*x).data();
                    accumulate(&mut grads[x.0], g.len(), |d| {
                        for ((o, gy), &xi) in d.iter_mut().zip(&g).zip(xv) {
                            *o += gy * act.derivative(xi);
                        }
                    });
                }
                Op::Sum(x) => {
                    let n = self.shape(*x).len();
                    accumulate(&mut grads[x.0], n, |d| d.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::Broadcast(x, how) => {
                    let xs = self.shape(*x);
                    let out = node.value.grid().shape();
                    accumulate(&mut grads[x.0], xs.len(), |d| match how {
                        Broadcast::To(_) => {
                            if xs.len() == 1 {
                                d[0] += g.iter().sum::<f64>();
                            } else {
                                for px in g.chunks(out.c) {
                                    d.iter_mut().zip(px).for_each(|(o, v)| *o += v);
                                }
                            }
                        }
                        Broadcast::Upsample(f) => {
                            for y in 0..out.h {
                                for x in 0..out.w {
                                    let src = ((y / f) * xs.w + x / f) * xs.c;
                                    let dst = (y * out.w + x) * out.c;
                                    for c in 0..out.c {
                                        d[src + c] += g[dst + c];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Parameter id of every parameter leaf, with its node.
    pub fn params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }
}

/// Result of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not reach the loss.
    pub fn wrt(&self, tape: &Tape<'_>, v: Var) -> Grid {
        let s = tape.shape(v);
        match &self.grads[v.0] {
            Some(g) => Grid::from_vec(s.h, s.w, s.c, g.clone()).expect("gradient matches node shape"),
            None => Grid::zeros(s.h, s.w, s.c),
        }
    }

    /// Adds every parameter gradient into `acc`, indexed by parameter id.
    /// Parameters that never reached the loss contribute nothing.
    pub fn accumulate_params(&self, tape: &Tape<'_>, acc: &mut [Grid]) {
        for (id, v) in tape.params() {
            if let Some(g) = &self.grads[v.0] {
                acc[id].data_mut().iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
        }
    }
}
