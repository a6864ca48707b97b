//! Differentiable primitives.
//!
//! Elementwise arithmetic, activations, channel softmax/log-softmax,
//! reductions, 3×3 convolution (im2col + matrix product), nearest-neighbor
//! upsampling, per-channel normalization and a numerically stable binary
//! cross-entropy head. Each op computes its output eagerly and, when grad
//! recording is on and an input requires gradients, attaches a backward node.

use super::{grad_enabled, Node, Tensor};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix4, IxDyn};
use std::rc::Rc;

fn attach<T: Scalar>(data: ArrayD<T>, track: bool, node: impl FnOnce() -> Rc<dyn Node<T>>) -> Tensor<T> {
    if grad_enabled() && track {
        Tensor::from_op(data, node())
    } else {
        Tensor::new(data, false)
    }
}

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

macro_rules! binary_node {
    ($name:ident, $backward:expr) => {
        struct $name<T: Scalar> {
            a: Tensor<T>,
            b: Tensor<T>,
        }
        impl<T: Scalar> Node<T> for $name<T> {
            fn parents(&self) -> Vec<Tensor<T>> {
                vec![self.a.clone(), self.b.clone()]
            }
            fn backward(&self, grad: &ArrayD<T>) {
                let f: fn(&Tensor<T>, &Tensor<T>, &ArrayD<T>) = $backward;
                f(&self.a, &self.b, grad);
            }
        }
    };
}

binary_node!(AddNode, |a, b, g| {
    a.accumulate_grad(g);
    b.accumulate_grad(g);
});

binary_node!(SubNode, |a, b, g| {
    a.accumulate_grad(g);
    b.accumulate_grad(&g.mapv(|v| -v));
});

binary_node!(MulNode, |a, b, g| {
    if a.requires_grad() {
        a.accumulate_grad(&(g * &*b.data()));
    }
    if b.requires_grad() {
        b.accumulate_grad(&(g * &*a.data()));
    }
});

binary_node!(DivNode, |a, b, g| {
    if a.requires_grad() {
        a.accumulate_grad(&(g / &*b.data()));
    }
    if b.requires_grad() {
        let bd = b.data();
        let ad = a.data();
        let gb = ndarray::Zip::from(g)
            .and(&*ad)
            .and(&*bd)
            .map_collect(|&g, &a, &b| -g * a / (b * b));
        b.accumulate_grad(&gb);
    }
});

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let data = &*self.data() + &*rhs.data();
        let (a, b) = (self.clone(), rhs.clone());
        attach(data, self.requires_grad() || rhs.requires_grad(), move || {
            Rc::new(AddNode { a, b })
        })
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let data = &*self.data() - &*rhs.data();
        let (a, b) = (self.clone(), rhs.clone());
        attach(data, self.requires_grad() || rhs.requires_grad(), move || {
            Rc::new(SubNode { a, b })
        })
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let data = &*self.data() * &*rhs.data();
        let (a, b) = (self.clone(), rhs.clone());
        attach(data, self.requires_grad() || rhs.requires_grad(), move || {
            Rc::new(MulNode { a, b })
        })
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), rhs.shape(), "div: shape mismatch");
        let data = &*self.data() / &*rhs.data();
        let (a, b) = (self.clone(), rhs.clone());
        attach(data, self.requires_grad() || rhs.requires_grad(), move || {
            Rc::new(DivNode { a, b })
        })
    }
}

// ---------------------------------------------------------------------------
// unary / scalar
// ---------------------------------------------------------------------------

struct UnaryNode<T: Scalar> {
    x: Tensor<T>,
    /// multiplies the incoming gradient elementwise
    local: ArrayD<T>,
}

impl<T: Scalar> Node<T> for UnaryNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, grad: &ArrayD<T>) {
        self.x.accumulate_grad(&(grad * &self.local));
    }
}

impl<T: Scalar> Tensor<T> {
    /// Attach a unary node; the gradient multiplier is only materialized when
    /// the graph is actually recorded.
    fn unary(&self, data: ArrayD<T>, make_local: impl FnOnce(&ArrayD<T>) -> ArrayD<T>) -> Tensor<T> {
        if grad_enabled() && self.requires_grad() {
            let local = make_local(&data);
            let x = self.clone();
            Tensor::from_op(data, Rc::new(UnaryNode { x, local }))
        } else {
            Tensor::new(data, false)
        }
    }

    pub fn neg(&self) -> Tensor<T> {
        let data = self.data().mapv(|v| -v);
        self.unary(data, |d| ArrayD::from_elem(d.raw_dim(), -T::one()))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().mapv(|v| v + c);
        self.unary(data, |d| ArrayD::from_elem(d.raw_dim(), T::one()))
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().mapv(|v| v * c);
        self.unary(data, |d| ArrayD::from_elem(d.raw_dim(), c))
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().mapv(|v| v.max(T::zero()));
        // at exactly 0 the subgradient 0 is used
        self.unary(data, |d| {
            d.mapv(|y| if y > T::zero() { T::one() } else { T::zero() })
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data = self.data().mapv(sigmoid_scalar);
        self.unary(data, |d| d.mapv(|y| y * (T::one() - y)))
    }

    pub fn tanh(&self) -> Tensor<T> {
        let data = self.data().mapv(|v| v.tanh());
        self.unary(data, |d| d.mapv(|y| T::one() - y * y))
    }

    /// Smooth Heaviside `1/(1 + e^{-δx})`.
    pub fn heaviside(&self, delta: T) -> Tensor<T> {
        let data = self.data().mapv(|v| sigmoid_scalar(delta * v));
        self.unary(data, move |d| d.mapv(|y| delta * y * (T::one() - y)))
    }
}

pub fn sigmoid_scalar<T: Scalar>(z: T) -> T {
    // split on sign so exp never overflows
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

struct SumAllNode<T: Scalar> {
    x: Tensor<T>,
}

impl<T: Scalar> Node<T> for SumAllNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, grad: &ArrayD<T>) {
        let g = grad[IxDyn(&[])];
        let full = ArrayD::from_elem(self.x.data().raw_dim(), g);
        self.x.accumulate_grad(&full);
    }
}

struct MeanAllNode<T: Scalar> {
    x: Tensor<T>,
}

impl<T: Scalar> Node<T> for MeanAllNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, grad: &ArrayD<T>) {
        let n = T::cast(self.x.len() as f64);
        let g = grad[IxDyn(&[])] / n;
        let full = ArrayD::from_elem(self.x.data().raw_dim(), g);
        self.x.accumulate_grad(&full);
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let data = ArrayD::from_elem(IxDyn(&[]), s);
        let x = self.clone();
        attach(data, self.requires_grad(), move || Rc::new(SumAllNode { x }))
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::cast(self.len() as f64);
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let data = ArrayD::from_elem(IxDyn(&[]), s / n);
        let x = self.clone();
        attach(data, self.requires_grad(), move || Rc::new(MeanAllNode { x }))
    }
}

// ---------------------------------------------------------------------------
// channel softmax (axis 1 of B×C×H×W)
// ---------------------------------------------------------------------------

struct SoftmaxNode<T: Scalar> {
    x: Tensor<T>,
    p: ArrayD<T>,
}

impl<T: Scalar> Node<T> for SoftmaxNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, grad: &ArrayD<T>) {
        // dx = p ⊙ (g − Σ_c g·p)
        let shape = self.p.shape().to_vec();
        let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let ps = self.p.as_slice().unwrap();
        let gs = grad.as_slice().unwrap();
        let mut dx = ArrayD::<T>::zeros(grad.raw_dim());
        let ds = dx.as_slice_mut().unwrap();
        for b in 0..bs {
            let base = b * c * hw;
            for k in 0..hw {
                let mut dot = T::zero();
                for ch in 0..c {
                    let idx = base + ch * hw + k;
                    dot += gs[idx] * ps[idx];
                }
                for ch in 0..c {
                    let idx = base + ch * hw + k;
                    ds[idx] = ps[idx] * (gs[idx] - dot);
                }
            }
        }
        self.x.accumulate_grad(&dx);
    }
}

struct LogSoftmaxNode<T: Scalar> {
    x: Tensor<T>,
    ls: ArrayD<T>,
}

impl<T: Scalar> Node<T> for LogSoftmaxNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, grad: &ArrayD<T>) {
        // dx = g − softmax ⊙ Σ_c g
        let shape = self.ls.shape().to_vec();
        let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let lss = self.ls.as_slice().unwrap();
        let gs = grad.as_slice().unwrap();
        let mut dx = ArrayD::<T>::zeros(grad.raw_dim());
        let ds = dx.as_slice_mut().unwrap();
        for b in 0..bs {
            let base = b * c * hw;
            for k in 0..hw {
                let mut gsum = T::zero();
                for ch in 0..c {
                    gsum += gs[base + ch * hw + k];
                }
                for ch in 0..c {
                    let idx = base + ch * hw + k;
                    ds[idx] = gs[idx] - lss[idx].exp() * gsum;
                }
            }
        }
        self.x.accumulate_grad(&dx);
    }
}

impl<T: Scalar> Tensor<T> {
    /// Softmax over the channel axis of a `B×C×H×W` tensor.
    pub fn softmax_channels(&self) -> Tensor<T> {
        let ls = log_softmax_values(&self.data());
        let p = ls.mapv(|v| v.exp());
        if grad_enabled() && self.requires_grad() {
            let x = self.clone();
            let saved = p.clone();
            Tensor::from_op(p, Rc::new(SoftmaxNode { x, p: saved }))
        } else {
            Tensor::new(p, false)
        }
    }

    /// Log-softmax over the channel axis of a `B×C×H×W` tensor.
    pub fn log_softmax_channels(&self) -> Tensor<T> {
        let ls = log_softmax_values(&self.data());
        if grad_enabled() && self.requires_grad() {
            let x = self.clone();
            let saved = ls.clone();
            Tensor::from_op(ls, Rc::new(LogSoftmaxNode { x, ls: saved }))
        } else {
            Tensor::new(ls, false)
        }
    }
}

fn log_softmax_values<T: Scalar>(data: &ArrayD<T>) -> ArrayD<T> {
    let shape = data.shape();
    assert_eq!(shape.len(), 4, "channel softmax needs a 4-d tensor");
    let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let xs = data.as_slice().expect("standard layout");
    let mut out = ArrayD::<T>::zeros(data.raw_dim());
    let os = out.as_slice_mut().unwrap();
    for b in 0..bs {
        let base = b * c * hw;
        for k in 0..hw {
            let mut m = xs[base + k];
            for ch in 1..c {
                m = m.max(xs[base + ch * hw + k]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                sum += (xs[base + ch * hw + k] - m).exp();
            }
            let lse = m + sum.ln();
            for ch in 0..c {
                let idx = base + ch * hw + k;
                os[idx] = xs[idx] - lse;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// nearest-neighbor 2× upsampling
// ---------------------------------------------------------------------------

struct Upsample2xNode<T: Scalar> {
    x: Tensor<T>,
}

impl<T: Scalar> Node<T> for Upsample2xNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, grad: &ArrayD<T>) {
        let g = grad.view().into_dimensionality::<Ix4>().unwrap();
        let (bs, c, h2, w2) = g.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = Array4::<T>::zeros((bs, c, h, w));
        for b in 0..bs {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        dx[[b, ch, i, j]] = g[[b, ch, 2 * i, 2 * j]]
                            + g[[b, ch, 2 * i, 2 * j + 1]]
                            + g[[b, ch, 2 * i + 1, 2 * j]]
                            + g[[b, ch, 2 * i + 1, 2 * j + 1]];
                    }
                }
            }
        }
        self.x.accumulate_grad(&dx.into_dyn());
    }
}

impl<T: Scalar> Tensor<T> {
    /// Nearest-neighbor ×2 upsampling of a `B×C×H×W` tensor.
    pub fn upsample_nearest_2x(&self) -> Tensor<T> {
        let x4 = self
            .data()
            .view()
            .into_dimensionality::<Ix4>()
            .expect("4-d tensor")
            .to_owned();
        let (bs, c, h, w) = x4.dim();
        let mut out = Array4::<T>::zeros((bs, c, 2 * h, 2 * w));
        for b in 0..bs {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = x4[[b, ch, i, j]];
                        out[[b, ch, 2 * i, 2 * j]] = v;
                        out[[b, ch, 2 * i, 2 * j + 1]] = v;
                        out[[b, ch, 2 * i + 1, 2 * j]] = v;
                        out[[b, ch, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let x = self.clone();
        attach(out.into_dyn(), self.requires_grad(), move || {
            Rc::new(Upsample2xNode { x })
        })
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfold one image (flat C×H×W slice) into a (C·kh·kw, OH·OW) column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let mut cols = Array2::<T>::zeros((cin * kh * kw, oh * ow));
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..cin {
        let xbase = c * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let rbase = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = xbase + ii as usize * w;
                    let orow = rbase + oi * ow;
                    if stride == 1 {
                        // source indices run contiguously: oj + kj - pad
                        let oj_lo = pad.saturating_sub(kj);
                        let oj_hi = ow.min(w + pad - kj);
                        if oj_lo < oj_hi {
                            let src_lo = xrow + oj_lo + kj - pad;
                            cs[orow + oj_lo..orow + oj_hi]
                                .copy_from_slice(&x[src_lo..src_lo + (oj_hi - oj_lo)]);
                        }
                    } else {
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cs[orow + oj] = x[xrow + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column-gradient matrix back onto an image, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcols: &Array2<T>,
    dx: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ds = dcols.as_slice().unwrap();
    for c in 0..cin {
        let xbase = c * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let rbase = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = xbase + ii as usize * w;
                    let orow = rbase + oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[xrow + jj as usize] += ds[orow + oj];
                    }
                }
            }
        }
    }
}

struct Conv2dNode<T: Scalar> {
    x: Tensor<T>,
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
    pad: usize,
    /// im2col matrices saved from the forward pass, one per batch item.
    cols: Vec<Array2<T>>,
}

impl<T: Scalar> Node<T> for Conv2dNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone(), self.weight.clone(), self.bias.clone()]
    }

    fn backward(&self, grad: &ArrayD<T>) {
        let g = grad.view().into_dimensionality::<Ix4>().unwrap();
        let xd = self.x.data();
        let x = xd.view().into_dimensionality::<Ix4>().unwrap();
        let wd = self.weight.data();
        let wt = wd.view().into_dimensionality::<Ix4>().unwrap();
        let (bs, cin, h, w) = x.dim();
        let (cout, _, kh, kw) = wt.dim();
        let (oh, ow) = (g.dim().2, g.dim().3);
        let w2 = wd
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();

        let mut dw = Array2::<T>::zeros((cout, cin * kh * kw));
        let mut db = Array1::<T>::zeros(cout);
        let mut dx = Array4::<T>::zeros((bs, cin, h, w));

        for b in 0..bs {
            let gview = g.index_axis(Axis(0), b);
            let gb = gview
                .into_shape_with_order((cout, oh * ow))
                .expect("contiguous gradient");
            if self.bias.requires_grad() {
                let gs = gb.as_slice().unwrap();
                for c in 0..cout {
                    let mut s = T::zero();
                    for v in &gs[c * oh * ow..(c + 1) * oh * ow] {
                        s += *v;
                    }
                    db[c] += s;
                }
            }
            let cols = &self.cols[b];
            if self.weight.requires_grad() {
                ndarray::linalg::general_mat_mul(T::one(), &gb, &cols.t(), T::one(), &mut dw);
            }
            if self.x.requires_grad() {
                let dcols = w2.t().dot(&gb);
                let mut dxb = dx.index_axis_mut(Axis(0), b);
                col2im(
                    &dcols,
                    dxb.as_slice_mut().unwrap(),
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                );
            }
        }
        drop(xd);
        drop(wd);
        if self.weight.requires_grad() {
            let dw4 = dw
                .into_shape_with_order((cout, cin, kh, kw))
                .unwrap()
                .into_dyn();
            self.weight.accumulate_grad(&dw4);
        }
        if self.bias.requires_grad() {
            self.bias.accumulate_grad(&db.into_dyn());
        }
        if self.x.requires_grad() {
            self.x.accumulate_grad(&dx.into_dyn());
        }
    }
}

/// 2-D convolution of `B×Cin×H×W` with a `Cout×Cin×kh×kw` kernel.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xd = x.data();
    let x4 = xd.view().into_dimensionality::<Ix4>().expect("4-d input");
    let wd = weight.data();
    let w4 = wd.view().into_dimensionality::<Ix4>().expect("4-d kernel");
    let bd = bias.data();
    let b1 = bd.view().into_dimensionality::<Ix1>().expect("1-d bias");
    let (bs, cin, h, w) = x4.dim();
    let (cout, wcin, kh, kw) = w4.dim();
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    assert_eq!(b1.len(), cout, "conv2d: bias length mismatch");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);

    let w2 = wd
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let xs = xd.as_slice().expect("standard layout");
    let track = grad_enabled()
        && (x.requires_grad() || weight.requires_grad() || bias.requires_grad());
    let mut out = Array4::<T>::zeros((bs, cout, oh, ow));
    let mut saved_cols: Vec<Array2<T>> = Vec::with_capacity(if track { bs } else { 0 });
    for b in 0..bs {
        let cols = im2col(
            &xs[b * cin * h * w..(b + 1) * cin * h * w],
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        let y = w2.dot(&cols); // (cout, oh*ow)
        if track {
            saved_cols.push(cols);
        }
        let mut ob = out.index_axis_mut(Axis(0), b);
        let os = ob.as_slice_mut().unwrap();
        let ys = y.as_slice().unwrap();
        for c in 0..cout {
            let bv = b1[c];
            for k in 0..oh * ow {
                os[c * oh * ow + k] = ys[c * oh * ow + k] + bv;
            }
        }
    }
    drop(xd);
    drop(wd);
    drop(bd);

    let (xc, wc, bc) = (x.clone(), weight.clone(), bias.clone());
    attach(out.into_dyn(), track, move || {
        Rc::new(Conv2dNode {
            x: xc,
            weight: wc,
            bias: bc,
            stride,
            pad,
            cols: saved_cols,
        })
    })
}

// ---------------------------------------------------------------------------
// per-channel normalization
// ---------------------------------------------------------------------------

struct ChannelNormTrainNode<T: Scalar> {
    x: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    xhat: ArrayD<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> Node<T> for ChannelNormTrainNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn backward(&self, grad: &ArrayD<T>) {
        let shape = grad.shape().to_vec();
        let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let n = T::cast((bs * hw) as f64);
        let gs = grad.as_slice().unwrap();
        let xh = self.xhat.as_slice().unwrap();
        let gd = self.gamma.data();
        let gamma = gd.view().into_dimensionality::<Ix1>().unwrap();

        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        let mut g_mean = Array1::<T>::zeros(c);
        let mut gx_mean = Array1::<T>::zeros(c);
        for ch in 0..c {
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for b in 0..bs {
                let lane = (b * c + ch) * hw;
                for k in 0..hw {
                    let gv = gs[lane + k];
                    sg += gv;
                    sgx += gv * xh[lane + k];
                }
            }
            dbeta[ch] = sg;
            dgamma[ch] = sgx;
            g_mean[ch] = sg / n;
            gx_mean[ch] = sgx / n;
        }

        if self.x.requires_grad() {
            let mut dx = ArrayD::<T>::zeros(grad.raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            for ch in 0..c {
                let scale = gamma[ch] * self.inv_std[ch];
                let (gm, gxm) = (g_mean[ch], gx_mean[ch]);
                for b in 0..bs {
                    let lane = (b * c + ch) * hw;
                    for k in 0..hw {
                        ds[lane + k] = scale * (gs[lane + k] - gm - xh[lane + k] * gxm);
                    }
                }
            }
            drop(gd);
            self.x.accumulate_grad(&dx);
        } else {
            drop(gd);
        }
        if self.gamma.requires_grad() {
            self.gamma.accumulate_grad(&dgamma.into_dyn());
        }
        if self.beta.requires_grad() {
            self.beta.accumulate_grad(&dbeta.into_dyn());
        }
    }
}

/// Per-channel normalization with batch statistics (training path).
///
/// Returns the normalized tensor plus the biased batch mean/variance per
/// channel so the caller can fold them into running averages.
pub fn channel_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, Array1<T>, Array1<T>) {
    let xd = x.data();
    let shape = xd.shape().to_vec();
    assert_eq!(shape.len(), 4, "channel norm needs a 4-d tensor");
    let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let n = T::cast((bs * hw) as f64);
    let xs = xd.as_slice().expect("standard layout");
    let gd = gamma.data();
    let g1 = gd.view().into_dimensionality::<Ix1>().unwrap();
    let bd = beta.data();
    let b1 = bd.view().into_dimensionality::<Ix1>().unwrap();

    let mut mean = Array1::<T>::zeros(c);
    let mut var = Array1::<T>::zeros(c);
    let mut inv_std = Array1::<T>::zeros(c);
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..bs {
            let lane = (b * c + ch) * hw;
            for k in 0..hw {
                s += xs[lane + k];
            }
        }
        let m = s / n;
        let mut v = T::zero();
        for b in 0..bs {
            let lane = (b * c + ch) * hw;
            for k in 0..hw {
                let d = xs[lane + k] - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / n;
        inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
    }

    let mut xhat = ArrayD::<T>::zeros(xd.raw_dim());
    let mut out = ArrayD::<T>::zeros(xd.raw_dim());
    {
        let xh = xhat.as_slice_mut().unwrap();
        let os = out.as_slice_mut().unwrap();
        for ch in 0..c {
            let (m, is, ga, be) = (mean[ch], inv_std[ch], g1[ch], b1[ch]);
            for b in 0..bs {
                let lane = (b * c + ch) * hw;
                for k in 0..hw {
                    let v = (xs[lane + k] - m) * is;
                    xh[lane + k] = v;
                    os[lane + k] = ga * v + be;
                }
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);

    let track = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    let saved_inv = inv_std.clone();
    let out_t = attach(out, track, move || {
        Rc::new(ChannelNormTrainNode {
            x: xc,
            gamma: gc,
            beta: bc,
            xhat,
            inv_std: saved_inv,
        })
    });
    (out_t, mean, var)
}

struct ChannelNormEvalNode<T: Scalar> {
    x: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    xhat: ArrayD<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> Node<T> for ChannelNormEvalNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn backward(&self, grad: &ArrayD<T>) {
        let shape = grad.shape().to_vec();
        let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let gs = grad.as_slice().unwrap();
        let xh = self.xhat.as_slice().unwrap();
        let gd = self.gamma.data();
        let gamma = gd.view().into_dimensionality::<Ix1>().unwrap();

        if self.x.requires_grad() {
            let mut dx = ArrayD::<T>::zeros(grad.raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            for ch in 0..c {
                let scale = gamma[ch] * self.inv_std[ch];
                for b in 0..bs {
                    let lane = (b * c + ch) * hw;
                    for k in 0..hw {
                        ds[lane + k] = scale * gs[lane + k];
                    }
                }
            }
            self.x.accumulate_grad(&dx);
        }
        if self.gamma.requires_grad() {
            let mut dgamma = Array1::<T>::zeros(c);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..bs {
                    let lane = (b * c + ch) * hw;
                    for k in 0..hw {
                        s += gs[lane + k] * xh[lane + k];
                    }
                }
                dgamma[ch] = s;
            }
            self.gamma.accumulate_grad(&dgamma.into_dyn());
        }
        if self.beta.requires_grad() {
            let mut dbeta = Array1::<T>::zeros(c);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..bs {
                    let lane = (b * c + ch) * hw;
                    for k in 0..hw {
                        s += gs[lane + k];
                    }
                }
                dbeta[ch] = s;
            }
            self.beta.accumulate_grad(&dbeta.into_dyn());
        }
    }
}

/// Per-channel normalization with frozen running statistics (eval path).
pub fn channel_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Array1<T>,
    running_var: &Array1<T>,
    eps: T,
) -> Tensor<T> {
    let xd = x.data();
    let shape = xd.shape().to_vec();
    assert_eq!(shape.len(), 4, "channel norm needs a 4-d tensor");
    let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let xs = xd.as_slice().expect("standard layout");
    let gd = gamma.data();
    let g1 = gd.view().into_dimensionality::<Ix1>().unwrap();
    let bd = beta.data();
    let b1 = bd.view().into_dimensionality::<Ix1>().unwrap();

    let track = grad_enabled()
        && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    let mut inv_std = Array1::<T>::zeros(c);
    for ch in 0..c {
        inv_std[ch] = T::one() / (running_var[ch] + eps).sqrt();
    }
    let mut xhat = if track {
        ArrayD::<T>::zeros(xd.raw_dim())
    } else {
        ArrayD::<T>::zeros(IxDyn(&[0]))
    };
    let mut out = ArrayD::<T>::zeros(xd.raw_dim());
    {
        let os = out.as_slice_mut().unwrap();
        for ch in 0..c {
            let (m, is, ga, be) = (running_mean[ch], inv_std[ch], g1[ch], b1[ch]);
            for b in 0..bs {
                let lane = (b * c + ch) * hw;
                for k in 0..hw {
                    os[lane + k] = ga * (xs[lane + k] - m) * is + be;
                }
            }
        }
        if track {
            let xh = xhat.as_slice_mut().unwrap();
            for ch in 0..c {
                let (m, is) = (running_mean[ch], inv_std[ch]);
                for b in 0..bs {
                    let lane = (b * c + ch) * hw;
                    for k in 0..hw {
                        xh[lane + k] = (xs[lane + k] - m) * is;
                    }
                }
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);

    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    attach(out, track, move || {
        Rc::new(ChannelNormEvalNode {
            x: xc,
            gamma: gc,
            beta: bc,
            xhat,
            inv_std,
        })
    })
}

// ---------------------------------------------------------------------------
// binary cross-entropy on logits
// ---------------------------------------------------------------------------

struct BceNode<T: Scalar> {
    logits: Tensor<T>,
    targets: Tensor<T>,
}

impl<T: Scalar> Node<T> for BceNode<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.logits.clone(), self.targets.clone()]
    }

    fn backward(&self, grad: &ArrayD<T>) {
        if !self.logits.requires_grad() {
            return;
        }
        let g = grad[IxDyn(&[])];
        let n = T::cast(self.logits.len() as f64);
        let ld = self.logits.data();
        let td = self.targets.data();
        let dz = ndarray::Zip::from(&*ld)
            .and(&*td)
            .map_collect(|&z, &y| (sigmoid_scalar(z) - y) * g / n);
        drop(ld);
        drop(td);
        self.logits.accumulate_grad(&dz);
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets,
/// evaluated in log-space: `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Tensor<T> {
    assert_eq!(logits.shape(), targets.shape(), "bce: shape mismatch");
    let ld = logits.data();
    let td = targets.data();
    let n = T::cast(logits.len() as f64);
    let mut sum = T::zero();
    ndarray::Zip::from(&*ld).and(&*td).for_each(|&z, &y| {
        sum += bce_elem(z, y);
    });
    drop(ld);
    drop(td);
    let data = ArrayD::from_elem(IxDyn(&[]), sum / n);
    let (lc, tc) = (logits.clone(), targets.clone());
    attach(data, logits.requires_grad(), move || {
        Rc::new(BceNode {
            logits: lc,
            targets: tc,
        })
    })
}

/// Stable per-element BCE term.
pub fn bce_elem<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
}


#[cfg(test)]
mod timing {
    use super::*;
    use crate::rng;
    use rand::Rng;

    // cargo test -p hcdg-core --release ops::timing -- --ignored --nocapture
    #[test]
    #[ignore]
    fn profile_primitives() {
        let mut r = rng::stream(0, "bench");
        let reps = 50;

        // conv at the benchmark's first expensive layer: 8→16 @ 32², batch 3
        let x = Tensor::from_array(
            ndarray::Array4::<f32>::from_shape_fn((3, 8, 64, 64), |_| r.random_range(-1.0..1.0)),
            true,
        );
        let w = Tensor::from_array(
            ndarray::Array4::<f32>::from_shape_fn((16, 8, 3, 3), |_| r.random_range(-0.3..0.3)),
            true,
        );
        let b = Tensor::from_array(ndarray::Array1::<f32>::zeros(16), true);

        let t = std::time::Instant::now();
        for _ in 0..reps {
            let _ = conv2d(&x, &w, &b, 2, 1);
        }
        println!("conv fwd 3x8x64x64→16@s2: {:.2} ms", t.elapsed().as_secs_f64() / reps as f64 * 1000.0);

        let t = std::time::Instant::now();
        for _ in 0..reps {
            let y = conv2d(&x, &w, &b, 2, 1);
            y.sum_all().backward().unwrap();
            x.zero_grad(); w.zero_grad(); b.zero_grad();
        }
        println!("conv fwd+bwd: {:.2} ms", t.elapsed().as_secs_f64() / reps as f64 * 1000.0);

        let g = Tensor::from_array(
            ndarray::Array1::<f32>::from_elem(16, 1.0), true);
        let be = Tensor::from_array(ndarray::Array1::<f32>::zeros(16), true);
        let y = conv2d(&x, &w, &b, 2, 1).detach();
        let yt = Tensor::new(y.data().clone(), true);
        let t = std::time::Instant::now();
        for _ in 0..reps {
            let _ = channel_norm_train(&yt, &g, &be, 1e-5);
        }
        println!("bn train fwd 3x16x32x32: {:.2} ms", t.elapsed().as_secs_f64() / reps as f64 * 1000.0);

        let logits = Tensor::from_array(
            ndarray::Array4::<f32>::from_shape_fn((3, 2, 64, 64), |_| r.random_range(-3.0..3.0)),
            true,
        );
        let t = std::time::Instant::now();
        for _ in 0..reps {
            let _ = logits.softmax_channels();
        }
        println!("softmax 3x2x64x64: {:.2} ms", t.elapsed().as_secs_f64() / reps as f64 * 1000.0);

        let targets = Tensor::from_array(ndarray::Array4::<f32>::zeros((3, 2, 64, 64)), false);
        let t = std::time::Instant::now();
        for _ in 0..reps {
            let _ = bce_with_logits(&logits, &targets);
        }
        println!("bce 3x2x64x64: {:.2} ms", t.elapsed().as_secs_f64() / reps as f64 * 1000.0);

        let up = Tensor::from_array(
            ndarray::Array4::<f32>::from_shape_fn((3, 16, 16, 16), |_| r.random_range(-1.0..1.0)),
            true,
        );
        let t = std::time::Instant::now();
        for _ in 0..reps {
            let _ = up.upsample_nearest_2x();
        }
        println!("upsample 3x16x16x16: {:.2} ms", t.elapsed().as_secs_f64() / reps as f64 * 1000.0);
    }
}
