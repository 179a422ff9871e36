//! Dense row-major tensors and the scalar trait shared by the f32 training path
//! and the f64 gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Float for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c = op(a) * op(b) + beta * c` with row-major storage.
///
/// `a` is `m x k` (stored `k x m` when `ta`), `b` is `k x n` (stored `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    b: &[F],
    tb: bool,
    c: &mut [F],
    beta: F,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides match the documented layouts.
    unsafe {
        F::raw_gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        }
    }

    /// Item `i` of a batched tensor, keeping the batch axis.
    pub fn batch_item(&self, i: usize) -> Self {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Item `i` of a batched tensor without the batch axis.
    pub fn item(&self, i: usize) -> Self {
        let t = self.batch_item(i);
        Self {
            shape: t.shape[1..].to_vec(),
            data: t.data,
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot batch zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            first.check_same(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenate along the leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot stack zero tensors".into()))?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut lead = 0;
        for t in items {
            if &t.shape[1..] != inner {
                return Err(Error::ShapeMismatch(format!(
                    "stack {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self { shape, data })
    }
}

/// Nearest-neighbour integer upsampling of an NCHW tensor.
pub fn upsample_nearest<F: Float>(x: &Tensor<F>, f: usize) -> Tensor<F> {
    let (b, c, h, w) = x.dims4();
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![F::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / f) * w..(oy / f + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = row[ox / f];
            }
        }
    }
    Tensor {
        shape: vec![b, c, oh, ow],
        data: out,
    }
}

/// Block-mean downsampling of an NCHW tensor by an integer factor.
pub fn avg_pool<F: Float>(x: &Tensor<F>, f: usize) -> Tensor<F> {
    let (b, c, h, w) = x.dims4();
    let (oh, ow) = (h / f, w / f);
    let inv = F::of(1.0 / (f * f) as f64);
    let mut out = vec![F::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for y in 0..oh * f {
            for xx in 0..ow * f {
                dst[(y / f) * ow + xx / f] += src[y * w + xx];
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    Tensor {
        shape: vec![b, c, oh, ow],
        data: out,
    }
}

/// Bilinear resize of an NCHW tensor (half-pixel centres, edge clamped).
pub fn resize_bilinear<F: Float>(x: &Tensor<F>, oh: usize, ow: usize) -> Tensor<F> {
    let (b, c, h, w) = x.dims4();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let taps = |o: usize, s: f64, n: usize| {
        let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let ys: Vec<_> = (0..oh).map(|o| taps(o, sy, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| taps(o, sx, w)).collect();
    let mut out = vec![F::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data[bc * h * w..(bc + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = |yy: usize, xx: usize| src[yy * w + xx].as_f64();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out[bc * oh * ow + oy * ow + ox] = F::of(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor {
        shape: vec![b, c, oh, ow],
        data: out,
    }
}

/// Rearranges `p x p` pixel blocks into channels: `[B,C,H,W] -> [B,C*p*p,H/p,W/p]`.
///
/// Output channel `c*p*p + dy*p + dx` holds pixel `(dy, dx)` of each block.
pub fn space_to_depth<F: Float>(x: &Tensor<F>, p: usize) -> Tensor<F> {
    let (b, c, h, w) = x.dims4();
    let (oh, ow) = (h / p, w / p);
    let oc = c * p * p;
    let mut out = vec![F::zero(); b * oc * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x.data[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let ch = ci * p * p + (y % p) * p + xx % p;
                    out[((bi * oc + ch) * oh + y / p) * ow + xx / p] = src[y * w + xx];
                }
            }
        }
    }
    Tensor {
        shape: vec![b, oc, oh, ow],
        data: out,
    }
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<F: Float>(x: &Tensor<F>, p: usize) -> Tensor<F> {
    let (b, ic, ih, iw) = x.dims4();
    let c = ic / (p * p);
    let (h, w) = (ih * p, iw * p);
    let mut out = vec![F::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let ch = ci * p * p + (y % p) * p + xx % p;
                    dst[y * w + xx] = x.data[((bi * ic + ch) * ih + y / p) * iw + xx / p];
                }
            }
        }
    }
    Tensor {
        shape: vec![b, c, h, w],
        data: out,
    }
}

/// One-hot encoding of class maps: `labels[b*h*w]` -> `[B,K,H,W]`.
pub fn one_hot<F: Float>(labels: &[usize], b: usize, k: usize, h: usize, w: usize) -> Tensor<F> {
    assert_eq!(labels.len(), b * h * w);
    let mut data = vec![F::zero(); b * k * h * w];
    for bi in 0..b {
        for p in 0..h * w {
            let c = labels[bi * h * w + p];
            data[(bi * k + c) * h * w + p] = F::one();
        }
    }
    Tensor {
        shape: vec![b, k, h, w],
        data,
    }
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let (b, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![F::zero(); x.numel()];
    for bi in 0..b {
        for p in 0..hw {
            let at = |ci: usize| (bi * c + ci) * hw + p;
            let m = (0..c).map(|ci| x.data[at(ci)]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for ci in 0..c {
                let e = (x.data[at(ci)] - m).exp();
                out[at(ci)] = e;
                z += e;
            }
            for ci in 0..c {
                out[at(ci)] = out[at(ci)] / z;
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Per-pixel argmax over channels: `[B,K,H,W]` -> `labels[b*h*w]`.
pub fn argmax_channels<F: Float>(x: &Tensor<F>) -> Vec<usize> {
    let (b, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for ci in 1..c {
                if x.data[(bi * c + ci) * hw + p] > x.data[(bi * c + best) * hw + p] {
                    best = ci;
                }
            }
            out.push(best);
        }
    }
    out
}
