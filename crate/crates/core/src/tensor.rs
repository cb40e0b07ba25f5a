//! Dense rank-4 tensors in `(n, c, h, w)` row-major layout and the pure
//! kernels the autodiff tape is built on.
//!
//! Every function here is value-in/value-out: tensors are never mutated
//! after construction by the graph, so kernels can be shared freely.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element type. Implemented for `f32` (storage) and `f64`
/// (gradient-check shadow mode).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary strides.
    ///
    /// # Safety
    /// The strides must address memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
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

impl Real for f64 {
    unsafe fn gemm_raw(
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

/// Row-major matrix product `c = op(a) * op(b) + beta * c`.
///
/// `op(a)` is `m x k`; when `a_t` is set, `a` is stored as `k x m`.
/// `op(b)` is `k x n`; when `b_t` is set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe dense row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        let dims = shape.dims();
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                ["n", "c", "h", "w"][i],
                format!("zero-sized dimension in {shape}"),
            ));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                "data",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(!shape.is_empty(), "zero-sized tensor {shape}");
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        assert!(!shape.is_empty(), "zero-sized tensor {shape}");
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Same data, new shape with an equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().expect("real to f64")))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(op, self, other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Single batch item as a `(1, c, h, w)` tensor.
    pub fn item(&self, n: usize) -> Self {
        let len = self.shape.item();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks `(1, c, h, w)` items along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no items"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::shape(
                    "stack",
                    "chw",
                    format!("{} vs {}", t.shape, first),
                ));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape::new(n, first.c, first.h, first.w), data)
    }
}

pub(crate) fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape == b.shape {
        return Ok(());
    }
    let (x, y) = (a.shape.dims(), b.shape.dims());
    let i = (0..4).find(|&i| x[i] != y[i]).unwrap();
    Err(Error::shape(
        op,
        ["n", "c", "h", "w"][i],
        format!("{} vs {}", a.shape, b.shape),
    ))
}

/// Hyperparameters of a 2-D convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const fn same(kernel: usize, groups: usize) -> Self {
        ConvParams {
            stride: 1,
            padding: (kernel - 1) / 2,
            groups,
        }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Copy, Clone, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    fh: usize,
    fw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.fh * self.fw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.fh == 1 && self.fw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
}

fn conv_geom<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<ConvGeom> {
    let (is, ws) = (input.shape, weights.shape);
    if p.stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if p.groups == 0 {
        return Err(Error::invalid("conv2d", "groups must be at least 1"));
    }
    if is.c % p.groups != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("groups {} do not divide input channels {}", p.groups, is.c),
        ));
    }
    if ws.n % p.groups != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("groups {} do not divide output channels {}", p.groups, ws.n),
        ));
    }
    if ws.c != is.c / p.groups {
        return Err(Error::shape(
            "conv2d",
            "weight channel-in",
            format!(
                "weights {ws} expect {} input channels per group, input {is} with {} groups gives {}",
                ws.c,
                p.groups,
                is.c / p.groups
            ),
        ));
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::shape(
                "conv2d",
                "bias",
                format!("{} entries for {} output channels", b.len(), ws.n),
            ));
        }
    }
    if is.h + 2 * p.padding < ws.h || is.w + 2 * p.padding < ws.w {
        return Err(Error::shape(
            "conv2d",
            "spatial",
            format!("kernel {}x{} larger than padded input {is}", ws.h, ws.w),
        ));
    }
    Ok(ConvGeom {
        n: is.n,
        cin: is.c,
        h: is.h,
        w: is.w,
        cout: ws.n,
        fh: ws.h,
        fw: ws.w,
        ho: (is.h + 2 * p.padding - ws.h) / p.stride + 1,
        wo: (is.w + 2 * p.padding - ws.w) / p.stride + 1,
        stride: p.stride,
        pad: p.padding,
        groups: p.groups,
    })
}

/// Unfolds the `cin_g` channels at `x` (one image, one group) into a
/// `(cin_g * fh * fw) x (ho * wo)` column matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let plane = g.h * g.w;
    let op = g.out_plane();
    for ci in 0..g.cin_g() {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..g.fh {
            for kx in 0..g.fw {
                let row = (ci * g.fh + ky) * g.fw + kx;
                let dst = &mut col[row * op..(row + 1) * op];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into `dx`.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let plane = g.h * g.w;
    let op = g.out_plane();
    for ci in 0..g.cin_g() {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..g.fh {
            for kx in 0..g.fw {
                let row = (ci * g.fh + ky) * g.fw + kx;
                let src = &col[row * op..(row + 1) * op];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward_item<T: Real>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (plane, op, taps) = (g.h * g.w, g.out_plane(), g.fh * g.fw);
    for c in 0..g.cout {
        let src = &x[c * plane..(c + 1) * plane];
        let k = &w[c * taps..(c + 1) * taps];
        let dst = &mut out[c * op..(c + 1) * op];
        for ky in 0..g.fh {
            for kx in 0..g.fw {
                let wv = k[ky * g.fw + kx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] += wv * srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward_item<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    let (plane, op, taps) = (g.h * g.w, g.out_plane(), g.fh * g.fw);
    for c in 0..g.cout {
        let src = &x[c * plane..(c + 1) * plane];
        let dsrc = &mut dx[c * plane..(c + 1) * plane];
        let k = &w[c * taps..(c + 1) * taps];
        let dk = &mut dw[c * taps..(c + 1) * taps];
        let go = &gout[c * op..(c + 1) * op];
        for ky in 0..g.fh {
            for kx in 0..g.fw {
                let wv = k[ky * g.fw + kx];
                let mut acc = T::zero();
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let gv = go[oy * g.wo + ox];
                            acc += gv * src[base + ix as usize];
                            dsrc[base + ix as usize] += gv * wv;
                        }
                    }
                }
                dk[ky * g.fw + kx] += acc;
            }
        }
    }
}

/// 2-D cross-correlation with zero padding and grouped channels.
///
/// `weights` is `(ch_o, ch_i / groups, fh, fw)`; `bias`, when present, holds
/// `ch_o` values in any shape.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, weights, bias, p)?;
    let out_shape = Shape::new(g.n, g.cout, g.ho, g.wo);
    let mut out = vec![T::zero(); out_shape.len()];
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.out_plane();
    let (cin_g, cout_g, patch, op) = (g.cin_g(), g.cout_g(), g.patch(), g.out_plane());
    let w = weights.data();

    out.par_chunks_mut(out_item)
        .zip(input.data().par_chunks(in_item))
        .for_each(|(o, x)| {
            if g.is_depthwise() {
                depthwise_forward_item(&g, x, w, o);
            } else {
                let mut col = if g.is_pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); patch * op]
                };
                for grp in 0..g.groups {
                    let xg = &x[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
                    let cols: &[T] = if g.is_pointwise() {
                        xg
                    } else {
                        im2col(&g, xg, &mut col);
                        &col
                    };
                    let wg = &w[grp * cout_g * patch..(grp + 1) * cout_g * patch];
                    let og = &mut o[grp * cout_g * op..(grp + 1) * cout_g * op];
                    matmul(cout_g, patch, op, wg, false, cols, false, T::zero(), og);
                }
            }
            if let Some(b) = bias {
                for (c, &bv) in b.data().iter().enumerate() {
                    for v in &mut o[c * op..(c + 1) * op] {
                        *v += bv;
                    }
                }
            }
        });
    Tensor::new(out_shape, out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: ConvParams,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv_geom(input, weights, None, p)?;
    let expect = Shape::new(g.n, g.cout, g.ho, g.wo);
    if grad_out.shape != expect {
        return Err(Error::shape(
            "conv2d_backward",
            "grad_out",
            format!("{} vs expected {expect}", grad_out.shape),
        ));
    }
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.out_plane();
    let (cin_g, cout_g, patch, op) = (g.cin_g(), g.cout_g(), g.patch(), g.out_plane());
    let w = weights.data();
    let wlen = w.len();
    let mut dx = vec![T::zero(); input.len()];

    let partials: Vec<Vec<T>> = dx
        .par_chunks_mut(in_item)
        .zip(input.data().par_chunks(in_item))
        .zip(grad_out.data().par_chunks(out_item))
        .map(|((dxi, x), go)| {
            let mut dw = vec![T::zero(); wlen];
            if g.is_depthwise() {
                depthwise_backward_item(&g, x, w, go, dxi, &mut dw);
                return dw;
            }
            let mut col = vec![T::zero(); patch * op];
            let mut dcol = vec![T::zero(); patch * op];
            for grp in 0..g.groups {
                let span = cin_g * g.h * g.w;
                let xg = &x[grp * span..(grp + 1) * span];
                let gog = &go[grp * cout_g * op..(grp + 1) * cout_g * op];
                let wg = &w[grp * cout_g * patch..(grp + 1) * cout_g * patch];
                let dwg = &mut dw[grp * cout_g * patch..(grp + 1) * cout_g * patch];
                let dxg = &mut dxi[grp * span..(grp + 1) * span];
                if g.is_pointwise() {
                    matmul(cout_g, op, patch, gog, false, xg, true, T::one(), dwg);
                    matmul(patch, cout_g, op, wg, true, gog, false, T::zero(), dxg);
                } else {
                    im2col(&g, xg, &mut col);
                    matmul(cout_g, op, patch, gog, false, &col, true, T::one(), dwg);
                    matmul(patch, cout_g, op, wg, true, gog, false, T::zero(), &mut dcol);
                    col2im(&g, &dcol, dxg);
                }
            }
            dw
        })
        .collect();

    let mut dw = vec![T::zero(); wlen];
    for part in &partials {
        for (a, &b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut db = vec![T::zero(); g.cout];
    for item in grad_out.data().chunks(out_item) {
        for (c, acc) in db.iter_mut().enumerate() {
            *acc += item[c * op..(c + 1) * op].iter().copied().sum::<T>();
        }
    }
    Ok((
        Tensor::new(input.shape, dx)?,
        Tensor::new(weights.shape, dw)?,
        Tensor::new(Shape::new(g.cout, 1, 1, 1), db)?,
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

/// `(gamma + 1) * x + beta`, elementwise.
pub fn affine_gate<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("affine_gate", x, gamma)?;
    same_shape("affine_gate", x, beta)?;
    let data = x
        .data
        .iter()
        .zip(&gamma.data)
        .zip(&beta.data)
        .map(|((&x, &g), &b)| (g + T::one()) * x + b)
        .collect();
    Tensor::new(x.shape, data)
}

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no parts"))?
        .shape;
    for p in parts {
        let s = p.shape;
        for (dim, a, b) in [("n", s.n, first.n), ("h", s.h, first.h), ("w", s.w, first.w)] {
            if a != b {
                return Err(Error::shape(
                    "concat_channels",
                    dim,
                    format!("{s} vs {first}"),
                ));
            }
        }
    }
    let c: usize = parts.iter().map(|p| p.shape.c).sum();
    let mut data = Vec::with_capacity(first.n * c * first.plane());
    for n in 0..first.n {
        for p in parts {
            let len = p.shape.item();
            data.extend_from_slice(&p.data[n * len..(n + 1) * len]);
        }
    }
    Tensor::new(Shape::new(first.n, c, first.h, first.w), data)
}

/// Channels `[start, start + len)` of every batch item.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape;
    if len == 0 || start + len > s.c {
        return Err(Error::shape(
            "slice_channels",
            "c",
            format!("range {start}..{} outside {s}", start + len),
        ));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let base = n * s.item() + start * plane;
        data.extend_from_slice(&x.data[base..base + len * plane]);
    }
    Tensor::new(Shape::new(s.n, len, s.h, s.w), data)
}

/// Sub-pixel rearrangement: `out[n, k, r*y + i, r*x + j] = in[n, k*r*r + i*r + j, y, x]`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape;
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            "c",
            format!("{} channels not divisible by r^2 = {}", s.c, r * r),
        ));
    }
    let out_shape = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    let mut data = vec![T::zero(); s.len()];
    let (oh, ow) = (out_shape.h, out_shape.w);
    for n in 0..s.n {
        for k in 0..out_shape.c {
            for i in 0..r {
                for j in 0..r {
                    let ci = k * r * r + i * r + j;
                    for y in 0..s.h {
                        let src = x.index(n, ci, y, 0);
                        let dst = ((n * out_shape.c + k) * oh + r * y + i) * ow + j;
                        for xx in 0..s.w {
                            data[dst + r * xx] = x.data[src + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, data)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape;
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            "h/w",
            format!("{s} spatial dims not divisible by {r}"),
        ));
    }
    let out_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut data = vec![T::zero(); s.len()];
    for n in 0..s.n {
        for k in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let co = k * r * r + i * r + j;
                    for y in 0..out_shape.h {
                        for xx in 0..out_shape.w {
                            let dst = ((n * out_shape.c + co) * out_shape.h + y) * out_shape.w + xx;
                            data[dst] = x.at(n, k, r * y + i, r * xx + j);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, data)
}

/// One of the eight symmetries of the square acting on the spatial axes:
/// an optional horizontal flip followed by `rot` quarter turns
/// counter-clockwise.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        rot: 0,
        flip: false,
    };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Dihedral::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            *d = Dihedral {
                rot: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        out
    }

    pub fn from_index(i: usize) -> Dihedral {
        Dihedral::all()[i % 8]
    }

    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut t = if self.flip { flip_w(x) } else { x.clone() };
        for _ in 0..self.rot % 4 {
            t = rot90(&t);
        }
        t
    }

    pub fn invert<T: Real>(&self, y: &Tensor<T>) -> Tensor<T> {
        let mut t = y.clone();
        for _ in 0..(4 - self.rot % 4) % 4 {
            t = rot90(&t);
        }
        if self.flip {
            flip_w(&t)
        } else {
            t
        }
    }
}

fn flip_w<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    Tensor::from_fn(s, |n, c, y, xx| x.at(n, c, y, s.w - 1 - xx))
}

/// Quarter turn counter-clockwise: `out[i][j] = in[j][w - 1 - i]`.
fn rot90<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    Tensor::from_fn(Shape::new(s.n, s.c, s.w, s.h), |n, c, i, j| {
        x.at(n, c, j, s.w - 1 - i)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> Tensor<f64> {
        let mut k = 0.0;
        Tensor::from_fn(shape, |_, _, _, _| {
            k += 1.0;
            k
        })
    }

    #[test]
    fn identity_pointwise_conv() {
        let x = ramp(Shape::new(2, 3, 4, 5));
        let w = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| f64::from(o == i));
        let y = conv2d(&x, &w, None, ConvParams::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, None, ConvParams::same(3, 1)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (yy, xx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, yy, xx), 4.0);
        }
        for (yy, xx) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert_eq!(y.at(0, 0, yy, xx), 6.0);
        }
    }

    #[test]
    fn depthwise_impulse_is_identity() {
        let x = ramp(Shape::new(1, 4, 5, 6));
        let w = Tensor::from_fn(Shape::new(4, 1, 3, 3), |_, _, y, xx| f64::from(y == 1 && xx == 1));
        let y = conv2d(&x, &w, None, ConvParams::same(3, 4)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_output_shape_with_stride() {
        let x = ramp(Shape::new(1, 2, 7, 8));
        let w = Tensor::full(Shape::new(3, 2, 3, 3), 0.5);
        let p = ConvParams {
            stride: 2,
            padding: 1,
            groups: 1,
        };
        assert_eq!(conv2d(&x, &w, None, p).unwrap().shape(), Shape::new(1, 3, 4, 4));
    }

    #[test]
    fn conv_rejects_bad_groups_and_channels() {
        let x = ramp(Shape::new(1, 6, 4, 4));
        let w = Tensor::full(Shape::new(4, 3, 3, 3), 1.0);
        let err = conv2d(&x, &w, None, ConvParams::same(3, 4)).unwrap_err();
        assert!(err.to_string().contains("groups 4"), "{err}");
        let w = Tensor::full(Shape::new(4, 5, 3, 3), 1.0);
        let err = conv2d(&x, &w, None, ConvParams::same(3, 1)).unwrap_err();
        assert!(err.to_string().contains("weight channel-in"), "{err}");
        let w = Tensor::full(Shape::new(4, 6, 3, 3), 1.0);
        let b = Tensor::full(Shape::new(3, 1, 1, 1), 1.0);
        let err = conv2d(&x, &w, Some(&b), ConvParams::same(3, 1)).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let s = sigmoid(&Tensor::new(Shape::new(1, 1, 1, 3), vec![0.0f64, 2.0, -2.0]).unwrap());
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 0.880797).abs() < 1e-6);
        assert!((s.data()[1] + s.data()[2] - 1.0).abs() < 1e-15);
        let extreme = sigmoid(&Tensor::new(Shape::new(1, 1, 1, 2), vec![-800.0f64, 800.0]).unwrap());
        assert!(extreme.data()[0] >= 0.0 && extreme.data()[1] <= 1.0);
    }

    #[test]
    fn gate_and_add() {
        let one = |v: f64| Tensor::scalar(v);
        assert_eq!(affine_gate(&one(1.0), &one(0.5), &one(-0.25)).unwrap().data(), &[1.25]);
        let x = ramp(Shape::new(1, 2, 2, 2));
        let z = Tensor::zeros(x.shape());
        assert_eq!(affine_gate(&x, &z, &z).unwrap(), x);
        assert_eq!(add(&x, &x.scale(-1.0)).unwrap(), z);
        assert!(add(&x, &Tensor::zeros(Shape::new(1, 2, 2, 3))).is_err());
    }

    #[test]
    fn concat_then_slice_round_trip() {
        let parts: Vec<_> = (0..4)
            .map(|i| ramp(Shape::new(1, 64, 8, 8)).scale(i as f64))
            .collect();
        let refs: Vec<_> = parts.iter().collect();
        let cat = concat_channels(&refs).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 256, 8, 8));
        for (i, p) in parts.iter().enumerate() {
            assert_eq!(&slice_channels(&cat, i * 64, 64).unwrap(), p);
        }
        assert_eq!(concat_channels(&[&parts[0]]).unwrap(), parts[0]);
        let odd = ramp(Shape::new(1, 2, 8, 7));
        let err = concat_channels(&[&parts[0], &odd]).unwrap_err();
        assert!(err.to_string().contains("in w"), "{err}");
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = ramp(Shape::new(1, 12, 4, 4));
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 8, 8));
        for k in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(y.at(0, k, 2 * 3 + i, 2 + j), x.at(0, k * 4 + i * 2 + j, 3, 1));
                }
            }
        }
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&x, 3).is_err());
    }

    #[test]
    fn dihedral_inverse() {
        let x = ramp(Shape::new(1, 2, 3, 5));
        for d in Dihedral::all() {
            let t = d.apply(&x);
            if d.rot % 2 == 1 {
                assert_eq!(t.shape(), Shape::new(1, 2, 5, 3));
            }
            assert_eq!(d.invert(&t), x, "{d:?}");
        }
        let distinct: std::collections::HashSet<_> = Dihedral::all()
            .iter()
            .map(|d| {
                let sq = ramp(Shape::new(1, 1, 3, 3));
                d.apply(&sq).data().iter().map(|v| *v as i64).collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::<f32>::new(Shape::new(1, 0, 2, 2), vec![]).is_err());
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }
}
