//! 2D convolution and its adjoint (transposed convolution), NHWC layout.
//!
//! Both go through im2col and a single GEMM per batch element. Kernels are
//! stored `K × K × Cin × Cout` for [`conv2d`]; [`conv2d_transpose`] reads the
//! same layout with the roles of the channel axes swapped, which is what makes
//! it the exact adjoint.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamKind, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output is `ceil(in / stride)`; extra padding goes after (bottom/right).
    Same,
    Valid,
}

/// Spatial arithmetic of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_and_pad(n: usize, k: usize, s: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if n < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("input extent {n} smaller than kernel {k} with valid padding"),
                ));
            }
            Ok(((n - k) / s + 1, 0))
        }
        Padding::Same => {
            let out = n.div_ceil(s);
            let total = ((out.max(1) - 1) * s + k).saturating_sub(n);
            Ok((out, total / 2))
        }
    }
}

impl ConvGeom {
    pub fn new(
        in_h: usize,
        in_w: usize,
        k: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {k} and stride {stride} must be ≥ 1"
            )));
        }
        let (out_h, pad_top) = out_and_pad(in_h, k, stride, padding)?;
        let (out_w, pad_left) = out_and_pad(in_w, k, stride, padding)?;
        Ok(ConvGeom {
            k,
            stride,
            in_h,
            in_w,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// One batch element `H × W × C` to rows of `K·K·C` patch values.
fn im2col<T: Real>(src: &[T], g: &ConvGeom, c: usize, cols: &mut [T]) {
    let row = g.k * g.k * c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let dst = &mut cols[(oy * g.out_w + ox) * row..][..row];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let d = &mut dst[(ky * g.k + kx) * c..][..c];
                    match g.src(oy, ox, ky, kx) {
                        Some((y, x)) => d.copy_from_slice(&src[(y * g.in_w + x) * c..][..c]),
                        None => d.iter_mut().for_each(|v| *v = T::zero()),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into `dst`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, c: usize, dst: &mut [T]) {
    let row = g.k * g.k * c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let src = &cols[(oy * g.out_w + ox) * row..][..row];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((y, x)) = g.src(oy, ox, ky, kx) {
                        let d = &mut dst[(y * g.in_w + x) * c..][..c];
                        for (a, &b) in d.iter_mut().zip(&src[(ky * g.k + kx) * c..][..c]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

fn kernel_dims<T: Real>(w: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match w.shape()[..] {
        [kh, kw, ci, co] if kh == kw => Ok([kh, kw, ci, co]),
        _ => Err(Error::shape(
            op,
            format!("kernel must be K×K×Cin×Cout, got {:?}", w.shape()),
        )),
    }
}

fn check_bias<T: Real>(b: Option<&Tensor<T>>, n: usize, op: &'static str) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [n] {
            return Err(Error::shape(
                op,
                format!("bias {:?} vs {n} output channels", b.shape()),
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn channel_sums<T: Real>(g: &[T], c: usize) -> Vec<T> {
    let mut s = vec![T::zero(); c];
    for row in g.chunks_exact(c) {
        for (a, &b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

/// `B×H×W×Cin` ⊛ `K×K×Cin×Cout` → `B×H'×W'×Cout`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [bn, h, wd, cin] = x.dims4("conv2d")?;
    let [k, _, kcin, cout] = kernel_dims(w, "conv2d")?;
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    check_bias(b, cout, "conv2d")?;
    let g = ConvGeom::new(h, wd, k, stride, padding)?;
    let p = g.out_h * g.out_w;
    let row = k * k * cin;
    let mut out = Tensor::zeros(&[bn, g.out_h, g.out_w, cout]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); p * row]
    };
    for bi in 0..bn {
        let xs = &x.data()[bi * h * wd * cin..][..h * wd * cin];
        let a: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, cin, &mut cols);
            &cols
        };
        let o = &mut out.data_mut()[bi * p * cout..][..p * cout];
        T::gemm(p, row, cout, a, false, w.data(), false, T::zero(), o);
        if let Some(b) = b {
            add_bias(o, b.data());
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: returns `(dx, dw, db)`; `dx` only if requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Vec<T>)> {
    let [bn, h, wd, cin] = x.dims4("conv2d_backward")?;
    let [k, _, _, cout] = kernel_dims(w, "conv2d_backward")?;
    let g = ConvGeom::new(h, wd, k, stride, padding)?;
    if dy.shape() != [bn, g.out_h, g.out_w, cout] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?} vs output {:?}",
                dy.shape(),
                [bn, g.out_h, g.out_w, cout]
            ),
        ));
    }
    let p = g.out_h * g.out_w;
    let row = k * k * cin;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![T::zero(); cout];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); p * row]
    };
    let mut dcols = vec![T::zero(); if need_dx { p * row } else { 0 }];
    for bi in 0..bn {
        let xs = &x.data()[bi * h * wd * cin..][..h * wd * cin];
        let dys = &dy.data()[bi * p * cout..][..p * cout];
        let a: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, cin, &mut cols);
            &cols
        };
        T::gemm(row, p, cout, a, true, dys, false, T::one(), dw.data_mut());
        for (s, v) in db.iter_mut().zip(channel_sums(dys, cout)) {
            *s += v;
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[bi * h * wd * cin..][..h * wd * cin];
            if g.is_pointwise() {
                T::gemm(p, cout, row, dys, false, w.data(), true, T::zero(), dxs);
            } else {
                T::gemm(
                    p,
                    cout,
                    row,
                    dys,
                    false,
                    w.data(),
                    true,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, &g, cin, dxs);
            }
        }
    }
    Ok((dx, dw, db))
}

/// Output extent of a transposed convolution.
pub fn transpose_out_extent(n: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => n * stride,
        Padding::Valid => (n - 1) * stride + k,
    }
}

fn transpose_geom(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: Padding,
    out_hw: Option<(usize, usize)>,
) -> Result<ConvGeom> {
    let (oh, ow) = out_hw.unwrap_or((
        transpose_out_extent(h, k, stride, padding),
        transpose_out_extent(w, k, stride, padding),
    ));
    let g = ConvGeom::new(oh, ow, k, stride, padding)?;
    if g.out_h != h || g.out_w != w {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("output {oh}×{ow} does not convolve back to input {h}×{w}"),
        ));
    }
    Ok(g)
}

/// Adjoint of [`conv2d`] with the same kernel tensor: input has the kernel's
/// `Cout` channels, output has its `Cin` channels. `out_hw` defaults to the
/// standard transposed extent.
pub fn conv2d_transpose<T: Real>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
    out_hw: Option<(usize, usize)>,
) -> Result<Tensor<T>> {
    let [bn, h, wd, cy] = y.dims4("conv2d_transpose")?;
    let [k, _, cout, kcy] = kernel_dims(w, "conv2d_transpose")?;
    if kcy != cy {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input has {cy} channels, kernel expects {kcy}"),
        ));
    }
    check_bias(b, cout, "conv2d_transpose")?;
    let g = transpose_geom(h, wd, k, stride, padding, out_hw)?;
    let p = h * wd;
    let row = k * k * cout;
    let hw_out = g.in_h * g.in_w;
    let mut out = Tensor::zeros(&[bn, g.in_h, g.in_w, cout]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { p * row }];
    for bi in 0..bn {
        let ys = &y.data()[bi * p * cy..][..p * cy];
        let o = &mut out.data_mut()[bi * hw_out * cout..][..hw_out * cout];
        if g.is_pointwise() {
            T::gemm(p, cy, row, ys, false, w.data(), true, T::zero(), o);
        } else {
            T::gemm(p, cy, row, ys, false, w.data(), true, T::zero(), &mut cols);
            col2im(&cols, &g, cout, o);
        }
        if let Some(b) = b {
            add_bias(o, b.data());
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_transpose`]: `(dy, dw, db)`.
pub fn conv2d_transpose_backward<T: Real>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_dy: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Vec<T>)> {
    let [bn, h, wd, cy] = y.dims4("conv2d_transpose_backward")?;
    let [k, _, cout, _] = kernel_dims(w, "conv2d_transpose_backward")?;
    let [_, oh, ow, oc] = dout.dims4("conv2d_transpose_backward")?;
    if oc != cout {
        return Err(Error::shape(
            "conv2d_transpose_backward",
            format!("upstream gradient has {oc} channels, expected {cout}"),
        ));
    }
    let g = transpose_geom(h, wd, k, stride, padding, Some((oh, ow)))?;
    let p = h * wd;
    let row = k * k * cout;
    let hw_out = oh * ow;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![T::zero(); cout];
    let mut dy = need_dy.then(|| Tensor::zeros(y.shape()));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { p * row }];
    for bi in 0..bn {
        let ds = &dout.data()[bi * hw_out * cout..][..hw_out * cout];
        let ys = &y.data()[bi * p * cy..][..p * cy];
        let a: &[T] = if g.is_pointwise() {
            ds
        } else {
            im2col(ds, &g, cout, &mut cols);
            &cols
        };
        T::gemm(row, p, cy, a, true, ys, false, T::one(), dw.data_mut());
        for (s, v) in db.iter_mut().zip(channel_sums(ds, cout)) {
            *s += v;
        }
        if let Some(dy) = dy.as_mut() {
            let dys = &mut dy.data_mut()[bi * p * cy..][..p * cy];
            T::gemm(p, row, cy, a, false, w.data(), false, T::zero(), dys);
        }
    }
    Ok((dy, dw, db))
}

fn he_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Convolution layer whose tensors live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    /// He-uniform kernel, zero bias. Creates `{name}.weight` (and `{name}.bias`).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = he_uniform(&[k, k, cin, cout], k * k * cin, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Weight);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                ParamKind::Weight,
            )
        });
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(
            x,
            store.value(self.weight),
            self.bias.map(|b| store.value(b)),
            self.stride,
            self.padding,
        )
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (dx, dw, db) = conv2d_backward(
            x,
            store.value(self.weight),
            dy,
            self.stride,
            self.padding,
            need_dx,
        )?;
        store.accumulate_grad(self.weight, dw.data());
        if let Some(b) = self.bias {
            store.accumulate_grad(b, &db);
        }
        Ok(dx)
    }
}

/// Transposed convolution layer; kernel stored `K × K × Cout × Cin`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // Each output pixel receives about (k/stride)² taps of cin channels.
        let taps = (k * k).div_ceil(stride * stride).max(1);
        let w = he_uniform(&[k, k, cout, cin], taps * cin, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Weight);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                ParamKind::Weight,
            )
        });
        ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_transpose(
            y,
            store.value(self.weight),
            self.bias.map(|b| store.value(b)),
            self.stride,
            self.padding,
            None,
        )
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        y: &Tensor<T>,
        dout: &Tensor<T>,
        need_dy: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (dy, dw, db) = conv2d_transpose_backward(
            y,
            store.value(self.weight),
            dout,
            self.stride,
            self.padding,
            need_dy,
        )?;
        store.accumulate_grad(self.weight, dw.data());
        if let Some(b) = self.bias {
            store.accumulate_grad(b, &db);
        }
        Ok(dy)
    }
}
