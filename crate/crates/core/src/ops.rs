//! Tensor kernels the network needs beyond what candle differentiates well on CPU.
//!
//! Convolutions run per sample as `im2col` + GEMM. The forward pass, input
//! gradient and weight gradient are three ops; the input-gradient op doubles as
//! the transposed convolution, so both directions are differentiable.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::{Result, SegError};

/// Sliding-window geometry shared by convolution and pooling kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self { kh: k, kw: k, stride, pad }
    }

    /// Output spatial size for an `h × w` input, or `None` when the kernel
    /// does not fit.
    pub fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if ph < self.kh || pw < self.kw || self.stride == 0 {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} requires a contiguous input"),
    }
}

/// Element types the kernels run on.
pub(crate) trait Elem: Copy + Default + PartialOrd + std::ops::AddAssign + 'static {
    const ONE: Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Elem for f32 {
    const ONE: Self = 1.0;

    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Elem for f64 {
    const ONE: Self = 1.0;

    fn to_f64(self) -> f64 {
        self
    }

    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Row-major view of a matrix inside a slice: `(data, row stride, col stride)`.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

impl<'a, T> Mat<'a, T> {
    fn rows(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        Self { data: self.data, rs: self.cs, cs: self.rs }
    }

    fn fits(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || (r - 1) * self.rs + (c - 1) * self.cs < self.data.len()
    }
}

/// `dst (m×n, row-major) = [dst +] a (m×k) · b (k×n)`.
fn matmul_into<T: Elem>(dst: &mut [T], accumulate: bool, a: Mat<'_, T>, b: Mat<'_, T>, (m, k, n): (usize, usize, usize)) {
    assert!(dst.len() >= m * n && a.fits(m, k) && b.fits(k, n), "matmul_into: operand out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            dst[..m * n].fill(T::default());
        }
        return;
    }
    // SAFETY: the assert above keeps every addressed element inside its slice
    // and `dst` is exclusively borrowed, so it cannot alias `a` or `b`.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.data.as_ptr(),
            a.cs as isize,
            a.rs as isize,
            b.data.as_ptr(),
            b.cs as isize,
            b.rs as isize,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Unfolds one `(C, H, W)` sample into `(C·kh·kw, Ho·Wo)` patch columns.
fn im2col_into<T: Elem>(src: &[T], (c, h, w): (usize, usize, usize), win: Window, dst: &mut [T]) {
    let (ho, wo) = win.out_dims(h, w).expect("window validated by caller");
    let l = ho * wo;
    dst.fill(T::default());
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let out = &mut dst[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut out[oy * wo..(oy + 1) * wo];
                    if win.stride == 1 {
                        let lo = win.pad.saturating_sub(kx);
                        let hi = (w + win.pad).saturating_sub(kx).min(wo);
                        if lo < hi {
                            let start = lo + kx - win.pad;
                            dst_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: folds columns back, adding into `dst (C, H, W)`.
fn col2im_add<T: Elem>(src: &[T], (c, h, w): (usize, usize, usize), win: Window, dst: &mut [T]) {
    let (ho, wo) = win.out_dims(h, w).expect("window validated by caller");
    let l = ho * wo;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let cols = &src[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    if win.stride == 1 {
                        let lo = win.pad.saturating_sub(kx);
                        let hi = (w + win.pad).saturating_sub(kx).min(wo);
                        if lo < hi {
                            let start = base + lo + kx - win.pad;
                            let dst_row = &mut plane[start..start + hi - lo];
                            for (d, v) in dst_row.iter_mut().zip(&cols[oy * wo + lo..oy * wo + hi]) {
                                *d += *v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += cols[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a convolution `x (N,C,H,W) * w (Co,C,kh,kw) -> y (N,Co,Ho,Wo)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    win: Window,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        self.win.out_dims(self.h, self.w).expect("window validated by caller")
    }

    fn k(&self) -> usize {
        self.c * self.win.kh * self.win.kw
    }

    fn l(&self) -> usize {
        let (ho, wo) = self.out_hw();
        ho * wo
    }

    fn pointwise(&self) -> bool {
        self.win == Window::square(1, 1, 0)
    }

    fn x_shape(&self) -> Shape {
        Shape::from((self.n, self.c, self.h, self.w))
    }

    fn y_shape(&self) -> Shape {
        let (ho, wo) = self.out_hw();
        Shape::from((self.n, self.co, ho, wo))
    }

    fn w_shape(&self) -> Shape {
        Shape::from((self.co, self.c, self.win.kh, self.win.kw))
    }

    fn forward<T: Elem>(&self, x: &[T], wt: &[T]) -> Vec<T> {
        let (k, l, xs) = (self.k(), self.l(), self.c * self.h * self.w);
        let mut y = vec![T::default(); self.n * self.co * l];
        let mut cols = if self.pointwise() { Vec::new() } else { vec![T::default(); k * l] };
        for b in 0..self.n {
            let xb = &x[b * xs..(b + 1) * xs];
            let rhs = if self.pointwise() {
                xb
            } else {
                im2col_into(xb, (self.c, self.h, self.w), self.win, &mut cols);
                &cols
            };
            let yb = &mut y[b * self.co * l..(b + 1) * self.co * l];
            matmul_into(yb, false, Mat::rows(wt, k), Mat::rows(rhs, l), (self.co, k, l));
        }
        y
    }

    /// Gradient w.r.t. the input for output gradient `dy`.
    fn backward_data<T: Elem>(&self, dy: &[T], wt: &[T]) -> Vec<T> {
        let (k, l, xs) = (self.k(), self.l(), self.c * self.h * self.w);
        let mut dx = vec![T::default(); self.n * xs];
        let mut cols = if self.pointwise() { Vec::new() } else { vec![T::default(); k * l] };
        for b in 0..self.n {
            let dyb = Mat::rows(&dy[b * self.co * l..(b + 1) * self.co * l], l);
            let dxb = &mut dx[b * xs..(b + 1) * xs];
            if self.pointwise() {
                matmul_into(dxb, false, Mat::rows(wt, k).t(), dyb, (k, self.co, l));
            } else {
                matmul_into(&mut cols, false, Mat::rows(wt, k).t(), dyb, (k, self.co, l));
                col2im_add(&cols, (self.c, self.h, self.w), self.win, dxb);
            }
        }
        dx
    }

    /// Gradient w.r.t. the weight for input `x` and output gradient `dy`.
    fn backward_filter<T: Elem>(&self, x: &[T], dy: &[T]) -> Vec<T> {
        let (k, l, xs) = (self.k(), self.l(), self.c * self.h * self.w);
        let mut dw = vec![T::default(); self.co * k];
        let mut cols = if self.pointwise() { Vec::new() } else { vec![T::default(); k * l] };
        for b in 0..self.n {
            let xb = &x[b * xs..(b + 1) * xs];
            let rhs = if self.pointwise() {
                xb
            } else {
                im2col_into(xb, (self.c, self.h, self.w), self.win, &mut cols);
                &cols
            };
            let dyb = Mat::rows(&dy[b * self.co * l..(b + 1) * self.co * l], l);
            matmul_into(&mut dw, b > 0, dyb, Mat::rows(rhs, l).t(), (self.co, l, k));
        }
        dw
    }
}

fn check_shape(layout: &Layout, want: &Shape, op: &str) -> candle_core::Result<()> {
    if layout.shape() != want {
        candle_core::bail!("{op}: expected shape {want:?}, got {:?}", layout.shape());
    }
    Ok(())
}

macro_rules! dispatch2 {
    ($op:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(u), CpuStorage::F32(v)) => {
                let ($a, $b) = (contiguous_slice(u, $l1, $op)?, contiguous_slice(v, $l2, $op)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(u), CpuStorage::F64(v)) => {
                let ($a, $b) = (contiguous_slice(u, $l1, $op)?, contiguous_slice(v, $l2, $op)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: mismatched or unsupported dtypes", $op),
        }
    };
}

/// Convolution forward: `(x, w) -> y`.
#[derive(Clone, Copy, Debug)]
struct ConvForward(ConvGeom);

/// Input gradient of a convolution, which is also a transposed convolution: `(dy, w) -> dx`.
#[derive(Clone, Copy, Debug)]
struct ConvBackwardData(ConvGeom);

/// Weight gradient of a convolution: `(x, dy) -> dw`.
#[derive(Clone, Copy, Debug)]
struct ConvBackwardFilter(ConvGeom);

impl CustomOp2 for ConvForward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        check_shape(l1, &g.x_shape(), "conv2d input")?;
        check_shape(l2, &g.w_shape(), "conv2d weight")?;
        let out = dispatch2!("conv2d", s1, l1, s2, l2, |x, w| g.forward(x, w));
        Ok((out, g.y_shape()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, dy: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dy = dy.contiguous()?;
        let dx = if x.track_op() { Some(dy.apply_op2_no_bwd(w, &ConvBackwardData(self.0))?) } else { None };
        let dw = if w.track_op() { Some(x.apply_op2_no_bwd(&dy, &ConvBackwardFilter(self.0))?) } else { None };
        Ok((dx, dw))
    }
}

impl CustomOp2 for ConvBackwardData {
    fn name(&self) -> &'static str {
        "conv2d-backward-data"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        check_shape(l1, &g.y_shape(), "conv2d-backward-data gradient")?;
        check_shape(l2, &g.w_shape(), "conv2d-backward-data weight")?;
        let out = dispatch2!("conv2d-backward-data", s1, l1, s2, l2, |dy, w| g.backward_data(dy, w));
        Ok((out, g.x_shape()))
    }

    fn bwd(&self, dy: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let d_dy = if dy.track_op() { Some(grad.apply_op2_no_bwd(w, &ConvForward(self.0))?) } else { None };
        let dw = if w.track_op() { Some(grad.apply_op2_no_bwd(dy, &ConvBackwardFilter(self.0))?) } else { None };
        Ok((d_dy, dw))
    }
}

impl CustomOp2 for ConvBackwardFilter {
    fn name(&self) -> &'static str {
        "conv2d-backward-filter"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        check_shape(l1, &g.x_shape(), "conv2d-backward-filter input")?;
        check_shape(l2, &g.y_shape(), "conv2d-backward-filter gradient")?;
        let out = dispatch2!("conv2d-backward-filter", s1, l1, s2, l2, |x, dy| g.backward_filter(x, dy));
        Ok((out, g.w_shape()))
    }
}

fn argmax_index<T: Copy + PartialOrd>(plane: &[T], (h, w): (usize, usize), win: Window, oy: usize, ox: usize) -> usize {
    let mut best: Option<(usize, T)> = None;
    for ky in 0..win.kh {
        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..win.kw {
            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            let idx = iy as usize * w + ix as usize;
            let v = plane[idx];
            // NaN never wins, first maximum wins ties
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((idx, v));
            }
        }
    }
    best.map(|(i, _)| i).expect("padding never exceeds the kernel")
}

fn max_pool_kernel<T: Copy + PartialOrd>(src: &[T], (n, c, h, w): (usize, usize, usize, usize), win: Window) -> Vec<T> {
    let (ho, wo) = win.out_dims(h, w).expect("window validated by caller");
    let mut dst = Vec::with_capacity(n * c * ho * wo);
    for plane in src.chunks_exact(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                dst.push(plane[argmax_index(plane, (h, w), win, oy, ox)]);
            }
        }
    }
    dst
}

fn max_pool_grad_kernel<T: Copy + PartialOrd + Default + std::ops::AddAssign>(
    src: &[T],
    grad: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    win: Window,
) -> Vec<T> {
    let (ho, wo) = win.out_dims(h, w).expect("window validated by caller");
    let mut dst = vec![T::default(); n * c * h * w];
    for (p, plane) in src.chunks_exact(h * w).enumerate() {
        let g = &grad[p * ho * wo..(p + 1) * ho * wo];
        let out = &mut dst[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                out[argmax_index(plane, (h, w), win, oy, ox)] += g[oy * wo + ox];
            }
        }
    }
    dst
}

/// Max pooling with implicit `-inf` padding; gradient routed to the first maximum.
#[derive(Clone, Copy, Debug)]
struct MaxPool2d {
    win: Window,
}

impl CustomOp1 for MaxPool2d {
    fn name(&self) -> &'static str {
        "max-pool2d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (n, c, h, w) = dims;
        if self.win.pad * 2 > self.win.kh.min(self.win.kw) {
            candle_core::bail!("max-pool2d: padding larger than half the kernel");
        }
        let Some((ho, wo)) = self.win.out_dims(h, w) else {
            candle_core::bail!("max-pool2d: window {:?} does not fit {h}x{w}", self.win)
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(max_pool_kernel(contiguous_slice(v, layout, "max-pool2d")?, dims, self.win)),
            CpuStorage::F64(v) => CpuStorage::F64(max_pool_kernel(contiguous_slice(v, layout, "max-pool2d")?, dims, self.win)),
            s => candle_core::bail!("max-pool2d: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, Shape::from((n, c, ho, wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = arg.apply_op2_no_bwd(&grad_res.contiguous()?, &MaxPoolGrad { win: self.win })?;
        Ok(Some(grad))
    }
}

#[derive(Clone, Copy, Debug)]
struct MaxPoolGrad {
    win: Window,
}

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "max-pool2d-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(g)) => CpuStorage::F32(max_pool_grad_kernel(
                contiguous_slice(a, l1, "max-pool2d-grad")?,
                contiguous_slice(g, l2, "max-pool2d-grad")?,
                dims,
                self.win,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(g)) => CpuStorage::F64(max_pool_grad_kernel(
                contiguous_slice(a, l1, "max-pool2d-grad")?,
                contiguous_slice(g, l2, "max-pool2d-grad")?,
                dims,
                self.win,
            )),
            _ => candle_core::bail!("max-pool2d-grad: mismatched or unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Per-channel mean and biased variance of a contiguous `(N, C, L)` buffer.
fn channel_stats<T: Elem>(x: &[T], (n, c, l): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let count = (n * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let planes = (0..n).map(|b| &x[(b * c + ch) * l..(b * c + ch + 1) * l]);
        let sum: f64 = planes.clone().flat_map(|p| p.iter()).map(|v| v.to_f64()).sum();
        let m = sum / count;
        let sq: f64 = planes.flat_map(|p| p.iter()).map(|v| (v.to_f64() - m).powi(2)).sum();
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

/// Training-mode batch normalization `γ·(x−μ)/sqrt(σ²+ε) + β` over `(N, H, W)`.
/// The batch statistics of the last forward call are kept for the running averages.
#[derive(Debug)]
struct BatchNormTrain {
    eps: f64,
    stats: std::sync::Arc<std::sync::Mutex<Option<(Vec<f64>, Vec<f64>)>>>,
}

fn bn_train_kernel<T: Elem>(x: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize), eps: f64) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let (n, c, l) = dims;
    let (mean, var) = channel_stats(x, dims);
    let mut y = vec![T::default(); x.len()];
    for ch in 0..c {
        let scale = gamma[ch].to_f64() / (var[ch] + eps).sqrt();
        let shift = beta[ch].to_f64() - mean[ch] * scale;
        for b in 0..n {
            let r = (b * c + ch) * l..(b * c + ch + 1) * l;
            for (o, v) in y[r.clone()].iter_mut().zip(&x[r]) {
                *o = T::from_f64(v.to_f64() * scale + shift);
            }
        }
    }
    (y, mean, var)
}

/// `[dx (N·C·L) | dγ (C) | dβ (C)]` packed into one buffer.
fn bn_backward_kernel<T: Elem>(x: &[T], gamma: &[T], dy: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, l) = dims;
    let (mean, var) = channel_stats(x, dims);
    let count = (n * l) as f64;
    let mut out = vec![T::default(); x.len() + 2 * c];
    let (dx, rest) = out.split_at_mut(x.len());
    for ch in 0..c {
        let istd = 1.0 / (var[ch] + eps).sqrt();
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for b in 0..n {
            let r = (b * c + ch) * l..(b * c + ch + 1) * l;
            for (g, v) in dy[r.clone()].iter().zip(&x[r]) {
                let g = g.to_f64();
                sum_dy += g;
                sum_dy_xhat += g * (v.to_f64() - mean[ch]) * istd;
            }
        }
        rest[ch] = T::from_f64(sum_dy_xhat);
        rest[c + ch] = T::from_f64(sum_dy);
        let k = gamma[ch].to_f64() * istd;
        for b in 0..n {
            let r = (b * c + ch) * l..(b * c + ch + 1) * l;
            for ((o, g), v) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&x[r]) {
                let xhat = (v.to_f64() - mean[ch]) * istd;
                *o = T::from_f64(k * (g.to_f64() - (sum_dy + xhat * sum_dy_xhat) / count));
            }
        }
    }
    out
}

fn bn_dims(layout: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (n, c, h, w) = layout.shape().dims4()?;
    Ok((n, c, h * w))
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = bn_dims(l1)?;
        if l2.shape().elem_count() != dims.1 || l3.shape().elem_count() != dims.1 {
            candle_core::bail!("batch-norm: affine parameters must have {} elements", dims.1);
        }
        let (out, mean, var) = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                let (x, g, b) = (contiguous_slice(x, l1, "batch-norm")?, contiguous_slice(g, l2, "batch-norm")?, contiguous_slice(b, l3, "batch-norm")?);
                let (y, m, v) = bn_train_kernel(x, g, b, dims, self.eps);
                (CpuStorage::F32(y), m, v)
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                let (x, g, b) = (contiguous_slice(x, l1, "batch-norm")?, contiguous_slice(g, l2, "batch-norm")?, contiguous_slice(b, l3, "batch-norm")?);
                let (y, m, v) = bn_train_kernel(x, g, b, dims, self.eps);
                (CpuStorage::F64(y), m, v)
            }
            _ => candle_core::bail!("batch-norm: mismatched or unsupported dtypes"),
        };
        *self.stats.lock().expect("stats lock") = Some((mean, var));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.elem_count();
        let packed = x.apply_op3_no_bwd(gamma, &dy.contiguous()?, &BatchNormBackward { eps: self.eps })?;
        let dx = packed.narrow(0, 0, x.elem_count())?.reshape(x.shape())?;
        let dgamma = packed.narrow(0, x.elem_count(), c)?.reshape(gamma.shape())?;
        let dbeta = packed.narrow(0, x.elem_count() + c, c)?.reshape(gamma.shape())?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

#[derive(Clone, Copy, Debug)]
struct BatchNormBackward {
    eps: f64,
}

impl CustomOp3 for BatchNormBackward {
    fn name(&self) -> &'static str {
        "batch-norm-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = bn_dims(l1)?;
        let len = l1.shape().elem_count() + 2 * dims.1;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => CpuStorage::F32(bn_backward_kernel(
                contiguous_slice(x, l1, "batch-norm-backward")?,
                contiguous_slice(g, l2, "batch-norm-backward")?,
                contiguous_slice(d, l3, "batch-norm-backward")?,
                dims,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => CpuStorage::F64(bn_backward_kernel(
                contiguous_slice(x, l1, "batch-norm-backward")?,
                contiguous_slice(g, l2, "batch-norm-backward")?,
                contiguous_slice(d, l3, "batch-norm-backward")?,
                dims,
                self.eps,
            )),
            _ => candle_core::bail!("batch-norm-backward: mismatched or unsupported dtypes"),
        };
        Ok((out, Shape::from(len)))
    }
}

/// Training-mode batch norm of `x (N,C,H,W)`; also returns the per-channel
/// batch mean and biased variance.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let stats = std::sync::Arc::new(std::sync::Mutex::new(None));
    let op = BatchNormTrain { eps, stats: stats.clone() };
    let y = x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    let (mean, var) = stats
        .lock()
        .expect("stats lock")
        .take()
        .ok_or_else(|| SegError::Shape("batch norm produced no statistics".into()))?;
    Ok((y, mean, var))
}

/// Elementwise square root whose derivative is taken as 0 where the value is 0.
#[derive(Clone, Copy, Debug)]
struct SafeSqrt;

impl CustomOp1 for SafeSqrt {
    fn name(&self) -> &'static str {
        "safe-sqrt"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(contiguous_slice(v, layout, "safe-sqrt")?.iter().map(|x| x.max(0.0).sqrt()).collect())
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(contiguous_slice(v, layout, "safe-sqrt")?.iter().map(|x| x.max(0.0).sqrt()).collect())
            }
            s => candle_core::bail!("safe-sqrt: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let positive = res.gt(0.0)?;
        let half_inv = (res.recip()? * 0.5)?;
        let d = positive.where_cond(&half_inv, &res.zeros_like()?)?;
        Ok(Some(grad_res.mul(&d)?))
    }
}

/// `sqrt(x)` for `x ≥ 0` with a zero subgradient at the origin.
pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SafeSqrt)?)
}

/// 2-D convolution of `x (N,Cin,H,W)` with `weight (Cout,Cin,kh,kw)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (co, cin, kh, kw) = weight.dims4()?;
    if c != cin {
        return Err(SegError::Shape(format!("conv2d: input has {c} channels, weight expects {cin}")));
    }
    let win = Window { kh, kw, stride, pad };
    if win.out_dims(h, w).is_none() {
        return Err(SegError::Shape(format!("conv2d: kernel {kh}x{kw} does not fit {h}x{w}")));
    }
    let geom = ConvGeom { n, c, h, w, co, win };
    let y = x.contiguous()?.apply_op2(&weight.contiguous()?, ConvForward(geom))?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, co, 1, 1))?)?),
        None => Ok(y),
    }
}

/// Transposed convolution of `x (N,Cin,h,w)` with `weight (Cin,Cout,kh,kw)`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cin, cout, kh, kw) = weight.dims4()?;
    if c != cin {
        return Err(SegError::Shape(format!("conv_transpose2d: input has {c} channels, weight expects {cin}")));
    }
    let out_h = ((h - 1) * stride + kh)
        .checked_sub(2 * pad)
        .ok_or_else(|| SegError::Shape("conv_transpose2d: padding too large".into()))?;
    let out_w = ((w - 1) * stride + kw)
        .checked_sub(2 * pad)
        .ok_or_else(|| SegError::Shape("conv_transpose2d: padding too large".into()))?;
    // the adjoint of a convolution from (cout, out_h, out_w) down to (cin, h, w)
    let geom = ConvGeom { n, c: cout, h: out_h, w: out_w, co: cin, win: Window { kh, kw, stride, pad } };
    if geom.win.out_dims(out_h, out_w) != Some((h, w)) {
        return Err(SegError::Shape("conv_transpose2d: inconsistent geometry".into()));
    }
    let y = x.contiguous()?.apply_op2(&weight.contiguous()?, ConvBackwardData(geom))?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, cout, 1, 1))?)?),
        None => Ok(y),
    }
}

/// Max pooling; out-of-bounds positions never win.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(MaxPool2d { win: Window::square(kernel, stride, pad) })?)
}

/// Row-stochastic interpolation matrix `(out, in)` for half-pixel-centred
/// linear resampling (the `align_corners = false` convention).
pub fn linear_resample_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - frac;
        m[i * in_len + i1] += frac;
    }
    m
}

/// Bilinear resize of `x (N,C,h,w)` to `(N,C,out_h,out_w)` as two matmuls.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let rows = Tensor::from_vec(linear_resample_matrix(out_h, h), (out_h, h), dev)?.to_dtype(dtype)?;
    let cols = Tensor::from_vec(linear_resample_matrix(out_w, w), (out_w, w), dev)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    let y = x.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&y)?)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

/// Logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Checks that every element is finite.
pub fn all_finite(x: &Tensor) -> Result<bool> {
    let v = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}
