//! NHWC cross-correlation via per-sample im2col and GEMM.

use super::{mismatch, Float, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(L / s)`, zero padding split with the extra row/column at the end.
    Same,
    /// Output extent `floor((L - k) / s) + 1`, no padding.
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 || len == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(len);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if len < kernel {
                None
            } else {
                Some(((len - kernel) / stride + 1, 0))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: (usize, usize), padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(mismatch(
                "conv2d",
                format!("expected NHWC input and HWIO kernel, got {input:?} and {kernel:?}"),
            ));
        }
        let &[batch, in_h, in_w, in_c] = input else { unreachable!() };
        let &[k_h, k_w, k_in, out_c] = kernel else { unreachable!() };
        if k_in != in_c {
            return Err(mismatch(
                "conv2d",
                format!("kernel expects {k_in} input channels, input has {in_c}"),
            ));
        }
        let (out_h, pad_top) = conv_output_len(in_h, k_h, stride.0, padding)
            .ok_or_else(|| mismatch("conv2d", format!("height {in_h} too small for kernel {k_h}")))?;
        let (out_w, pad_left) = conv_output_len(in_w, k_w, stride.1, padding)
            .ok_or_else(|| mismatch("conv2d", format!("width {in_w} too small for kernel {k_w}")))?;
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride_h: stride.0,
            stride_w: stride.1,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, unpadded: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride_h == 1 && self.stride_w == 1
    }

    fn in_sample_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    fn im2col<T: Float>(&self, x: &[T], cols: &mut [T]) {
        let c = self.in_c;
        let row_len = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * row_len..][..row_len];
                let ix0 = (ox * self.stride_w) as isize - self.pad_left as isize;
                let row_inside = ix0 >= 0 && ix0 as usize + self.k_w <= self.in_w;
                for ky in 0..self.k_h {
                    let iy = (oy * self.stride_h + ky) as isize - self.pad_top as isize;
                    let span = &mut row[ky * self.k_w * c..][..self.k_w * c];
                    if iy < 0 || iy as usize >= self.in_h {
                        span.fill(T::zero());
                        continue;
                    }
                    let base = iy as usize * self.in_w;
                    if row_inside {
                        let src = (base + ix0 as usize) * c;
                        span.copy_from_slice(&x[src..src + self.k_w * c]);
                        continue;
                    }
                    for kx in 0..self.k_w {
                        let dst = &mut span[kx * c..][..c];
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix as usize >= self.in_w {
                            dst.fill(T::zero());
                        } else {
                            let src = (base + ix as usize) * c;
                            dst.copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Float>(&self, cols: &[T], dx: &mut [T]) {
        let c = self.in_c;
        let row_len = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * row_len..][..row_len];
                let ix0 = (ox * self.stride_w) as isize - self.pad_left as isize;
                let row_inside = ix0 >= 0 && ix0 as usize + self.k_w <= self.in_w;
                for ky in 0..self.k_h {
                    let iy = (oy * self.stride_h + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy as usize >= self.in_h {
                        continue;
                    }
                    if row_inside {
                        let span = &row[ky * self.k_w * c..][..self.k_w * c];
                        let dst = &mut dx[(iy as usize * self.in_w + ix0 as usize) * c..][..self.k_w * c];
                        for (d, s) in dst.iter_mut().zip(span) {
                            *d = *d + *s;
                        }
                        continue;
                    }
                    for kx in 0..self.k_w {
                        let ix = (ox * self.stride_w + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix as usize >= self.in_w {
                            continue;
                        }
                        let src = &row[(ky * self.k_w + kx) * c..][..c];
                        let dst = &mut dx[(iy as usize * self.in_w + ix as usize) * c..][..c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(g: &ConvGeometry, x: &[T], kernel: &[T]) -> Vec<T> {
    let p = g.positions();
    let kl = g.patch_len();
    let mut out = vec![T::zero(); g.batch * p * g.out_c];
    if g.is_pointwise() {
        T::gemm(g.batch * p, kl, g.out_c, x, false, kernel, false, &mut out, T::zero());
        return out;
    }
    let mut cols = vec![T::zero(); p * kl];
    for n in 0..g.batch {
        g.im2col(&x[n * g.in_sample_len()..][..g.in_sample_len()], &mut cols);
        T::gemm(p, kl, g.out_c, &cols, false, kernel, false, &mut out[n * p * g.out_c..][..p * g.out_c], T::zero());
    }
    out
}

/// Returns `(d_input, d_kernel)`; `d_input` is skipped when not needed.
pub(crate) fn conv2d_backward<T: Float>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.positions();
    let kl = g.patch_len();
    let mut dk = need_kernel.then(|| vec![T::zero(); kl * g.out_c]);
    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    if g.is_pointwise() {
        let rows = g.batch * p;
        if let Some(dk) = dk.as_mut() {
            T::gemm(kl, rows, g.out_c, x, true, dy, false, dk, T::zero());
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(rows, g.out_c, kl, dy, false, kernel, true, dx, T::zero());
        }
        return (dx, dk);
    }
    let mut cols = vec![T::zero(); p * kl];
    let sample = g.in_sample_len();
    for n in 0..g.batch {
        let dy_n = &dy[n * p * g.out_c..][..p * g.out_c];
        if let Some(dk) = dk.as_mut() {
            g.im2col(&x[n * sample..][..sample], &mut cols);
            T::gemm(kl, p, g.out_c, &cols, true, dy_n, false, dk, T::one());
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(p, g.out_c, kl, dy_n, false, kernel, true, &mut cols, T::zero());
            g.col2im(&cols, &mut dx[n * sample..][..sample]);
        }
    }
    (dx, dk)
}
