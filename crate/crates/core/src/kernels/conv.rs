//! im2col-based 2-D convolution (cross-correlation) in `f32` and INT8.

use crate::error::{Error, Result};
use crate::kernels::gemm::{igemm, sgemm};
use crate::tensor::{QTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: (usize, usize, usize), kernel: (usize, usize), stride: usize, padding: usize) -> Result<Self> {
        let (channels, height, width) = input;
        let (kernel_h, kernel_w) = kernel;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel_h}x{kernel_w} larger than padded input {height}x{width} (padding {padding})"),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    /// Rows of the im2col matrix, `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the im2col matrix, `Ho * Wo`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `lo..hi` whose input column `ox * stride + kx - padding`
    /// falls inside the image.
    fn valid_columns(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.width + self.padding > kx {
            ((self.width - 1 + self.padding - kx) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// A 1x1 stride-1 unpadded conv reads the input directly as its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C*kh*kw, Ho*Wo]` matrix. Padding reads as zero.
pub fn im2col<T: Copy + Default>(src: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let p = g.positions();
    debug_assert_eq!(src.len(), g.channels * g.height * g.width);
    debug_assert_eq!(dst.len(), g.patch_len() * p);
    if g.stride == 1 && g.out_h == g.height && g.out_w == g.width {
        im2col_same(src, g, dst);
        return;
    }
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let out = &mut dst[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let orow = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        orow.fill(T::default());
                        continue;
                    }
                    let irow = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let (lo, hi) = g.valid_columns(kx);
                    orow[..lo].fill(T::default());
                    orow[hi..].fill(T::default());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        orow[lo..hi].copy_from_slice(&irow[first..first + hi - lo]);
                    } else {
                        for (o, &v) in orow[lo..hi].iter_mut().zip(irow[first..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution whose output has the input's size: every im2col row
/// is the input plane shifted by `(ky - padding, kx - padding)`, so it is
/// copied as one contiguous block and the wrapped edge columns are zeroed.
fn im2col_same<T: Copy + Default>(src: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let hw = g.height * g.width;
    for c in 0..g.channels {
        let plane = &src[c * hw..(c + 1) * hw];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let out = &mut dst[row * hw..(row + 1) * hw];
                let dy = ky as isize - g.padding as isize;
                let dx = kx as isize - g.padding as isize;
                let y_lo = (-dy).clamp(0, h) as usize;
                let y_hi = (h - dy).clamp(0, h) as usize;
                if y_lo >= y_hi {
                    out.fill(T::default());
                    continue;
                }
                let start = (y_lo * g.width) as isize + dx.min(0).abs();
                let end = (y_hi * g.width) as isize - dx.max(0);
                if start >= end {
                    out.fill(T::default());
                    continue;
                }
                out[..start as usize].fill(T::default());
                out[end as usize..].fill(T::default());
                let offset = dy * w + dx;
                let (s0, s1) = ((start + offset) as usize, (end + offset) as usize);
                out[start as usize..end as usize].copy_from_slice(&plane[s0..s1]);
                if dx != 0 {
                    let (c_lo, c_hi) = if dx < 0 { (0, (-dx) as usize) } else { ((w - dx) as usize, g.width) };
                    for oy in y_lo..y_hi {
                        out[oy * g.width + c_lo.min(g.width)..oy * g.width + c_hi.min(g.width)].fill(T::default());
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto a `[C, H, W]` sample.
pub fn col2im(cols: &[f32], g: &ConvGeometry, dst: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let (lo, hi) = g.valid_columns(kx);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.padding;
                    let irow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (d, &v) in irow[first..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Validates conv operand shapes; returns `(batch, out_channels, geometry)`.
pub fn conv_shapes(
    input: &[usize],
    weight: &[usize],
    bias_len: Option<usize>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    let [n, c, h, w] = *input else {
        return Err(Error::shape("conv2d", format!("input must be NCHW, got {input:?}")));
    };
    let [o, wc, kh, kw] = *weight else {
        return Err(Error::shape("conv2d", format!("weight must be [O, C, kh, kw], got {weight:?}")));
    };
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has C={c} channels but weight expects C={wc} (weight {weight:?})"),
        ));
    }
    if let Some(b) = bias_len {
        if b != o {
            return Err(Error::shape("conv2d", format!("bias has {b} entries, weight has O={o}")));
        }
    }
    Ok((n, o, ConvGeometry::new((c, h, w), (kh, kw), stride, padding)?))
}

pub fn conv2d_f32(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, o, g) = conv_shapes(x.shape(), weight.shape(), bias.map(|b| b.numel()), stride, padding)?;
    let (k, p) = (g.patch_len(), g.positions());
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0f32; n * o * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; k * p] };
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let b: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let ys = &mut out[s * o * p..(s + 1) * o * p];
        sgemm(o, p, k, weight.data(), b, ys, false);
        if let Some(bias) = bias {
            for (row, &bv) in ys.chunks_exact_mut(p).zip(bias.data()) {
                for y in row {
                    *y += bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, g.out_h, g.out_w], out))
}

/// INT8 convolution: `i32` accumulation of quantized patches, then
/// `acc * x_scale * w_scale[o] + bias[o]`.
pub fn conv2d_int8(
    xq: &QTensor,
    x_scale: f32,
    wq: &QTensor,
    w_scales: &[f32],
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, o, g) = conv_shapes(xq.shape(), wq.shape(), bias.map(<[f32]>::len), stride, padding)?;
    if w_scales.len() != o {
        return Err(Error::shape("conv2d_int8", format!("{} weight scales for {o} output channels", w_scales.len())));
    }
    let (k, p) = (g.patch_len(), g.positions());
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0f32; n * o * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0i8; k * p] };
    let mut acc = vec![0i32; o * p];
    for s in 0..n {
        let xs = &xq.data()[s * in_len..(s + 1) * in_len];
        let b: &[i8] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        igemm(o, p, k, wq.data(), b, &mut acc);
        let ys = &mut out[s * o * p..(s + 1) * o * p];
        for (oc, (yrow, arow)) in ys.chunks_exact_mut(p).zip(acc.chunks_exact(p)).enumerate() {
            let scale = x_scale * w_scales[oc];
            let bv = bias.map_or(0.0, |b| b[oc]);
            for (y, &a) in yrow.iter_mut().zip(arow) {
                *y = a as f32 * scale + bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, g.out_h, g.out_w], out))
}
