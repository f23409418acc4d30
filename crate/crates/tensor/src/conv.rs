//! Cross-correlation kernels built on im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn infer(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(shape_err("conv2d input", &[0, 0, 0, 0], input));
        }
        if kernel.len() != 4 || kernel[1] != input[1] {
            return Err(shape_err("conv2d kernel", &[0, input[1], 0, 0], kernel));
        }
        if bias != [kernel[0]] {
            return Err(shape_err("conv2d bias", &[kernel[0]], bias));
        }
        if stride == 0 {
            return Err(crate::TensorError::Contract("conv2d: stride must be >= 1".into()));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if kernel[2] > h || kernel[3] > w {
            return Err(shape_err("conv2d kernel extent", &[kernel[0], kernel[1], h, w], kernel));
        }
        Ok(Self {
            batch: input[0],
            in_ch: input[1],
            out_ch: kernel[0],
            height: input[2],
            width: input[3],
            k_h: kernel[2],
            k_w: kernel[3],
            stride,
            padding,
            out_h: (h - kernel[2]) / stride + 1,
            out_w: (w - kernel[3]) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    /// Source pixel for output position `o` and kernel tap `k` along one axis.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output positions along one axis whose source pixel lies inside the image.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if extent + p > k {
            ((extent + p - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_ch {
            let chan = &image[c * self.in_plane()..(c + 1) * self.in_plane()];
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_range(kx, self.width, self.out_w);
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        let Some(iy) = self.src(oy, ky, self.height) else {
                            line.fill(T::zero());
                            continue;
                        };
                        let src_row = &chan[iy * self.width..(iy + 1) * self.width];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            let first = lo * self.stride + kx - self.padding;
                            if self.stride == 1 {
                                line[lo..hi].copy_from_slice(&src_row[first..first + (hi - lo)]);
                            } else {
                                for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                    *v = src_row[first + j * self.stride];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_ch {
            let chan = &mut image[c * self.in_plane()..(c + 1) * self.in_plane()];
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_range(kx, self.width, self.out_w);
                    row += 1;
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * self.stride + kx - self.padding;
                    for oy in 0..self.out_h {
                        let Some(iy) = self.src(oy, ky, self.height) else {
                            continue;
                        };
                        let line = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        let dst_row = &mut chan[iy * self.width..(iy + 1) * self.width];
                        for (j, &v) in line.iter().enumerate() {
                            let d = &mut dst_row[first + j * self.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let (pl, op) = (g.patch_len(), g.out_plane());
    let mut out = Tensor::zeros(&g.out_shape());
    let mut cols = vec![T::zero(); pl * op];
    let in_stride = g.in_ch * g.in_plane();
    let out_stride = g.out_ch * op;
    for n in 0..g.batch {
        g.im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        let dst = &mut out.data_mut()[n * out_stride..(n + 1) * out_stride];
        for (o, chunk) in dst.chunks_mut(op).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        T::gemm(
            g.out_ch,
            pl,
            op,
            T::one(),
            kernel.data(),
            (pl, 1),
            &cols,
            (op, 1),
            T::one(),
            dst,
            (op, 1),
        );
    }
    out
}

/// Accumulates input, kernel and bias gradients. Any of them may be skipped.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    mut grad_input: Option<&mut Tensor<T>>,
    mut grad_kernel: Option<&mut Tensor<T>>,
    mut grad_bias: Option<&mut Tensor<T>>,
) {
    let (pl, op) = (g.patch_len(), g.out_plane());
    let mut cols = vec![T::zero(); pl * op];
    let in_stride = g.in_ch * g.in_plane();
    let out_stride = g.out_ch * op;
    for n in 0..g.batch {
        let go = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (o, chunk) in go.chunks(op).enumerate() {
                let s: T = chunk.iter().copied().sum();
                gb.data_mut()[o] = gb.data()[o] + s;
            }
        }
        if let Some(gk) = grad_kernel.as_deref_mut() {
            g.im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
            // dK[O, PL] += dOut[O, P] * cols^T
            T::gemm(
                g.out_ch,
                op,
                pl,
                T::one(),
                go,
                (op, 1),
                &cols,
                (1, op),
                T::one(),
                gk.data_mut(),
                (pl, 1),
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // dCols[PL, P] = K^T * dOut
            T::gemm(
                pl,
                g.out_ch,
                op,
                T::one(),
                kernel.data(),
                (1, pl),
                go,
                (op, 1),
                T::zero(),
                &mut cols,
                (op, 1),
            );
            g.col2im(&cols, &mut gi.data_mut()[n * in_stride..(n + 1) * in_stride]);
        }
    }
}
