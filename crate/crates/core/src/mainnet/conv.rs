//! im2col convolution kernels over NCHW batches.

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    pub fn receptive_field(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }
}

/// Static description of one convolution over a fixed input size.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub geo: ConvGeometry,
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.c_in * self.geo.receptive_field()
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    /// Unfolds one image into a `(c_in·kh·kw) × (oh·ow)` matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let g = &self.geo;
        let spatial = self.oh * self.ow;
        for c in 0..self.c_in {
            for ki in 0..g.kernel_h {
                for kj in 0..g.kernel_w {
                    let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    for oh in 0..self.oh {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        let line = &mut dst[oh * self.ow..(oh + 1) * self.ow];
                        if ih < 0 || ih >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            *v = if iw < 0 || iw >= self.w as isize { 0.0 } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into an image.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let g = &self.geo;
        let spatial = self.oh * self.ow;
        for c in 0..self.c_in {
            for ki in 0..g.kernel_h {
                for kj in 0..g.kernel_w {
                    let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    for oh in 0..self.oh {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ih as usize) * self.w..][..self.w];
                        for ow in 0..self.ow {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += src[oh * self.ow + ow];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `y = conv(x, weight) + bias` for a batch of `n` images.
    pub fn forward(&self, n: usize, x: &[f64], weight: &[f64], bias: &[f64], y: &mut [f64]) {
        let spatial = self.oh * self.ow;
        let mut cols = vec![0.0; self.patch() * spatial];
        let wmat = MatRef::new(weight, self.c_out, self.patch(), false);
        for b in 0..n {
            self.im2col(&x[b * self.in_len()..][..self.in_len()], &mut cols);
            let out = &mut y[b * self.out_len()..][..self.out_len()];
            for (c, row) in out.chunks_exact_mut(spatial).enumerate() {
                row.fill(bias[c]);
            }
            let cm = MatRef::new(&cols, self.patch(), spatial, false);
            gemm(1.0, wmat, cm, 1.0, out, self.c_out, spatial);
        }
    }

    /// Accumulates weight and bias gradients and writes the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        n: usize,
        x: &[f64],
        weight: &[f64],
        dy: &[f64],
        dweight: &mut [f64],
        dbias: &mut [f64],
        dx: &mut [f64],
    ) {
        let spatial = self.oh * self.ow;
        let patch = self.patch();
        let mut cols = vec![0.0; patch * spatial];
        let mut dcols = vec![0.0; patch * spatial];
        let wmat_t = MatRef::new(weight, self.c_out, patch, true);
        dx.fill(0.0);
        for b in 0..n {
            let dyb = &dy[b * self.out_len()..][..self.out_len()];
            for (c, row) in dyb.chunks_exact(spatial).enumerate() {
                dbias[c] += row.iter().sum::<f64>();
            }
            self.im2col(&x[b * self.in_len()..][..self.in_len()], &mut cols);
            let dym = MatRef::new(dyb, self.c_out, spatial, false);
            gemm(1.0, dym, MatRef::new(&cols, patch, spatial, true), 1.0, dweight, self.c_out, patch);
            gemm(1.0, wmat_t, dym, 0.0, &mut dcols, patch, spatial);
            self.col2im(&dcols, &mut dx[b * self.in_len()..][..self.in_len()]);
        }
    }
}
