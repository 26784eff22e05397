//! 2-D convolution (cross-correlation) kernels via im2col + GEMM.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::linalg::{gemm, Layout};

/// Square convolution layer description: `[size, channels, stride, padding]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, out_channels: usize, stride: usize, padding: usize) -> Result<Self> {
        let spec = ConvSpec {
            kernel,
            out_channels,
            stride,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.out_channels == 0 {
            return Err(Error::Spec(format!(
                "kernel, stride and channels must be >= 1 in {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((n + 2p - k) / s) + 1`, or an error when the kernel does not fit.
    pub fn output_dim(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Spec(format!(
                "kernel {} does not fit input {input} with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// Fully resolved geometry of one conv application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub ho: usize,
    pub wo: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

// Samples per gradient-accumulation group; fixed so that the reduction order
// does not depend on whether the batch loop runs in parallel.
const GROUP: usize = 4;

impl ConvShape {
    pub fn resolve(input: &[usize], weight: &[usize], bias: &[usize], spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        if input.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {input:?}")));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let k = spec.kernel;
        let want_w = [spec.out_channels, c, k, k];
        if weight != want_w {
            return Err(Error::shape(
                "conv2d",
                format!("weight {weight:?} does not match input channels {c} / spec, expected {want_w:?}"),
            ));
        }
        if bias != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bias:?}, expected [{}]", spec.out_channels),
            ));
        }
        let ho = spec.output_dim(h)?;
        let wo = spec.output_dim(w)?;
        Ok(ConvShape {
            n,
            c,
            h,
            w,
            co: spec.out_channels,
            ho,
            wo,
            k,
            s: spec.stride,
            p: spec.padding,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_per_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn out_per_sample(&self) -> usize {
        self.co * self.ho * self.wo
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.co, self.ho, self.wo]
    }
}

fn im2col(x: &[f64], sh: &ConvShape, cols: &mut [f64]) {
    let (k, s, p) = (sh.k, sh.s as isize, sh.p as isize);
    let ncol = sh.cols();
    for ci in 0..sh.c {
        let plane = &x[ci * sh.h * sh.w..(ci + 1) * sh.h * sh.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..sh.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    let line = &mut dst[oy * sh.wo..(oy + 1) * sh.wo];
                    if iy < 0 || iy >= sh.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * sh.w..(iy as usize + 1) * sh.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *v = if ix < 0 || ix >= sh.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], sh: &ConvShape, dx: &mut [f64]) {
    let (k, s, p) = (sh.k, sh.s as isize, sh.p as isize);
    let ncol = sh.cols();
    for ci in 0..sh.c {
        let plane = &mut dx[ci * sh.h * sh.w..(ci + 1) * sh.h * sh.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..sh.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= sh.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * sh.w..(iy as usize + 1) * sh.w];
                    for ox in 0..sh.wo {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < sh.w as isize {
                            line[ix as usize] += src[oy * sh.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass. Returns the output and, when `keep_cols`, the im2col
/// buffers for the backward pass.
pub(crate) fn forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    sh: &ConvShape,
    keep_cols: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (rows, ncol) = (sh.rows(), sh.cols());
    let per_out = sh.out_per_sample();
    let per_in = sh.in_per_sample();
    let mut out = vec![0.0; sh.n * per_out];
    let run = |i: usize, o: &mut [f64], cols: &mut [f64]| {
        im2col(&x[i * per_in..(i + 1) * per_in], sh, cols);
        for (co, chunk) in o.chunks_mut(ncol).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(
            sh.co, rows, ncol, 1.0, weight, Layout::row(rows), cols, Layout::row(ncol), 1.0, o,
            Layout::row(ncol),
        );
    };
    if keep_cols {
        let mut cols = vec![0.0; sh.n * rows * ncol];
        parallel::for_each_chunk2(&mut out, per_out, &mut cols, rows * ncol, |i, o, c| run(i, o, c));
        (out, Some(cols))
    } else {
        parallel::for_each_chunk(&mut out, per_out, |i, o| {
            let mut cols = vec![0.0; rows * ncol];
            run(i, o, &mut cols);
        });
        (out, None)
    }
}

/// Gradients of a recorded forward pass. `dx` is `None` when the input
/// does not need a gradient.
pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn backward(
    cols: &[f64],
    weight: &[f64],
    dout: &[f64],
    sh: &ConvShape,
    need_dx: bool,
) -> ConvGrads {
    let (rows, ncol) = (sh.rows(), sh.cols());
    let per_out = sh.out_per_sample();
    let per_in = sh.in_per_sample();
    let wlen = sh.co * rows;

    let mut db = vec![0.0; sh.co];
    for i in 0..sh.n {
        for (co, chunk) in dout[i * per_out..(i + 1) * per_out].chunks(ncol).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
    }

    let groups = sh.n.div_ceil(GROUP);
    let mut partial = vec![0.0; groups * wlen];
    parallel::for_each_chunk(&mut partial, wlen, |g, acc| {
        for i in g * GROUP..((g + 1) * GROUP).min(sh.n) {
            gemm(
                sh.co,
                ncol,
                rows,
                1.0,
                &dout[i * per_out..(i + 1) * per_out],
                Layout::row(ncol),
                &cols[i * rows * ncol..(i + 1) * rows * ncol],
                Layout::trans(ncol),
                1.0,
                acc,
                Layout::row(rows),
            );
        }
    });
    let mut dw = vec![0.0; wlen];
    for acc in partial.chunks(wlen) {
        for (a, b) in dw.iter_mut().zip(acc) {
            *a += b;
        }
    }

    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; sh.n * per_in];
        parallel::for_each_chunk(&mut dx, per_in, |i, d| {
            let mut dcols = vec![0.0; rows * ncol];
            gemm(
                rows,
                sh.co,
                ncol,
                1.0,
                weight,
                Layout::trans(rows),
                &dout[i * per_out..(i + 1) * per_out],
                Layout::row(ncol),
                0.0,
                &mut dcols,
                Layout::row(ncol),
            );
            col2im(&dcols, sh, d);
        });
        dx
    });
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dim_floor_formula() {
        for k in 1..=8 {
            for s in 1..=2 {
                for p in 0..=1 {
                    let spec = ConvSpec::new(k, 1, s, p).unwrap();
                    for n in k..20 {
                        assert_eq!(spec.output_dim(n).unwrap(), (n + 2 * p - k) / s + 1);
                    }
                }
            }
        }
        assert!(ConvSpec::new(5, 1, 1, 0).unwrap().output_dim(4).is_err());
        assert!(ConvSpec::new(0, 1, 1, 0).is_err());
        assert!(ConvSpec::new(3, 0, 1, 0).is_err());
    }

    #[test]
    fn first_dmc_layer_halves_84() {
        assert_eq!(ConvSpec::new(4, 32, 2, 1).unwrap().output_dim(84).unwrap(), 42);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let spec = ConvSpec::new(3, 2, 1, 0).unwrap();
        assert!(ConvShape::resolve(&[1, 3, 5, 5], &[2, 2, 3, 3], &[2], spec).is_err());
        assert!(ConvShape::resolve(&[1, 2, 5, 5], &[2, 2, 3, 3], &[3], spec).is_err());
    }
}
