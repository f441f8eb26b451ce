//! 2-D cross-correlation via im2col + GEMM.

use super::gemm::{gemm, Layout};
use super::graph::{GradSink, Op};
use super::ops::expect_nchw;
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Conv2dSaved {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
    geom: Geometry,
    /// im2col buffers for every batch item, `[n][c_in*k*k][out_h*out_w]`.
    cols: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(x: &[f64], g: &Geometry, col: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &Geometry, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input [N, C_in, H, W]` with `kernel [C_out, C_in, k, k]`
/// plus a per-output-channel `bias [C_out]`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c_in, h, w) = expect_nchw("conv2d", input)?;
    let (c_out, kc_in, kh, kw) = expect_nchw("conv2d", kernel)?;
    if kc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {c_in} channels but kernel {:?} expects {kc_in}",
                kernel.shape()
            ),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square with odd size, got {kh}x{kw}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{c_out}], got {:?}", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!("{h}x{w} input with padding {padding} is smaller than the {kh}x{kw} kernel"),
        ));
    }
    let g = Geometry {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        stride,
        pad: padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    };

    let track = input.requires_grad() || kernel.requires_grad() || bias.requires_grad();
    let (patch, plane) = (g.patch(), g.out_plane());
    let col_len = patch * plane;
    let mut cols = vec![0.0; if track { n * col_len } else { col_len }];
    let mut out = vec![0.0; n * c_out * plane];
    for b in 0..n {
        let col = if track {
            &mut cols[b * col_len..(b + 1) * col_len]
        } else {
            &mut cols[..]
        };
        im2col(&input.data()[b * c_in * h * w..(b + 1) * c_in * h * w], &g, col);
        let dst = &mut out[b * c_out * plane..(b + 1) * c_out * plane];
        for (co, chunk) in dst.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        gemm(
            c_out,
            patch,
            plane,
            kernel.data(),
            Layout::row_major(patch),
            col,
            Layout::row_major(plane),
            1.0,
            dst,
            Layout::row_major(plane),
        );
    }
    if !track {
        cols = Vec::new();
    }
    Ok(Tensor::from_op(
        out,
        vec![n, c_out, g.out_h, g.out_w],
        Op::Conv2d(Conv2dSaved {
            input: input.clone(),
            kernel: kernel.clone(),
            bias: bias.clone(),
            geom: g,
            cols,
        }),
    ))
}

pub(crate) fn conv2d_backward(s: &Conv2dSaved, grad: &[f64], sink: &mut GradSink) {
    let g = s.geom;
    let (patch, plane) = (g.patch(), g.out_plane());
    let col_len = patch * plane;

    sink.accumulate(&s.bias, |gb| {
        for b in 0..g.n {
            for (co, gc) in gb.iter_mut().enumerate() {
                let base = (b * g.c_out + co) * plane;
                *gc += grad[base..base + plane].iter().sum::<f64>();
            }
        }
    });

    sink.accumulate(&s.kernel, |gk| {
        for b in 0..g.n {
            let dy = &grad[b * g.c_out * plane..(b + 1) * g.c_out * plane];
            let col = &s.cols[b * col_len..(b + 1) * col_len];
            gemm(
                g.c_out,
                plane,
                patch,
                dy,
                Layout::row_major(plane),
                col,
                Layout::transposed(plane),
                1.0,
                gk,
                Layout::row_major(patch),
            );
        }
    });

    sink.accumulate(&s.input, |gx| {
        let mut dcol = vec![0.0; col_len];
        for b in 0..g.n {
            let dy = &grad[b * g.c_out * plane..(b + 1) * g.c_out * plane];
            gemm(
                patch,
                g.c_out,
                plane,
                s.kernel.data(),
                Layout::transposed(patch),
                dy,
                Layout::row_major(plane),
                0.0,
                &mut dcol,
                Layout::row_major(plane),
            );
            let image = g.c_in * g.h * g.w;
            col2im_add(&dcol, &g, &mut gx[b * image..(b + 1) * image]);
        }
    });
}
