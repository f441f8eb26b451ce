use std::collections::HashMap;

use super::{conv, norm, Tensor};

/// Recorded operation, holding its inputs and whatever the backward rule
/// needs from the forward pass.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Square(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    /// Input and its sigmoid.
    Silu(Tensor, Vec<f64>),
    Reshape(Tensor),
    ConcatChannels(Tensor, Tensor),
    Upsample2x(Tensor),
    /// `x * (1 + scale[c]) + shift[c]` over NCHW.
    ChannelAffine {
        input: Tensor,
        scale: Tensor,
        shift: Tensor,
    },
    /// `y = x W^T + b` for `x` of shape `[n, in]` or `[in]`.
    Linear {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d(conv::Conv2dSaved),
    GroupNorm(norm::GroupNormSaved),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Silu(a, _)
            | Op::Reshape(a)
            | Op::Upsample2x(a) => vec![a],
            Op::ChannelAffine {
                input,
                scale,
                shift,
            } => vec![input, scale, shift],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![input, weight, bias],
            Op::Conv2d(saved) => vec![&saved.input, &saved.kernel, &saved.bias],
            Op::GroupNorm(saved) => vec![&saved.input],
        }
    }

    /// Pushes the vector-Jacobian products for `out` into `sink`.
    pub(crate) fn backward(&self, grad: &[f64], sink: &mut GradSink) {
        match self {
            Op::Add(a, b) => {
                sink.accumulate(a, |g| add_into(g, grad));
                sink.accumulate(b, |g| add_into(g, grad));
            }
            Op::Sub(a, b) => {
                sink.accumulate(a, |g| add_into(g, grad));
                sink.accumulate(b, |g| g.iter_mut().zip(grad).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                sink.accumulate(a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(grad).zip(b.data()) {
                        *g += d * y;
                    }
                });
                sink.accumulate(b, |g| {
                    for ((g, d), x) in g.iter_mut().zip(grad).zip(a.data()) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(a, s) => sink.accumulate(a, |g| {
                g.iter_mut().zip(grad).for_each(|(g, d)| *g += s * d);
            }),
            Op::AddScalar(a) | Op::Reshape(a) => sink.accumulate(a, |g| add_into(g, grad)),
            Op::Square(a) => sink.accumulate(a, |g| {
                for ((g, d), x) in g.iter_mut().zip(grad).zip(a.data()) {
                    *g += 2.0 * x * d;
                }
            }),
            Op::Sum(a) => sink.accumulate(a, |g| g.iter_mut().for_each(|g| *g += grad[0])),
            Op::Mean(a) => {
                let d = grad[0] / a.numel() as f64;
                sink.accumulate(a, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Silu(a, sig) => sink.accumulate(a, |g| {
                for (((g, d), &x), &s) in g.iter_mut().zip(grad).zip(a.data()).zip(sig) {
                    *g += d * s * (1.0 + x * (1.0 - s));
                }
            }),
            Op::ConcatChannels(a, b) => {
                let (n, ca, plane) = (a.shape()[0], a.shape()[1], a.shape()[2] * a.shape()[3]);
                let cb = b.shape()[1];
                let stride = (ca + cb) * plane;
                sink.accumulate(a, |g| {
                    for i in 0..n {
                        add_into(
                            &mut g[i * ca * plane..(i + 1) * ca * plane],
                            &grad[i * stride..i * stride + ca * plane],
                        );
                    }
                });
                sink.accumulate(b, |g| {
                    for i in 0..n {
                        add_into(
                            &mut g[i * cb * plane..(i + 1) * cb * plane],
                            &grad[i * stride + ca * plane..(i + 1) * stride],
                        );
                    }
                });
            }
            Op::Upsample2x(a) => {
                let s = a.shape();
                let (h, w) = (s[2], s[3]);
                let planes = s[0] * s[1];
                sink.accumulate(a, |g| {
                    for p in 0..planes {
                        let src = &grad[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut g[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                            }
                        }
                    }
                });
            }
            Op::ChannelAffine {
                input,
                scale,
                shift,
            } => {
                let s = input.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let sc = scale.data();
                sink.accumulate(input, |g| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            let k = 1.0 + sc[ch];
                            for j in base..base + plane {
                                g[j] += grad[j] * k;
                            }
                        }
                    }
                });
                sink.accumulate(scale, |g| {
                    let x = input.data();
                    for i in 0..n {
                        for (ch, gc) in g.iter_mut().enumerate() {
                            let base = (i * c + ch) * plane;
                            *gc += (base..base + plane).map(|j| grad[j] * x[j]).sum::<f64>();
                        }
                    }
                });
                sink.accumulate(shift, |g| {
                    for i in 0..n {
                        for (ch, gc) in g.iter_mut().enumerate() {
                            let base = (i * c + ch) * plane;
                            *gc += grad[base..base + plane].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
                let rows = input.numel() / in_f;
                let (x, w) = (input.data(), weight.data());
                sink.accumulate(input, |g| {
                    for r in 0..rows {
                        for o in 0..out_f {
                            let d = grad[r * out_f + o];
                            for i in 0..in_f {
                                g[r * in_f + i] += d * w[o * in_f + i];
                            }
                        }
                    }
                });
                sink.accumulate(weight, |g| {
                    for r in 0..rows {
                        for o in 0..out_f {
                            let d = grad[r * out_f + o];
                            for i in 0..in_f {
                                g[o * in_f + i] += d * x[r * in_f + i];
                            }
                        }
                    }
                });
                sink.accumulate(bias, |g| {
                    for r in 0..rows {
                        add_into(g, &grad[r * out_f..(r + 1) * out_f]);
                    }
                });
            }
            Op::Conv2d(saved) => conv::conv2d_backward(saved, grad, sink),
            Op::GroupNorm(saved) => norm::group_norm_backward(saved, grad, sink),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Pending gradients keyed by node id, filled during the reverse sweep.
#[derive(Default)]
pub(crate) struct GradSink {
    pending: HashMap<u64, Vec<f64>>,
}

impl GradSink {
    pub(crate) fn seed(&mut self, t: &Tensor, grad: Vec<f64>) {
        self.pending.insert(t.id(), grad);
    }

    pub(crate) fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.pending.remove(&t.id())
    }

    /// Runs `f` on the (zero-initialised) gradient buffer of `t`, skipping
    /// tensors that do not require gradients.
    pub(crate) fn accumulate(&mut self, t: &Tensor, f: impl FnOnce(&mut [f64])) {
        if !t.requires_grad() {
            return;
        }
        let buf = self
            .pending
            .entry(t.id())
            .or_insert_with(|| vec![0.0; t.numel()]);
        f(buf);
    }
}
