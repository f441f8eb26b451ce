use super::graph::{GradSink, Op};
use super::ops::expect_nchw;
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct GroupNormSaved {
    pub input: Tensor,
    groups: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Group normalisation without affine parameters: each group of
/// `C / groups` channels in every batch item is shifted to zero mean and
/// scaled to unit variance (`1 / sqrt(var + eps)`).
pub fn group_norm(input: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = expect_nchw("group_norm", input)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("{c} channels cannot be split into {groups} groups"),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "group_norm eps must be positive, got {eps}"
        )));
    }
    let len = (c / groups) * h * w;
    let mut normalized = vec![0.0; input.numel()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for (src, dst) in input
        .data()
        .chunks_exact(len)
        .zip(normalized.chunks_exact_mut(len))
    {
        let mean = src.iter().sum::<f64>() / len as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        inv_std.push(r);
    }
    Ok(Tensor::from_op(
        normalized.clone(),
        input.shape().to_vec(),
        Op::GroupNorm(GroupNormSaved {
            input: input.clone(),
            groups,
            normalized,
            inv_std,
        }),
    ))
}

pub(crate) fn group_norm_backward(s: &GroupNormSaved, grad: &[f64], sink: &mut GradSink) {
    let len = s.input.numel() / s.inv_std.len();
    debug_assert_eq!(s.inv_std.len() % s.groups, 0);
    sink.accumulate(&s.input, |gx| {
        for (i, r) in s.inv_std.iter().enumerate() {
            let range = i * len..(i + 1) * len;
            let dy = &grad[range.clone()];
            let xh = &s.normalized[range.clone()];
            let mean_dy = dy.iter().sum::<f64>() / len as f64;
            let mean_dy_xh = dy.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / len as f64;
            for ((g, d), x) in gx[range].iter_mut().zip(dy).zip(xh) {
                *g += r * (d - mean_dy - x * mean_dy_xh);
            }
        }
    });
}
