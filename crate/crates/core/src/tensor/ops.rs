use super::graph::Op;
use super::Tensor;
use crate::error::{Error, Result};

/// `exp(-x)` overflows to infinity for very negative `x`, which still
/// yields the correct limit 0.
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn expect_nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [N, C, H, W], got {:?}", t.shape()),
        )),
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * factor).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), factor))
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + value).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        let data = self.data().iter().map(|a| a * a).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Square(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::from_op(vec![total], Vec::new(), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let mean = total / self.numel().max(1) as f64;
        Tensor::from_op(vec![mean], Vec::new(), Op::Mean(self.clone()))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        let sig: Vec<f64> = self.data().iter().map(|&x| sigmoid(x)).collect();
        let data = self.data().iter().zip(&sig).map(|(x, s)| x * s).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Silu(self.clone(), sig))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        Ok(self.sub(target)?.square().mean())
    }

    /// Clamps into `[lo, hi]`. Not differentiable: the result is a leaf.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::leaf(data, self.shape().to_vec(), false)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Joins two NCHW tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = expect_nchw("concat_channels", a)?;
    let (nb, cb, hb, wb) = expect_nchw("concat_channels", b)?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Ok(Tensor::from_op(
        data,
        vec![n, ca + cb, h, w],
        Op::ConcatChannels(a.clone(), b.clone()),
    ))
}

/// Nearest-neighbour upsampling by a factor of two.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = expect_nchw("upsample_nearest2x", x)?;
    let mut data = vec![0.0; n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::from_op(
        data,
        vec![n, c, 2 * h, 2 * w],
        Op::Upsample2x(x.clone()),
    ))
}

/// Per-channel affine `x * (1 + scale[c]) + shift[c]` on an NCHW tensor.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = expect_nchw("channel_affine", x)?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "channel_affine",
            format!(
                "input has {c} channels, scale {:?}, shift {:?}",
                scale.shape(),
                shift.shape()
            ),
        ));
    }
    let plane = h * w;
    let mut data = x.to_vec();
    for i in 0..n {
        for ch in 0..c {
            let k = 1.0 + scale.data()[ch];
            let b = shift.data()[ch];
            let base = (i * c + ch) * plane;
            for v in &mut data[base..base + plane] {
                *v = *v * k + b;
            }
        }
    }
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        Op::ChannelAffine {
            input: x.clone(),
            scale: scale.clone(),
            shift: shift.clone(),
        },
    ))
}

/// Dense layer `x W^T + b`; `x` is `[in]` or `[rows, in]`, `W` is `[out, in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [out_f, in_f] = *weight.shape() else {
        return Err(Error::shape(
            "linear",
            format!("weight must be [out, in], got {:?}", weight.shape()),
        ));
    };
    let (rows, out_shape) = match *x.shape() {
        [i] if i == in_f => (1, vec![out_f]),
        [r, i] if i == in_f => (r, vec![r, out_f]),
        _ => {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not end in {in_f}", x.shape()),
            ))
        }
    };
    if bias.shape() != [out_f] {
        return Err(Error::shape(
            "linear",
            format!("bias must be [{out_f}], got {:?}", bias.shape()),
        ));
    }
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut data = Vec::with_capacity(rows * out_f);
    for r in 0..rows {
        let row = &xd[r * in_f..(r + 1) * in_f];
        for o in 0..out_f {
            let wrow = &wd[o * in_f..(o + 1) * in_f];
            data.push(bd[o] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Ok(Tensor::from_op(
        data,
        out_shape,
        Op::Linear {
            input: x.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
        },
    ))
}
