//! Pure tensor math: the forward kernels used by the tape and by the
//! evaluation paths.
//!
//! Convolution is direct (no im2col), loops run in a fixed order, and all
//! reductions accumulate in declaration order — identical inputs give
//! bit-identical outputs on every run.

use crate::error::{Error, Result};
use crate::tensor::{idx3, idx4, Tensor};

/// Zero-fill padding mode for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size = ceil(input / stride); zero padding as needed.
    Same,
    /// No padding; output = floor((input - kernel) / stride) + 1.
    Valid,
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, isize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let pad_total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, (pad_total / 2) as isize))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::Dimension(format!(
                    "valid conv needs input {} >= kernel {}",
                    input, kernel
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// Direct 2-D convolution over a single frame.
///
/// `input` is `[h, w, c_in]`, `kernel` is `[kh, kw, c_in, c_out]`, `bias`
/// is `[c_out]`. Kernel sides must be odd and stride must be 1 or 2.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::Dimension(format!(
            "conv2d input must be [h,w,c], got {:?}",
            input.shape()
        )));
    }
    if kernel.rank() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d kernel must be [kh,kw,c_in,c_out], got {:?}",
            kernel.shape()
        )));
    }
    let (h, w, c_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, kc_in, c_out) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kc_in != c_in {
        return Err(Error::Dimension(format!(
            "conv2d channel mismatch: input c_in {} vs kernel c_in {}",
            c_in, kc_in
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Input(format!("conv2d kernel sides must be odd, got {}x{}", kh, kw)));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Input(format!("conv2d stride must be 1 or 2, got {}", stride)));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Dimension(format!(
            "conv2d bias must be [{}], got {:?}",
            c_out,
            bias.shape()
        )));
    }

    let (oh, pad_h) = conv_out_dim(h, kh, stride, padding)?;
    let (ow, pad_w) = conv_out_dim(w, kw, stride, padding)?;

    let mut out = Tensor::zeros(&[oh, ow, c_out]);
    let ks = kernel.shape().to_vec();
    let is = input.shape().to_vec();
    let os = out.shape().to_vec();
    let odata = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let base_y = (oy * stride) as isize - pad_h;
            let base_x = (ox * stride) as isize - pad_w;
            for oc in 0..c_out {
                let mut acc = bias.data()[oc];
                for dy in 0..kh {
                    let iy = base_y + dy as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let ix = base_x + dx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for ic in 0..c_in {
                            acc += input.data()[idx3(&is, iy as usize, ix as usize, ic)]
                                * kernel.data()[idx4(&ks, dy, dx, ic, oc)];
                        }
                    }
                }
                odata[idx3(&os, oy, ox, oc)] = acc;
            }
        }
    }
    Ok(out)
}

/// Fully connected layer: `out[j] = sum_i x[i] * w[i,j] + b[j]`.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 1 || weight.rank() != 2 || bias.rank() != 1 {
        return Err(Error::Dimension(format!(
            "affine expects x[n], w[n,m], b[m]; got {:?}, {:?}, {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let n = input.shape()[0];
    let m = weight.shape()[1];
    if weight.shape()[0] != n || bias.shape()[0] != m {
        return Err(Error::Dimension(format!(
            "affine shape mismatch: x[{}], w{:?}, b{:?}",
            n,
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![0.0; m];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = bias.data()[j];
        for i in 0..n {
            acc += input.data()[i] * weight.data()[i * m + j];
        }
        *o = acc;
    }
    Tensor::new(vec![m], out)
}

/// Numerically stable elementwise logistic sigmoid.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Elementwise tanh.
pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Elementwise leaky ReLU with slope 0.1 on the negative side.
pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
}

pub(crate) const LEAKY_SLOPE: f64 = 0.1;

/// Max-shifted softmax over a rank-1 tensor; output sums to 1 and is
/// strictly positive.
pub fn softmax(scores: &Tensor) -> Result<Tensor> {
    if scores.rank() != 1 || scores.is_empty() {
        return Err(Error::Dimension(format!(
            "softmax expects a non-empty vector, got {:?}",
            scores.shape()
        )));
    }
    let max = scores.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.data().iter().map(|&v| (v - max).exp()).collect();
    let mut sum = 0.0;
    for &e in &exps {
        sum += e;
    }
    Tensor::new(vec![scores.len()], exps.into_iter().map(|e| e / sum).collect())
}

/// Per-channel mean over all `l*h*w` positions of `[l,h,w,c]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::Dimension(format!(
            "global_avg_pool expects [l,h,w,c], got {:?}",
            input.shape()
        )));
    }
    let (l, h, w, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let positions = (l * h * w) as f64;
    let mut out = vec![0.0; c];
    for (i, &v) in input.data().iter().enumerate() {
        out[i % c] += v;
    }
    for o in &mut out {
        *o /= positions;
    }
    Tensor::new(vec![c], out)
}

/// Per-position mean over channels: `[l,h,w,c]` -> `[l,h,w]`.
pub fn channel_mean(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::Dimension(format!(
            "channel_mean expects [l,h,w,c], got {:?}",
            input.shape()
        )));
    }
    let c = input.shape()[3];
    let n = input.len() / c;
    let mut out = vec![0.0; n];
    for (p, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ci in 0..c {
            acc += input.data()[p * c + ci];
        }
        *o = acc / c as f64;
    }
    Tensor::new(input.shape()[..3].to_vec(), out)
}

/// Nearest-neighbor 2x spatial upsampling of `[l,h,w,c]`.
pub fn upsample_nearest_2x(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::Dimension(format!(
            "upsample expects [l,h,w,c], got {:?}",
            input.shape()
        )));
    }
    let (l, h, w, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let mut out = Tensor::zeros(&[l, 2 * h, 2 * w, c]);
    let is = input.shape().to_vec();
    let os = out.shape().to_vec();
    let odata = out.data_mut();
    for f in 0..l {
        for y in 0..2 * h {
            for x in 0..2 * w {
                for ci in 0..c {
                    odata[idx4(&os, f, y, x, ci)] =
                        input.data()[idx4(&is, f, y / 2, x / 2, ci)];
                }
            }
        }
    }
    Ok(out)
}

/// Mean pixel-wise cross-entropy of `logits [l,h,w,C]` against integer
/// class labels `[l,h,w]`. Labels are stored as exact floats.
pub fn cross_entropy_mean(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let (probs_unused, loss) = softmax_xent_forward(logits, labels)?;
    drop(probs_unused);
    Ok(loss)
}

/// Forward pass of softmax cross-entropy; returns per-pixel softmax
/// probabilities (needed by the backward pass) and the mean loss.
pub(crate) fn softmax_xent_forward(logits: &Tensor, labels: &Tensor) -> Result<(Tensor, f64)> {
    if logits.rank() != 4 {
        return Err(Error::Dimension(format!(
            "cross entropy expects logits [l,h,w,C], got {:?}",
            logits.shape()
        )));
    }
    let classes = logits.shape()[3];
    let pixels = logits.len() / classes;
    if labels.len() != pixels {
        return Err(Error::Dimension(format!(
            "labels cover {} pixels, logits have {}",
            labels.len(),
            pixels
        )));
    }
    let mut probs = Tensor::zeros(logits.shape());
    let pdata = probs.data_mut();
    let mut loss = 0.0;
    for p in 0..pixels {
        let row = &logits.data()[p * classes..(p + 1) * classes];
        let target = labels.data()[p];
        if target < 0.0 || target.fract() != 0.0 || target as usize >= classes {
            return Err(Error::Input(format!(
                "label {} outside class range 0..{}",
                target, classes
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln() + max;
        loss += log_sum - row[target as usize];
        for (ci, &v) in row.iter().enumerate() {
            pdata[p * classes + ci] = (v - max).exp() / sum;
        }
    }
    Ok((probs, loss / pixels as f64))
}

/// Mean absolute error between two same-shaped tensors.
pub fn mean_absolute_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "mae shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        acc += (x - y).abs();
    }
    Ok(acc / a.len() as f64)
}
