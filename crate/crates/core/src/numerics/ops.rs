use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Norms below this are rejected by [`cosine_distance`].
pub const NORM_GUARD: f64 = 1e-12;

/// Dot product with eight independent accumulators so the loop vectorizes.
/// Summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn ensure_finite<F: Real>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{op} input")))
    }
}

/// Affine map `weight · input + bias`.
pub fn linear<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    if weight.shape().len() != 2 {
        return Err(Error::dim("linear", "weight", "[out, in]", weight.shape()));
    }
    let (out_dim, in_dim) = (weight.dim(0), weight.dim(1));
    if input.shape() != [in_dim] {
        return Err(Error::dim("linear", "input", [in_dim], input.shape()));
    }
    if bias.shape() != [out_dim] {
        return Err(Error::dim("linear", "bias", [out_dim], bias.shape()));
    }
    let x = input.data();
    let out = (0..out_dim)
        .map(|o| dot(weight.row(o), x) + bias.data()[o])
        .collect();
    Ok(Tensor::vector(out))
}

/// Accumulates `dL/dweight` and `dL/dbias`, returns `dL/dinput`.
pub fn linear_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &[F],
    grad_weight: &mut [F],
    grad_bias: &mut [F],
) -> Tensor<F> {
    let (out_dim, in_dim) = (weight.dim(0), weight.dim(1));
    debug_assert_eq!(grad_out.len(), out_dim);
    let x = input.data();
    let mut grad_in = vec![F::zero(); in_dim];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_bias[o] += g;
        if g == F::zero() {
            continue;
        }
        axpy(g, x, &mut grad_weight[o * in_dim..(o + 1) * in_dim]);
        axpy(g, weight.row(o), &mut grad_in);
    }
    Tensor::vector(grad_in)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output length `ceil(T / stride)`; zeros split around the sequence, extra on the right.
    #[default]
    Same,
    /// No padding; output length `(T - K) / stride + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1dSpec {
    pub fn new(stride: usize, padding: Padding) -> Self {
        Self { stride, padding }
    }

    /// `(output length, left pad, right pad)`, or `None` if the kernel does not fit.
    pub fn geometry(&self, len: usize, kernel: usize) -> Option<(usize, usize, usize)> {
        if self.stride == 0 || kernel == 0 || len == 0 {
            return None;
        }
        match self.padding {
            Padding::Valid => {
                if kernel > len {
                    None
                } else {
                    Some(((len - kernel) / self.stride + 1, 0, 0))
                }
            }
            Padding::Same => {
                let out = len.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + kernel).saturating_sub(len);
                Some((out, total / 2, total - total / 2))
            }
        }
    }
}

fn pad_rows<F: Real>(input: &Tensor<F>, left: usize, right: usize) -> Vec<F> {
    if left == 0 && right == 0 {
        return input.data().to_vec();
    }
    let c = input.dim(1);
    let mut out = vec![F::zero(); (input.dim(0) + left + right) * c];
    out[left * c..left * c + input.len()].copy_from_slice(input.data());
    out
}

fn conv_shapes<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    spec: Conv1dSpec,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if input.shape().len() != 2 {
        return Err(Error::dim("conv1d", "input", "[T, C_in]", input.shape()));
    }
    if kernels.shape().len() != 3 {
        return Err(Error::dim("conv1d", "kernels", "[C_out, K, C_in]", kernels.shape()));
    }
    let (t, c_in) = (input.dim(0), input.dim(1));
    let (c_out, k) = (kernels.dim(0), kernels.dim(1));
    if kernels.dim(2) != c_in {
        return Err(Error::dim("conv1d", "kernels", [c_out, k, c_in], kernels.shape()));
    }
    if spec.stride == 0 {
        return Err(Error::Config("conv1d stride must be positive".into()));
    }
    let (out, left, right) = spec.geometry(t, k).ok_or_else(|| Error::Degenerate {
        op: "conv1d",
        detail: format!("kernel width {k} exceeds padded length of {t} frames"),
    })?;
    Ok((t, c_in, c_out, k, out, left, right))
}

/// Temporal cross-correlation of a `[T, C_in]` sequence with `[C_out, K, C_in]` kernels.
pub fn conv1d<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    bias: &Tensor<F>,
    spec: Conv1dSpec,
) -> Result<Tensor<F>> {
    let (_, c_in, c_out, k, out_len, left, right) = conv_shapes(input, kernels, spec)?;
    if bias.shape() != [c_out] {
        return Err(Error::dim("conv1d", "bias", [c_out], bias.shape()));
    }
    let padded = pad_rows(input, left, right);
    let window = k * c_in;
    let kern = kernels.data();
    let b = bias.data();
    let mut out = vec![F::zero(); out_len * c_out];
    for t in 0..out_len {
        let start = t * spec.stride * c_in;
        let win = &padded[start..start + window];
        let row = &mut out[t * c_out..(t + 1) * c_out];
        for (o, y) in row.iter_mut().enumerate() {
            *y = dot(&kern[o * window..(o + 1) * window], win) + b[o];
        }
    }
    Tensor::matrix(out_len, c_out, out)
}

/// Accumulates kernel and bias gradients; returns the input gradient when requested.
pub fn conv1d_backward<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    spec: Conv1dSpec,
    grad_out: &[F],
    grad_kernels: &mut [F],
    grad_bias: &mut [F],
    want_input_grad: bool,
) -> Result<Option<Tensor<F>>> {
    let (t, c_in, c_out, k, out_len, left, right) = conv_shapes(input, kernels, spec)?;
    if grad_out.len() != out_len * c_out {
        return Err(Error::dim("conv1d_backward", "grad_out", out_len * c_out, grad_out.len()));
    }
    let padded = pad_rows(input, left, right);
    let window = k * c_in;
    let kern = kernels.data();
    let mut grad_padded = if want_input_grad {
        vec![F::zero(); padded.len()]
    } else {
        Vec::new()
    };
    for step in 0..out_len {
        let start = step * spec.stride * c_in;
        let win = &padded[start..start + window];
        for o in 0..c_out {
            let g = grad_out[step * c_out + o];
            grad_bias[o] += g;
            if g == F::zero() {
                continue;
            }
            axpy(g, win, &mut grad_kernels[o * window..(o + 1) * window]);
            if want_input_grad {
                axpy(
                    g,
                    &kern[o * window..(o + 1) * window],
                    &mut grad_padded[start..start + window],
                );
            }
        }
    }
    if !want_input_grad {
        return Ok(None);
    }
    let _ = right;
    let grad = grad_padded[left * c_in..(left + t) * c_in].to_vec();
    Ok(Some(Tensor::matrix(t, c_in, grad)?))
}

/// Per-channel maximum over the time axis of a `[T, C]` sequence, with the
/// winning frame index per channel (first occurrence on ties).
pub fn max_pool_over_time<F: Real>(input: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    if input.shape().len() != 2 {
        return Err(Error::dim("max_pool_over_time", "input", "[T, C]", input.shape()));
    }
    let (t, c) = (input.dim(0), input.dim(1));
    if t == 0 {
        return Err(Error::Degenerate {
            op: "max_pool_over_time",
            detail: "sequence has zero frames".into(),
        });
    }
    let data = input.data();
    let mut best = data[..c].to_vec();
    let mut arg = vec![0usize; c];
    for step in 1..t {
        let row = &data[step * c..(step + 1) * c];
        for ch in 0..c {
            if row[ch] > best[ch] {
                best[ch] = row[ch];
                arg[ch] = step;
            }
        }
    }
    Ok((Tensor::vector(best), arg))
}

pub fn max_pool_over_time_backward<F: Real>(argmax: &[usize], frames: usize, grad_out: &[F]) -> Tensor<F> {
    let c = argmax.len();
    let mut grad = vec![F::zero(); frames * c];
    for (ch, (&t, &g)) in argmax.iter().zip(grad_out).enumerate() {
        grad[t * c + ch] += g;
    }
    Tensor {
        shape: vec![frames, c],
        data: grad,
    }
}

pub fn relu<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    ensure_finite("relu", input.data())?;
    let data = input.data().iter().map(|&x| x.max(F::zero())).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// In-place: zeroes `grad` where the forward output was not positive.
pub fn relu_backward<F: Real>(output: &[F], grad: &mut [F]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= F::zero() {
            *g = F::zero();
        }
    }
}

#[inline]
fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn sigmoid<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    ensure_finite("sigmoid", input.data())?;
    let data = input.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// In-place: multiplies `grad` by `y (1 - y)`.
pub fn sigmoid_backward<F: Real>(output: &[F], grad: &mut [F]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        *g *= y * (F::one() - y);
    }
}

/// Softmax over a vector, computed after subtracting the maximum.
pub fn softmax<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    if input.is_empty() {
        return Err(Error::Degenerate {
            op: "softmax",
            detail: "empty input".into(),
        });
    }
    ensure_finite("softmax", input.data())?;
    let max = input.data().iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = input.data().iter().map(|&x| (x - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    Tensor::new(input.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
}

pub fn softmax_backward<F: Real>(output: &[F], grad: &[F]) -> Vec<F> {
    let inner = dot(output, grad);
    output.iter().zip(grad).map(|(&y, &g)| y * (g - inner)).collect()
}

fn norms_checked<F: Real>(a: &[F], b: &[F]) -> Result<(F, F, F)> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_distance", "b", a.len(), b.len()));
    }
    let guard = F::of(NORM_GUARD);
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    for (name, n) in [("a", na), ("b", nb)] {
        if !n.is_finite() {
            return Err(Error::NonFinite(format!("cosine_distance operand {name}")));
        }
        if n < guard {
            return Err(Error::Degenerate {
                op: "cosine_distance",
                detail: format!("operand {name} has norm {n} below {NORM_GUARD:e}"),
            });
        }
    }
    Ok((dot(a, b), na, nb))
}

/// `1 - a·b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    let (ab, na, nb) = norms_checked(a, b)?;
    Ok(F::one() - ab / (na * nb))
}

/// Gradients of `grad · cosine_distance(a, b)` with respect to `a` and `b`.
pub fn cosine_distance_backward<F: Real>(a: &[F], b: &[F], grad: F) -> Result<(Vec<F>, Vec<F>)> {
    let (ab, na, nb) = norms_checked(a, b)?;
    let inv = F::one() / (na * nb);
    let cos = ab * inv;
    let (na2, nb2) = (na * na, nb * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| -grad * (y * inv - cos * x / na2))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| -grad * (x * inv - cos * y / nb2))
        .collect();
    Ok((ga, gb))
}
