//! Slice-level compute kernels behind the graph primitives.

use crate::Scalar;

/// Left and right zero padding for an odd kernel under the "same" convention.
pub fn same_padding(kernel: usize) -> (usize, usize) {
    let left = kernel / 2;
    (left, kernel - 1 - left)
}

/// Output length of a same-padded convolution: `ceil(t / stride)`.
pub fn conv_out_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// Gathers `[t_out, channels * kernel]` patches; column index is `c * kernel + j`.
pub(crate) fn im2col<T: Scalar>(
    input: &[T],
    t_in: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    t_out: usize,
) -> Vec<T> {
    let (left, _) = same_padding(kernel);
    let width = channels * kernel;
    let mut cols = vec![T::zero(); t_out * width];
    for tau in 0..t_out {
        let row = &mut cols[tau * width..(tau + 1) * width];
        for j in 0..kernel {
            let src = (stride * tau + j) as isize - left as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let src_row = &input[src as usize * channels..(src as usize + 1) * channels];
            for (c, &x) in src_row.iter().enumerate() {
                row[c * kernel + j] = x;
            }
        }
    }
    cols
}

/// Scatter-adds patches back into a `[t_out, channels]` buffer; the adjoint of [`im2col`].
pub(crate) fn col2im_add<T: Scalar>(
    cols: &[T],
    t_rows: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    out: &mut [T],
    t_out: usize,
) {
    let (left, _) = same_padding(kernel);
    let width = channels * kernel;
    for tau in 0..t_rows {
        let row = &cols[tau * width..(tau + 1) * width];
        for j in 0..kernel {
            let dst = (stride * tau + j) as isize - left as isize;
            if dst < 0 || dst as usize >= t_out {
                continue;
            }
            let dst_row = &mut out[dst as usize * channels..(dst as usize + 1) * channels];
            for (c, slot) in dst_row.iter_mut().enumerate() {
                *slot += row[c * kernel + j];
            }
        }
    }
}

pub(crate) fn add_bias_rows<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

pub(crate) fn sum_rows_into<T: Scalar>(grad: &[T], width: usize, acc: &mut [T]) {
    for row in grad.chunks_exact(width) {
        for (a, &g) in acc.iter_mut().zip(row) {
            *a += g;
        }
    }
}

pub(crate) struct ConvDims {
    pub t_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub t_out: usize,
}

/// Forward convolution. Returns the output and the im2col buffer.
pub(crate) fn conv_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    dims: &ConvDims,
) -> (Vec<T>, Vec<T>) {
    let width = dims.c_in * dims.kernel;
    let cols = im2col(input, dims.t_in, dims.c_in, dims.kernel, dims.stride, dims.t_out);
    let mut out = vec![T::zero(); dims.t_out * dims.c_out];
    // out[t_out, c_out] = cols[t_out, width] · W^T, W viewed as [c_out, width]
    T::gemm(
        dims.t_out,
        width,
        dims.c_out,
        &cols,
        (width, 1),
        weight,
        (1, width),
        T::zero(),
        &mut out,
        (dims.c_out, 1),
    );
    add_bias_rows(&mut out, bias);
    (out, cols)
}

/// Accumulates convolution gradients for input, weight and bias.
pub(crate) fn conv_backward<T: Scalar>(
    grad_out: &[T],
    cols: &[T],
    weight: &[T],
    dims: &ConvDims,
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let width = dims.c_in * dims.kernel;
    if let Some(gw) = grad_weight {
        // dW[c_out, width] += G^T · cols
        T::gemm(
            dims.c_out,
            dims.t_out,
            width,
            grad_out,
            (1, dims.c_out),
            cols,
            (width, 1),
            T::one(),
            gw,
            (width, 1),
        );
    }
    if let Some(gb) = grad_bias {
        sum_rows_into(grad_out, dims.c_out, gb);
    }
    if let Some(gi) = grad_input {
        let mut dcols = vec![T::zero(); dims.t_out * width];
        T::gemm(
            dims.t_out,
            dims.c_out,
            width,
            grad_out,
            (dims.c_out, 1),
            weight,
            (width, 1),
            T::zero(),
            &mut dcols,
            (width, 1),
        );
        col2im_add(&dcols, dims.t_out, dims.c_in, dims.kernel, dims.stride, gi, dims.t_in);
    }
}

/// Transposed convolution from `[t_in, c_in]` to `[t_out, c_out]` with
/// weight `[c_in, c_out, kernel]`.
pub(crate) fn deconv_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    dims: &ConvDims,
) -> Vec<T> {
    let width = dims.c_out * dims.kernel;
    let mut cols = vec![T::zero(); dims.t_in * width];
    T::gemm(
        dims.t_in,
        dims.c_in,
        width,
        input,
        (dims.c_in, 1),
        weight,
        (width, 1),
        T::zero(),
        &mut cols,
        (width, 1),
    );
    let mut out = vec![T::zero(); dims.t_out * dims.c_out];
    col2im_add(&cols, dims.t_in, dims.c_out, dims.kernel, dims.stride, &mut out, dims.t_out);
    add_bias_rows(&mut out, bias);
    out
}

pub(crate) fn deconv_backward<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    weight: &[T],
    dims: &ConvDims,
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let width = dims.c_out * dims.kernel;
    if let Some(gb) = grad_bias {
        sum_rows_into(grad_out, dims.c_out, gb);
    }
    if grad_input.is_none() && grad_weight.is_none() {
        return;
    }
    let gcols = im2col(grad_out, dims.t_out, dims.c_out, dims.kernel, dims.stride, dims.t_in);
    if let Some(gi) = grad_input {
        // dX[t_in, c_in] += gcols[t_in, width] · W^T, W viewed as [c_in, width]
        T::gemm(
            dims.t_in,
            width,
            dims.c_in,
            &gcols,
            (width, 1),
            weight,
            (1, width),
            T::one(),
            gi,
            (dims.c_in, 1),
        );
    }
    if let Some(gw) = grad_weight {
        T::gemm(
            dims.c_in,
            dims.t_in,
            width,
            input,
            (1, dims.c_in),
            &gcols,
            (width, 1),
            T::one(),
            gw,
            (width, 1),
        );
    }
}

/// Per-row layer normalisation. Returns `(output, normalised input, 1/std per row)`.
pub(crate) fn layer_norm_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    gain: &[T],
    shift: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = input.len() / channels;
    let n = T::from_usize(channels).unwrap();
    let mut out = vec![T::zero(); input.len()];
    let mut xhat = vec![T::zero(); input.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for (r, row) in input.chunks_exact(channels).enumerate() {
        let mean = row.iter().fold(T::zero(), |a, &x| a + x) / n;
        let var = row.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
        let inv = (var + eps).sqrt().recip();
        inv_std.push(inv);
        for c in 0..channels {
            let h = (row[c] - mean) * inv;
            xhat[r * channels + c] = h;
            out[r * channels + c] = h * gain[c] + shift[c];
        }
    }
    (out, xhat, inv_std)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gain: &[T],
    channels: usize,
    grad_input: Option<&mut [T]>,
    grad_gain: Option<&mut [T]>,
    grad_shift: Option<&mut [T]>,
) {
    if let Some(gg) = grad_gain {
        for (g_row, h_row) in grad_out.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
            for c in 0..channels {
                gg[c] += g_row[c] * h_row[c];
            }
        }
    }
    if let Some(gs) = grad_shift {
        sum_rows_into(grad_out, channels, gs);
    }
    if let Some(gi) = grad_input {
        let n = T::from_usize(channels).unwrap();
        let mut gh = vec![T::zero(); channels];
        for (r, (g_row, h_row)) in grad_out
            .chunks_exact(channels)
            .zip(xhat.chunks_exact(channels))
            .enumerate()
        {
            let mut sum_gh = T::zero();
            let mut sum_gh_h = T::zero();
            for c in 0..channels {
                gh[c] = g_row[c] * gain[c];
                sum_gh += gh[c];
                sum_gh_h += gh[c] * h_row[c];
            }
            let scale = inv_std[r] / n;
            for c in 0..channels {
                gi[r * channels + c] += scale * (n * gh[c] - sum_gh - h_row[c] * sum_gh_h);
            }
        }
    }
}
