//! Stride-1 "same"-padded 2D convolution with explicit backward passes.
//!
//! Forward lowers each row strip to a column matrix (im2col) and runs one
//! matrix product per strip, writing straight into the output view. The
//! input gradient is again a convolution, with the kernel transposed in
//! its channel axes and flipped spatially; the parameter gradient reuses
//! the forward's column matrices. Strips are processed in a fixed order
//! and accumulate sequentially, so results are bitwise reproducible.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::Scalar;
use crate::error::{Error, Result};

/// Strip sizing: bound the im2col buffer to ~2M scalars.
const STRIP_TARGET_ELEMS: usize = 1 << 21;

fn strip_rows(ck2: usize, w: usize, h: usize) -> usize {
    (STRIP_TARGET_ELEMS / (ck2 * w).max(1)).clamp(1, h)
}

/// Fills `m` (shape ck2 x strip_len*w) with the input patches of rows
/// [y0, y0+strip_h) of batch item `b`. Out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
fn fill_cols<F: Scalar>(
    m: &mut Array2<F>,
    input_flat: &[F],
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    y0: usize,
    strip_h: usize,
) {
    let pad = (k / 2) as isize;
    let cols = strip_h * w;
    let m_flat = m.as_slice_mut().expect("im2col buffer is standard layout");
    for c in 0..c_in {
        let in_base = ((b * c_in + c) * h) * w;
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let m_row = &mut m_flat[row * cols..(row + 1) * cols];
                let shift = kx as isize - pad;
                for y in 0..strip_h {
                    let iy = (y0 + y) as isize + ky as isize - pad;
                    let seg = &mut m_row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(F::zero());
                        continue;
                    }
                    let x_start = (-shift).max(0) as usize;
                    let x_end = ((w as isize - shift).min(w as isize)).max(0) as usize;
                    if x_start > 0 {
                        seg[..x_start.min(w)].fill(F::zero());
                    }
                    if x_end < w {
                        seg[x_end..].fill(F::zero());
                    }
                    if x_end > x_start {
                        let src = in_base + iy as usize * w;
                        let s0 = (x_start as isize + shift) as usize;
                        let s1 = (x_end as isize + shift) as usize;
                        seg[x_start..x_end].copy_from_slice(&input_flat[src + s0..src + s1]);
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<F: Scalar>(
    input: &Array4<F>,
    weight: &Array4<F>,
    bias: Option<&Array1<F>>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c_in, h, w) = input.dim();
    let (c_out, wc_in, kh, kw) = weight.dim();
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "kernel expects {wc_in} input channels, input has {c_in}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::parameter(format!(
            "kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape(format!(
                "bias has {} entries for {c_out} output channels",
                b.len()
            )));
        }
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::shape("empty input tensor"));
    }
    Ok((n, c_in, h, w, c_out, kh))
}

/// y = conv(x, weight) + bias, stride 1, zero "same" padding.
pub fn conv2d_same<F: Scalar>(
    input: &Array4<F>,
    weight: &Array4<F>,
    bias: Option<&Array1<F>>,
) -> Result<Array4<F>> {
    let (n, c_in, h, w, c_out, k) = check_conv_shapes(input, weight, bias)?;
    let ck2 = c_in * k * k;
    let mut out = Array4::<F>::zeros((n, c_out, h, w));
    let input_flat = input.as_slice().expect("input is standard layout");
    let w2 = weight
        .view()
        .into_shape_with_order((c_out, ck2))
        .expect("weight is standard layout");

    let strip = strip_rows(ck2, w, h);
    let out_flat_len_per_item = c_out * h * w;
    {
        let out_flat = out.as_slice_mut().expect("output is standard layout");
        for b in 0..n {
            let mut y0 = 0;
            while y0 < h {
                let strip_h = strip.min(h - y0);
                let cols = strip_h * w;
                let mut m = Array2::<F>::zeros((ck2, cols));
                fill_cols(&mut m, input_flat, b, c_in, h, w, k, y0, strip_h);
                let off = b * out_flat_len_per_item + y0 * w;
                let mut out_view = ArrayViewMut2::from_shape(
                    (c_out, cols).strides((h * w, 1)),
                    &mut out_flat[off..],
                )
                .expect("output strip view in bounds");
                general_mat_mul(F::one(), &w2, &m.view(), F::zero(), &mut out_view);
                y0 += strip_h;
            }
        }
    }
    if let Some(bias) = bias {
        let out_flat = out.as_slice_mut().unwrap();
        for b in 0..n {
            for o in 0..c_out {
                let bo = bias[o];
                let off = b * out_flat_len_per_item + o * h * w;
                for v in &mut out_flat[off..off + h * w] {
                    *v = *v + bo;
                }
            }
        }
    }
    Ok(out)
}

/// dL/dx given dL/dy: convolution of the output gradient with the kernel
/// transposed over channels and flipped over space.
pub fn conv2d_backward_input<F: Scalar>(
    grad_out: &Array4<F>,
    weight: &Array4<F>,
) -> Result<Array4<F>> {
    let (c_out, c_in, kh, kw) = weight.dim();
    let mut flipped = Array4::<F>::zeros((c_in, c_out, kh, kw));
    for o in 0..c_out {
        for i in 0..c_in {
            for y in 0..kh {
                for x in 0..kw {
                    flipped[[i, o, kh - 1 - y, kw - 1 - x]] = weight[[o, i, y, x]];
                }
            }
        }
    }
    conv2d_same(grad_out, &flipped, None)
}

/// dL/dweight and dL/dbias given the forward input and dL/dy.
pub fn conv2d_backward_params<F: Scalar>(
    input: &Array4<F>,
    grad_out: &Array4<F>,
    k: usize,
) -> Result<(Array4<F>, Array1<F>)> {
    let (n, c_in, h, w) = input.dim();
    let (gn, c_out, gh, gw) = grad_out.dim();
    if (gn, gh, gw) != (n, h, w) {
        return Err(Error::shape("gradient shape does not match input"));
    }
    if k % 2 == 0 {
        return Err(Error::parameter("kernel size must be odd"));
    }
    let ck2 = c_in * k * k;
    let mut dw2 = Array2::<F>::zeros((c_out, ck2));
    let mut db = Array1::<F>::zeros(c_out);

    let input_flat = input.as_slice().expect("input is standard layout");
    let grad_flat = grad_out.as_slice().expect("gradient is standard layout");
    let strip = strip_rows(ck2, w, h);
    for b in 0..n {
        let mut y0 = 0;
        while y0 < h {
            let strip_h = strip.min(h - y0);
            let cols = strip_h * w;
            let mut m = Array2::<F>::zeros((ck2, cols));
            fill_cols(&mut m, input_flat, b, c_in, h, w, k, y0, strip_h);
            let off = b * c_out * h * w + y0 * w;
            let g2 = ArrayView2::from_shape((c_out, cols).strides((h * w, 1)), &grad_flat[off..])
                .expect("gradient strip view in bounds");
            general_mat_mul(F::one(), &g2, &m.t(), F::one(), &mut dw2.view_mut());
            y0 += strip_h;
        }
        for o in 0..c_out {
            let off = (b * c_out + o) * h * w;
            let mut acc = F::zero();
            for v in &grad_flat[off..off + h * w] {
                acc = acc + *v;
            }
            db[o] = db[o] + acc;
        }
    }
    let dw = dw2
        .into_shape_with_order((c_out, c_in, k, k))
        .expect("gradient buffer is standard layout");
    Ok((dw, db))
}

/// In-place leaky ReLU.
pub fn leaky_relu_forward<F: Scalar>(t: &mut Array4<F>, slope: F) {
    for v in t.iter_mut() {
        if *v < F::zero() {
            *v = *v * slope;
        }
    }
}

/// Backward through leaky ReLU given the *post*-activation values: the
/// slope is positive, so the post-activation sign equals the
/// pre-activation sign.
pub fn leaky_relu_backward<F: Scalar>(grad: &mut Array4<F>, post: &Array4<F>, slope: F) {
    debug_assert_eq!(grad.dim(), post.dim());
    let g = grad.as_slice_mut().unwrap();
    let p = post.as_slice().unwrap();
    for (g, p) in g.iter_mut().zip(p) {
        if *p <= F::zero() {
            *g = *g * slope;
        }
    }
}
