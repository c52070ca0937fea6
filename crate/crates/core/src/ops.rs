//! Forward and backward kernels on flat slices.
//!
//! Every output element accumulates its terms in a fixed sequential order
//! (row-major over the reduction axes) and adds the bias last, so results are
//! bitwise reproducible and independent of batch size.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Shape bookkeeping for a 2-D cross-correlation over one `[C, H, W]` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::dim("convolution stride must be positive"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::dim("convolution kernel must be non-empty"));
        }
        if self.height + 2 * self.padding < self.kernel_h
            || self.width + 2 * self.padding < self.kernel_w
        {
            return Err(Error::dim(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h,
                self.kernel_w,
                self.height + 2 * self.padding,
                self.width + 2 * self.padding
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Length of one receptive field, `C_in * K_h * K_w`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.positions()
    }
}

/// Unfolds one sample into a `[patch_len, positions]` matrix. Padding cells
/// are zero.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let k = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let row = &mut col[k * positions..(k + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a `[patch_len, positions]` gradient back onto the input sample.
pub fn col2im<T: Scalar>(dcol: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let k = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let row = &dcol[k * positions..(k + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[co, p] = sum_k kernel[co, k] * col[k, p] + bias[co]`, summed over `k`
/// in ascending order.
pub fn conv2d_from_cols<T: Scalar>(
    col: &[T],
    kernel: &[T],
    bias: &[T],
    g: &ConvGeometry,
    out: &mut [T],
) {
    let positions = g.positions();
    let patch = g.patch_len();
    for co in 0..g.out_channels {
        let acc = &mut out[co * positions..(co + 1) * positions];
        acc.fill(T::zero());
        let wrow = &kernel[co * patch..(co + 1) * patch];
        for (k, &w) in wrow.iter().enumerate() {
            let src = &col[k * positions..(k + 1) * positions];
            for (a, &c) in acc.iter_mut().zip(src) {
                *a += w * c;
            }
        }
        let b = bias[co];
        for a in acc.iter_mut() {
            *a += b;
        }
    }
}

/// Accumulates kernel and bias gradients for one sample.
pub fn conv2d_backward_params<T: Scalar>(
    col: &[T],
    dout: &[T],
    g: &ConvGeometry,
    dkernel: &mut [T],
    dbias: &mut [T],
) {
    let positions = g.positions();
    let patch = g.patch_len();
    // Transposed patches so the inner loop runs contiguously over `k`.
    let mut col_t = vec![T::zero(); patch * positions];
    for k in 0..patch {
        for p in 0..positions {
            col_t[p * patch + k] = col[k * positions + p];
        }
    }
    for co in 0..g.out_channels {
        let drow = &dout[co * positions..(co + 1) * positions];
        let dw = &mut dkernel[co * patch..(co + 1) * patch];
        let mut db = T::zero();
        for (p, &d) in drow.iter().enumerate() {
            db += d;
            if d == T::zero() {
                continue;
            }
            for (w, &c) in dw.iter_mut().zip(&col_t[p * patch..(p + 1) * patch]) {
                *w += d * c;
            }
        }
        dbias[co] += db;
    }
}

/// Gradient with respect to the unfolded input, `dcol = kernel^T dout`.
pub fn conv2d_backward_cols<T: Scalar>(kernel: &[T], dout: &[T], g: &ConvGeometry, dcol: &mut [T]) {
    let positions = g.positions();
    let patch = g.patch_len();
    dcol.fill(T::zero());
    for co in 0..g.out_channels {
        let drow = &dout[co * positions..(co + 1) * positions];
        for k in 0..patch {
            let w = kernel[co * patch + k];
            if w == T::zero() {
                continue;
            }
            for (c, &d) in dcol[k * positions..(k + 1) * positions].iter_mut().zip(drow) {
                *c += w * d;
            }
        }
    }
}

const ROW_BLOCK: usize = 8;

/// Batched affine map: `y[r, k] = sum_j x[r, j] * w[k, j] + b[k]`.
///
/// `w` is `[d_out, d_in]`. Zero inputs are skipped; for finite weights this
/// leaves every sum bitwise unchanged.
pub fn affine_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    y: &mut [T],
) {
    let mut w_t = vec![T::zero(); d_in * d_out];
    for k in 0..d_out {
        for j in 0..d_in {
            w_t[j * d_out + k] = w[k * d_in + j];
        }
    }
    y.fill(T::zero());
    for r0 in (0..rows).step_by(ROW_BLOCK) {
        let r1 = (r0 + ROW_BLOCK).min(rows);
        for j in 0..d_in {
            let wrow = &w_t[j * d_out..(j + 1) * d_out];
            for r in r0..r1 {
                let xv = x[r * d_in + j];
                if xv == T::zero() {
                    continue;
                }
                for (acc, &wv) in y[r * d_out..(r + 1) * d_out].iter_mut().zip(wrow) {
                    *acc += xv * wv;
                }
            }
        }
    }
    for r in 0..rows {
        for (acc, &bv) in y[r * d_out..(r + 1) * d_out].iter_mut().zip(b) {
            *acc += bv;
        }
    }
}

/// `dx[r, j] = sum_k dy[r, k] * w[k, j]`.
pub fn affine_backward_input<T: Scalar>(
    dy: &[T],
    w: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dx: &mut [T],
) {
    dx.fill(T::zero());
    for r0 in (0..rows).step_by(ROW_BLOCK) {
        let r1 = (r0 + ROW_BLOCK).min(rows);
        for k in 0..d_out {
            let wrow = &w[k * d_in..(k + 1) * d_in];
            for r in r0..r1 {
                let d = dy[r * d_out + k];
                if d == T::zero() {
                    continue;
                }
                for (acc, &wv) in dx[r * d_in..(r + 1) * d_in].iter_mut().zip(wrow) {
                    *acc += d * wv;
                }
            }
        }
    }
}

/// Accumulates `dw[k, j] += sum_r dy[r, k] * x[r, j]` and `db[k] += sum_r dy[r, k]`.
pub fn affine_backward_params<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [T],
    db: &mut [T],
) {
    for k in 0..d_out {
        let dwrow = &mut dw[k * d_in..(k + 1) * d_in];
        for r in 0..rows {
            let d = dy[r * d_out + k];
            db[k] += d;
            if d == T::zero() {
                continue;
            }
            for (acc, &xv) in dwrow.iter_mut().zip(&x[r * d_in..(r + 1) * d_in]) {
                *acc += d * xv;
            }
        }
    }
}

pub fn relu<T: Scalar>(x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = if v > T::zero() { v } else { T::zero() };
    }
}

pub fn relu_backward<T: Scalar>(x: &[T], dy: &[T], dx: &mut [T]) {
    for ((o, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
        *o = if v > T::zero() { d } else { T::zero() };
    }
}

/// 2x2 max pooling with stride 2 over `[C, H, W]`; odd trailing rows and
/// columns are dropped. Returns the flat input index of each selected maximum
/// (first in row-major window order on ties).
pub fn maxpool2x2<T: Scalar>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    y: &mut [T],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                y[o] = x[best];
                argmax[o] = best;
            }
        }
    }
}

/// Mean of squared differences, summed in index order.
pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> T {
    let mut acc = T::zero();
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        acc += d * d;
    }
    acc / T::of(pred.len() as f64)
}

/// Row-wise softmax probabilities and the mean cross-entropy over rows.
pub fn softmax_xent<T: Scalar>(
    logits: &[T],
    classes: usize,
    targets: &[usize],
    probs: &mut [T],
) -> T {
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row {
            z += (v - m).exp();
        }
        let lse = m + z.ln();
        for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
        total += lse - row[t];
    }
    total / T::of(targets.len() as f64)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(c: usize, h: usize, w: usize, co: usize, k: usize, stride: usize, pad: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding: pad,
        }
    }

    #[test]
    fn output_dims_follow_floor_rule() {
        let g = geom(1, 7, 5, 1, 3, 2, 1);
        assert_eq!(g.out_h(), 4);
        assert_eq!(g.out_w(), 3);
        assert!(geom(1, 1, 1, 1, 4, 1, 1).validate().is_err());
        assert!(geom(1, 2, 2, 1, 4, 1, 1).validate().is_ok());
    }

    #[test]
    fn im2col_then_col2im_counts_overlaps() {
        // Scattering an all-ones column matrix counts how many windows touch each pixel.
        let g = geom(1, 3, 3, 1, 2, 1, 0);
        let dcol = vec![1.0f64; g.patch_len() * g.positions()];
        let mut dx = vec![0.0; 9];
        col2im(&dcol, &g, &mut dx);
        assert_eq!(dx, vec![1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = [5.0f32, 5.0, 5.0, 5.0];
        let mut y = [0.0];
        let mut am = [9];
        maxpool2x2(&x, 1, 2, 2, &mut y, &mut am);
        assert_eq!((y[0], am[0]), (5.0, 0));
    }

    #[test]
    fn argmax_lowest_index_on_tie() {
        assert_eq!(argmax(&[1.0f32, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0f32, 2.0, 2.0]), 1);
    }
}
