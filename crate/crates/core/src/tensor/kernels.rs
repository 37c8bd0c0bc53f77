//! Raw slice kernels behind the graph ops.
//!
//! Every output element is accumulated by exactly one loop in a fixed order,
//! so results are bit-reproducible run to run.

use super::Scalar;
use crate::error::{Error, Result};

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order, so the loop vectorizes while staying deterministic.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 8;
    let mut acc = [S::zero(); LANES];
    let (a_main, a_tail) = a.split_at(a.len() - a.len() % LANES);
    let (b_main, b_tail) = b.split_at(a_main.len());
    for (x, y) in a_main.chunks_exact(LANES).zip(b_main.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in a_tail.iter().zip(b_tail) {
        total += x * y;
    }
    total
}

/// Geometry of one 2-D convolution, validated up front.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of a sliding window, or an error when the window does not
/// tile the padded input exactly.
pub fn window_output(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let padded = extent + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::config(format!(
            "window {kernel} does not fit padded extent {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "window {kernel} with stride {stride} and padding {padding} does not tile extent {extent}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let out_h = window_output(input[2], kernel[2], stride, padding)?;
        let out_w = window_output(input[3], kernel[3], stride, padding)?;
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Unfolds one image into a `[C·kh·kw × out_h·out_w]` column matrix.
    fn im2col<S: Scalar>(&self, image: &[S], col: &mut [S]) {
        let positions = self.positions();
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut col[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - pad;
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if y < 0 || y >= self.height as isize {
                            dst_row.fill(S::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let x = (ox * self.stride + kj) as isize - pad;
                            *d = if x < 0 || x >= self.width as isize {
                                S::zero()
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back into an image.
    fn col2im<S: Scalar>(&self, col: &[S], image: &mut [S]) {
        let positions = self.positions();
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &col[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - pad;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kj) as isize - pad;
                            if x >= 0 && x < self.width as isize {
                                plane[y as usize * self.width + x as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<S: Scalar>(geo: &ConvGeometry, input: &[S], kernel: &[S]) -> Vec<S> {
    let (k, p) = (geo.patch_len(), geo.positions());
    let out_len = geo.filters * p;
    let mut out = vec![S::zero(); geo.batch * out_len];
    let mut col = vec![S::zero(); k * p];
    for n in 0..geo.batch {
        geo.im2col(&input[n * geo.image_len()..(n + 1) * geo.image_len()], &mut col);
        gemm_nn(
            geo.filters,
            k,
            p,
            kernel,
            &col,
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

/// Returns `(d_input, d_kernel)`; either is skipped when not requested.
pub fn conv2d_backward<S: Scalar>(
    geo: &ConvGeometry,
    input: &[S],
    kernel: &[S],
    grad_out: &[S],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (k, p) = (geo.patch_len(), geo.positions());
    let out_len = geo.filters * p;
    let mut d_input = want_input.then(|| vec![S::zero(); input.len()]);
    let mut d_kernel = want_kernel.then(|| vec![S::zero(); kernel.len()]);
    let mut col = vec![S::zero(); k * p];
    let mut d_col = vec![S::zero(); k * p];
    for n in 0..geo.batch {
        let g = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(dk) = d_kernel.as_mut() {
            geo.im2col(&input[n * geo.image_len()..(n + 1) * geo.image_len()], &mut col);
            gemm_nt(geo.filters, p, k, g, &col, dk);
        }
        if let Some(di) = d_input.as_mut() {
            d_col.fill(S::zero());
            gemm_tn(geo.filters, k, p, kernel, g, &mut d_col);
            geo.col2im(&d_col, &mut di[n * geo.image_len()..(n + 1) * geo.image_len()]);
        }
    }
    (d_input, d_kernel)
}

/// Windowed maximum; returns the output and, per output element, the flat
/// input index it came from (first maximum on ties).
pub fn max_pool_forward<S: Scalar>(
    shape: &[usize],
    input: &[S],
    window: usize,
    stride: usize,
) -> Result<(Vec<usize>, Vec<S>, Vec<usize>)> {
    let (n, c, h, w) = nchw(shape, "max_pool")?;
    let oh = window_output(h, window, stride, 0)?;
    let ow = window_output(w, window, stride, 0)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out, argmax))
}

/// Windowed mean without padding.
pub fn avg_pool_forward<S: Scalar>(
    shape: &[usize],
    input: &[S],
    window: usize,
    stride: usize,
) -> Result<(Vec<usize>, Vec<S>)> {
    let (n, c, h, w) = nchw(shape, "avg_pool")?;
    let oh = window_output(h, window, stride, 0)?;
    let ow = window_output(w, window, stride, 0)?;
    let scale = S::one() / S::from_f64((window * window) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for dy in 0..window {
                    for dx in 0..window {
                        acc += input[base + (oy * stride + dy) * w + ox * stride + dx];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out))
}

pub fn avg_pool_backward<S: Scalar>(
    in_shape: &[usize],
    out_shape: &[usize],
    grad_out: &[S],
    window: usize,
    stride: usize,
) -> Vec<S> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    let scale = S::one() / S::from_f64((window * window) as f64);
    let mut d = vec![S::zero(); planes * h * w];
    for plane in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(plane * oh + oy) * ow + ox] * scale;
                for dy in 0..window {
                    for dx in 0..window {
                        d[plane * h * w + (oy * stride + dy) * w + ox * stride + dx] += g;
                    }
                }
            }
        }
    }
    d
}

pub(crate) fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0; 4],
        }),
    }
}
