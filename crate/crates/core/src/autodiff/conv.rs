//! 3D cross-correlation via chunked vol2col + GEMM.
//!
//! The unrolled column buffer is built for a band of output rows at a time
//! so that canonical-size clips never materialise the full `K x P` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::scalar::{gemm_view, MatRef, Scalar};
use crate::tensor::Tensor;

/// Upper bound on elements in one column buffer.
const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn cubic(in_channels: usize, out_channels: usize, k: usize, s: usize, p: usize) -> Self {
        Self::new(in_channels, out_channels, [k; 3], [s; 3], [p; 3])
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kt, kh, kw]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// Output `(T', H', W')` for an input `(T, H, W)`.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidGeometry("channel counts must be positive".into()));
        }
        output_extents(input, self.kernel, self.stride, self.padding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl PoolGeometry {
    pub fn cubic(k: usize, s: usize, p: usize) -> Self {
        PoolGeometry {
            kernel: [k; 3],
            stride: [s; 3],
            padding: [p; 3],
        }
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        for axis in 0..3 {
            if 2 * self.padding[axis] > self.kernel[axis] {
                return Err(Error::InvalidGeometry(format!(
                    "pool padding {} exceeds half of kernel {}",
                    self.padding[axis], self.kernel[axis]
                )));
            }
        }
        output_extents(input, self.kernel, self.stride, self.padding)
    }
}

/// `floor((in + 2 pad - kernel) / stride) + 1` on each axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidGeometry(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    if input == 0 || input + 2 * pad < kernel {
        return Err(Error::InvalidGeometry(format!(
            "input extent {input} with padding {pad} is smaller than kernel {kernel}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

pub fn output_extents(
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for axis in 0..3 {
        out[axis] = output_extent(input[axis], kernel[axis], stride[axis], padding[axis])?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Plan {
    batch: usize,
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    out_channels: usize,
}

impl Plan {
    fn new(x: &[usize], w: &[usize], g: &ConvGeometry) -> Result<Plan> {
        let [n, c, t, h, wd] = match *x {
            [n, c, t, h, w] => [n, c, t, h, w],
            _ => return Err(Error::InvalidGeometry(format!("conv3d input must be 5-d, got {x:?}"))),
        };
        if c != g.in_channels {
            return Err(Error::InvalidGeometry(format!(
                "input has {c} channels, geometry expects {}",
                g.in_channels
            )));
        }
        if w != g.weight_shape() {
            return Err(Error::InvalidGeometry(format!(
                "weight shape {w:?} does not match geometry {:?}",
                g.weight_shape()
            )));
        }
        let output = g.output_extents([t, h, wd])?;
        Ok(Plan {
            batch: n,
            channels: c,
            input: [t, h, wd],
            output,
            kernel: g.kernel,
            stride: g.stride,
            padding: g.padding,
            out_channels: g.out_channels,
        })
    }

    fn k(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    fn out_rows(&self) -> usize {
        self.output[0] * self.output[1]
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.k() * self.output[2]).max(1)).max(1)
    }

    /// Row bands `[r0, r1)` over the flattened `(t', h')` output rows.
    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = self.out_rows();
        let step = self.rows_per_chunk();
        (0..rows)
            .step_by(step)
            .map(move |r0| (r0, (r0 + step).min(rows)))
    }

    /// Valid `ow` range for kernel tap `kw` (positions outside read padding).
    fn w_range(&self, kw: usize) -> (usize, usize) {
        let wo = self.output[2];
        let sw = self.stride[2];
        let pw = self.padding[2];
        let width = self.input[2];
        let lo = if pw > kw { (pw - kw).div_ceil(sw) } else { 0 };
        let hi = if width + pw > kw {
            (width + pw - kw).div_ceil(sw).min(wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Fill `col` (`K x (rows * W')`, row-major) for output rows `[r0, r1)`.
fn vol2col<T: Scalar>(p: &Plan, x: &[T], r0: usize, r1: usize, col: &mut [T]) {
    let [kt, kh, kw] = p.kernel;
    let [t_in, h_in, w_in] = p.input;
    let [_, ho, wo] = p.output;
    let [st, sh, sw] = p.stride;
    let [pt, ph, _] = p.padding;
    let pc = (r1 - r0) * wo;
    let mut row = 0;
    for c in 0..p.channels {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    let (lo, hi) = p.w_range(dw);
                    for (band, r) in (r0..r1).enumerate() {
                        let out = &mut dst[band * wo..(band + 1) * wo];
                        let (ot, oh) = (r / ho, r % ho);
                        let it = (ot * st + dt) as isize - pt as isize;
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if it < 0 || ih < 0 || it as usize >= t_in || ih as usize >= h_in {
                            out.fill(T::zero());
                            continue;
                        }
                        let base = ((c * t_in + it as usize) * h_in + ih as usize) * w_in;
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let pw = p.padding[2];
                        for (ow, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                            *o = x[base + ow * sw + dw - pw];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-add `col` back into the input volume `dx`.
fn col2vol<T: Scalar>(p: &Plan, col: &[T], r0: usize, r1: usize, dx: &mut [T]) {
    let [kt, kh, kw] = p.kernel;
    let [t_in, h_in, w_in] = p.input;
    let [_, ho, wo] = p.output;
    let [st, sh, sw] = p.stride;
    let [pt, ph, pw] = p.padding;
    let pc = (r1 - r0) * wo;
    let mut row = 0;
    for c in 0..p.channels {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * pc..(row + 1) * pc];
                    let (lo, hi) = p.w_range(dw);
                    for (band, r) in (r0..r1).enumerate() {
                        let (ot, oh) = (r / ho, r % ho);
                        let it = (ot * st + dt) as isize - pt as isize;
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if it < 0 || ih < 0 || it as usize >= t_in || ih as usize >= h_in {
                            continue;
                        }
                        let base = ((c * t_in + it as usize) * h_in + ih as usize) * w_in;
                        let s = &src[band * wo..(band + 1) * wo];
                        for (ow, &v) in s.iter().enumerate().take(hi).skip(lo) {
                            let idx = base + ow * sw + dw - pw;
                            dx[idx] = dx[idx] + v;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let p = Plan::new(x.shape(), w.shape(), g)?;
    let (k, positions, vol) = (p.k(), p.out_positions(), p.in_volume());
    let o = p.out_channels;
    let [to, ho, wo] = p.output;
    let mut out = vec![T::zero(); p.batch * o * positions];
    let wmat = MatRef::row_major(w.data(), o, k);
    exec::for_each_chunk(&mut out, o * positions, |n, out_n| {
        let xs = &x.data()[n * vol..(n + 1) * vol];
        let mut col = vec![T::zero(); k * p.rows_per_chunk().min(p.out_rows()) * wo];
        for (r0, r1) in p.bands() {
            let pc = (r1 - r0) * wo;
            vol2col(&p, xs, r0, r1, &mut col[..k * pc]);
            let cm = MatRef::row_major(&col[..k * pc], k, pc);
            gemm_view(wmat, cm, T::zero(), &mut out_n[r0 * wo..], positions);
        }
    });
    Tensor::new(vec![p.batch, o, to, ho, wo], out)
}

/// Gradients of a conv3d with respect to its input and/or weight.
pub(crate) fn conv3d_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeometry,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let p = Plan::new(x.shape(), w.shape(), g)?;
    let (k, positions, vol) = (p.k(), p.out_positions(), p.in_volume());
    let o = p.out_channels;
    let wo = p.output[2];
    let wmat_t = MatRef::row_major(w.data(), o, k).t();

    let per_sample = exec::map_indices(p.batch, |n| {
        let xs = &x.data()[n * vol..(n + 1) * vol];
        let dys = &dy.data()[n * o * positions..(n + 1) * o * positions];
        let cap = k * p.rows_per_chunk().min(p.out_rows()) * wo;
        let mut col = vec![T::zero(); cap];
        let mut dx = if need_input { vec![T::zero(); vol] } else { Vec::new() };
        let mut dw = if need_weight { vec![T::zero(); o * k] } else { Vec::new() };
        let mut first = true;
        for (r0, r1) in p.bands() {
            let pc = (r1 - r0) * wo;
            let dy_band = MatRef {
                data: &dys[r0 * wo..],
                rows: o,
                cols: pc,
                row_stride: positions,
                col_stride: 1,
            };
            if need_weight {
                vol2col(&p, xs, r0, r1, &mut col[..k * pc]);
                let ct = MatRef::row_major(&col[..k * pc], k, pc).t();
                let beta = if first { T::zero() } else { T::one() };
                gemm_view(dy_band, ct, beta, &mut dw, k);
                first = false;
            }
            if need_input {
                gemm_view(wmat_t, dy_band, T::zero(), &mut col[..k * pc], pc);
                col2vol(&p, &col[..k * pc], r0, r1, &mut dx);
            }
        }
        (dx, dw)
    });

    let mut dx_all = need_input.then(|| Vec::with_capacity(p.batch * vol));
    let mut dw_sum: Option<Vec<T>> = None;
    for (dx, dw) in per_sample {
        if let Some(all) = dx_all.as_mut() {
            all.extend_from_slice(&dx);
        }
        if need_weight {
            match dw_sum.as_mut() {
                None => dw_sum = Some(dw),
                Some(acc) => acc.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b),
            }
        }
    }
    let dx = dx_all
        .map(|d| Tensor::new(x.shape().to_vec(), d))
        .transpose()?;
    let dw = if need_weight {
        let d = dw_sum.unwrap_or_else(|| vec![T::zero(); o * k]);
        Some(Tensor::new(w.shape().to_vec(), d)?)
    } else {
        None
    };
    Ok((dx, dw))
}
