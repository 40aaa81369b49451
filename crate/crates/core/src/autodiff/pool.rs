use crate::autodiff::conv::PoolGeometry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max pooling; returns the output and, per output element, the flat input
/// index that won. Padding never wins and ties go to the lowest index.
pub(crate) fn maxpool3d_forward<T: Scalar>(
    x: &Tensor<T>,
    g: &PoolGeometry,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, t, h, w] = x.dims5("maxpool3d")?;
    let [to, ho, wo] = g.output_extents([t, h, w])?;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * to * ho * wo);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * t * h * w;
        for ot in 0..to {
            let t0 = (ot * st) as isize - pt as isize;
            for oh in 0..ho {
                let h0 = (oh * sh) as isize - ph as isize;
                for ow in 0..wo {
                    let w0 = (ow * sw) as isize - pw as isize;
                    let mut best: Option<(T, usize)> = None;
                    for dt in 0..kt as isize {
                        let it = t0 + dt;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for dh in 0..kh as isize {
                            let ih = h0 + dh;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row = base + (it as usize * h + ih as usize) * w;
                            for dw in 0..kw as isize {
                                let iw = w0 + dw;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let idx = row + iw as usize;
                                let v = xs[idx];
                                if best.is_none_or(|(b, _)| v > b) {
                                    best = Some((v, idx));
                                }
                            }
                        }
                    }
                    let (v, idx) = best.ok_or_else(|| {
                        Error::InvalidGeometry("pooling window lies entirely in padding".into())
                    })?;
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, to, ho, wo], out)?, argmax))
}

pub(crate) fn maxpool3d_backward<T: Scalar>(
    dy: &Tensor<T>,
    input_shape: &[usize],
    argmax: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&g, &idx) in dy.data().iter().zip(argmax) {
        d[idx] = d[idx] + g;
    }
    dx
}

/// Mean over all `T x H x W` positions of each channel.
pub(crate) fn global_avgpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, t, h, w] = x.dims5("avgpool3d")?;
    let m = t * h * w;
    let inv = T::from_f64_lossy(1.0 / m as f64);
    let out = x
        .data()
        .chunks(m)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    debug_assert_eq!(n * c * m, x.numel());
    Tensor::new(vec![n, c, 1, 1, 1], out)
}

pub(crate) fn global_avgpool_backward<T: Scalar>(
    dy: &Tensor<T>,
    input_shape: &[usize],
) -> Tensor<T> {
    let m: usize = input_shape[2..].iter().product();
    let inv = T::from_f64_lossy(1.0 / m as f64);
    let mut data = Vec::with_capacity(dy.numel() * m);
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, m));
    }
    Tensor::new(input_shape.to_vec(), data).expect("avgpool grad shape")
}
