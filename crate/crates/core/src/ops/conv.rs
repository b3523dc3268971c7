//! 2D and 3D convolutions with zero padding.
//!
//! The 3D path is the hot loop of the whole network (it runs over the full
//! volume every step), so its inner loops are written as shifted-row
//! multiply-accumulates over the contiguous width axis.

use alloc::format;

use crate::math::Real;
use crate::tensor::{Tensor, TensorError};

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// x [ci,h,w] * w [co,ci,kh,kw] + b [co] -> [co,ho,wo].
pub fn conv2d<E: Real>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>, TensorError> {
    x.expect_rank(3, "conv2d")?;
    w.expect_rank(4, "conv2d")?;
    let (ci, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != wci {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    bias.expect_shape(&[co], "conv2d")?;
    let (ho, wo) = match (out_extent(h, kh, stride, pad), out_extent(wid, kw, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} too large for input {h}x{wid} with pad {pad}"),
            })
        }
    };

    let mut out = Tensor::zeros(&[co, ho, wo]);
    let xv = x.data();
    let wv = w.data();
    let bv = bias.data();
    let ov = out.data_mut();
    for c_out in 0..co {
        let obase = c_out * ho * wo;
        for v in ov[obase..obase + ho * wo].iter_mut() {
            *v = bv[c_out];
        }
        for c_in in 0..ci {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wgt = wv[((c_out * ci + c_in) * kh + ki) * kw + kj];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = (c_in * h + ih as usize) * wid;
                        let orow = obase + oh * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= wid as isize {
                                continue;
                            }
                            ov[orow + ow] += wgt * xv[xrow + iw as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns (dx, dw, dbias).
pub fn conv2d_backward<E: Real>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (ci, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (upstream.shape()[1], upstream.shape()[2]);
    let xv = x.data();
    let wv = w.data();
    let g = upstream.data();

    let mut dbias = Tensor::zeros(&[co]);
    {
        let dv = dbias.data_mut();
        for c_out in 0..co {
            let mut acc = E::ZERO;
            for v in &g[c_out * ho * wo..(c_out + 1) * ho * wo] {
                acc += *v;
            }
            dv[c_out] = acc;
        }
    }

    let mut dw = Tensor::zeros(w.shape());
    let mut dx = Tensor::zeros(x.shape());
    {
        let dwv = dw.data_mut();
        for c_out in 0..co {
            for c_in in 0..ci {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let mut acc = E::ZERO;
                        for oh in 0..ho {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = (c_in * h + ih as usize) * wid;
                            let grow = (c_out * ho + oh) * wo;
                            for ow in 0..wo {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= wid as isize {
                                    continue;
                                }
                                acc += g[grow + ow] * xv[xrow + iw as usize];
                            }
                        }
                        dwv[((c_out * ci + c_in) * kh + ki) * kw + kj] = acc;
                    }
                }
            }
        }
    }
    {
        let dxv = dx.data_mut();
        for c_out in 0..co {
            for c_in in 0..ci {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wgt = wv[((c_out * ci + c_in) * kh + ki) * kw + kj];
                        for oh in 0..ho {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = (c_in * h + ih as usize) * wid;
                            let grow = (c_out * ho + oh) * wo;
                            for ow in 0..wo {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= wid as isize {
                                    continue;
                                }
                                dxv[xrow + iw as usize] += wgt * g[grow + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, dbias)
}

/// x [ci,d,h,w] * w [co,ci,kd,kh,kw] + b [co] -> [co,do,ho,wo]. Stride 1 runs
/// a fast contiguous-row path; other strides fall back to plain loops.
pub fn conv3d<E: Real>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>, TensorError> {
    x.expect_rank(4, "conv3d")?;
    w.expect_rank(5, "conv3d")?;
    let (ci, d, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci, kd, kh, kw) = (
        w.shape()[0],
        w.shape()[1],
        w.shape()[2],
        w.shape()[3],
        w.shape()[4],
    );
    if ci != wci {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    bias.expect_shape(&[co], "conv3d")?;
    let dims = (
        out_extent(d, kd, stride, pad),
        out_extent(h, kh, stride, pad),
        out_extent(wid, kw, stride, pad),
    );
    let (dd, ho, wo) = match dims {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: format!(
                    "kernel {kd}x{kh}x{kw} too large for input {d}x{h}x{wid} with pad {pad}"
                ),
            })
        }
    };

    let mut out = Tensor::zeros(&[co, dd, ho, wo]);
    let xv = x.data();
    let wv = w.data();
    let bv = bias.data();
    let ov = out.data_mut();

    if stride == 1 {
        for c_out in 0..co {
            let obase = c_out * dd * ho * wo;
            for v in ov[obase..obase + dd * ho * wo].iter_mut() {
                *v = bv[c_out];
            }
            for c_in in 0..ci {
                for ki in 0..kd {
                    for kj in 0..kh {
                        for kk in 0..kw {
                            let wgt =
                                wv[(((c_out * ci + c_in) * kd + ki) * kh + kj) * kw + kk];
                            let shift = kk as isize - pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = wo.min((wid as isize - shift).max(0) as usize);
                            if lo >= hi {
                                continue;
                            }
                            for od in 0..dd {
                                let id = od as isize + ki as isize - pad as isize;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                for oh in 0..ho {
                                    let ih = oh as isize + kj as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let xrow =
                                        ((c_in * d + id as usize) * h + ih as usize) * wid;
                                    let orow = obase + (od * ho + oh) * wo;
                                    let start = (xrow as isize + shift + lo as isize) as usize;
                                    let src = &xv[start..start + (hi - lo)];
                                    let dst = &mut ov[orow + lo..orow + hi];
                                    for (o, s) in dst.iter_mut().zip(src.iter()) {
                                        *o += wgt * *s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        return Ok(out);
    }

    for c_out in 0..co {
        for od in 0..dd {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bv[c_out];
                    for c_in in 0..ci {
                        for ki in 0..kd {
                            let id = (od * stride + ki) as isize - pad as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for kj in 0..kh {
                                let ih = (oh * stride + kj) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kk in 0..kw {
                                    let iw = (ow * stride + kk) as isize - pad as isize;
                                    if iw < 0 || iw >= wid as isize {
                                        continue;
                                    }
                                    acc += wv
                                        [(((c_out * ci + c_in) * kd + ki) * kh + kj) * kw + kk]
                                        * xv[((c_in * d + id as usize) * h + ih as usize) * wid
                                            + iw as usize];
                                }
                            }
                        }
                    }
                    ov[((c_out * dd + od) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Returns (dx, dw, dbias). Only stride 1 is used by the network, but the
/// general case is handled for completeness.
pub fn conv3d_backward<E: Real>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (ci, d, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let (dd, ho, wo) = (upstream.shape()[1], upstream.shape()[2], upstream.shape()[3]);
    let xv = x.data();
    let wv = w.data();
    let g = upstream.data();

    let mut dbias = Tensor::zeros(&[co]);
    {
        let dv = dbias.data_mut();
        for c_out in 0..co {
            let mut acc = E::ZERO;
            for v in &g[c_out * dd * ho * wo..(c_out + 1) * dd * ho * wo] {
                acc += *v;
            }
            dv[c_out] = acc;
        }
    }

    let mut dw = Tensor::zeros(w.shape());
    let mut dx = Tensor::zeros(x.shape());

    if stride == 1 {
        let dwv = dw.data_mut();
        let dxv = dx.data_mut();
        for c_out in 0..co {
            let gbase = c_out * dd * ho * wo;
            for c_in in 0..ci {
                for ki in 0..kd {
                    for kj in 0..kh {
                        for kk in 0..kw {
                            let widx = (((c_out * ci + c_in) * kd + ki) * kh + kj) * kw + kk;
                            let wgt = wv[widx];
                            let shift = kk as isize - pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = wo.min((wid as isize - shift).max(0) as usize);
                            if lo >= hi {
                                continue;
                            }
                            let mut wacc = E::ZERO;
                            for od in 0..dd {
                                let id = od as isize + ki as isize - pad as isize;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                for oh in 0..ho {
                                    let ih = oh as isize + kj as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let xrow = ((c_in * d + id as usize) * h + ih as usize) * wid;
                                    let start = (xrow as isize + shift + lo as isize) as usize;
                                    let grow = gbase + (od * ho + oh) * wo;
                                    let src = &xv[start..start + (hi - lo)];
                                    let grad = &g[grow + lo..grow + hi];
                                    let dst = &mut dxv[start..start + (hi - lo)];
                                    for ((s, gg), dxe) in
                                        src.iter().zip(grad.iter()).zip(dst.iter_mut())
                                    {
                                        wacc += *gg * *s;
                                        *dxe += wgt * *gg;
                                    }
                                }
                            }
                            dwv[widx] += wacc;
                        }
                    }
                }
            }
        }
        return (dx, dw, dbias);
    }

    let dwv = dw.data_mut();
    let dxv = dx.data_mut();
    for c_out in 0..co {
        for od in 0..dd {
            for oh in 0..ho {
                for ow in 0..wo {
                    let gg = g[((c_out * dd + od) * ho + oh) * wo + ow];
                    for c_in in 0..ci {
                        for ki in 0..kd {
                            let id = (od * stride + ki) as isize - pad as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for kj in 0..kh {
                                let ih = (oh * stride + kj) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kk in 0..kw {
                                    let iw = (ow * stride + kk) as isize - pad as isize;
                                    if iw < 0 || iw >= wid as isize {
                                        continue;
                                    }
                                    let widx =
                                        (((c_out * ci + c_in) * kd + ki) * kh + kj) * kw + kk;
                                    let xidx = ((c_in * d + id as usize) * h + ih as usize)
                                        * wid
                                        + iw as usize;
                                    dwv[widx] += gg * xv[xidx];
                                    dxv[xidx] += gg * wv[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, dbias)
}
