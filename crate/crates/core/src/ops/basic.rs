//! Pointwise, reduction and matrix operators.

use alloc::format;

use crate::math::Real;
use crate::tensor::{Tensor, TensorError};

pub fn relu<E: Real>(x: &Tensor<E>) -> Tensor<E> {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(E::ZERO))
}

pub fn relu_backward<E: Real>(x: &Tensor<E>, upstream: &Tensor<E>) -> Tensor<E> {
    Tensor::from_fn(x.shape(), |i| {
        if x.data()[i] > E::ZERO {
            upstream.data()[i]
        } else {
            E::ZERO
        }
    })
}

/// Numerically stable softmax along one axis; every lane sums to one.
pub fn softmax_axis<E: Real>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>, TensorError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            op: "softmax-over-axis",
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let lane: usize = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();

    let mut out = Tensor::zeros(shape);
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut m = src[base];
            for l in 1..lane {
                m = m.max(src[base + l * inner]);
            }
            let mut sum = E::ZERO;
            for l in 0..lane {
                let e = (src[base + l * inner] - m).exp();
                dst[base + l * inner] = e;
                sum += e;
            }
            for l in 0..lane {
                dst[base + l * inner] /= sum;
            }
        }
    }
    Ok(out)
}

/// Backward from the softmax output `y`: dx = y * (g - sum(g * y)) per lane.
pub fn softmax_axis_backward<E: Real>(y: &Tensor<E>, axis: usize, upstream: &Tensor<E>) -> Tensor<E> {
    let shape = y.shape();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();

    let mut out = Tensor::zeros(shape);
    let yv = y.data();
    let g = upstream.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut dot = E::ZERO;
            for l in 0..lane {
                dot += g[base + l * inner] * yv[base + l * inner];
            }
            for l in 0..lane {
                let idx = base + l * inner;
                dst[idx] = yv[idx] * (g[idx] - dot);
            }
        }
    }
    out
}

pub fn add<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "elementwise-add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]))
}

pub fn add_backward<E: Real>(upstream: &Tensor<E>) -> (Tensor<E>, Tensor<E>) {
    (upstream.clone(), upstream.clone())
}

pub fn mul<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "elementwise-mul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(Tensor::from_fn(a.shape(), |i| a.data()[i] * b.data()[i]))
}

pub fn mul_backward<E: Real>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    upstream: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let da = Tensor::from_fn(a.shape(), |i| upstream.data()[i] * b.data()[i]);
    let db = Tensor::from_fn(b.shape(), |i| upstream.data()[i] * a.data()[i]);
    (da, db)
}

/// a [m,k] x b [k,n] -> [m,n].
pub fn matmul<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    let av = a.data();
    let bv = b.data();
    let ov = out.data_mut();
    for i in 0..m {
        for l in 0..k {
            let av_il = av[i * k + l];
            let brow = &bv[l * n..(l + 1) * n];
            let orow = &mut ov[i * n..(i + 1) * n];
            for (o, bb) in orow.iter_mut().zip(brow.iter()) {
                *o += av_il * *bb;
            }
        }
    }
    Ok(out)
}

/// Gradients of matmul: da = g b^T, db = a^T g.
pub fn matmul_backward<E: Real>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    upstream: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let av = a.data();
    let bv = b.data();
    let g = upstream.data();

    let mut da = Tensor::zeros(&[m, k]);
    {
        let dv = da.data_mut();
        for i in 0..m {
            for l in 0..k {
                let mut acc = E::ZERO;
                let grow = &g[i * n..(i + 1) * n];
                let brow = &bv[l * n..(l + 1) * n];
                for (gg, bb) in grow.iter().zip(brow.iter()) {
                    acc += *gg * *bb;
                }
                dv[i * k + l] = acc;
            }
        }
    }
    let mut db = Tensor::zeros(&[k, n]);
    {
        let dv = db.data_mut();
        for i in 0..m {
            for l in 0..k {
                let a_il = av[i * k + l];
                let grow = &g[i * n..(i + 1) * n];
                let drow = &mut dv[l * n..(l + 1) * n];
                for (d, gg) in drow.iter_mut().zip(grow.iter()) {
                    *d += a_il * *gg;
                }
            }
        }
    }
    (da, db)
}

/// Fully-connected map over columns: w [o,i] x x [i,n] + bias [o] -> [o,n].
pub fn linear<E: Real>(
    w: &Tensor<E>,
    x: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    let mut y = matmul(w, x)?;
    let (o, n) = (y.shape()[0], y.shape()[1]);
    bias.expect_shape(&[o], "linear")?;
    let bv = bias.data().to_vec();
    let yv = y.data_mut();
    for r in 0..o {
        let b = bv[r];
        for v in yv[r * n..(r + 1) * n].iter_mut() {
            *v += b;
        }
    }
    Ok(y)
}

/// Returns (dw, dx, dbias).
pub fn linear_backward<E: Real>(
    w: &Tensor<E>,
    x: &Tensor<E>,
    upstream: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (dw, dx) = matmul_backward(w, x, upstream);
    let (o, n) = (upstream.shape()[0], upstream.shape()[1]);
    let g = upstream.data();
    let dbias = Tensor::from_fn(&[o], |r| {
        let mut acc = E::ZERO;
        for v in &g[r * n..(r + 1) * n] {
            acc += *v;
        }
        acc
    });
    (dw, dx, dbias)
}

/// Mean over all elements, as a 1-element tensor.
pub fn mean_reduce<E: Real>(x: &Tensor<E>) -> Tensor<E> {
    let n = x.len().max(1);
    let mut acc = E::ZERO;
    for v in x.data() {
        acc += *v;
    }
    Tensor::scalar(acc / E::from_usize(n))
}

pub fn mean_reduce_backward<E: Real>(x: &Tensor<E>, upstream: &Tensor<E>) -> Tensor<E> {
    let n = E::from_usize(x.len().max(1));
    let g = upstream.data()[0] / n;
    Tensor::filled(x.shape(), g)
}

/// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
pub fn smooth_l1<E: Real>(x: &Tensor<E>) -> Tensor<E> {
    let half = E::from_f64(0.5);
    Tensor::from_fn(x.shape(), |i| {
        let v = x.data()[i];
        if v.abs() < E::ONE {
            half * v * v
        } else {
            v.abs() - half
        }
    })
}

pub fn smooth_l1_backward<E: Real>(x: &Tensor<E>, upstream: &Tensor<E>) -> Tensor<E> {
    Tensor::from_fn(x.shape(), |i| {
        let v = x.data()[i];
        let d = if v.abs() < E::ONE {
            v
        } else if v > E::ZERO {
            E::ONE
        } else {
            -E::ONE
        };
        d * upstream.data()[i]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn relu_clamps_negatives_and_zero() {
        let x = Tensor::from_vec(&[3], vec![-1.0_f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::from_vec(&[3], vec![0.0_f64, 0.0, 0.0]).unwrap();
        let y = softmax_axis(&x, 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_lanes_sum_to_one() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0_f64, -4.0, 2.5, 100.0, 100.0, 99.0]).unwrap();
        let y = softmax_axis(&x, 1).unwrap();
        for lane in 0..2 {
            let s: f64 = y.data()[lane * 3..(lane + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_small_example() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0_f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn smooth_l1_matches_piecewise_definition() {
        let x = Tensor::from_vec(&[3], vec![0.5_f64, 3.0, -2.0]).unwrap();
        let y = smooth_l1(&x);
        assert!((y.data()[0] - 0.125).abs() < 1e-12);
        assert!((y.data()[1] - 2.5).abs() < 1e-12);
        assert!((y.data()[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn mean_reduce_and_backward_are_consistent() {
        let x = Tensor::from_vec(&[4], vec![1.0_f64, 2.0, 3.0, 6.0]).unwrap();
        let m = mean_reduce(&x);
        assert!((m.data()[0] - 3.0).abs() < 1e-12);
        let g = mean_reduce_backward(&x, &Tensor::scalar(2.0));
        for v in g.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }
}
