//! Finite-difference gradient checking.
//!
//! Every hand-written backward in this crate is validated here: the output is
//! contracted against a fixed random projection so the objective is scalar,
//! the analytic gradient comes from the operator's own backward run with that
//! projection as upstream, and the numeric gradient is a central difference
//! of the objective. Probes run in `f64`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Checks one differentiable function against central differences.
///
/// `forward` maps the probe inputs to an output tensor; `backward` maps
/// (inputs, upstream) to one gradient tensor per input, in input order.
/// Returns the worst relative error |analytic - numeric| / max(1, |numeric|)
/// over every element of every input.
pub fn check_fn<F, B>(
    name: &str,
    inputs: &[Tensor<f64>],
    forward: F,
    backward: B,
    step: f64,
    tol: f64,
) -> GradReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
{
    let total: usize = inputs.iter().map(|t| t.len()).sum();
    assert!(total <= 10_000, "gradcheck probe too large: {total} elements");

    let out = forward(inputs);
    assert!(out.is_finite(), "gradcheck {name}: non-finite forward output");

    // fixed random projection keeps the objective scalar without masking
    // sign errors the way a plain sum can
    let mut rng = Rng::derive(hash_name(name), 0x9d);
    let proj = Tensor::<f64>::from_fn(out.shape(), |_| {
        let m = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        m * rng.range(0.5, 1.5)
    });

    let analytic = backward(inputs, &proj);
    assert_eq!(
        analytic.len(),
        inputs.len(),
        "gradcheck {name}: backward returned {} gradients for {} inputs",
        analytic.len(),
        inputs.len()
    );

    let objective = |probe: &[Tensor<f64>]| -> f64 {
        let y = forward(probe);
        y.data()
            .iter()
            .zip(proj.data().iter())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0_f64;
    for ti in 0..inputs.len() {
        for e in 0..inputs[ti].len() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + step;
            let plus = objective(&work);
            work[ti].data_mut()[e] = orig - step;
            let minus = objective(&work);
            work[ti].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[e];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }

    GradReport {
        name: String::from(name),
        max_rel_err: max_rel,
        tol,
    }
}

/// Random tensor with entries away from a kink set: values are drawn from
/// +-[lo, hi] and re-drawn while within `margin` of any `avoid` point.
pub fn probe_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64, avoid: &[f64], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let v = sign * rng.range(lo, hi);
        if avoid.iter().all(|a| (v - a).abs() > margin) {
            return v;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use alloc::vec;

    #[test]
    fn linear_function_checks_exactly() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let rep = check_fn(
            "three-x",
            &[x],
            |ins| {
                let mut t = ins[0].clone();
                t.scale(3.0);
                t
            },
            |ins, up| {
                let mut g = up.clone();
                g.scale(3.0);
                let _ = ins;
                vec![g]
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        assert!(rep.pass(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn deliberately_wrong_backward_fails() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let rep = check_fn(
            "broken-backward",
            &[x],
            |ins| {
                let mut t = ins[0].clone();
                t.scale(3.0);
                t
            },
            |_, up| {
                let mut g = up.clone();
                g.scale(2.0); // wrong on purpose
                vec![g]
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        assert!(!rep.pass());
    }

    #[test]
    fn relu_away_from_zero_is_exact() {
        let mut rng = Rng::new(5);
        let x = probe_tensor(&mut rng, &[16], 0.1, 2.0, &[0.0], 0.05);
        let rep = check_fn(
            "relu-probe",
            &[x],
            |ins| ops::relu(&ins[0]),
            |ins, up| vec![ops::relu_backward(&ins[0], up)],
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        assert!(rep.pass());
        assert!(rep.max_rel_err < 1e-9, "piecewise linear should be exact");
    }
}
