//! Central-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst coordinate-wise discrepancy found by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point);
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if !v.is_scalar() {
        return Err(Error::Contract(format!("grad_check function returned shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `f` at `point` against central differences
/// on every coordinate. Error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, step, &coords)
}

/// [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, step: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {step}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.param(point);
        let y = f(&mut tape, x)?;
        tape.backward(y)?;
        tape.grad(x).unwrap_or_else(|| Tensor::zeros(point.shape()))
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = point.clone();
    for &i in coords {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = x0 - step;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::Overflow("grad_check finite difference".into()));
        }
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err >= report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-6;

    fn random_point(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn sum_is_exact() {
        // dyadic point and step keep x +- h and the sum exactly representable
        let p = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let r = grad_check(|t, x| t.sum(x), &p, 2f64.powi(-20)).unwrap();
        assert!(r.max_rel_error <= 1e-12, "{r:?}");
        let p = random_point(&[3, 4], 1);
        let r = grad_check(|t, x| t.sum(x), &p, STEP).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        let p = random_point(&[5], 2);
        let r = grad_check(
            |t, x| {
                let s = t.corrupt_square(x)?;
                t.sum(s)
            },
            &p,
            STEP,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let p = random_point(&[2], 3);
        assert!(grad_check(|t, x| t.sum(x), &p, 0.0).is_err());
    }

    /// Weighted reduction so every output coordinate gets a distinct adjoint.
    fn weighted_sum<'t>(t: &mut Tape<'t>, y: Var, seed: u64) -> Result<Var> {
        let w = random_point(t.shape(y), seed);
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        t.sum(p)
    }

    fn check(name: &str, shape: &[usize], f: impl for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>) {
        for seed in 0..10 {
            let p = random_point(shape, 100 + seed);
            let r = grad_check(&f, &p, STEP).unwrap();
            assert!(r.max_rel_error <= 1e-5, "{name} seed {seed}: {r:?}");
        }
    }

    #[test]
    fn primitives_pass_grad_check() {
        check("matmul", &[3, 4], |t, x| {
            let w = t.constant(random_point(&[4, 2], 7));
            let y = t.matmul(x, w)?;
            weighted_sum(t, y, 8)
        });
        check("matmul_rhs", &[4, 2], |t, x| {
            let a = t.constant(random_point(&[3, 4], 9));
            let y = t.matmul(a, x)?;
            weighted_sum(t, y, 10)
        });
        check("matmul_nt", &[3, 4], |t, x| {
            let y = t.matmul_nt(x, x)?;
            weighted_sum(t, y, 11)
        });
        check("transpose", &[2, 3], |t, x| {
            let y = t.transpose(x)?;
            weighted_sum(t, y, 12)
        });
        check("add_sub_mul_scale", &[2, 3], |t, x| {
            let c = t.constant(random_point(&[2, 3], 13));
            let a = t.add(x, c)?;
            let b = t.sub(a, x)?;
            let m = t.mul(b, x)?;
            let m = t.mul(m, x)?;
            let s = t.scale(m, -0.7)?;
            weighted_sum(t, s, 14)
        });
        check("add_row", &[3], |t, x| {
            let a = t.constant(random_point(&[4, 3], 15));
            let y = t.add_row(a, x)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 16)
        });
        check("reshape_concat_slice", &[2, 3], |t, x| {
            let r = t.reshape(x, &[3, 2])?;
            let r = t.reshape(r, &[2, 3])?;
            let c = t.concat(&[x, r, x], 1)?;
            let s = t.slice(c, 1, 2, 5)?;
            let c0 = t.concat(&[s, s], 0)?;
            weighted_sum(t, c0, 17)
        });
        check("gather", &[4, 3], |t, x| {
            let g = t.gather(x, &[2, 0, 2, 3])?;
            weighted_sum(t, g, 18)
        });
        check("exp_log", &[5], |t, x| {
            let e = t.exp(x)?;
            let l = t.log(e)?;
            let e2 = t.exp(l)?;
            weighted_sum(t, e2, 19)
        });
        check("gelu", &[6], |t, x| {
            let y = t.gelu(x)?;
            weighted_sum(t, y, 20)
        });
        check("log_sigmoid", &[6], |t, x| {
            let y = t.log_sigmoid(x)?;
            weighted_sum(t, y, 21)
        });
        check("softmax_tau", &[3, 4], |t, x| {
            let y = t.softmax_tau(x, 2.3, 1)?;
            weighted_sum(t, y, 22)
        });
        check("softmax_tau_axis0", &[3, 4], |t, x| {
            let y = t.softmax_tau(x, 0.7, 0)?;
            weighted_sum(t, y, 23)
        });
        check("causal_softmax", &[4, 4], |t, x| {
            let y = t.causal_softmax_tau(x, 1.5)?;
            weighted_sum(t, y, 24)
        });
        check("log_softmax", &[3, 5], |t, x| {
            let y = t.log_softmax(x, 1)?;
            weighted_sum(t, y, 25)
        });
        check("pick_mean", &[3, 4], |t, x| {
            let l = t.log_softmax(x, 1)?;
            let p = t.pick(l, &[0, 3, 1])?;
            t.mean(p)
        });
        check("layer_norm_x", &[3, 5], |t, x| {
            let g = t.constant(random_point(&[5], 26));
            let b = t.constant(random_point(&[5], 27));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            weighted_sum(t, y, 28)
        });
        check("layer_norm_gain_bias", &[5], |t, x| {
            let a = t.constant(random_point(&[3, 5], 29));
            let y = t.layer_norm(a, x, x, 1e-5)?;
            weighted_sum(t, y, 30)
        });
    }
}
