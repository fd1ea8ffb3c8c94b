//! Conjugate gradients in a caller-supplied inner product.

use nalgebra::DVector;

use crate::error::{numerical, Result};

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `op(x) = rhs` for an operator that is self-adjoint and positive
/// definite with respect to `inner`. Stops once the residual norm (in the same
/// inner product) falls below `tol * ||rhs||`.
pub fn solve<Op, Ip>(
    op: Op,
    inner: Ip,
    rhs: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome>
where
    Op: Fn(&DVector<f64>) -> DVector<f64>,
    Ip: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    let n = rhs.len();
    let rhs_norm = inner(rhs, rhs).max(0.0).sqrt();
    if rhs_norm == 0.0 {
        return Ok(CgOutcome {
            x: DVector::zeros(n),
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut x = DVector::zeros(n);
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = inner(&r, &r);
    for it in 1..=max_iter {
        let ap = op(&p);
        let pap = inner(&p, &ap);
        if !(pap > 0.0) {
            return Err(numerical(format!(
                "CG breakdown at iteration {it}: curvature {pap:e} is not positive"
            )));
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_new = inner(&r, &r);
        let rel = rr_new.max(0.0).sqrt() / rhs_norm;
        if rel <= tol {
            return Ok(CgOutcome {
                x,
                iterations: it,
                relative_residual: rel,
            });
        }
        p = &r + (rr_new / rr) * &p;
        rr = rr_new;
    }
    Err(numerical(format!(
        "CG did not converge in {max_iter} iterations (relative residual {:e})",
        rr.sqrt() / rhs_norm
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn weighted_cg_solves_self_adjoint_system() {
        // X = W^{-1} S is self-adjoint in <.,.>_W for symmetric S
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let s = DMatrix::from_row_slice(
            4,
            4,
            &[4.0, 1.0, 0.0, 0.0, 1.0, 5.0, 1.0, 0.0, 0.0, 1.0, 6.0, 1.0, 0.0, 0.0, 1.0, 7.0],
        );
        let winv = w.clone().try_inverse().unwrap();
        let x_op = &winv * &s;
        let rhs = DVector::from_vec(vec![1.0, -1.0, 2.0, 0.5]);
        let out = solve(
            |v| &x_op * v,
            |a, b| a.dot(&(&w * b)),
            &rhs,
            1e-12,
            50,
        )
        .unwrap();
        assert!((&x_op * &out.x - &rhs).norm() < 1e-10);
        assert!(out.iterations <= 4 + 1);
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let out = solve(|v| v.clone(), |a, b| a.dot(b), &DVector::zeros(3), 1e-10, 10).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, DVector::zeros(3));
    }

    #[test]
    fn reports_nonconvergence() {
        let d = DVector::from_fn(50, |i, _| 1.0 + i as f64 * 100.0);
        let err = solve(|v| v.component_mul(&d), |a, b| a.dot(b), &DVector::from_element(50, 1.0), 1e-14, 2);
        assert!(matches!(err, Err(crate::Error::NumericalFailure(_))));
    }
}
