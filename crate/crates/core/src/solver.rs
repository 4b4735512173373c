//! Small dense Gauss–Newton solver for the multi-parameter fits.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Outcome {
    pub x: DVector<f64>,
    /// sum of squared residuals at `x`
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub jacobian: DMatrix<f64>,
}

/// Minimize `‖r(x)‖²` where `model` returns `(r, ∂r/∂x)`.
///
/// Steps come from the pseudo-inverse of the normal matrix and are halved
/// until the cost strictly decreases.
pub(crate) fn gauss_newton<F>(x0: DVector<f64>, model: F, max_iterations: usize) -> Outcome
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    const GRADIENT_TOLERANCE: f64 = 1e-10;
    const MAX_HALVINGS: usize = 30;
    let mut x = x0;
    let (mut r, mut j) = model(&x);
    let mut cost = r.norm_squared();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        let g = j.transpose() * &r;
        if g.norm() < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        let normal = j.transpose() * &j;
        let svd = normal.svd(true, true);
        let cutoff = 1e-14 * svd.singular_values.max();
        let Ok(step) = svd.solve(&(-g.clone()), cutoff) else { break };
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &x + &step * scale;
            let (rc, jc) = model(&cand);
            let cc = rc.norm_squared();
            if cc < cost {
                x = cand;
                r = rc;
                j = jc;
                cost = cc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            converged = g.norm() <= 1e-6 * r.lp_norm(1).max(1.0);
            break;
        }
    }
    if !converged && iterations >= max_iterations {
        converged = (j.transpose() * &r).norm() < GRADIENT_TOLERANCE;
    }
    Outcome {
        x,
        cost,
        iterations,
        converged,
        jacobian: j,
    }
}
