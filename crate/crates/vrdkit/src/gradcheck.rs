//! Central finite-difference verification utilities.
//!
//! These helpers evaluate a scalar loss under elementwise perturbations of
//! one parameter tensor and compare the numeric gradient against an analytic
//! one. They only ever call the supplied loss closure, so they stay
//! independent of any backward-pass code they are used to check.

use nalgebra::{DMatrix, DVector};

/// Outcome of checking one tensor.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// ‖analytic − numeric‖ / max(1e-8, ‖analytic‖ + ‖numeric‖).
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub max_abs_diff: f64,
}

fn report(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut max_abs = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
        max_abs = max_abs.max((a - n).abs());
    }
    let analytic_norm = a2.sqrt();
    let numeric_norm = n2.sqrt();
    GradCheckReport {
        rel_err: diff2.sqrt() / (analytic_norm + numeric_norm).max(1e-8),
        analytic_norm,
        numeric_norm,
        max_abs_diff: max_abs,
    }
}

fn step(value: f64) -> f64 {
    1e-5 * value.abs().max(1.0)
}

/// Central differences over every element of a matrix parameter.
pub fn check_matrix_grad<M: Clone>(
    model: &M,
    loss: impl Fn(&M) -> f64,
    read: impl Fn(&M) -> DMatrix<f64>,
    write: impl Fn(&mut M, DMatrix<f64>),
    analytic: &DMatrix<f64>,
) -> GradCheckReport {
    let base = read(model);
    assert_eq!((base.nrows(), base.ncols()), (analytic.nrows(), analytic.ncols()));
    let mut numeric = DMatrix::zeros(base.nrows(), base.ncols());
    for i in 0..base.nrows() {
        for j in 0..base.ncols() {
            let h = step(base[(i, j)]);
            let mut plus = model.clone();
            let mut m = base.clone();
            m[(i, j)] += h;
            write(&mut plus, m);
            let mut minus = model.clone();
            let mut m = base.clone();
            m[(i, j)] -= h;
            write(&mut minus, m);
            numeric[(i, j)] = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
    }
    report(analytic.as_slice(), numeric.as_slice())
}

/// Central differences over every element of a vector parameter.
pub fn check_vector_grad<M: Clone>(
    model: &M,
    loss: impl Fn(&M) -> f64,
    read: impl Fn(&M) -> DVector<f64>,
    write: impl Fn(&mut M, DVector<f64>),
    analytic: &DVector<f64>,
) -> GradCheckReport {
    let base = read(model);
    assert_eq!(base.len(), analytic.len());
    let mut numeric = DVector::zeros(base.len());
    for i in 0..base.len() {
        let h = step(base[i]);
        let mut plus = model.clone();
        let mut v = base.clone();
        v[i] += h;
        write(&mut plus, v);
        let mut minus = model.clone();
        let mut v = base.clone();
        v[i] -= h;
        write(&mut minus, v);
        numeric[i] = (loss(&plus) - loss(&minus)) / (2.0 * h);
    }
    report(analytic.as_slice(), numeric.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_gradient_checks_out() {
        // loss(w) = Σ w_ij², gradient 2w
        let w = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let analytic = 2.0 * &w;
        let r = check_matrix_grad(
            &w,
            |m: &DMatrix<f64>| m.iter().map(|v| v * v).sum(),
            |m| m.clone(),
            |m, new| *m = new,
            &analytic,
        );
        assert!(r.rel_err < 1e-8, "rel err {}", r.rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let w = DVector::from_vec(vec![1.0, 2.0]);
        let wrong = DVector::from_vec(vec![1.0, 1.0]);
        let r = check_vector_grad(
            &w,
            |v: &DVector<f64>| v.iter().map(|x| x * x).sum(),
            |v| v.clone(),
            |v, new| *v = new,
            &wrong,
        );
        assert!(r.rel_err > 1e-2);
    }
}
