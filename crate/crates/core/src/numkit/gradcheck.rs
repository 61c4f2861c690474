use super::Matrix;

/// Central-difference gradient check.
///
/// Returns the largest per-coordinate relative error between `analytic` and
/// `(f(x + eps·e) − f(x − eps·e)) / 2eps`, using the rounded step, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut f: F, x: &Matrix, analytic: &Matrix, eps: f64) -> f64
where
    F: FnMut(&Matrix) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(x.shape(), analytic.shape(), "gradient shape mismatch");
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for idx in 0..x.as_slice().len() {
        let orig = x.as_slice()[idx];
        // Divide by the step actually representable at `orig`.
        let hi = orig + eps;
        let lo = orig - eps;
        probe.as_mut_slice()[idx] = hi;
        let plus = f(&probe);
        probe.as_mut_slice()[idx] = lo;
        let minus = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        let numeric = (plus - minus) / (hi - lo);
        let a = analytic.as_slice()[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::from_rows(&[[0.3, -1.2, 2.0], [0.7, 1.1, -0.4]]).unwrap()
    }

    #[test]
    fn half_squared_norm() {
        let x = sample();
        let err = grad_check(|m| 0.5 * m.frobenius_sq(), &x, &x, 1e-6);
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn plain_sum() {
        let x = Matrix::from_rows(&[[0.3, -0.2, 0.5], [0.1, -0.4, 0.25]]).unwrap();
        let err = grad_check(|m| m.sum(), &x, &Matrix::filled(2, 3, 1.0), 1e-6);
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn doubled_gradient_is_caught() {
        let x = sample();
        let err = grad_check(|m| 0.5 * m.frobenius_sq(), &x, &x.scale(2.0), 1e-6);
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }
}
