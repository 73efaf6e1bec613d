use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest relative discrepancy between an analytic gradient and central
/// differences of `f` at `point`:
/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-12)`.
///
/// `f` returns the function value and its analytic gradient (same shape as
/// `point`).
pub fn finite_diff_check<F>(mut f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let (v0, analytic) = f(point)?;
    if !v0.is_finite() {
        return Err(Error::NonFinite(format!("function value {v0} at the check point")));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("gradient {:?} vs point {:?}", analytic.shape(), point.shape()),
        ));
    }
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x = point.values()[i];
        probe.values_mut()[i] = x + eps;
        let (fp, _) = f(&probe)?;
        probe.values_mut()[i] = x - eps;
        let (fm, _) = f(&probe)?;
        probe.values_mut()[i] = x;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {i} ± eps")));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.values()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |x| {
                let v = x.values().iter().map(|a| a * a).sum();
                Ok((v, x.map(|a| 2.0 * a)))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::from_f64(&[3], &[0.3, -1.0, 4.0]).unwrap();
        let err = finite_diff_check(|x| Ok((7.0, Tensor::zeros(x.shape()))), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_values_error() {
        let p = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = finite_diff_check(|x| Ok((1.0 / x.values()[0], Tensor::zeros(&[1]))), &p, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(finite_diff_check(|_| Ok((0.0, Tensor::zeros(&[1]))), &p, 0.0).is_err());
    }
}
