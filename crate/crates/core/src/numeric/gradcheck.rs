//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate.

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every coordinate `i`.
/// Coordinates are independent, so they are evaluated under `mode`.
pub fn finite_diff_grad<F>(mode: ExecMode, f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step {h}")));
    }
    Ok(par::map_indices(mode, theta.len(), |i| {
        let mut probe = theta.to_vec();
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        (plus - minus) / (2.0 * h)
    }))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm() {
        let g = finite_diff_grad(
            ExecMode::Sequential,
            |t| t.iter().map(|v| v * v).sum(),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(ExecMode::Parallel, |_| 4.2, &[1.0, -3.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_grad(ExecMode::Sequential, |_| 0.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
