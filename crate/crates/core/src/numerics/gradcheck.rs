//! Central finite differences, used as an independent oracle for the tape.
//!
//! Everything here evaluates the function forward only, so it shares no code
//! path with the adjoint rules it is used to check.

/// Denominator floor for relative errors; keeps entries whose true gradient
/// is (numerically) zero from dividing round-off noise by zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Gradient of `f` at `x` by central differences with the given step.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn floor_applies_near_zero() {
        assert!(relative_error(1e-9, 0.0) < 1e-4);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
