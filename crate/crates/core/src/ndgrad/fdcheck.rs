//! Central finite-difference oracles for gradient verification.
//!
//! These rebuild the function under test from plain values on every
//! evaluation, so they are independent of the tape machinery they check.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise relative error between two gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

/// Checks an analytic gradient against central differences; returns the
/// worst relative error or an error message naming the offending index.
pub fn check_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
    floor: f64,
) -> Result<f64, String> {
    let numeric = central_gradient(f, x, h);
    let mut worst = 0.0f64;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(a, n, floor);
        if e > worst {
            worst = e;
        }
        if e > tol {
            return Err(format!(
                "gradient mismatch at index {}: analytic {:.9e}, numeric {:.9e}, rel err {:.3e} > {:.1e}",
                i, a, n, e, tol
            ));
        }
    }
    Ok(worst)
}
