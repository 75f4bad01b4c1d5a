use nalgebra::DVector;

use crate::error::{check_dim, DcsError, Result};

/// Mean squared error; non-finite estimates count as infinitely wrong.
pub fn mse(x_hat: &DVector<f64>, x0: &DVector<f64>) -> Result<f64> {
    check_dim("mse", x0.len(), x_hat.len())?;
    let m = (x_hat - x0).norm_squared() / x0.len() as f64;
    Ok(if m.is_nan() { f64::INFINITY } else { m })
}

/// `10 log10(peak^2 / mse)`; an exact reconstruction gives `+inf`.
pub fn psnr(x_hat: &DVector<f64>, x0: &DVector<f64>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(DcsError::Argument(format!("psnr peak must be positive, got {peak}")));
    }
    let m = mse(x_hat, x0)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    })
}
