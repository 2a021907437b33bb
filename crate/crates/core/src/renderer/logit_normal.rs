//! Sigmoid-transformed Gaussian occupancy: `o = sigmoid(-l s)` with
//! `s ~ N(mu, var)`.

use crate::error::{Error, Result};
use crate::numeric::{logit, normal_cdf, normal_quantile, sigmoid};

pub fn occupancy_from_sdf(s: f64, slope: f64) -> f64 {
    sigmoid(-slope * s)
}

fn check_open_unit(x: f64, name: &str) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::invalid(format!("{name} = {x} is outside (0, 1)")));
    }
    Ok(())
}

pub fn logit_normal_pdf(o: f64, mu: f64, var: f64, slope: f64) -> Result<f64> {
    check_open_unit(o, "occupancy")?;
    if !(var > 0.0) {
        return Err(Error::invalid(format!("variance {var} must be positive")));
    }
    let s = -logit(o) / slope;
    let norm = o * (1.0 - o) * slope * (2.0 * std::f64::consts::PI * var).sqrt();
    Ok((-(s - mu).powi(2) / (2.0 * var)).exp() / norm)
}

pub fn logit_normal_cdf(o: f64, mu: f64, var: f64, slope: f64) -> Result<f64> {
    check_open_unit(o, "occupancy")?;
    if !(var > 0.0) {
        return Err(Error::invalid(format!("variance {var} must be positive")));
    }
    Ok(normal_cdf((mu + logit(o) / slope) / var.sqrt()))
}

/// Inverse CDF. A zero variance collapses to the point occupancy.
pub fn logit_normal_quantile(u: f64, mu: f64, var: f64, slope: f64) -> Result<f64> {
    check_open_unit(u, "quantile level")?;
    if !(var >= 0.0) {
        return Err(Error::invalid(format!("variance {var} is negative")));
    }
    Ok(sigmoid(slope * var.sqrt() * normal_quantile(u) - slope * mu))
}
