use super::generator::{Generator, LatentCode};
use crate::error::{AirError, Result};

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AirError::RangeError {
            name: "alpha",
            value: alpha,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

/// `(1 - alpha) * w_a + alpha * w_b`.
pub fn interpolate_latents(w_a: &LatentCode, w_b: &LatentCode, alpha: f64) -> Result<LatentCode> {
    check_alpha(alpha)?;
    if w_a.dim() != w_b.dim() {
        return Err(AirError::DimMismatch {
            expected: w_a.dim(),
            got: w_b.dim(),
        });
    }
    Ok(LatentCode(
        w_a.0
            .iter()
            .zip(&w_b.0)
            .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
            .collect(),
    ))
}

/// A copy of `a` whose parameters are `(1 - alpha) * theta_a + alpha * theta_b`.
pub fn interpolate_weights(a: &dyn Generator, b: &dyn Generator, alpha: f64) -> Result<Box<dyn Generator>> {
    check_alpha(alpha)?;
    let (pa, pb) = (a.parameters(), b.parameters());
    if pa.len() != pb.len() {
        return Err(AirError::ShapeMismatch(pa.len(), pb.len()));
    }
    let mixed: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
    let mut out = a.boxed_clone();
    out.set_parameters(&mixed)?;
    Ok(out)
}
