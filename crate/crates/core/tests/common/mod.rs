#![allow(dead_code)]

pub mod exprs;
pub mod metrics;
pub mod reference;
pub mod toys;

/// Relative error used by the finite-difference checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
