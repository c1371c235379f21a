//! Fixtures shared by the benchmarks.

use qap_core::{CoefficientState, PhysicalParams, PolynomialField, PotentialSchedule};

pub fn unit() -> PhysicalParams {
    PhysicalParams::unit(1)
}

/// U = ½x².
pub fn oscillator() -> PotentialSchedule {
    PotentialSchedule::constant(PolynomialField::quadratic_1d(0.0, 0.0, 1.0))
}

/// Displaced packet with s₁ = 0, ρ₁ = 1, ρ₂ = −1.
pub fn coherent() -> CoefficientState {
    CoefficientState::gaussian_1d(0.0, 0.0, 1.0, -1.0)
}

pub fn ground() -> CoefficientState {
    CoefficientState::gaussian_1d(0.0, 0.0, 0.0, -1.0)
}
