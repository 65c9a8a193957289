//! Numeric thresholds shared by the library and its tests.

/// Norm at or below which a vector cannot be normalized.
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Degenerate-norm threshold for L2 normalization.
    pub norm_eps: f64,
    /// Allowed deviation of a normalized vector's norm from 1.
    pub unit_norm: f64,
    /// Allowed deviation of triplet probabilities from summing to 1.
    pub prob_sum: f64,
    /// Allowed asymmetry of the similarity kernel.
    pub symmetry: f64,
    /// Agreement between factored and explicit-matrix computations.
    pub factored: f64,
    /// Relative error bound for finite-difference gradient checks.
    pub grad_rel: f64,
    /// Central finite-difference step.
    pub fd_step: f64,
    /// Allowed deviation from 1 when checking ratios sum to one.
    pub ratio_sum: f64,
}

impl Tolerances {
    pub const DEFAULT: Tolerances = Tolerances {
        norm_eps: DEFAULT_NORM_EPS,
        unit_norm: 1e-6,
        prob_sum: 1e-9,
        symmetry: 1e-12,
        factored: 1e-8,
        grad_rel: 1e-4,
        fd_step: 1e-5,
        ratio_sum: 1e-9,
    };
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::DEFAULT
    }
}
