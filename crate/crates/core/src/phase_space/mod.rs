//! Grids, distribution fields, weighted Sobolev norms, mollifiers, the norm
//! cutoff and the initial-data regularizers.

mod cutoff;
mod field;
mod grid;
mod mollifier;
mod regularize;
pub mod snapshot;

pub use cutoff::{cutoff_theta, theta, theta_prime, CutoffSpec};
pub use field::{
    density, density_bound_constant, multi_indices, spatial_l2, weighted_dot, weighted_sobolev_norm,
    weighted_sq, DistributionField, Spectrum, WeightedNormSpec,
};
pub(crate) use field::weighted_sobolev_norm_sq_unchecked;
pub use grid::GridSpec;
pub use mollifier::{bessel_j0, bump, bump_transform, mollify, XFilter};
pub use regularize::{regularize_initial, Regularized};

/// Maxwellian `(2 pi)^{-d/2} exp(-|v|^2 / 2)`.
pub fn maxwellian(v: &[f64]) -> f64 {
    let s: f64 = v.iter().map(|c| c * c).sum();
    (-0.5 * s).exp() / std::f64::consts::TAU.powf(0.5 * v.len() as f64)
}
