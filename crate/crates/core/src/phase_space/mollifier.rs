//! Compactly supported bump mollifiers realized through their Fourier transforms.

use std::sync::OnceLock;

use num_complex::Complex64;

use super::field::DistributionField;
use super::grid::GridSpec;
use crate::error::{Error, Result};
use crate::fft;

const QUAD_NODES: usize = 400;

/// Gauss-Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre_unit() -> &'static (Vec<f64>, Vec<f64>) {
    static GL: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GL.get_or_init(|| {
        let n = QUAD_NODES;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes.push(0.5 * (x + 1.0));
            weights.push(0.5 * w);
        }
        (nodes, weights)
    })
}

/// Unnormalized radial bump `exp(-1 / (1 - r^2))` on the unit ball.
pub fn bump(r: f64) -> f64 {
    if r.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r * r)).exp()
    }
}

/// Bessel `J_0` from its integral representation (trapezoid on a periodic integrand).
pub fn bessel_j0(z: f64) -> f64 {
    let m = 32 + z.abs().ceil() as usize;
    let h = std::f64::consts::PI / m as f64;
    // cos(z sin t) is pi-periodic, so the endpoint terms merge into one
    let mut s = 1.0;
    for i in 1..m {
        s += (z * (i as f64 * h).sin()).cos();
    }
    s * h / std::f64::consts::PI
}

fn radial_kernel(d: usize, z: f64) -> f64 {
    match d {
        1 => z.cos(),
        2 => bessel_j0(z),
        _ => {
            if z.abs() < 1e-8 {
                1.0 - z * z / 6.0
            } else {
                z.sin() / z
            }
        }
    }
}

/// Fourier transform of the unit-mass radial bump in `d` dimensions at
/// frequency magnitude `s`; equals 1 at `s = 0`.
pub fn bump_transform(d: usize, s: f64) -> f64 {
    let (nodes, weights) = gauss_legendre_unit();
    let integral = |s: f64| -> f64 {
        nodes
            .iter()
            .zip(weights)
            .map(|(&r, &w)| w * bump(r) * radial_kernel(d, s * r) * r.powi(d as i32 - 1))
            .sum()
    };
    if s == 0.0 {
        return 1.0;
    }
    integral(s) / integral(0.0)
}

/// Real spectral multiplier acting on the spatial axes.
#[derive(Debug, Clone)]
pub struct XFilter {
    grid: GridSpec,
    multipliers: Vec<f64>,
}

impl XFilter {
    pub fn from_fn(grid: GridSpec, mut symbol: impl FnMut(&[i64]) -> f64) -> Self {
        let shape = grid.spatial_shape();
        let mut idx = vec![0usize; grid.d];
        let mut k = vec![0i64; grid.d];
        let multipliers = (0..grid.n_spatial())
            .map(|flat| {
                fft::unravel(flat, &shape, &mut idx);
                for a in 0..grid.d {
                    k[a] = fft::signed_freq(idx[a], grid.nx);
                }
                symbol(&k)
            })
            .collect();
        Self { grid, multipliers }
    }

    /// Periodized `phi_eps *` with the radial bump of radius `eps`.
    pub fn bump(grid: GridSpec, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("mollifier width eps = {eps} must be > 0")));
        }
        let d = grid.d;
        let mut cache: Vec<(i64, f64)> = Vec::new();
        Ok(Self::from_fn(grid, |k| {
            let k2: i64 = k.iter().map(|c| c * c).sum();
            if let Some(&(_, m)) = cache.iter().find(|(q, _)| *q == k2) {
                return m;
            }
            let m = bump_transform(d, eps * (k2 as f64).sqrt());
            cache.push((k2, m));
            m
        }))
    }

    /// Gaussian filter `exp(-width |k|^2)`.
    pub fn gaussian(grid: GridSpec, width: f64) -> Self {
        Self::from_fn(grid, |k| {
            let k2: i64 = k.iter().map(|c| c * c).sum();
            (-width * k2 as f64).exp()
        })
    }

    pub fn identity(grid: GridSpec) -> Self {
        Self::from_fn(grid, |_| 1.0)
    }

    pub fn multiplier(&self, flat_bin: usize) -> f64 {
        self.multipliers[flat_bin]
    }

    pub fn max_abs_multiplier(&self) -> f64 {
        self.multipliers.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Filter a scalar spatial field.
    pub fn apply_spatial(&self, values: &[f64]) -> Vec<f64> {
        let shape = self.grid.spatial_shape();
        let mut c = fft::to_complex(values);
        fft::fftn(&mut c, &shape);
        c.iter_mut()
            .zip(&self.multipliers)
            .for_each(|(z, m)| *z *= *m);
        fft::ifftn(&mut c, &shape);
        fft::real_part(&c)
    }

    /// Filter a distribution along its spatial axes only.
    pub fn apply_field(&self, f: &DistributionField) -> DistributionField {
        let shape = f.grid.shape();
        let d = f.grid.d;
        let nvd = f.grid.n_velocity();
        let mut c = fft::to_complex(&f.values);
        for a in 0..d {
            fft::fft_axis(&mut c, &shape, a, false);
        }
        c.chunks_mut(nvd)
            .zip(&self.multipliers)
            .for_each(|(block, m)| block.iter_mut().for_each(|z| *z *= *m));
        for a in 0..d {
            fft::fft_axis(&mut c, &shape, a, true);
        }
        DistributionField {
            grid: f.grid,
            values: c.iter().map(|z: &Complex64| z.re).collect(),
            time: f.time,
        }
    }
}

/// `phi_eps * f` in `x`, periodized on the torus.
pub fn mollify(f: &DistributionField, eps: f64) -> Result<DistributionField> {
    Ok(XFilter::bump(f.grid, eps)?.apply_field(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_polynomials() {
        let (x, w) = gauss_legendre_unit();
        let s: f64 = x.iter().zip(w).map(|(x, w)| w * x.powi(7)).sum();
        assert!((s - 1.0 / 8.0).abs() < 1e-14);
    }

    #[test]
    fn j0_reference_values() {
        // J0(1) and J0(10) from Abramowitz & Stegun tables
        assert!((bessel_j0(1.0) - 0.765_197_686_557_966_6).abs() < 1e-14);
        assert!((bessel_j0(10.0) + 0.245_935_764_451_348_3).abs() < 1e-14);
    }

    #[test]
    fn transform_is_bounded_by_one() {
        for d in 1..=3 {
            for i in 0..50 {
                let m = bump_transform(d, 0.4 * i as f64);
                assert!(m.abs() <= 1.0 + 1e-14, "d={d} s={} m={m}", 0.4 * i as f64);
            }
        }
    }

    #[test]
    fn transform_matches_direct_1d_quadrature() {
        // midpoint rule on a fine grid: the bump is flat to all orders at +-1
        let n = 20_000;
        let h = 2.0 / n as f64;
        let direct = |s: f64| -> f64 {
            (0..n)
                .map(|i| {
                    let y = -1.0 + (i as f64 + 0.5) * h;
                    bump(y) * (s * y).cos()
                })
                .sum::<f64>()
                * h
        };
        for s in [0.5, 2.0, 7.0] {
            assert!((bump_transform(1, s) - direct(s) / direct(0.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn nonpositive_width_rejected() {
        let g = GridSpec::new(1, 8, 8, 4.0).unwrap();
        assert!(XFilter::bump(g, 0.0).is_err());
        assert!(XFilter::bump(g, -1.0).is_err());
    }
}
