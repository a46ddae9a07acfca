use num_complex::Complex64;

use super::grid::GridSpec;
use crate::error::{Error, Result};
use crate::fft;

/// Distribution function sampled at the phase-space nodes.
///
/// Layout is row-major over `grid.shape()`: spatial axes first, so the
/// values at one spatial node form a contiguous velocity block.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub time: f64,
}

impl DistributionField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            time: 0.0,
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape {
                expected: format!("{}", grid.len()),
                got: format!("{}", values.len()),
            });
        }
        Ok(Self {
            grid,
            values,
            time: 0.0,
        })
    }

    /// Sample `f(x, v)` at every node.
    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64], &[f64]) -> f64) -> Self {
        let (nvd, d) = (grid.n_velocity(), grid.d);
        let mut x = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut values = Vec::with_capacity(grid.len());
        for ix in 0..grid.n_spatial() {
            grid.x_coords(ix, &mut x);
            for iv in 0..nvd {
                grid.v_coords(iv, &mut v);
                values.push(f(&x, &v));
            }
        }
        Self {
            grid,
            values,
            time: 0.0,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("distribution field"))
        }
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        (self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * self.grid.cell_volume())
            .powf(1.0 / p)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Mass carried by nodes with `|v| >= V_max / 2`.
    pub fn tail_mass(&self) -> f64 {
        let speed = self.grid.speed_sq();
        let cut = 0.25 * self.grid.v_max * self.grid.v_max;
        let nvd = self.grid.n_velocity();
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| speed[i % nvd] >= cut)
            .map(|(_, v)| v.abs())
            .sum::<f64>()
            * self.grid.cell_volume()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a -= b);
        out
    }

    pub fn spectrum(&self) -> Spectrum {
        Spectrum::new(self)
    }
}

/// Full phase-space Fourier transform, cached for repeated derivatives.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub grid: GridSpec,
    pub coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(f: &DistributionField) -> Self {
        let mut coeffs = fft::to_complex(&f.values);
        fft::fftn(&mut coeffs, &f.grid.shape());
        Self {
            grid: f.grid,
            coeffs,
        }
    }

    /// Mixed derivative `d_x^alpha d_v^beta` as node values. `orders` has
    /// length `2d` (spatial orders then velocity orders). Odd-order
    /// derivatives drop the Nyquist bin.
    pub fn derivative(&self, orders: &[usize]) -> Vec<f64> {
        let g = &self.grid;
        let shape = g.shape();
        debug_assert_eq!(orders.len(), shape.len());
        if orders.iter().all(|&o| o == 0) {
            let mut c = self.coeffs.clone();
            fft::ifftn(&mut c, &shape);
            return fft::real_part(&c);
        }
        let axis_mult: Vec<Vec<Complex64>> = shape
            .iter()
            .enumerate()
            .map(|(a, &n)| {
                let ord = orders[a];
                (0..n)
                    .map(|j| {
                        if ord == 0 {
                            return Complex64::new(1.0, 0.0);
                        }
                        if ord % 2 == 1 && fft::is_nyquist(j, n) {
                            return Complex64::new(0.0, 0.0);
                        }
                        let k = if a < g.d {
                            fft::signed_freq(j, n) as f64
                        } else {
                            g.v_wavenumber(j)
                        };
                        Complex64::new(0.0, k).powu(ord as u32)
                    })
                    .collect()
            })
            .collect();
        let mut idx = vec![0usize; shape.len()];
        let mut c: Vec<Complex64> = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(flat, z)| {
                fft::unravel(flat, &shape, &mut idx);
                let m = idx
                    .iter()
                    .enumerate()
                    .fold(Complex64::new(1.0, 0.0), |acc, (a, &j)| acc * axis_mult[a][j]);
                z * m
            })
            .collect();
        fft::ifftn(&mut c, &shape);
        fft::real_part(&c)
    }

    /// `sum |c|^2` scaled so it equals the physical-space `L^2` norm squared.
    pub fn parseval_l2_sq(&self) -> f64 {
        let n = self.grid.len() as f64;
        self.coeffs.iter().map(|z| z.norm_sqr()).sum::<f64>() / n * self.grid.cell_volume()
    }
}

/// All exponent vectors of length `len` with total order `<= max_order`.
pub fn multi_indices(len: usize, max_order: usize) -> Vec<Vec<usize>> {
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for o in 0..=left {
            cur[pos] = o;
            rec(pos + 1, left - o, cur, out);
        }
        cur[pos] = 0;
    }
    let mut out = Vec::new();
    rec(0, max_order, &mut vec![0; len], &mut out);
    out
}

/// `sum_nodes |g|^2 <v>^m * cell volume`, with `weight` the node values of `<v>^m`.
pub fn weighted_sq(grid: &GridSpec, values: &[f64], weight: &[f64]) -> f64 {
    let nvd = grid.n_velocity();
    values
        .chunks(nvd)
        .map(|block| {
            block
                .iter()
                .zip(weight)
                .map(|(g, w)| g * g * w)
                .sum::<f64>()
        })
        .sum::<f64>()
        * grid.cell_volume()
}

/// Weighted inner product `<a, b>_m`.
pub fn weighted_dot(grid: &GridSpec, a: &[f64], b: &[f64], weight: &[f64]) -> f64 {
    let nvd = grid.n_velocity();
    a.chunks(nvd)
        .zip(b.chunks(nvd))
        .map(|(ba, bb)| {
            ba.iter()
                .zip(bb)
                .zip(weight)
                .map(|((x, y), w)| x * y * w)
                .sum::<f64>()
        })
        .sum::<f64>()
        * grid.cell_volume()
}

/// Integer derivative order `sigma` and velocity weight exponent `m` of `H^sigma_m`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedNormSpec {
    pub sigma: usize,
    pub m: f64,
}

impl WeightedNormSpec {
    pub fn new(sigma: usize, m: f64) -> Self {
        Self { sigma, m }
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.sigma > grid.nv / 4 {
            return Err(Error::Domain(format!(
                "sigma = {} exceeds the spectral bound N_v/4 = {}",
                self.sigma,
                grid.nv / 4
            )));
        }
        if !(self.m >= 0.0) {
            return Err(Error::Domain(format!("weight exponent m = {} < 0", self.m)));
        }
        Ok(())
    }
}

/// `||f||_{H^sigma_m}`: spectral derivatives, node-exact weights, trapezoid rule.
pub fn weighted_sobolev_norm(f: &DistributionField, spec: WeightedNormSpec) -> Result<f64> {
    f.check_finite()?;
    spec.validate(&f.grid)?;
    Ok(weighted_sobolev_norm_sq_unchecked(f, spec).sqrt())
}

pub(crate) fn weighted_sobolev_norm_sq_unchecked(f: &DistributionField, spec: WeightedNormSpec) -> f64 {
    let weight = f.grid.velocity_weight(spec.m);
    if spec.sigma == 0 {
        return weighted_sq(&f.grid, &f.values, &weight);
    }
    let spectrum = f.spectrum();
    multi_indices(2 * f.grid.d, spec.sigma)
        .iter()
        .map(|orders| weighted_sq(&f.grid, &spectrum.derivative(orders), &weight))
        .sum()
}

/// Velocity moment `rho(x) = int f dv` on the spatial grid.
pub fn density(f: &DistributionField) -> Vec<f64> {
    let dvd = f.grid.v_cell_volume();
    f.values
        .chunks(f.grid.n_velocity())
        .map(|block| block.iter().sum::<f64>() * dvd)
        .collect()
}

/// `(int_box <v>^{-m} dv)^{1/2}`, the constant of `||rho||_2 <= C ||f||_{L^2_m}`.
pub fn density_bound_constant(grid: &GridSpec, m: f64) -> f64 {
    (grid
        .velocity_weight(m)
        .iter()
        .map(|w| 1.0 / w)
        .sum::<f64>()
        * grid.v_cell_volume())
    .sqrt()
}

/// Plain `L^2` norm of a spatial field on the `d`-torus.
pub fn spatial_l2(grid: &GridSpec, values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() * grid.x_cell_volume()).sqrt()
}
