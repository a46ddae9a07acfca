//! Spectral electrostatic field `E = grad (-Lap)^{-1} (rho - 1)` and general
//! mean-field kernels `E = grad K * (rho - 1)`.

use std::io::BufRead;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::phase_space::GridSpec;

/// Above this `max |k| |K(k)|` a kernel is rejected as ill-posed.
pub const KERNEL_BOUND: f64 = 1e6;

/// Tolerance on `|mean(rho) - 1|` before a neutrality warning is raised.
pub const NEUTRALITY_TOL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    /// `K(k) = |k|^{-2}`
    Coulomb,
    /// One multiplier per spatial FFT bin (row-major, unshifted).
    Table(Vec<f64>),
}

impl Kernel {
    pub fn from_fn(grid: &GridSpec, symbol: impl Fn(&[i64]) -> f64) -> Self {
        let shape = grid.spatial_shape();
        let mut idx = vec![0usize; grid.d];
        let mut k = vec![0i64; grid.d];
        Kernel::Table(
            (0..grid.n_spatial())
                .map(|flat| {
                    fft::unravel(flat, &shape, &mut idx);
                    for a in 0..grid.d {
                        k[a] = fft::signed_freq(idx[a], grid.nx);
                    }
                    symbol(&k)
                })
                .collect(),
        )
    }

    /// Read `k_1..k_d,value` rows (header line first); every grid wavenumber must appear.
    pub fn read_csv(grid: &GridSpec, r: impl BufRead) -> Result<Self> {
        let d = grid.d;
        let shape = grid.spatial_shape();
        let mut table = vec![f64::NAN; grid.n_spatial()];
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Config(format!("kernel csv line {}: malformed row", lineno + 1));
            if cols.len() != d + 1 {
                return Err(bad());
            }
            let mut flat = 0usize;
            for a in 0..d {
                let k: i64 = cols[a].parse().map_err(|_| bad())?;
                let n = shape[a] as i64;
                if k < -(n / 2) || k >= n / 2 {
                    return Err(Error::Config(format!(
                        "kernel csv line {}: wavenumber {k} outside the grid",
                        lineno + 1
                    )));
                }
                flat = flat * shape[a] + k.rem_euclid(n) as usize;
            }
            table[flat] = cols[d].parse().map_err(|_| bad())?;
        }
        if table.iter().any(|v| v.is_nan()) {
            return Err(Error::Config(
                "kernel table does not cover every grid wavenumber".into(),
            ));
        }
        Ok(Kernel::Table(table))
    }

    fn multiplier(&self, k2: i64, flat: usize) -> f64 {
        match self {
            Kernel::Coulomb => 1.0 / k2 as f64,
            Kernel::Table(t) => t[flat],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSolution {
    /// `d` components, each on the spatial grid.
    pub e: Vec<Vec<f64>>,
    pub rho_bar: f64,
    pub neutrality_warning: bool,
}

impl FieldSolution {
    pub fn zero(grid: &GridSpec) -> Self {
        Self {
            e: vec![vec![0.0; grid.n_spatial()]; grid.d],
            rho_bar: 1.0,
            neutrality_warning: false,
        }
    }

    /// `1/2 int |E|^2 dx`
    pub fn energy(&self, grid: &GridSpec) -> f64 {
        0.5 * grid.x_cell_volume()
            * self
                .e
                .iter()
                .map(|c| c.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
    }

    /// Value of component `axis` at spatial node `flat`.
    pub fn at(&self, axis: usize, flat: usize) -> f64 {
        self.e[axis][flat]
    }
}

pub fn solve_poisson(grid: &GridSpec, rho: &[f64]) -> Result<FieldSolution> {
    solve_kernel(grid, rho, &Kernel::Coulomb)
}

/// `E^(k) = i k K(k) rho^(k)` for `k != 0`, zero mean mode; the Nyquist bin of
/// each axis is dropped since `i k` is not real there.
pub fn solve_kernel(grid: &GridSpec, rho: &[f64], kernel: &Kernel) -> Result<FieldSolution> {
    let n = grid.n_spatial();
    if rho.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} spatial nodes"),
            got: format!("{}", rho.len()),
        });
    }
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("density"));
    }
    if let Kernel::Table(t) = kernel {
        if t.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} kernel multipliers"),
                got: format!("{}", t.len()),
            });
        }
    }
    let d = grid.d;
    let shape = grid.spatial_shape();
    let rho_bar = rho.iter().sum::<f64>() / n as f64;

    let mut hat = fft::to_complex(rho);
    fft::fftn(&mut hat, &shape);

    let mut comps = vec![vec![Complex64::new(0.0, 0.0); n]; d];
    let mut idx = vec![0usize; d];
    let mut k = vec![0i64; d];
    let mut worst = 0.0f64;
    for flat in 0..n {
        fft::unravel(flat, &shape, &mut idx);
        for a in 0..d {
            k[a] = fft::signed_freq(idx[a], grid.nx);
        }
        let k2: i64 = k.iter().map(|c| c * c).sum();
        if k2 == 0 {
            continue;
        }
        let m = kernel.multiplier(k2, flat);
        if !m.is_finite() {
            return Err(Error::IllPosedKernel(f64::INFINITY));
        }
        worst = worst.max((k2 as f64).sqrt() * m.abs());
        let base = hat[flat] * m;
        for a in 0..d {
            if fft::is_nyquist(idx[a], grid.nx) {
                continue;
            }
            comps[a][flat] = Complex64::new(0.0, k[a] as f64) * base;
        }
    }
    if worst > KERNEL_BOUND {
        return Err(Error::IllPosedKernel(worst));
    }
    let e = comps
        .into_iter()
        .map(|mut c| {
            fft::ifftn(&mut c, &shape);
            fft::real_part(&c)
        })
        .collect();
    Ok(FieldSolution {
        e,
        rho_bar,
        neutrality_warning: (rho_bar - 1.0).abs() > NEUTRALITY_TOL,
    })
}

/// Spectral curl components `k_a E_b - k_b E_a` (max modulus over bins); zero for gradients.
pub fn max_spectral_curl(grid: &GridSpec, sol: &FieldSolution) -> f64 {
    let d = grid.d;
    if d < 2 {
        return 0.0;
    }
    let shape = grid.spatial_shape();
    let hats: Vec<Vec<Complex64>> = sol
        .e
        .iter()
        .map(|c| {
            let mut h = fft::to_complex(c);
            fft::fftn(&mut h, &shape);
            h
        })
        .collect();
    let mut idx = vec![0usize; d];
    let mut worst = 0.0f64;
    for flat in 0..grid.n_spatial() {
        fft::unravel(flat, &shape, &mut idx);
        let k: Vec<f64> = idx.iter().map(|&j| fft::signed_freq(j, grid.nx) as f64).collect();
        for a in 0..d {
            for b in a + 1..d {
                let c = hats[b][flat] * k[a] - hats[a][flat] * k[b];
                worst = worst.max(c.norm());
            }
        }
    }
    worst
}
