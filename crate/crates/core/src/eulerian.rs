//! Operator-splitting integrator for the regularized stochastic kinetic equation
//!
//! `df + v.grad_x f dt + theta_R(||f||) (phi_eps * E).grad_v f dt + grad_v f o dW = nu L f dt`
//!
//! with every substep solved exactly in Fourier space: free streaming and the
//! velocity shift by phase multipliers, the Fokker-Planck flow by the exact
//! Ornstein-Uhlenbeck propagator.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::field_solver::{solve_kernel, Kernel};
use crate::noise_model::{BasisSet, ColoringTable, GridNoise, NoisePath};
use crate::phase_space::{
    density, weighted_sobolev_norm_sq_unchecked, CutoffSpec, DistributionField, GridSpec,
    WeightedNormSpec, XFilter,
};

/// `d` spatial components of a vector field on the spatial grid.
pub type DriftField = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    Lie,
    Strang,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepPlan {
    pub dt: f64,
    pub nu: f64,
    pub cutoff: CutoffSpec,
    pub norm: WeightedNormSpec,
    /// Mollifier width; `0` disables the mollifier.
    pub mollifier_epsilon: f64,
    pub splitting: Splitting,
}

impl StepPlan {
    pub fn new(dt: f64, nu: f64) -> Self {
        Self {
            dt,
            nu,
            cutoff: CutoffSpec::inactive(),
            norm: WeightedNormSpec::new(1, 2.0),
            mollifier_epsilon: 0.0,
            splitting: Splitting::Strang,
        }
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain(format!("dt = {} must be > 0", self.dt)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::Domain(format!("nu = {} must be >= 0", self.nu)));
        }
        if !(self.cutoff.r > 0.0) {
            return Err(Error::Domain(format!("cutoff R = {} must be > 0", self.cutoff.r)));
        }
        if !(self.mollifier_epsilon >= 0.0) {
            return Err(Error::Domain(format!(
                "mollifier epsilon = {} must be >= 0",
                self.mollifier_epsilon
            )));
        }
        self.norm.validate(grid)
    }
}

/// Where the velocity drift comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftSource {
    /// `theta_R(||f||) (phi_eps * E[f])` from the current state.
    SelfConsistent,
    /// Prescribed field per step; a single entry is used for every step.
    Frozen(Vec<DriftField>),
    Zero,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub f: DistributionField,
    pub path: NoisePath,
    pub step_index: usize,
    pub last_cutoff_value: f64,
}

impl SolverState {
    pub fn new(f: DistributionField, path: NoisePath) -> Self {
        Self {
            f,
            path,
            step_index: 0,
            last_cutoff_value: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub t: f64,
    pub mass: f64,
    pub l2: f64,
    /// Norm used for the cutoff in this step.
    pub hs0m0_norm: f64,
    pub theta_r: f64,
    pub min_f: f64,
    pub e_energy: f64,
}

pub const LOG_HEADER: &str = "step,t,mass,L2,Hs0m0_norm,theta_R,min_f,E_energy";

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.t, self.mass, self.l2, self.hs0m0_norm, self.theta_r, self.min_f, self.e_energy
        )
    }
}

pub fn write_log(rows: &[LogRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub row: LogRow,
    /// `theta_R (phi_eps * E)` computed from this step's own state, when requested.
    pub own_drift: Option<DriftField>,
    /// Mass sitting where the Fokker-Planck dilation pulls in values from
    /// outside the velocity box.
    pub truncation_defect: f64,
}

/// Noise coefficients pre-evaluated on the spatial grid.
#[derive(Debug, Clone)]
pub struct NoiseDriver {
    pub basis: BasisSet,
    pub table: ColoringTable,
    grid_noise: GridNoise,
}

impl NoiseDriver {
    pub fn new(grid: &GridSpec, basis: BasisSet, table: ColoringTable) -> Result<Self> {
        if basis.d != grid.d {
            return Err(Error::Shape {
                expected: format!("noise dimension {}", grid.d),
                got: format!("{}", basis.d),
            });
        }
        if 2 * basis.k_max >= grid.nx {
            return Err(Error::Config(format!(
                "noise truncation K = {} must be below N_x/2 = {}",
                basis.k_max,
                grid.nx / 2
            )));
        }
        let mut points = vec![0.0; grid.n_spatial() * grid.d];
        for (ix, p) in points.chunks_mut(grid.d).enumerate() {
            grid.x_coords(ix, p);
        }
        let grid_noise = GridNoise::new(&basis, &table, &points)?;
        Ok(Self {
            basis,
            table,
            grid_noise,
        })
    }

    /// `Delta W_n(x)` at every spatial node, as `d` component arrays.
    pub fn increment(&self, path: &NoisePath, step: usize) -> Result<DriftField> {
        let incs = path.increments(step, &self.basis)?;
        let flat = self.grid_noise.field(&incs);
        let d = self.basis.d;
        Ok((0..d)
            .map(|a| flat.iter().skip(a).step_by(d).copied().collect())
            .collect())
    }
}

/// One-dimensional Ornstein-Uhlenbeck propagator `exp(tau nu (d_vv + d_v v))`
/// on the periodic velocity axis, as a dense row-major `N_v x N_v` matrix.
///
/// In Fourier variables the flow is `f^(eta) -> f^(eta e^{-nu tau})
/// exp(-eta^2 (1 - e^{-2 nu tau}) / 2)`; the discrete transform is evaluated
/// off-grid directly, so columns sum to one and mass is exact.
pub fn ou_matrix(grid: &GridSpec, nu: f64, tau: f64, with_drift: bool) -> Vec<f64> {
    let n = grid.nv;
    let w = nu * tau;
    let (s, var) = if with_drift {
        ((-w).exp(), -(-2.0 * w).exp_m1())
    } else {
        (1.0, 2.0 * w)
    };
    let eta: Vec<f64> = (0..n).map(|m| grid.v_wavenumber(m)).collect();
    let gain: Vec<f64> = eta.iter().map(|e| (-0.5 * e * e * var).exp()).collect();
    let v: Vec<f64> = (0..n).map(|j| grid.v_node(j)).collect();
    let mut mat = vec![0.0; n * n];
    mat.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, out) in row.iter_mut().enumerate() {
            let arg = v[i] - s * v[j];
            *out = eta
                .iter()
                .zip(&gain)
                .map(|(e, g)| g * (e * arg).cos())
                .sum::<f64>()
                / n as f64;
        }
    });
    mat
}

/// Apply a dense `n x n` matrix along one axis of a row-major array.
fn apply_along_axis(values: &mut [f64], shape: &[usize], axis: usize, mat: &[f64]) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    values.par_chunks_mut(n * inner).for_each(|block| {
        let mut line = vec![0.0; n];
        for i in 0..inner {
            for (j, z) in line.iter_mut().enumerate() {
                *z = block[j * inner + i];
            }
            for r in 0..n {
                let row = &mat[r * n..(r + 1) * n];
                block[r * inner + i] = row.iter().zip(&line).map(|(a, b)| a * b).sum();
            }
        }
    });
}

/// `f(x - v dt, v)` by a phase shift along the spatial axes.
pub fn substep_transport_x(f: &mut DistributionField, dt: f64) {
    let g = f.grid;
    let shape = g.shape();
    let (d, nvd) = (g.d, g.n_velocity());
    let mut c = fft::to_complex(&f.values);
    for a in 0..d {
        fft::fft_axis(&mut c, &shape, a, false);
    }
    let xshape = g.spatial_shape();
    c.par_chunks_mut(nvd).enumerate().for_each(|(ix, block)| {
        let mut idx = vec![0usize; d];
        fft::unravel(ix, &xshape, &mut idx);
        let k: Vec<f64> = idx.iter().map(|&j| fft::signed_freq(j, g.nx) as f64).collect();
        let mut v = vec![0.0; d];
        for (iv, z) in block.iter_mut().enumerate() {
            g.v_coords(iv, &mut v);
            let phase = -dt * k.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            *z *= Complex64::from_polar(1.0, phase);
        }
    });
    for a in 0..d {
        fft::fft_axis(&mut c, &shape, a, true);
    }
    f.values.iter_mut().zip(&c).for_each(|(v, z)| *v = z.re);
}

/// `f(x, v - a(x))` by a phase shift along the velocity axes.
pub fn substep_accel_v(f: &mut DistributionField, a: &DriftField) -> Result<()> {
    let g = f.grid;
    let (d, nvd, nsp) = (g.d, g.n_velocity(), g.n_spatial());
    if a.len() != d || a.iter().any(|c| c.len() != nsp) {
        return Err(Error::Shape {
            expected: format!("{d} components of {nsp} nodes"),
            got: format!("{} components", a.len()),
        });
    }
    let limit = 0.5 * g.v_max;
    let mut worst = 0.0f64;
    for ix in 0..nsp {
        let s: f64 = (0..d).map(|c| a[c][ix] * a[c][ix]).sum::<f64>().sqrt();
        if !s.is_finite() {
            return Err(Error::NonFinite("velocity shift"));
        }
        worst = worst.max(s);
    }
    if worst > limit {
        return Err(Error::ShiftTooLarge { shift: worst, limit });
    }
    if worst == 0.0 {
        return Ok(());
    }
    let vshape = g.velocity_shape();
    let eta: Vec<f64> = (0..g.nv).map(|j| g.v_wavenumber(j)).collect();
    f.values.par_chunks_mut(nvd).enumerate().for_each(|(ix, block)| {
        let shift: Vec<f64> = (0..d).map(|c| a[c][ix]).collect();
        if shift.iter().all(|&s| s == 0.0) {
            return;
        }
        let mut c = fft::to_complex(block);
        fft::fftn(&mut c, &vshape);
        let mut idx = vec![0usize; d];
        for (iv, z) in c.iter_mut().enumerate() {
            fft::unravel(iv, &vshape, &mut idx);
            let phase = -idx.iter().zip(&shift).map(|(&j, s)| eta[j] * s).sum::<f64>();
            *z *= Complex64::from_polar(1.0, phase);
        }
        fft::ifftn(&mut c, &vshape);
        block.iter_mut().zip(&c).for_each(|(v, z)| *v = z.re);
    });
    Ok(())
}

/// Exact kinetic Fokker-Planck flow over `tau` given the per-axis matrix
/// from [`ou_matrix`].
pub fn substep_fokker_planck(f: &mut DistributionField, mat: &[f64]) {
    let g = f.grid;
    let shape = g.shape();
    for a in 0..g.d {
        apply_along_axis(&mut f.values, &shape, g.d + a, mat);
    }
}

/// Mass in cells whose dilation preimage `v e^{nu tau}` leaves the box.
fn dilation_defect(f: &DistributionField, nu: f64, tau: f64) -> f64 {
    if nu == 0.0 {
        return 0.0;
    }
    let g = f.grid;
    let edge = g.v_max * (-nu * tau).exp();
    let nvd = g.n_velocity();
    let mut v = vec![0.0; g.d];
    let outside: Vec<bool> = (0..nvd)
        .map(|iv| {
            g.v_coords(iv, &mut v);
            v.iter().any(|c| c.abs() >= edge)
        })
        .collect();
    f.values
        .iter()
        .enumerate()
        .filter(|(i, _)| outside[i % nvd])
        .map(|(_, x)| x.abs())
        .sum::<f64>()
        * g.cell_volume()
}

#[derive(Debug, Clone)]
pub struct EulerianSolver {
    pub grid: GridSpec,
    pub plan: StepPlan,
    pub kernel: Kernel,
    pub drift: DriftSource,
    pub noise: Option<NoiseDriver>,
    /// Return each step's own drift field in [`StepRecord::own_drift`].
    pub record_drift: bool,
    filter: XFilter,
    fp_mat: Option<Vec<f64>>,
}

impl EulerianSolver {
    pub fn new(grid: GridSpec, plan: StepPlan) -> Result<Self> {
        grid.validate()?;
        plan.validate(&grid)?;
        if grid.d == 3 {
            return Err(Error::UnsupportedDimension(3));
        }
        let cutoff_k = grid.dealias_fraction * (grid.nx / 2) as f64;
        let mask = move |k: &[i64]| k.iter().all(|&c| (c.abs() as f64) <= cutoff_k);
        let filter = if plan.mollifier_epsilon > 0.0 {
            let bump = XFilter::bump(grid, plan.mollifier_epsilon)?;
            let shape = grid.spatial_shape();
            let mut idx = vec![0usize; grid.d];
            XFilter::from_fn(grid, |k| {
                let flat = idx.iter_mut().enumerate().fold(0usize, |acc, (a, i)| {
                    *i = k[a].rem_euclid(shape[a] as i64) as usize;
                    acc * shape[a] + *i
                });
                if mask(k) {
                    bump.multiplier(flat)
                } else {
                    0.0
                }
            })
        } else {
            XFilter::from_fn(grid, |k| if mask(k) { 1.0 } else { 0.0 })
        };
        let tau = match plan.splitting {
            Splitting::Strang => 0.5 * plan.dt,
            Splitting::Lie => plan.dt,
        };
        let fp_mat = (plan.nu > 0.0).then(|| ou_matrix(&grid, plan.nu, tau, true));
        Ok(Self {
            grid,
            plan,
            kernel: Kernel::Coulomb,
            drift: DriftSource::SelfConsistent,
            noise: None,
            record_drift: false,
            filter,
            fp_mat,
        })
    }

    pub fn with_noise(mut self, noise: NoiseDriver) -> Self {
        self.noise = Some(noise);
        self
    }

    pub fn with_drift(mut self, drift: DriftSource) -> Self {
        self.drift = drift;
        self
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn recording_drift(mut self, on: bool) -> Self {
        self.record_drift = on;
        self
    }

    /// `||f||_{H^{s0}_{m0}}` as used by the cutoff.
    pub fn cutoff_norm(&self, f: &DistributionField) -> f64 {
        weighted_sobolev_norm_sq_unchecked(f, self.plan.norm).sqrt()
    }

    /// `theta (phi_eps * E[f])`, dealiased.
    pub fn drift_of(&self, f: &DistributionField, theta: f64) -> Result<DriftField> {
        if theta == 0.0 {
            return Ok(vec![vec![0.0; self.grid.n_spatial()]; self.grid.d]);
        }
        let sol = solve_kernel(&self.grid, &density(f), &self.kernel)?;
        Ok(sol
            .e
            .iter()
            .map(|c| {
                let mut out = self.filter.apply_spatial(c);
                out.iter_mut().for_each(|v| *v *= theta);
                out
            })
            .collect())
    }

    pub fn field_energy(&self, f: &DistributionField) -> Result<f64> {
        Ok(solve_kernel(&self.grid, &density(f), &self.kernel)?.energy(&self.grid))
    }

    /// Diagnostics row for the state as it stands (used for step 0).
    pub fn initial_row(&self, state: &SolverState) -> Result<LogRow> {
        let f = &state.f;
        let norm = self.cutoff_norm(f);
        Ok(LogRow {
            step: state.step_index,
            t: f.time,
            mass: f.mass(),
            l2: f.l2_norm(),
            hs0m0_norm: norm,
            theta_r: self.plan.cutoff.theta(norm),
            min_f: f.min(),
            e_energy: self.field_energy(f)?,
        })
    }

    fn drift_for_step(&self, n: usize, own: Option<&DriftField>) -> Result<Option<DriftField>> {
        Ok(match &self.drift {
            DriftSource::SelfConsistent => own.cloned(),
            DriftSource::Zero => None,
            DriftSource::Frozen(list) => {
                let pick = if list.len() == 1 { 0 } else { n };
                Some(
                    list.get(pick)
                        .ok_or_else(|| {
                            Error::Config(format!("frozen drift has no entry for step {n}"))
                        })?
                        .clone(),
                )
            }
        })
    }

    fn velocity_kick(&self, state: &mut SolverState, f: &mut DistributionField) -> Result<(f64, f64, Option<DriftField>)> {
        let n = state.step_index;
        let norm = self.cutoff_norm(f);
        let theta = self.plan.cutoff.theta(norm);
        let need_own = self.record_drift || self.drift == DriftSource::SelfConsistent;
        let own = if need_own { Some(self.drift_of(f, theta)?) } else { None };
        let drift = self.drift_for_step(n, own.as_ref())?;
        let d = self.grid.d;
        let mut shift: DriftField = match drift {
            Some(mut a) => {
                a.iter_mut().flatten().for_each(|v| *v *= self.plan.dt);
                a
            }
            None => vec![vec![0.0; self.grid.n_spatial()]; d],
        };
        if let Some(noise) = &self.noise {
            let dw = noise.increment(&state.path, n)?;
            for (s, w) in shift.iter_mut().zip(&dw) {
                s.iter_mut().zip(w).for_each(|(a, b)| *a += b);
            }
        }
        substep_accel_v(f, &shift)?;
        state.last_cutoff_value = theta;
        Ok((norm, theta, if self.record_drift { own } else { None }))
    }

    fn fokker_planck(&self, f: &mut DistributionField) -> f64 {
        match &self.fp_mat {
            Some(mat) => {
                let tau = match self.plan.splitting {
                    Splitting::Strang => 0.5 * self.plan.dt,
                    Splitting::Lie => self.plan.dt,
                };
                let defect = dilation_defect(f, self.plan.nu, tau);
                substep_fokker_planck(f, mat);
                defect
            }
            None => 0.0,
        }
    }

    /// Advance one step. On error the state is left at the last good step.
    pub fn step(&self, state: &mut SolverState) -> Result<StepRecord> {
        let dt = self.plan.dt;
        if self.noise.is_some() && ((state.path.dt() - dt).abs() > 1e-12 * dt) {
            return Err(Error::Config(format!(
                "noise path step {} does not match dt = {dt}",
                state.path.dt()
            )));
        }
        let mut f = state.f.clone();
        let mut defect = 0.0;
        let (norm, theta, own) = match self.plan.splitting {
            Splitting::Strang => {
                substep_transport_x(&mut f, 0.5 * dt);
                defect += self.fokker_planck(&mut f);
                let out = self.velocity_kick(state, &mut f)?;
                defect += self.fokker_planck(&mut f);
                substep_transport_x(&mut f, 0.5 * dt);
                out
            }
            Splitting::Lie => {
                let out = self.velocity_kick(state, &mut f)?;
                substep_transport_x(&mut f, dt);
                defect += self.fokker_planck(&mut f);
                out
            }
        };
        let n = state.step_index + 1;
        f.time = n as f64 * dt;
        if f.check_finite().is_err() {
            return Err(Error::BlowUp {
                step: n,
                time: f.time,
            });
        }
        let row = LogRow {
            step: n,
            t: f.time,
            mass: f.mass(),
            l2: f.l2_norm(),
            hs0m0_norm: norm,
            theta_r: theta,
            min_f: f.min(),
            e_energy: self.field_energy(&f)?,
        };
        state.f = f;
        state.step_index = n;
        Ok(StepRecord {
            row,
            own_drift: own,
            truncation_defect: defect,
        })
    }

    /// Run `steps` steps, returning the log including the initial row.
    pub fn run(&self, state: &mut SolverState, steps: usize) -> Result<Vec<LogRow>> {
        let mut rows = vec![self.initial_row(state)?];
        for _ in 0..steps {
            rows.push(self.step(state)?.row);
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_model::{build_basis, coloring_law, ColoringLaw, Parity};
    use crate::phase_space::maxwellian;

    fn grid1() -> GridSpec {
        GridSpec::new(1, 32, 64, 8.0).unwrap()
    }

    fn gauss(v: f64) -> f64 {
        (-v * v).exp()
    }

    #[test]
    fn transport_of_x_independent_field_is_identity() {
        let g = grid1();
        let mut f = DistributionField::from_fn(g, |_, v| gauss(v[0]));
        let f0 = f.clone();
        substep_transport_x(&mut f, 0.37);
        for (a, b) in f.values.iter().zip(&f0.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn transport_matches_closed_form_and_keeps_mass() {
        let g = grid1();
        let dt = 0.3;
        let mut f = DistributionField::from_fn(g, |x, v| x[0].cos() * gauss(v[0]) + gauss(v[0]));
        let m0 = f.mass();
        let l0 = f.l2_norm();
        substep_transport_x(&mut f, dt);
        let exact = DistributionField::from_fn(g, |x, v| (x[0] - v[0] * dt).cos() * gauss(v[0]) + gauss(v[0]));
        for (a, b) in f.values.iter().zip(&exact.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(((f.mass() - m0) / m0).abs() < 1e-12);
        assert!(((f.l2_norm() - l0) / l0).abs() < 1e-12);
    }

    #[test]
    fn velocity_shift_recentres_gaussian() {
        let g = GridSpec::new(1, 16, 128, 8.0).unwrap();
        let mut f = DistributionField::from_fn(g, |_, v| gauss(v[0]));
        let l0 = f.l2_norm();
        let a: Vec<f64> = (0..16).map(|i| 0.3 * g.x_node(i).sin()).collect();
        substep_accel_v(&mut f, &vec![a.clone()]).unwrap();
        let exact = DistributionField::from_fn(g, |x, v| gauss(v[0] - 0.3 * x[0].sin()));
        for (p, q) in f.values.iter().zip(&exact.values) {
            assert!((p - q).abs() < 1e-10);
        }
        assert!(((f.l2_norm() - l0) / l0).abs() < 1e-12);
        let too_big = vec![vec![4.5; 16]];
        assert!(matches!(
            substep_accel_v(&mut f, &too_big),
            Err(Error::ShiftTooLarge { .. })
        ));
    }

    #[test]
    fn maxwellian_is_stationary_under_fokker_planck() {
        let g = GridSpec::new(1, 8, 64, 8.0).unwrap();
        let mut f = DistributionField::from_fn(g, |_, v| maxwellian(v));
        let f0 = f.clone();
        substep_fokker_planck(&mut f, &ou_matrix(&g, 0.7, 0.2, true));
        let err = f.values.iter().zip(&f0.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn fokker_planck_conserves_mass_and_is_first_order() {
        let g = GridSpec::new(1, 8, 64, 10.0).unwrap();
        let f0 = DistributionField::from_fn(g, |_, v| gauss(v[0] - 1.0) * 0.5 + gauss(v[0] + 0.5));
        let diff = |dt: f64| {
            let mut f = f0.clone();
            substep_fokker_planck(&mut f, &ou_matrix(&g, 0.5, dt, true));
            assert!(((f.mass() - f0.mass()) / f0.mass()).abs() < 1e-12);
            f.sub(&f0).l2_norm()
        };
        let ratio = diff(1e-3) / diff(5e-4);
        assert!((ratio - 2.0).abs() < 0.05, "ratio = {ratio}");
    }

    #[test]
    fn pure_diffusion_damps_a_mode_exactly() {
        let g = GridSpec::new(1, 8, 32, 4.0).unwrap();
        let eta = g.v_wavenumber(3);
        let mut f = DistributionField::from_fn(g, |_, v| (eta * v[0]).cos());
        let (nu, dt) = (0.4, 0.25);
        substep_fokker_planck(&mut f, &ou_matrix(&g, nu, dt, false));
        let damp = (-nu * eta * eta * dt).exp();
        let exact = DistributionField::from_fn(g, |_, v| damp * (eta * v[0]).cos());
        for (a, b) in f.values.iter().zip(&exact.values) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn equilibrium_is_preserved() {
        let g = grid1();
        let f = DistributionField::from_fn(g, |_, v| maxwellian(v));
        let solver = EulerianSolver::new(g, StepPlan::new(0.05, 0.0)).unwrap();
        let mut st = SolverState::new(f.clone(), NoisePath::new(0, 0, 0.05, 100));
        solver.run(&mut st, 100).unwrap();
        for (a, b) in st.f.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((st.f.time - 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_mode_noise_shift_matches_closed_form() {
        let g = GridSpec::new(1, 16, 128, 8.0).unwrap();
        let basis = build_basis(1, 1).unwrap();
        let table = coloring_law(&ColoringLaw::power(1.0), 4, &basis).unwrap();
        let driver = NoiseDriver::new(&g, basis.clone(), table).unwrap();
        let path = NoisePath::new(11, 0, 0.1, 4);
        let mut f = DistributionField::from_fn(g, |_, v| gauss(v[0]));
        let dw = driver.increment(&path, 0).unwrap();
        substep_accel_v(&mut f, &dw).unwrap();
        let incs = path.increments(0, &basis).unwrap();
        let sine = basis.modes.iter().position(|m| m.parity == Parity::Sine).unwrap();
        let c = basis.normalization();
        let exact = DistributionField::from_fn(g, |x, v| {
            let w = c * (incs[sine] * x[0].sin() - incs[1 - sine] * x[0].cos());
            gauss(v[0] - w)
        });
        for (p, q) in f.values.iter().zip(&exact.values) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn cutoff_kills_the_field() {
        let g = grid1();
        let f = DistributionField::from_fn(g, |x, v| (1.0 + 0.3 * x[0].cos()) * maxwellian(v));
        let mut plan = StepPlan::new(0.05, 0.2);
        let probe = EulerianSolver::new(g, plan).unwrap();
        plan.cutoff = CutoffSpec::new(probe.cutoff_norm(&f) / 3.0);
        let basis = build_basis(1, 2).unwrap();
        let table = coloring_law(&ColoringLaw::power(2.0), 4, &basis).unwrap();
        let noise = NoiseDriver::new(&g, basis, table).unwrap();
        let cut = EulerianSolver::new(g, plan).unwrap().with_noise(noise.clone());
        let free = EulerianSolver::new(g, plan)
            .unwrap()
            .with_noise(noise)
            .with_drift(DriftSource::Zero);
        let path = NoisePath::new(5, 0, 0.05, 1);
        let mut a = SolverState::new(f.clone(), path);
        let mut b = SolverState::new(f, path);
        let rec = cut.step(&mut a).unwrap();
        free.step(&mut b).unwrap();
        assert_eq!(rec.row.theta_r, 0.0);
        for (p, q) in a.f.values.iter().zip(&b.f.values) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_aborts_with_last_good_state() {
        let g = grid1();
        let mut f = DistributionField::from_fn(g, |_, v| maxwellian(v));
        f.values[7] = f64::NAN;
        let solver = EulerianSolver::new(g, StepPlan::new(0.05, 0.0)).unwrap();
        let mut st = SolverState::new(f, NoisePath::new(0, 0, 0.05, 10));
        assert!(solver.step(&mut st).is_err());
        assert_eq!(st.step_index, 0);
    }
}
