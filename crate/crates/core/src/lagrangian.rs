//! Particle backend: stochastic characteristics
//!
//! `dX = V dt`,
//! `dV = -nu V dt + a(t, X) dt + sqrt(2 nu) dW~ + sum_k sigma_k e_k(X) o dW^(k)`,
//!
//! Feynman-Kac reconstruction of the linear problem, cloud-in-cell deposition
//! and flow-volume diagnostics.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eulerian::DriftField;
use crate::fft;
use crate::field_solver::{solve_kernel, Kernel};
use crate::noise_model::{rotate_magnetic, BasisSet, ColoringTable, NoisePath};
use crate::phase_space::snapshot::{write_raw, SnapshotHeader};
use crate::phase_space::{DistributionField, GridSpec};
use crate::rng::{mix, Domain, KeyedRng};

const TAU: f64 = std::f64::consts::TAU;
const DEPOSIT_CHUNK: usize = 4096;

/// Trigonometric interpolant of spatial fields on the `d`-torus.
#[derive(Debug, Clone)]
pub struct SpectralInterpolant {
    d: usize,
    n: usize,
    /// Normalized coefficients per component.
    coeffs: Vec<Vec<Complex64>>,
}

impl SpectralInterpolant {
    pub fn new(grid: &GridSpec, components: &[Vec<f64>]) -> Self {
        let shape = grid.spatial_shape();
        let scale = 1.0 / grid.n_spatial() as f64;
        let coeffs = components
            .iter()
            .map(|c| {
                let mut h = fft::to_complex(c);
                fft::fftn(&mut h, &shape);
                h.iter_mut().for_each(|z| *z *= scale);
                h
            })
            .collect();
        Self {
            d: grid.d,
            n: grid.nx,
            coeffs,
        }
    }

    pub fn components(&self) -> usize {
        self.coeffs.len()
    }

    /// Values of every component at `x`; exact at grid nodes.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let phases: Vec<Vec<Complex64>> = x
            .iter()
            .take(self.d)
            .map(|&xa| {
                (0..n)
                    .map(|j| Complex64::from_polar(1.0, fft::signed_freq(j, n) as f64 * xa))
                    .collect()
            })
            .collect();
        out.iter_mut().for_each(|o| *o = 0.0);
        let total = n.pow(self.d as u32);
        let mut idx = vec![0usize; self.d];
        let shape = vec![n; self.d];
        for flat in 0..total {
            fft::unravel(flat, &shape, &mut idx);
            let p = idx
                .iter()
                .enumerate()
                .fold(Complex64::new(1.0, 0.0), |acc, (a, &j)| acc * phases[a][j]);
            for (o, c) in out.iter_mut().zip(&self.coeffs) {
                *o += (c[flat] * p).re;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub d: usize,
    /// `N x d`, wrapped to `[0, 2 pi)`.
    pub x: Vec<f64>,
    /// `N x d`
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    /// Independent internal Brownian copies per external path (Feynman-Kac).
    pub internal_replicas: usize,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.w.iter().sum()
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.v
            .chunks(self.d)
            .zip(&self.w)
            .map(|(v, w)| 0.5 * w * v.iter().map(|c| c * c).sum::<f64>())
            .sum()
    }

    fn wrap(&mut self) {
        self.x.iter_mut().for_each(|x| *x = x.rem_euclid(TAU));
    }

    /// Snapshot as `N x (2d + 1)` rows `(x, v, w)`.
    pub fn write_snapshot(&self, stem: &Path, time: f64) -> Result<PathBuf> {
        let d = self.d;
        let mut data = Vec::with_capacity(self.len() * (2 * d + 1));
        for i in 0..self.len() {
            data.extend_from_slice(&self.x[i * d..(i + 1) * d]);
            data.extend_from_slice(&self.v[i * d..(i + 1) * d]);
            data.push(self.w[i]);
        }
        let header = SnapshotHeader {
            kind: "particles".into(),
            grid: None,
            time,
            endianness: "little".into(),
            dtype: "f64".into(),
            shape: vec![self.len(), 2 * d + 1],
            data: String::new(),
        };
        write_raw(stem, header, &data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    GridWeighted,
    RejectionSampled,
}

/// `grid_weighted` places one particle per phase-space node (`n` is ignored);
/// `rejection_sampled` draws `n` unit-weight particles from `f0`.
pub fn init_particles(
    f0: &DistributionField,
    n: usize,
    strategy: InitStrategy,
    seed: u64,
) -> Result<ParticleEnsemble> {
    let g = f0.grid;
    let d = g.d;
    let nvd = g.n_velocity();
    match strategy {
        InitStrategy::GridWeighted => {
            let mut x = Vec::with_capacity(g.len() * d);
            let mut v = Vec::with_capacity(g.len() * d);
            let (mut xb, mut vb) = (vec![0.0; d], vec![0.0; d]);
            for ix in 0..g.n_spatial() {
                g.x_coords(ix, &mut xb);
                for iv in 0..nvd {
                    g.v_coords(iv, &mut vb);
                    x.extend_from_slice(&xb);
                    v.extend_from_slice(&vb);
                }
            }
            let cell = g.cell_volume();
            Ok(ParticleEnsemble {
                d,
                x,
                v,
                w: f0.values.iter().map(|f| f * cell).collect(),
                internal_replicas: 1,
            })
        }
        InitStrategy::RejectionSampled => {
            if n == 0 {
                return Err(Error::Config("particle count N must be >= 1".into()));
            }
            if let Some(i) = f0.values.iter().position(|&f| f < 0.0) {
                return Err(Error::NegativeDensity(i));
            }
            let fmax = f0.values.iter().copied().fold(0.0, f64::max);
            if fmax <= 0.0 {
                return Err(Error::Domain("cannot sample from a zero density".into()));
            }
            let mut rng = KeyedRng::new(seed, 0, Domain::Sampling);
            let (dx, dv) = (g.dx(), g.dv());
            let mut x = Vec::with_capacity(n * d);
            let mut v = Vec::with_capacity(n * d);
            let (mut xb, mut vb) = (vec![0.0; d], vec![0.0; d]);
            let mut draw = 0u64;
            while x.len() < n * d {
                let cell = ((rng.uniform(0, draw) * g.len() as f64) as usize).min(g.len() - 1);
                let accept = rng.uniform(1, draw) * fmax < f0.values[cell];
                if accept {
                    g.x_coords(cell / nvd, &mut xb);
                    g.v_coords(cell % nvd, &mut vb);
                    for a in 0..d {
                        let jx = rng.uniform(2 + a as u64, draw) - 0.5;
                        let jv = rng.uniform(5 + a as u64, draw) - 0.5;
                        x.push((xb[a] + jx * dx).rem_euclid(TAU));
                        v.push(vb[a] + jv * dv);
                    }
                }
                draw += 1;
            }
            let mass = f0.mass();
            Ok(ParticleEnsemble {
                d,
                x,
                v,
                w: vec![mass / n as f64; n],
                internal_replicas: 1,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    StratonovichHeun,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushConfig {
    pub nu: f64,
    pub dt: f64,
    pub scheme: Scheme,
    /// Integrate `-nu V` exactly as `V e^{-nu dt}` (Euler-Maruyama only).
    pub exact_friction: bool,
}

/// External inputs for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct Forcing<'a> {
    /// Deterministic acceleration `a(X)` (already includes cutoff and mollifier).
    pub drift: Option<&'a SpectralInterpolant>,
    /// Basis and colored increments `sigma_k Delta W^(k)`.
    pub noise: Option<(&'a BasisSet, &'a [f64])>,
    /// Magnetic basis, colored increments and speed of light (`d = 3`).
    pub magnetic: Option<(&'a BasisSet, &'a [f64], f64)>,
    /// Internal Brownian path and the step to draw from it.
    pub internal: Option<(&'a NoisePath, usize)>,
}

fn internal_id(particle: usize, axis: usize) -> u64 {
    mix(&[particle as u64, axis as u64])
}

fn accel(forcing: &Forcing, x: &[f64], out: &mut [f64]) {
    match forcing.drift {
        Some(e) => e.eval(x, out),
        None => out.iter_mut().for_each(|o| *o = 0.0),
    }
}

fn kick(forcing: &Forcing, x: &[f64], out: &mut [f64]) {
    match forcing.noise {
        Some((basis, incs)) => basis.eval_sum(incs, x, out),
        None => out.iter_mut().for_each(|o| *o = 0.0),
    }
}

/// Advance every particle by one step.
pub fn push(ens: &mut ParticleEnsemble, forcing: &Forcing, cfg: &PushConfig) -> Result<()> {
    let d = ens.d;
    let (nu, dt) = (cfg.nu, cfg.dt);
    if let Some((b, _)) = forcing.noise {
        if b.d != d {
            return Err(Error::UnsupportedDimension(b.d));
        }
    }
    if forcing.magnetic.is_some() && d != 3 {
        return Err(Error::Domain(format!("magnetic noise needs d = 3 (got d = {d})")));
    }
    let amp = (2.0 * nu).sqrt();
    let x_all = &mut ens.x;
    let v_all = &mut ens.v;
    x_all
        .par_chunks_mut(d)
        .zip(v_all.par_chunks_mut(d))
        .enumerate()
        .for_each(|(p, (x, v))| {
            let mut internal = vec![0.0; d];
            if let Some((path, step)) = forcing.internal {
                if nu > 0.0 {
                    let mut rng = path.rng();
                    for (a, w) in internal.iter_mut().enumerate() {
                        *w = amp * path.increment_with(&mut rng, step, internal_id(p, a));
                    }
                }
            }
            let mut a0 = vec![0.0; d];
            let mut k0 = vec![0.0; d];
            accel(forcing, x, &mut a0);
            kick(forcing, x, &mut k0);
            match cfg.scheme {
                Scheme::EulerMaruyama => {
                    let damp = if cfg.exact_friction { (-nu * dt).exp() } else { 1.0 - nu * dt };
                    for c in 0..d {
                        let vc = v[c];
                        x[c] += vc * dt;
                        v[c] = damp * vc + a0[c] * dt + k0[c] + internal[c];
                    }
                }
                Scheme::StratonovichHeun => {
                    let xp: Vec<f64> = (0..d).map(|c| x[c] + v[c] * dt).collect();
                    let vp: Vec<f64> = (0..d)
                        .map(|c| v[c] + (a0[c] - nu * v[c]) * dt + k0[c] + internal[c])
                        .collect();
                    let mut a1 = vec![0.0; d];
                    let mut k1 = vec![0.0; d];
                    accel(forcing, &xp, &mut a1);
                    kick(forcing, &xp, &mut k1);
                    for c in 0..d {
                        let vc = v[c];
                        x[c] += 0.5 * (vc + vp[c]) * dt;
                        v[c] = vc
                            + 0.5 * ((a0[c] - nu * vc) + (a1[c] - nu * vp[c])) * dt
                            + 0.5 * (k0[c] + k1[c])
                            + internal[c];
                    }
                }
            }
            if let Some((basis, incs, c)) = forcing.magnetic {
                let mut b = [0.0; 3];
                basis.eval_sum(incs, x, &mut b);
                let r = rotate_magnetic(v, &b, c);
                v.copy_from_slice(&r);
            }
        });
    if let Some(i) = ens.v.iter().position(|v| !v.is_finite()) {
        return Err(Error::ParticleNan(i / d));
    }
    ens.wrap();
    Ok(())
}

/// Cloud-in-cell deposition; `sum rho dx^d == sum w`.
pub fn deposit_density(ens: &ParticleEnsemble, grid: &GridSpec) -> Vec<f64> {
    let d = grid.d;
    let n = grid.nx;
    let dx = grid.dx();
    let nsp = grid.n_spatial();
    let corners = 1usize << d;
    let partial: Vec<Vec<f64>> = ens
        .x
        .par_chunks(DEPOSIT_CHUNK * d)
        .zip(ens.w.par_chunks(DEPOSIT_CHUNK))
        .map(|(xs, ws)| {
            let mut buf = vec![0.0; nsp];
            let mut base = vec![0usize; d];
            let mut frac = vec![0.0; d];
            for (x, &w) in xs.chunks(d).zip(ws) {
                for a in 0..d {
                    let s = x[a].rem_euclid(TAU) / dx;
                    let i = s.floor();
                    base[a] = (i as usize) % n;
                    frac[a] = s - i;
                }
                for corner in 0..corners {
                    let mut flat = 0usize;
                    let mut weight = w;
                    for a in 0..d {
                        let up = (corner >> a) & 1 == 1;
                        let i = if up { (base[a] + 1) % n } else { base[a] };
                        weight *= if up { frac[a] } else { 1.0 - frac[a] };
                        flat = flat * n + i;
                    }
                    buf[flat] += weight;
                }
            }
            buf
        })
        .collect();
    let mut rho = vec![0.0; nsp];
    for buf in &partial {
        rho.iter_mut().zip(buf).for_each(|(r, b)| *r += b);
    }
    let inv = 1.0 / grid.x_cell_volume();
    rho.iter_mut().for_each(|r| *r *= inv);
    rho
}

/// One self-consistent particle-in-cell step: deposit, solve, push.
///
/// This is the physically coupled mode; the iteration scheme uses frozen
/// fields instead.
pub fn pic_step(
    ens: &mut ParticleEnsemble,
    grid: &GridSpec,
    kernel: &Kernel,
    forcing: Forcing,
    cfg: &PushConfig,
) -> Result<f64> {
    let rho = deposit_density(ens, grid);
    let sol = solve_kernel(grid, &rho, kernel)?;
    let energy = sol.energy(grid);
    let interp = SpectralInterpolant::new(grid, &sol.e);
    let forcing = Forcing {
        drift: Some(&interp),
        ..forcing
    };
    push(ens, &forcing, cfg)?;
    Ok(energy)
}

/// Field applied during step `n`; one entry means a static field.
#[derive(Debug, Clone)]
pub struct FrozenDrift {
    pub fields: Vec<SpectralInterpolant>,
}

impl FrozenDrift {
    pub fn new(grid: &GridSpec, fields: &[DriftField]) -> Self {
        Self {
            fields: fields.iter().map(|f| SpectralInterpolant::new(grid, f)).collect(),
        }
    }

    pub fn at(&self, step: usize) -> Option<&SpectralInterpolant> {
        match self.fields.len() {
            0 => None,
            1 => Some(&self.fields[0]),
            n => Some(&self.fields[step.min(n - 1)]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FkConfig {
    /// Internal Brownian replicas per node.
    pub replicas: usize,
    pub nu: f64,
    /// Each noise step is split into `2^refine` backward sub-steps on the
    /// bridged noise path.
    pub refine: u32,
    pub internal_seed: u64,
}

#[derive(Debug, Clone)]
pub struct FkResult {
    pub field: DistributionField,
    pub warnings: Vec<String>,
}

/// Trigonometric interpolant of a distribution in `(x, v)`; zero outside the
/// velocity box.
struct PhaseInterpolant {
    grid: GridSpec,
    coeffs: Vec<Complex64>,
}

impl PhaseInterpolant {
    fn new(f: &DistributionField) -> Self {
        let mut coeffs = fft::to_complex(&f.values);
        fft::fftn(&mut coeffs, &f.grid.shape());
        let scale = 1.0 / f.grid.len() as f64;
        coeffs.iter_mut().for_each(|z| *z *= scale);
        Self {
            grid: f.grid,
            coeffs,
        }
    }

    fn eval(&self, x: &[f64], v: &[f64]) -> f64 {
        let g = &self.grid;
        let d = g.d;
        if v.iter().any(|c| c.abs() >= g.v_max) {
            return 0.0;
        }
        let shape = g.shape();
        let phases: Vec<Vec<Complex64>> = (0..2 * d)
            .map(|a| {
                let n = shape[a];
                (0..n)
                    .map(|j| {
                        if a < d {
                            Complex64::from_polar(1.0, fft::signed_freq(j, n) as f64 * x[a])
                        } else {
                            Complex64::from_polar(1.0, g.v_wavenumber(j) * (v[a - d] + g.v_max))
                        }
                    })
                    .collect()
            })
            .collect();
        let mut idx = vec![0usize; 2 * d];
        let mut s = 0.0;
        for (flat, c) in self.coeffs.iter().enumerate() {
            fft::unravel(flat, &shape, &mut idx);
            let p = idx
                .iter()
                .enumerate()
                .fold(Complex64::new(1.0, 0.0), |acc, (a, &j)| acc * phases[a][j]);
            s += (c * p).re;
        }
        s
    }
}

/// Mild solution of the frozen-field linear problem at time `steps * path.dt()`
/// by averaging `f0` over backward stochastic characteristics.
///
/// Each backward sub-step inverts the forward split map
/// `x += v h/2; v += (a(x) - nu v) h + sigma(x) dW + sqrt(2 nu) dW~; x += v h/2`,
/// with friction reversed exactly as `e^{nu h}`; the result is weighted by
/// `e^{d nu t}`.
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac_density(
    f0: &DistributionField,
    drift: &FrozenDrift,
    noise: Option<(&BasisSet, &ColoringTable)>,
    path: &NoisePath,
    steps: usize,
    cfg: &FkConfig,
) -> Result<FkResult> {
    if cfg.replicas < 1 {
        return Err(Error::Config("Feynman-Kac needs at least one replica".into()));
    }
    let mut warnings = Vec::new();
    if cfg.nu == 0.0 && cfg.replicas > 1 {
        warnings.push("nu = 0: internal flow is deterministic, replicas are redundant".to_string());
    }
    let g = f0.grid;
    let d = g.d;
    let fine = path.refined(cfg.refine);
    let sub = 1usize << cfg.refine;
    let total = steps * sub;
    if steps > path.n_steps() {
        return Err(Error::Domain(format!(
            "reconstruction at step {steps} beyond noise horizon {}",
            path.n_steps()
        )));
    }
    let h = fine.dt();
    let t = steps as f64 * path.dt();
    let internal = NoisePath {
        seed: cfg.internal_seed,
        realization: path.realization,
        ..fine
    }
    .with_domain(Domain::InternalNoise);

    let colored: Vec<Vec<f64>> = match noise {
        Some((basis, table)) => (0..total)
            .map(|k| fine.colored_increments(k, basis, table))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let interp = PhaseInterpolant::new(f0);
    let weight = (d as f64 * cfg.nu * t).exp();
    let grow = (cfg.nu * h).exp();
    let amp = (2.0 * cfg.nu).sqrt();
    let nvd = g.n_velocity();

    let values: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map(|node| {
            let (mut x0, mut v0) = (vec![0.0; d], vec![0.0; d]);
            g.x_coords(node / nvd, &mut x0);
            g.v_coords(node % nvd, &mut v0);
            let mut acc = 0.0;
            let mut a = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut rng = internal.rng();
            for r in 0..cfg.replicas {
                let (mut x, mut v) = (x0.clone(), v0.clone());
                for s in (0..total).rev() {
                    for c in 0..d {
                        x[c] -= 0.5 * h * v[c];
                    }
                    match drift.at(s / sub) {
                        Some(e) => e.eval(&x, &mut a),
                        None => a.iter_mut().for_each(|z| *z = 0.0),
                    }
                    match noise {
                        Some((basis, _)) => basis.eval_sum(&colored[s], &x, &mut k),
                        None => k.iter_mut().for_each(|z| *z = 0.0),
                    }
                    for c in 0..d {
                        let mut vc = grow * v[c] - a[c] * h - k[c];
                        if cfg.nu > 0.0 {
                            let id = mix(&[node as u64, r as u64, c as u64]);
                            vc += amp * internal.increment_with(&mut rng, s, id);
                        }
                        v[c] = vc;
                        x[c] -= 0.5 * h * v[c];
                    }
                }
                acc += interp.eval(&x, &v);
            }
            weight * acc / cfg.replicas as f64
        })
        .collect();
    let mut field = DistributionField::from_values(g, values)?;
    field.time = t;
    Ok(FkResult { field, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeMethod {
    Shoelace,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDiagnostics {
    pub volume_ratio: f64,
    /// Half width of the 95% interval (zero for the polygon estimate).
    pub ci_half_width: f64,
    pub method: VolumeMethod,
    pub self_intersection: bool,
    /// Mean `|V|^2` of the advected samples.
    pub mean_speed_sq: f64,
}

/// Phase-space map used by the volume check: `x += v dt`, then
/// `v += a(x) dt + sigma(x) dW`. Both halves are shears, so the discrete map
/// is exactly volume preserving.
#[derive(Debug, Clone, Copy)]
pub struct FlowSpec<'a> {
    pub drift: Option<&'a SpectralInterpolant>,
    pub noise: Option<(&'a BasisSet, &'a ColoringTable)>,
    pub path: &'a NoisePath,
    pub steps: usize,
}

impl FlowSpec<'_> {
    fn increments(&self) -> Result<Vec<Vec<f64>>> {
        match self.noise {
            Some((basis, table)) => (0..self.steps)
                .map(|s| self.path.colored_increments(s, basis, table))
                .collect(),
            None => Ok(Vec::new()),
        }
    }

    fn map(&self, incs: &[Vec<f64>], x: &mut [f64], v: &mut [f64]) {
        let d = x.len();
        let dt = self.path.dt();
        let mut a = vec![0.0; d];
        let mut k = vec![0.0; d];
        for s in 0..self.steps {
            for c in 0..d {
                x[c] += v[c] * dt;
            }
            match self.drift {
                Some(e) => e.eval(x, &mut a),
                None => a.iter_mut().for_each(|z| *z = 0.0),
            }
            match self.noise {
                Some((basis, _)) => basis.eval_sum(&incs[s], x, &mut k),
                None => k.iter_mut().for_each(|z| *z = 0.0),
            }
            for c in 0..d {
                v[c] += a[c] * dt + k[c];
            }
        }
    }
}

fn shoelace(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
}

fn segments_cross(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let orient = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
    };
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn self_intersects(pts: &[(f64, f64)]) -> bool {
    let n = pts.len();
    let seg = |i: usize| (pts[i], pts[(i + 1) % n]);
    let bbox = |i: usize| {
        let (a, b) = seg(i);
        (a.0.min(b.0), a.0.max(b.0), a.1.min(b.1), a.1.max(b.1))
    };
    let boxes: Vec<_> = (0..n).map(bbox).collect();
    (0..n).into_par_iter().any(|i| {
        let bi = boxes[i];
        (i + 2..n).any(|j| {
            if i == 0 && j == n - 1 {
                return false;
            }
            let bj = boxes[j];
            if bi.1 < bj.0 || bj.1 < bi.0 || bi.3 < bj.2 || bj.3 < bi.2 {
                return false;
            }
            let (p1, p2) = seg(i);
            let (q1, q2) = seg(j);
            segments_cross(p1, p2, q1, q2)
        })
    })
}

/// Monte Carlo mean of the flow Jacobian determinant over the box.
fn jacobian_volume(
    flow: &FlowSpec,
    incs: &[Vec<f64>],
    lo: &[f64],
    hi: &[f64],
    samples: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let d = lo.len() / 2;
    let mut rng = KeyedRng::new(seed, 0, Domain::Sampling);
    let points: Vec<Vec<f64>> = (0..samples)
        .map(|i| {
            (0..2 * d)
                .map(|a| lo[a] + (hi[a] - lo[a]) * rng.uniform(a as u64, i as u64))
                .collect()
        })
        .collect();
    let h = 1e-6;
    let results: Vec<(f64, f64)> = points
        .par_iter()
        .map(|p| {
            let eval = |q: &[f64]| {
                let (mut x, mut v) = (q[..d].to_vec(), q[d..].to_vec());
                flow.map(incs, &mut x, &mut v);
                x.extend(v);
                x
            };
            let base = eval(p);
            let speed: f64 = base[d..].iter().map(|c| c * c).sum();
            let n = 2 * d;
            let mut jac = vec![0.0; n * n];
            for col in 0..n {
                let mut qp = p.clone();
                let mut qm = p.clone();
                qp[col] += h;
                qm[col] -= h;
                let (fp, fm) = (eval(&qp), eval(&qm));
                for row in 0..n {
                    jac[row * n + col] = (fp[row] - fm[row]) / (2.0 * h);
                }
            }
            (determinant(&mut jac, n), speed)
        })
        .collect();
    let m = samples as f64;
    let mean = results.iter().map(|r| r.0).sum::<f64>() / m;
    let var = results.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let speed = results.iter().map(|r| r.1).sum::<f64>() / m;
    (mean, 1.96 * (var / m).sqrt(), speed)
}

fn determinant(a: &mut [f64], n: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap_or(col);
        if a[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for r in col + 1..n {
            let factor = a[r * n + col] / p;
            for k in col..n {
                a[r * n + k] -= factor * a[col * n + k];
            }
        }
    }
    det
}

/// Advect a phase-space box (`lo`, `hi` are `2d` corner coordinates) and
/// compare its volume with the initial one. For `d = 1` the boundary is
/// sampled with `samples` points and the area taken by the shoelace formula;
/// a self-intersecting image, or `d >= 2`, falls back to a Monte Carlo mean
/// of the Jacobian determinant.
pub fn flow_volume_check(
    lo: &[f64],
    hi: &[f64],
    flow: &FlowSpec,
    samples: usize,
    seed: u64,
) -> Result<FlowDiagnostics> {
    if lo.len() != hi.len() || lo.len() % 2 != 0 || lo.is_empty() {
        return Err(Error::Shape {
            expected: "2d box corners".into(),
            got: format!("{} and {}", lo.len(), hi.len()),
        });
    }
    if samples < 4 {
        return Err(Error::Config("volume check needs at least 4 samples".into()));
    }
    let d = lo.len() / 2;
    let incs = flow.increments()?;
    if d == 1 {
        let per_side = samples / 4;
        let corners = [(lo[0], lo[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo[0], hi[1])];
        let mut pts = Vec::with_capacity(4 * per_side);
        for s in 0..4 {
            let (a, b) = (corners[s], corners[(s + 1) % 4]);
            for i in 0..per_side {
                let u = i as f64 / per_side as f64;
                pts.push((a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1)));
            }
        }
        let area0 = shoelace(&pts);
        let moved: Vec<(f64, f64)> = pts
            .par_iter()
            .map(|&(x, v)| {
                let (mut xs, mut vs) = ([x], [v]);
                flow.map(&incs, &mut xs, &mut vs);
                (xs[0], vs[0])
            })
            .collect();
        let mean_speed_sq = moved.iter().map(|p| p.1 * p.1).sum::<f64>() / moved.len() as f64;
        if !self_intersects(&moved) {
            return Ok(FlowDiagnostics {
                volume_ratio: shoelace(&moved) / area0,
                ci_half_width: 0.0,
                method: VolumeMethod::Shoelace,
                self_intersection: false,
                mean_speed_sq,
            });
        }
        let (ratio, ci, speed) = jacobian_volume(flow, &incs, lo, hi, samples, seed);
        return Ok(FlowDiagnostics {
            volume_ratio: ratio,
            ci_half_width: ci,
            method: VolumeMethod::MonteCarlo,
            self_intersection: true,
            mean_speed_sq: speed,
        });
    }
    let (ratio, ci, speed) = jacobian_volume(flow, &incs, lo, hi, samples, seed);
    Ok(FlowDiagnostics {
        volume_ratio: ratio,
        ci_half_width: ci,
        method: VolumeMethod::MonteCarlo,
        self_intersection: false,
        mean_speed_sq: speed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_model::{build_basis, coloring_law, sample_field_increment, ColoringLaw};
    use crate::phase_space::{density, maxwellian};

    fn grid1() -> GridSpec {
        GridSpec::new(1, 16, 32, 6.0).unwrap()
    }

    fn ens_of(x: Vec<f64>, v: Vec<f64>) -> ParticleEnsemble {
        let n = x.len();
        ParticleEnsemble {
            d: 1,
            x,
            v,
            w: vec![1.0; n],
            internal_replicas: 1,
        }
    }

    #[test]
    fn interpolant_is_exact_at_nodes_and_for_band_limited_fields() {
        let g = grid1();
        let vals: Vec<f64> = (0..16).map(|i| (2.0 * g.x_node(i)).sin() + 0.3).collect();
        let it = SpectralInterpolant::new(&g, &[vals.clone()]);
        let mut out = [0.0];
        for i in 0..16 {
            it.eval(&[g.x_node(i)], &mut out);
            assert!((out[0] - vals[i]).abs() < 1e-13);
        }
        it.eval(&[0.123], &mut out);
        assert!((out[0] - ((0.246f64).sin() + 0.3)).abs() < 1e-13);
    }

    #[test]
    fn grid_weighted_totals() {
        let g = grid1();
        let f = DistributionField::from_fn(g, |x, v| (1.0 + 0.2 * x[0].cos()) * maxwellian(v));
        let ens = init_particles(&f, 0, InitStrategy::GridWeighted, 0).unwrap();
        assert!((ens.total_weight() - f.mass()).abs() < 1e-12);
        let uniform = DistributionField::from_fn(g, |_, _| 0.01);
        let e = init_particles(&uniform, 0, InitStrategy::GridWeighted, 0).unwrap();
        assert!(e.w.iter().all(|&w| w == e.w[0]));
        let rho = deposit_density(&ens, &g);
        for (a, b) in rho.iter().zip(density(&f)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejection_sampling_moments_and_sign_check() {
        let g = GridSpec::new(1, 8, 128, 8.0).unwrap();
        let f = DistributionField::from_fn(g, |_, v| maxwellian(v));
        let n = 20_000;
        let ens = init_particles(&f, n, InitStrategy::RejectionSampled, 3).unwrap();
        let var = ens.v.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let sd = (2.0f64 / n as f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * sd + g.dv() * g.dv() / 12.0, "var = {var}");
        let mut signed = f.clone();
        signed.values[5] = -1e-3;
        assert!(matches!(
            init_particles(&signed, 10, InitStrategy::RejectionSampled, 3),
            Err(Error::NegativeDensity(5))
        ));
    }

    #[test]
    fn free_streaming_and_exact_friction() {
        let mut ens = ens_of(vec![0.5, 1.0], vec![0.3, -2.0]);
        let cfg = PushConfig {
            nu: 0.0,
            dt: 0.1,
            scheme: Scheme::EulerMaruyama,
            exact_friction: false,
        };
        push(&mut ens, &Forcing::default(), &cfg).unwrap();
        assert!((ens.x[0] - 0.53).abs() < 1e-15);
        assert!((ens.x[1] - 0.8).abs() < 1e-15);
        assert_eq!(ens.v, vec![0.3, -2.0]);
        let cfg = PushConfig {
            nu: 0.7,
            exact_friction: true,
            ..cfg
        };
        push(&mut ens, &Forcing::default(), &cfg).unwrap();
        assert!((ens.v[1] / -2.0 - (-0.07f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn single_mode_kick_matches_field_sampler() {
        let basis = build_basis(1, 1).unwrap();
        let table = coloring_law(&ColoringLaw::power(1.0), 4, &basis).unwrap();
        let path = NoisePath::new(9, 0, 0.05, 2);
        let x = 1.234;
        let mut ens = ens_of(vec![x], vec![0.0]);
        let incs = path.colored_increments(0, &basis, &table).unwrap();
        let forcing = Forcing {
            noise: Some((&basis, &incs)),
            ..Forcing::default()
        };
        let cfg = PushConfig {
            nu: 0.0,
            dt: 0.05,
            scheme: Scheme::EulerMaruyama,
            exact_friction: false,
        };
        push(&mut ens, &forcing, &cfg).unwrap();
        let expected = sample_field_increment(&path, 0, &basis, &table, &[x]).unwrap();
        assert!((ens.v[0] - expected[0]).abs() < 1e-12);
    }

    #[test]
    fn deposit_conserves_weight() {
        let g = grid1();
        let mut rng = KeyedRng::new(1, 0, Domain::TestData);
        let n = 10_000;
        let x: Vec<f64> = (0..n).map(|i| TAU * rng.uniform(0, i)).collect();
        let ens = ens_of(x, vec![0.0; n as usize]);
        let rho = deposit_density(&ens, &g);
        let total: f64 = rho.iter().sum::<f64>() * g.x_cell_volume();
        assert!((total - n as f64).abs() < 1e-9);
        let one = ens_of(vec![g.x_node(3)], vec![0.0]);
        let r = deposit_density(&one, &g);
        assert!((r[3] * g.dx() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn magnetic_push_conserves_speed() {
        let basis = build_basis(3, 1).unwrap();
        let table = coloring_law(&ColoringLaw::power(1.0), 4, &basis).unwrap();
        let path = NoisePath::new(2, 0, 0.01, 1).with_domain(Domain::MagneticNoise);
        let incs = path.colored_increments(0, &basis, &table).unwrap();
        let mut ens = ParticleEnsemble {
            d: 3,
            x: vec![0.1, 0.2, 0.3, 1.0, 2.0, 3.0],
            v: vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.1],
            w: vec![1.0, 1.0],
            internal_replicas: 1,
        };
        let speeds = |e: &ParticleEnsemble| -> Vec<f64> {
            e.v.chunks(3).map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt()).collect()
        };
        let before = speeds(&ens);
        let forcing = Forcing {
            magnetic: Some((&basis, &incs, 1.0)),
            ..Forcing::default()
        };
        let cfg = PushConfig {
            nu: 0.0,
            dt: 0.01,
            scheme: Scheme::EulerMaruyama,
            exact_friction: false,
        };
        push(&mut ens, &forcing, &cfg).unwrap();
        for (a, b) in before.iter().zip(speeds(&ens)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fk_free_transport_pullback() {
        let g = GridSpec::new(1, 16, 32, 6.0).unwrap();
        let f0 = DistributionField::from_fn(g, |x, v| (1.0 + 0.3 * x[0].cos()) * maxwellian(v));
        let path = NoisePath::new(0, 0, 0.025, 4);
        let cfg = FkConfig {
            replicas: 1,
            nu: 0.0,
            refine: 0,
            internal_seed: 0,
        };
        let res = feynman_kac_density(&f0, &FrozenDrift { fields: vec![] }, None, &path, 4, &cfg).unwrap();
        let exact = DistributionField::from_fn(g, |x, v| (1.0 + 0.3 * (x[0] - 0.1 * v[0]).cos()) * maxwellian(v));
        for (a, b) in res.field.values.iter().zip(&exact.values) {
            assert!((a - b).abs() < 1e-6);
        }
        let bad = FkConfig { replicas: 0, ..cfg };
        assert!(feynman_kac_density(&f0, &FrozenDrift { fields: vec![] }, None, &path, 4, &bad).is_err());
        let many = FkConfig { replicas: 3, ..cfg };
        let r = feynman_kac_density(&f0, &FrozenDrift { fields: vec![] }, None, &path, 1, &many).unwrap();
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn fk_keeps_maxwellian_with_collisions() {
        let g = GridSpec::new(1, 8, 32, 7.0).unwrap();
        let f0 = DistributionField::from_fn(g, |_, v| maxwellian(v));
        let path = NoisePath::new(0, 0, 0.05, 2);
        let p = 400;
        let cfg = FkConfig {
            replicas: p,
            nu: 0.5,
            refine: 2,
            internal_seed: 17,
        };
        let res = feynman_kac_density(&f0, &FrozenDrift { fields: vec![] }, None, &path, 2, &cfg).unwrap();
        let mut worst = 0.0f64;
        for (i, val) in res.field.values.iter().enumerate() {
            let m = f0.values[i];
            worst = worst.max((val - m).abs() / maxwellian(&[0.0]));
        }
        assert!(worst < 3.0 / (p as f64).sqrt(), "worst = {worst}");
    }

    #[test]
    fn shear_flow_preserves_area() {
        let path = NoisePath::new(0, 0, 0.05, 10);
        let g = grid1();
        let e: Vec<f64> = (0..16).map(|i| 0.5 * g.x_node(i).sin()).collect();
        let interp = SpectralInterpolant::new(&g, &[e]);
        let identity = FlowSpec {
            drift: None,
            noise: None,
            path: &path,
            steps: 0,
        };
        let r = flow_volume_check(&[1.0, -0.5], &[2.0, 0.5], &identity, 400, 0).unwrap();
        assert_eq!(r.volume_ratio, 1.0);
        let shear = FlowSpec {
            drift: Some(&interp),
            noise: None,
            path: &path,
            steps: 10,
        };
        let r = flow_volume_check(&[1.0, -0.5], &[2.0, 0.5], &shear, 4000, 0).unwrap();
        assert_eq!(r.method, VolumeMethod::Shoelace);
        assert!((r.volume_ratio - 1.0).abs() < 1e-3);
        let mc = flow_volume_check(&[1.0, -0.5, 1.0, -0.5], &[2.0, 0.5, 2.0, 0.5], &FlowSpec {
            drift: None,
            noise: None,
            path: &path,
            steps: 10,
        }, 200, 1)
        .unwrap();
        assert!((mc.volume_ratio - 1.0).abs() < 1e-6);
    }
}
