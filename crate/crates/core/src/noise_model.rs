//! Colored-in-space, white-in-time external forcing.
//!
//! The forcing is `W_t(x) = sum_k sigma_k e_k(x) W_t^(k)` over the real Fourier
//! basis `e_(l,i)(x) = c_d gamma_l^i sin(l.x)` for `l` in the positive half
//! lattice and `c_d gamma_l^i cos(l.x)` for its mirror image, with
//! `c_d = sqrt(2) (2 pi)^{-d/2}` and polarization vectors satisfying
//! `gamma_{-l} = -gamma_l`. The sum is truncated at `|l|_inf <= K`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, Domain, KeyedRng};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeIndex {
    pub ell: Vec<i64>,
    /// 1-based polarization in `1..=d`.
    pub polarization: usize,
}

impl ModeIndex {
    pub fn norm(&self) -> f64 {
        (self.ell.iter().map(|c| (c * c) as f64).sum::<f64>()).sqrt()
    }

    /// Stable 64-bit identity, independent of the truncation `K`.
    pub fn id(&self) -> u64 {
        let mut words: Vec<u64> = self.ell.iter().map(|&c| c as u64).collect();
        words.push(self.polarization as u64);
        words.push(self.ell.len() as u64);
        mix(&words)
    }
}

/// Membership in the positive half lattice `Z^d_+`.
///
/// `l^(d) > 0`, or `l^(d) = 0` and `l^(1) > 0`; for `d = 3` the remaining
/// axis `l = (0, l2, 0)` is assigned by the sign of `l2`.
pub fn in_positive_half(ell: &[i64]) -> bool {
    let d = ell.len();
    if ell[d - 1] != 0 {
        return ell[d - 1] > 0;
    }
    if ell[0] != 0 {
        return ell[0] > 0;
    }
    d == 3 && ell[1] > 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    Sine,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub index: ModeIndex,
    pub gamma: [f64; 3],
    pub parity: Parity,
    pub id: u64,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Polarization vectors `gamma_l^1..gamma_l^d` for `l` in the positive half lattice.
fn canonical_polarizations(ell: &[i64]) -> Vec<[f64; 3]> {
    let len = (ell.iter().map(|c| (c * c) as f64).sum::<f64>()).sqrt();
    let hat: Vec<f64> = ell.iter().map(|&c| c as f64 / len).collect();
    match ell.len() {
        1 => vec![[hat[0], 0.0, 0.0]],
        2 => vec![[-hat[1], hat[0], 0.0], [hat[0], hat[1], 0.0]],
        _ => {
            let reference = if hat[2].abs() > 0.9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, 1.0]
            };
            let g1 = normalize(cross(&reference, &hat));
            let g2 = normalize(cross(&hat, &g1));
            vec![g1, g2, [hat[0], hat[1], hat[2]]]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub d: usize,
    pub k_max: usize,
    pub modes: Vec<Mode>,
}

impl BasisSet {
    pub fn normalization(&self) -> f64 {
        std::f64::consts::SQRT_2 * std::f64::consts::TAU.powf(-0.5 * self.d as f64)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// `e_k(x)` as a `d`-vector.
    pub fn eval(&self, mode: usize, x: &[f64], out: &mut [f64]) {
        let m = &self.modes[mode];
        let phase: f64 = m.index.ell.iter().zip(x).map(|(&l, &xi)| l as f64 * xi).sum();
        let s = self.normalization()
            * match m.parity {
                Parity::Sine => phase.sin(),
                Parity::Cosine => phase.cos(),
            };
        for (a, o) in out.iter_mut().enumerate().take(self.d) {
            *o = s * m.gamma[a];
        }
    }

    /// `sum_k coeff_k e_k(x)` accumulated into `out` (length `d`).
    pub fn eval_sum(&self, coeffs: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let c = self.normalization();
        for (m, &a) in self.modes.iter().zip(coeffs) {
            if a == 0.0 {
                continue;
            }
            let phase: f64 = m.index.ell.iter().zip(x).map(|(&l, &xi)| l as f64 * xi).sum();
            let s = a * c
                * match m.parity {
                    Parity::Sine => phase.sin(),
                    Parity::Cosine => phase.cos(),
                };
            for (axis, o) in out.iter_mut().enumerate() {
                *o += s * m.gamma[axis];
            }
        }
    }
}

/// Enumerate every `l` with `0 < |l|_inf <= K` and its `d` polarizations.
pub fn build_basis(d: usize, k_max: usize) -> Result<BasisSet> {
    if !(1..=3).contains(&d) {
        return Err(Error::UnsupportedDimension(d));
    }
    if k_max < 1 {
        return Err(Error::Domain("noise truncation K must be >= 1".into()));
    }
    let k = k_max as i64;
    let side = (2 * k + 1) as usize;
    let mut modes = Vec::new();
    for flat in 0..side.pow(d as u32) {
        let mut rem = flat;
        let mut ell = vec![0i64; d];
        for c in ell.iter_mut().rev() {
            *c = (rem % side) as i64 - k;
            rem /= side;
        }
        if ell.iter().all(|&c| c == 0) {
            continue;
        }
        let positive = in_positive_half(&ell);
        let canonical: Vec<i64> = if positive {
            ell.clone()
        } else {
            ell.iter().map(|c| -c).collect()
        };
        let sign = if positive { 1.0 } else { -1.0 };
        for (i, g) in canonical_polarizations(&canonical).into_iter().enumerate() {
            let index = ModeIndex {
                ell: ell.clone(),
                polarization: i + 1,
            };
            modes.push(Mode {
                id: index.id(),
                index,
                gamma: [sign * g[0], sign * g[1], sign * g[2]],
                parity: if positive { Parity::Sine } else { Parity::Cosine },
            });
        }
    }
    Ok(BasisSet { d, k_max, modes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum ColoringLaw {
    /// `sigma_k = amplitude |k|^{-p}`
    Power {
        p: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `sigma_k = amplitude exp(-lambda |k|^2)`
    Gaussian {
        lambda: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// Explicit table; modes not listed get `sigma = 0`.
    Custom { entries: Vec<(ModeIndex, f64)> },
    Zero,
}

fn one() -> f64 {
    1.0
}

impl ColoringLaw {
    pub fn power(p: f64) -> Self {
        Self::Power { p, amplitude: 1.0 }
    }

    pub fn gaussian(lambda: f64) -> Self {
        Self::Gaussian {
            lambda,
            amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagneticSpec {
    pub sigma_b1: ColoringLaw,
    pub sigma_b2: ColoringLaw,
    /// Speed of light.
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub d: usize,
    pub k_max: usize,
    pub coloring: ColoringLaw,
    /// Regularity target `sigma'` of the weighted coloring sum.
    #[serde(default = "default_sigma_prime")]
    pub sigma_prime: u32,
    #[serde(default)]
    pub magnetic: Option<MagneticSpec>,
}

fn default_sigma_prime() -> u32 {
    4
}

/// Per-mode coefficients aligned with `BasisSet::modes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoringTable {
    pub sigma: Vec<f64>,
    /// `sum_k |k|^{2 sigma'} sigma_k^2` over the truncated mode set.
    pub weighted_sum: f64,
    /// `(shell, sum)` with shell `n` collecting `round(|l|) = n`, for complete shells `n <= K`.
    pub shell_sums: Vec<(usize, f64)>,
}

impl ColoringTable {
    pub fn zero(basis: &BasisSet) -> Self {
        Self {
            sigma: vec![0.0; basis.len()],
            weighted_sum: 0.0,
            shell_sums: (1..=basis.k_max).map(|n| (n, 0.0)).collect(),
        }
    }

    /// Consecutive shell-sum ratios; all `< 1` means a decaying tail.
    pub fn shell_ratios(&self) -> Vec<f64> {
        self.shell_sums
            .windows(2)
            .filter(|w| w[0].1 > 0.0)
            .map(|w| w[1].1 / w[0].1)
            .collect()
    }

    pub fn tail_decays(&self) -> bool {
        self.shell_ratios().iter().all(|&r| r < 1.0)
    }

    pub fn write_csv(&self, basis: &BasisSet, mut w: impl Write) -> Result<()> {
        let mut header: Vec<String> = (1..=basis.d).map(|a| format!("ell_{a}")).collect();
        header.push("polarization".into());
        header.push("sigma".into());
        writeln!(w, "{}", header.join(","))?;
        for (m, s) in basis.modes.iter().zip(&self.sigma) {
            let ell: Vec<String> = m.index.ell.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{},{},{:e}", ell.join(","), m.index.polarization, s)?;
        }
        Ok(())
    }
}

/// Read a coloring CSV (`ell_1..ell_d,polarization,sigma`) as a custom law.
pub fn read_coloring_csv(d: usize, r: impl BufRead) -> Result<ColoringLaw> {
    let mut entries = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != d + 2 {
            return Err(Error::Config(format!(
                "coloring csv line {}: expected {} columns, found {}",
                lineno + 1,
                d + 2,
                cols.len()
            )));
        }
        let bad = |what: &str| Error::Config(format!("coloring csv line {}: bad {what}", lineno + 1));
        let ell = cols[..d]
            .iter()
            .map(|c| c.parse::<i64>().map_err(|_| bad("ell")))
            .collect::<Result<Vec<_>>>()?;
        let polarization = cols[d].parse::<usize>().map_err(|_| bad("polarization"))?;
        let sigma = cols[d + 1].parse::<f64>().map_err(|_| bad("sigma"))?;
        entries.push((ModeIndex { ell, polarization }, sigma));
    }
    Ok(ColoringLaw::Custom { entries })
}

pub fn coloring(spec: &NoiseSpec, basis: &BasisSet) -> Result<ColoringTable> {
    coloring_law(&spec.coloring, spec.sigma_prime, basis)
}

pub fn coloring_law(law: &ColoringLaw, sigma_prime: u32, basis: &BasisSet) -> Result<ColoringTable> {
    if basis.k_max < 1 {
        return Err(Error::Domain("noise truncation K must be >= 1".into()));
    }
    let sigma: Vec<f64> = match law {
        ColoringLaw::Power { p, amplitude } => basis
            .modes
            .iter()
            .map(|m| amplitude * m.index.norm().powf(-p))
            .collect(),
        ColoringLaw::Gaussian { lambda, amplitude } => {
            if *lambda < 0.0 {
                return Err(Error::InvalidColoring(format!("lambda = {lambda} < 0")));
            }
            basis
                .modes
                .iter()
                .map(|m| amplitude * (-lambda * m.index.norm().powi(2)).exp())
                .collect()
        }
        ColoringLaw::Custom { entries } => {
            if let Some((m, s)) = entries.iter().find(|(_, s)| *s < 0.0 || !s.is_finite()) {
                return Err(Error::InvalidColoring(format!(
                    "coefficient {s} for mode {:?}/{} is not a nonnegative number",
                    m.ell, m.polarization
                )));
            }
            basis
                .modes
                .iter()
                .map(|m| {
                    entries
                        .iter()
                        .find(|(idx, _)| *idx == m.index)
                        .map_or(0.0, |(_, s)| *s)
                })
                .collect()
        }
        ColoringLaw::Zero => vec![0.0; basis.len()],
    };
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidColoring(format!("coefficient {s} is not a nonnegative number")));
    }
    let weight = |m: &Mode, s: f64| m.index.norm().powi(2 * sigma_prime as i32) * s * s;
    let weighted_sum = basis
        .modes
        .iter()
        .zip(&sigma)
        .map(|(m, &s)| weight(m, s))
        .sum();
    let mut shells = vec![0.0; basis.k_max + 1];
    for (m, &s) in basis.modes.iter().zip(&sigma) {
        let n = m.index.norm().round() as usize;
        if n <= basis.k_max {
            shells[n] += weight(m, s);
        }
    }
    let shell_sums = (1..=basis.k_max).map(|n| (n, shells[n])).collect();
    Ok(ColoringTable {
        sigma,
        weighted_sum,
        shell_sums,
    })
}

/// Seeded Brownian increments on a dyadic time grid.
///
/// Level-0 increments are `sqrt(base_dt) Z`; each finer level splits a parent
/// increment by a Brownian bridge, so increments at any level sum exactly
/// (up to round-off) to their coarse parents and every draw is a pure
/// function of `(seed, realization, mode, level, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub seed: u64,
    pub realization: u64,
    pub base_dt: f64,
    pub base_steps: usize,
    pub level: u32,
    #[serde(skip, default = "external_domain")]
    pub domain: Domain,
}

fn external_domain() -> Domain {
    Domain::ExternalNoise
}

impl NoisePath {
    pub fn new(seed: u64, realization: u64, dt: f64, steps: usize) -> Self {
        Self {
            seed,
            realization,
            base_dt: dt,
            base_steps: steps,
            level: 0,
            domain: Domain::ExternalNoise,
        }
    }

    /// Same Brownian path, `2^levels` times finer.
    pub fn refined(&self, levels: u32) -> Self {
        Self {
            level: self.level + levels,
            ..*self
        }
    }

    pub fn with_domain(&self, domain: Domain) -> Self {
        Self { domain, ..*self }
    }

    pub fn dt(&self) -> f64 {
        self.base_dt / (1u64 << self.level) as f64
    }

    pub fn n_steps(&self) -> usize {
        self.base_steps << self.level
    }

    pub fn rng(&self) -> KeyedRng {
        KeyedRng::new(self.seed, self.realization, self.domain)
    }

    fn draw(rng: &mut KeyedRng, mode_id: u64, level: u32, index: usize) -> f64 {
        rng.normal(mode_id, ((level as u64) << 56) | index as u64)
    }

    /// Increment for `mode_id` at `step` drawn through a caller-held generator
    /// (no horizon check).
    pub fn increment_with(&self, rng: &mut KeyedRng, step: usize, mode_id: u64) -> f64 {
        self.increment_at(rng, mode_id, self.level, step)
    }

    fn increment_at(&self, rng: &mut KeyedRng, mode_id: u64, level: u32, step: usize) -> f64 {
        if level == 0 {
            return self.base_dt.sqrt() * Self::draw(rng, mode_id, 0, step);
        }
        let parent = self.increment_at(rng, mode_id, level - 1, step / 2);
        let h = self.base_dt / (1u64 << level) as f64;
        let left = 0.5 * parent + (0.5 * h).sqrt() * Self::draw(rng, mode_id, level, step / 2);
        if step % 2 == 0 {
            left
        } else {
            parent - left
        }
    }

    pub fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.n_steps() {
            return Err(Error::Domain(format!(
                "step {step} beyond noise horizon of {} steps",
                self.n_steps()
            )));
        }
        Ok(())
    }

    /// `Delta W^(k)_n` for one mode.
    pub fn increment(&self, step: usize, mode_id: u64) -> Result<f64> {
        self.check_step(step)?;
        let mut rng = self.rng();
        Ok(self.increment_at(&mut rng, mode_id, self.level, step))
    }

    /// `Delta W^(k)_n` for every mode of `basis`, in basis order.
    pub fn increments(&self, step: usize, basis: &BasisSet) -> Result<Vec<f64>> {
        self.check_step(step)?;
        let mut rng = self.rng();
        Ok(basis
            .modes
            .iter()
            .map(|m| self.increment_at(&mut rng, m.id, self.level, step))
            .collect())
    }

    /// `sigma_k Delta W^(k)_n`, skipping draws for modes with zero coefficient.
    pub fn colored_increments(&self, step: usize, basis: &BasisSet, table: &ColoringTable) -> Result<Vec<f64>> {
        self.check_step(step)?;
        let mut rng = self.rng();
        Ok(basis
            .modes
            .iter()
            .zip(&table.sigma)
            .map(|(m, &s)| {
                if s == 0.0 {
                    0.0
                } else {
                    s * self.increment_at(&mut rng, m.id, self.level, step)
                }
            })
            .collect())
    }
}

/// Basis functions pre-evaluated on a fixed set of points.
#[derive(Debug, Clone)]
pub struct GridNoise {
    pub d: usize,
    pub n_points: usize,
    /// `[mode][point][axis]`
    values: Vec<f64>,
    sigma: Vec<f64>,
}

impl GridNoise {
    /// `points` is a flat `n_points x d` array.
    pub fn new(basis: &BasisSet, table: &ColoringTable, points: &[f64]) -> Result<Self> {
        let d = basis.d;
        if points.len() % d != 0 {
            return Err(Error::Shape {
                expected: format!("multiple of d = {d}"),
                got: format!("{}", points.len()),
            });
        }
        let n_points = points.len() / d;
        let mut values = vec![0.0; basis.len() * n_points * d];
        for mode in 0..basis.len() {
            for p in 0..n_points {
                let off = (mode * n_points + p) * d;
                basis.eval(mode, &points[p * d..(p + 1) * d], &mut values[off..off + d]);
            }
        }
        Ok(Self {
            d,
            n_points,
            values,
            sigma: table.sigma.clone(),
        })
    }

    /// `sum_k sigma_k e_k(x_p) dW_k` at every point, flat `n_points x d`.
    pub fn field(&self, increments: &[f64]) -> Vec<f64> {
        let stride = self.n_points * self.d;
        let mut out = vec![0.0; stride];
        for (mode, (&s, &dw)) in self.sigma.iter().zip(increments).enumerate() {
            let a = s * dw;
            if a == 0.0 {
                continue;
            }
            let block = &self.values[mode * stride..(mode + 1) * stride];
            out.iter_mut().zip(block).for_each(|(o, e)| *o += a * e);
        }
        out
    }
}

/// `Delta W_n(x) = sum_k sigma_k e_k(x) Delta W^(k)_n` at every point of `x_grid`
/// (flat `n_points x d`); one `d`-vector per point.
pub fn sample_field_increment(
    path: &NoisePath,
    step: usize,
    basis: &BasisSet,
    table: &ColoringTable,
    x_grid: &[f64],
) -> Result<Vec<f64>> {
    if table.sigma.len() != basis.len() {
        return Err(Error::Shape {
            expected: format!("{} coloring coefficients", basis.len()),
            got: format!("{}", table.sigma.len()),
        });
    }
    let d = basis.d;
    if x_grid.len() % d != 0 {
        return Err(Error::Shape {
            expected: format!("points of dimension {d}"),
            got: format!("{} coordinates", x_grid.len()),
        });
    }
    let increments = path.increments(step, basis)?;
    let coeffs: Vec<f64> = increments.iter().zip(&table.sigma).map(|(w, s)| w * s).collect();
    let mut out = vec![0.0; x_grid.len()];
    for (p, x) in x_grid.chunks(d).enumerate() {
        basis.eval_sum(&coeffs, x, &mut out[p * d..(p + 1) * d]);
    }
    Ok(out)
}

/// `Delta W_E + (v x Delta W_B) / c` (three dimensions only).
pub fn lorentz_noise_term(v: &[f64], dw_e: &[f64], dw_b: &[f64], c: f64) -> Result<[f64; 3]> {
    if v.len() != 3 || dw_e.len() != 3 || dw_b.len() != 3 {
        return Err(Error::Domain(format!(
            "magnetic noise needs d = 3 (got d = {})",
            v.len()
        )));
    }
    if !(c > 0.0) {
        return Err(Error::Domain(format!("speed of light c = {c} must be > 0")));
    }
    let vb = cross(v, dw_b);
    Ok([
        dw_e[0] + vb[0] / c,
        dw_e[1] + vb[1] / c,
        dw_e[2] + vb[2] / c,
    ])
}

/// Exact solution of `dv = v x dB / c` over one increment: a rotation of `v`
/// about `dB` by angle `|dB| / c`. Preserves `|v|`.
pub fn rotate_magnetic(v: &[f64], dw_b: &[f64], c: f64) -> [f64; 3] {
    // dv/ds = v x b = -(b x v): rotation with angular velocity -b
    let b = [dw_b[0] / c, dw_b[1] / c, dw_b[2] / c];
    let angle = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if angle == 0.0 {
        return [v[0], v[1], v[2]];
    }
    let k = [-b[0] / angle, -b[1] / angle, -b[2] / angle];
    let (s, co) = angle.sin_cos();
    let kxv = cross(&k, v);
    let kdv = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
    [
        v[0] * co + kxv[0] * s + k[0] * kdv * (1.0 - co),
        v[1] * co + kxv[1] * s + k[1] * kdv * (1.0 - co),
        v[2] * co + kxv[2] * s + k[2] * kdv * (1.0 - co),
    ]
}
