//! Time-weighted hypocoercive energy, its dissipation rate, admissible
//! constants and regularization-rate fits.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase_space::{
    multi_indices, weighted_dot, weighted_sq, DistributionField, GridSpec, Spectrum, WeightedNormSpec,
};
use crate::rng::{Domain, KeyedRng};

/// `a = theta`, `b = theta^{m2}`, `c = theta^{m3}` for a small parameter `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoefficients {
    pub epsilon: f64,
    pub theta: f64,
    pub m2: f64,
    pub m3: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub name: String,
    /// `rhs - lhs` for `lhs <= rhs`; negative means violated.
    pub slack: f64,
    pub holds: bool,
}

impl EnergyCoefficients {
    /// Every admissibility inequality, evaluated directly in floating point.
    pub fn checks(&self) -> Vec<ConstraintCheck> {
        let (e, a, b, c) = (self.epsilon, self.a, self.b, self.c);
        let le = |name: &str, lhs: f64, rhs: f64| ConstraintCheck {
            name: name.to_string(),
            slack: rhs - lhs,
            holds: lhs <= rhs,
        };
        vec![
            le("a/eps <= 1", a / e, 1.0),
            le("b/eps^2 <= a/eps", b / (e * e), a / e),
            le("c/eps^3 <= b/eps^2", c / (e * e * e), b / (e * e)),
            le("a <= eps sqrt(b)", a, e * b.sqrt()),
            le("b <= eps sqrt(a c)", b, e * (a * c).sqrt()),
            ConstraintCheck {
                name: "0 < c < b < a".into(),
                slack: (b - c).min(a - b).min(c),
                holds: 0.0 < c && c < b && b < a,
            },
        ]
    }

    pub fn admissible(&self) -> bool {
        self.checks().iter().all(|c| c.holds)
    }
}

/// `theta = eps^8`, `m2 = 3/2`, `m3 = 7/4`. With these exponents the
/// constraint `b <= eps sqrt(ac)` holds with equality, so `b` is lowered by
/// a few ulps when rounding lands on the wrong side.
pub fn choose_constants(epsilon: f64) -> Result<EnergyCoefficients> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("epsilon = {epsilon} must lie in (0, 1)")));
    }
    let theta = epsilon.powi(8);
    let (m2, m3) = (1.5, 1.75);
    let mut k = EnergyCoefficients {
        epsilon,
        theta,
        m2,
        m3,
        a: theta,
        b: theta.powf(m2),
        c: theta.powf(m3),
    };
    for _ in 0..64 {
        if k.admissible() {
            return Ok(k);
        }
        k.b = k.b.next_down();
    }
    Err(Error::Domain(format!(
        "no admissible constants found for epsilon = {epsilon}"
    )))
}

/// Derivatives of one field, computed once per order vector.
struct Derivatives<'a> {
    spectrum: Spectrum,
    weight: Vec<f64>,
    cache: HashMap<Vec<usize>, Vec<f64>>,
    grid: &'a GridSpec,
}

impl<'a> Derivatives<'a> {
    fn new(f: &'a DistributionField, m: f64) -> Self {
        Self {
            spectrum: f.spectrum(),
            weight: f.grid.velocity_weight(m),
            cache: HashMap::new(),
            grid: &f.grid,
        }
    }

    fn get(&mut self, orders: &[usize]) -> &[f64] {
        if !self.cache.contains_key(orders) {
            let v = self.spectrum.derivative(orders);
            self.cache.insert(orders.to_vec(), v);
        }
        &self.cache[orders]
    }

    fn sq(&mut self, orders: &[usize]) -> f64 {
        let g = *self.grid;
        let w = self.weight.clone();
        weighted_sq(&g, self.get(orders), &w)
    }

    fn dot(&mut self, a: &[usize], b: &[usize]) -> f64 {
        let g = *self.grid;
        let w = self.weight.clone();
        let x = self.get(a).to_vec();
        weighted_dot(&g, &x, self.get(b), &w)
    }
}

fn bump(orders: &[usize], axis: usize) -> Vec<usize> {
    let mut o = orders.to_vec();
    o[axis] += 1;
    o
}

/// Pieces of `E_1[t, g]` for `g = d^orders f`, unweighted by `t` and coefficients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct E1Parts {
    pub l2: f64,
    pub grad_v: f64,
    pub cross: f64,
    pub grad_x: f64,
}

impl E1Parts {
    fn scaled_add(&mut self, o: &E1Parts, s: f64) {
        self.l2 += s * o.l2;
        self.grad_v += s * o.grad_v;
        self.cross += s * o.cross;
        self.grad_x += s * o.grad_x;
    }

    pub fn energy(&self, t: f64, k: &EnergyCoefficients) -> f64 {
        self.l2 + k.a * t * self.grad_v + k.b * t * t * self.cross + k.c * t.powi(3) * self.grad_x
    }

    /// The energy with the cross term dropped.
    pub fn b_free(&self, t: f64, k: &EnergyCoefficients) -> f64 {
        self.l2 + k.a * t * self.grad_v + k.c * t.powi(3) * self.grad_x
    }
}

fn e1_parts(der: &mut Derivatives, orders: &[usize], d: usize) -> E1Parts {
    let mut p = E1Parts {
        l2: der.sq(orders),
        ..E1Parts::default()
    };
    for j in 0..d {
        let ov = bump(orders, d + j);
        let ox = bump(orders, j);
        p.grad_v += der.sq(&ov);
        p.grad_x += der.sq(&ox);
        p.cross += der.dot(&ov, &ox);
    }
    p
}

/// `E_1[t, f] = ||f||^2 + a t ||grad_v f||^2 + b t^2 <grad_v f, grad_x f> + c t^3 ||grad_x f||^2`
/// in `L^2_m`.
pub fn energy_e1(t: f64, f: &DistributionField, k: &EnergyCoefficients, m: f64) -> f64 {
    let mut der = Derivatives::new(f, m);
    e1_parts(&mut der, &vec![0; 2 * f.grid.d], f.grid.d).energy(t, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyComponent {
    /// Spatial derivative order `sigma - q`.
    pub p: usize,
    /// Velocity derivative order `q`.
    pub q: usize,
    pub parts: E1Parts,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub components: Vec<EnergyComponent>,
}

impl EnergyBreakdown {
    pub fn b_free(&self, t: f64, k: &EnergyCoefficients) -> f64 {
        self.components.iter().map(|c| c.parts.b_free(t, k)).sum()
    }
}

fn multinomial(alpha: &[usize]) -> f64 {
    let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
    fact(alpha.iter().sum()) / alpha.iter().map(|&a| fact(a)).product::<f64>()
}

fn exact_order(d: usize, order: usize) -> Vec<Vec<usize>> {
    multi_indices(d, order)
        .into_iter()
        .filter(|a| a.iter().sum::<usize>() == order)
        .collect()
}

fn check_sigma(grid: &GridSpec, sigma: usize) -> Result<()> {
    WeightedNormSpec::new(sigma + 2, 0.0).validate(grid)
}

/// `E_sigma[t, f] = sum_q E_1[t, grad_x^{sigma-q} grad_v^q f]` with full
/// tensor contractions, i.e. multi-indices weighted by their multinomial
/// multiplicities.
pub fn energy_esigma(
    t: f64,
    f: &DistributionField,
    k: &EnergyCoefficients,
    sigma: usize,
    m: f64,
) -> Result<EnergyBreakdown> {
    check_sigma(&f.grid, sigma)?;
    let d = f.grid.d;
    let mut der = Derivatives::new(f, m);
    let mut components = Vec::with_capacity(sigma + 1);
    for q in 0..=sigma {
        let p = sigma - q;
        let mut parts = E1Parts::default();
        for alpha in exact_order(d, p) {
            for beta in exact_order(d, q) {
                let orders: Vec<usize> = alpha.iter().chain(&beta).copied().collect();
                let w = multinomial(&alpha) * multinomial(&beta);
                parts.scaled_add(&e1_parts(&mut der, &orders, d), w);
            }
        }
        components.push(EnergyComponent {
            p,
            q,
            energy: parts.energy(t, k),
            parts,
        });
    }
    Ok(EnergyBreakdown {
        total: components.iter().map(|c| c.energy).sum(),
        components,
    })
}

/// `D_sigma = sum_{|alpha|+|beta| <= sigma} ||grad_v d f||^2 + a t ||grad_v^2 d f||^2
/// + (b/2) t^2 ||grad_x d f||^2 + c t^3 ||grad_v grad_x d f||^2`.
pub fn dissipation_dsigma(
    t: f64,
    f: &DistributionField,
    k: &EnergyCoefficients,
    sigma: usize,
    m: f64,
) -> Result<f64> {
    check_sigma(&f.grid, sigma)?;
    let d = f.grid.d;
    let mut der = Derivatives::new(f, m);
    let mut total = 0.0;
    for orders in multi_indices(2 * d, sigma) {
        for i in 0..d {
            let vi = bump(&orders, d + i);
            total += der.sq(&vi);
            total += 0.5 * k.b * t * t * der.sq(&bump(&orders, i));
            for j in 0..d {
                total += k.a * t * der.sq(&bump(&vi, d + j));
                total += k.c * t.powi(3) * der.sq(&bump(&vi, j));
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub e_sigma: Vec<f64>,
    pub d_sigma: Vec<f64>,
    pub components: Vec<Vec<EnergyComponent>>,
}

impl EnergyTrace {
    pub fn from_states(
        states: &[DistributionField],
        k: &EnergyCoefficients,
        sigma: usize,
        m: f64,
    ) -> Result<Self> {
        let mut trace = EnergyTrace {
            times: Vec::new(),
            e_sigma: Vec::new(),
            d_sigma: Vec::new(),
            components: Vec::new(),
        };
        for f in states {
            let e = energy_esigma(f.time, f, k, sigma, m)?;
            trace.times.push(f.time);
            trace.e_sigma.push(e.total);
            trace.d_sigma.push(dissipation_dsigma(f.time, f, k, sigma, m)?);
            trace.components.push(e.components);
        }
        Ok(trace)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        write!(w, "t,E_sigma,D_sigma")?;
        if let Some(first) = self.components.first() {
            for c in first {
                let tag = format!("p{}q{}", c.p, c.q);
                write!(w, ",l2_{tag},gradv_{tag},cross_{tag},gradx_{tag}")?;
            }
        }
        writeln!(w)?;
        for (i, t) in self.times.iter().enumerate() {
            write!(w, "{:e},{:e},{:e}", t, self.e_sigma[i], self.d_sigma[i])?;
            for c in &self.components[i] {
                let p = &c.parts;
                write!(w, ",{:e},{:e},{:e},{:e}", p.l2, p.grad_v, p.cross, p.grad_x)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

/// Ordinary least squares of `log value` against `log t`.
pub fn regularization_rate_fit(times: &[f64], values: &[f64]) -> Result<RateFit> {
    if times.len() != values.len() {
        return Err(Error::Shape {
            expected: format!("{} values", times.len()),
            got: format!("{}", values.len()),
        });
    }
    if times.len() < 8 {
        return Err(Error::Domain(format!("rate fit needs >= 8 samples, got {}", times.len())));
    }
    if let Some(i) = times.iter().chain(values).position(|v| !(*v > 0.0)) {
        return Err(Error::Domain(format!("nonpositive entry at position {i} in log-log fit")));
    }
    let (lo, hi) = times
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &t| (a.min(t), b.max(t)));
    if hi / lo < 10.0 - 1e-9 {
        return Err(Error::Domain("rate fit samples must span at least one decade".into()));
    }
    let x: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = x.iter().zip(&y).map(|(a, b)| b - (intercept + slope * a)).collect();
    Ok(RateFit {
        slope,
        intercept,
        residuals,
    })
}

/// `t` values spaced evenly in `log t`.
pub fn log_times(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    let (a, b) = (t_min.ln(), t_max.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1).max(1) as f64).exp())
        .collect()
}

/// `3 - 4 e^{-w} + e^{-2w} - 2w`, by its Taylor series near zero.
fn damping_exponent(w: f64) -> f64 {
    if w < 0.1 {
        let mut term = 0.5 * w * w; // w^n / n! at n = 2
        let mut sum = 0.0;
        for n in 3..40 {
            term *= w / n as f64;
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * (2f64.powi(n) - 4.0) * term;
        }
        sum
    } else {
        3.0 - 4.0 * (-w).exp() + (-2.0 * w).exp() - 2.0 * w
    }
}

/// Exact solution of `d_t f + v d_x f = nu d_v(d_v f + v f)` in one space
/// dimension for `f_0 = sum_k g_k e^{ikx} M(v)` with `|g_k|^2 = k^{-1}`,
/// `1 <= k <= k_max`, evaluated mode by mode (`L^2`, `m = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalFokkerPlanck {
    pub nu: f64,
    pub k_max: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModalNorms {
    pub l2_sq: f64,
    pub dx_sq: f64,
    pub dv_sq: f64,
    /// `<d_v f, d_x f>`
    pub cross: f64,
}

impl ModalNorms {
    pub fn parts(&self) -> E1Parts {
        E1Parts {
            l2: self.l2_sq,
            grad_v: self.dv_sq,
            cross: self.cross,
            grad_x: self.dx_sq,
        }
    }
}

impl ModalFokkerPlanck {
    pub fn new(nu: f64, k_max: u64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::Domain(format!("nu = {nu} must be > 0 for hypoelliptic rates")));
        }
        if k_max < 1 {
            return Err(Error::Domain("k_max must be >= 1".into()));
        }
        Ok(Self { nu, k_max })
    }

    /// Norms of the single mode `k` (spectral weight `|g_k|^2`, a factor
    /// `1/(2 pi)` and the `x`-measure dropped).
    pub fn mode(&self, k: f64, weight: f64, t: f64) -> ModalNorms {
        let nu = self.nu;
        let z = std::f64::consts::PI.sqrt() * (k * k * damping_exponent(nu * t) / (nu * nu)).exp();
        let mean = -(k / nu) * (-(-nu * t).exp_m1());
        let wz = weight * z;
        ModalNorms {
            l2_sq: wz,
            dx_sq: k * k * wz,
            dv_sq: wz * (0.5 + mean * mean),
            cross: k * mean * wz,
        }
    }

    pub fn norms(&self, t: f64) -> ModalNorms {
        let mut acc = ModalNorms::default();
        for k in 1..=self.k_max {
            let kf = k as f64;
            let m = self.mode(kf, 1.0 / kf, t);
            acc.l2_sq += m.l2_sq;
            acc.dx_sq += m.dx_sq;
            acc.dv_sq += m.dv_sq;
            acc.cross += m.cross;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub times: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub energy: Vec<f64>,
    pub fit_x: RateFit,
    pub fit_v: RateFit,
    pub initial_norm_sq: f64,
    pub sup_energy: f64,
}

/// Regularization rates of rough data under the linear kinetic
/// Fokker-Planck flow, from the modal solution.
pub fn modal_rate_study(
    model: &ModalFokkerPlanck,
    k: &EnergyCoefficients,
    t_min: f64,
    t_max: f64,
    samples: usize,
) -> Result<RateStudy> {
    let times = log_times(t_min, t_max, samples);
    let norms: Vec<ModalNorms> = times.iter().map(|&t| model.norms(t)).collect();
    let grad_x: Vec<f64> = norms.iter().map(|n| n.dx_sq.sqrt()).collect();
    let grad_v: Vec<f64> = norms.iter().map(|n| n.dv_sq.sqrt()).collect();
    let energy: Vec<f64> = norms.iter().zip(&times).map(|(n, &t)| n.parts().energy(t, k)).collect();
    let fit_x = regularization_rate_fit(&times, &grad_x)?;
    let fit_v = regularization_rate_fit(&times, &grad_v)?;
    let initial_norm_sq = model.norms(0.0).l2_sq;
    let sup_energy = energy.iter().copied().fold(0.0, f64::max);
    Ok(RateStudy {
        times,
        grad_x,
        grad_v,
        energy,
        fit_x,
        fit_v,
        initial_norm_sq,
        sup_energy,
    })
}

/// `M(v) (1 + amplitude sum_k |k|^{-d/2} cos(k.x + phi_k))` over the
/// dealiased spatial modes, with random phases.
pub fn rough_initial(grid: GridSpec, amplitude: f64, seed: u64) -> DistributionField {
    let d = grid.d;
    let kmax = (grid.dealias_fraction * (grid.nx / 2) as f64).floor() as i64;
    let mut rng = KeyedRng::new(seed, 0, Domain::Sampling);
    let side = (2 * kmax + 1) as usize;
    let mut modes = Vec::new();
    for flat in 0..side.pow(d as u32) {
        let mut rem = flat;
        let mut k = vec![0i64; d];
        for a in (0..d).rev() {
            k[a] = (rem % side) as i64 - kmax;
            rem /= side;
        }
        let first = k.iter().find(|&&c| c != 0);
        if matches!(first, Some(&c) if c > 0) {
            let norm = k.iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt();
            let phase = std::f64::consts::TAU * rng.uniform(0, flat as u64);
            modes.push((k, norm.powf(-(d as f64) / 2.0), phase));
        }
    }
    DistributionField::from_fn(grid, |x, v| {
        let s: f64 = modes
            .iter()
            .map(|(k, amp, ph)| {
                let arg: f64 = k.iter().zip(x).map(|(kc, xc)| *kc as f64 * xc).sum();
                amp * (arg + ph).cos()
            })
            .sum();
        (1.0 + amplitude * s) * crate::phase_space::maxwellian(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eulerian::{EulerianSolver, SolverState, StepPlan, DriftSource};
    use crate::noise_model::NoisePath;
    use crate::phase_space::maxwellian;

    #[test]
    fn constants_for_half() {
        let k = choose_constants(0.5).unwrap();
        assert_eq!(k.theta, 3.90625e-3);
        assert!(k.admissible());
        assert!((k.b / k.theta.powf(1.5) - 1.0).abs() < 1e-14);
        for eps in [0.5, 0.25, 0.1, 0.05, 0.01, 0.9, 0.3] {
            assert!(choose_constants(eps).unwrap().admissible());
        }
        assert!(choose_constants(1.0).is_err());
    }

    fn grid() -> GridSpec {
        GridSpec::new(1, 16, 64, 8.0).unwrap()
    }

    #[test]
    fn e1_limits() {
        let k = choose_constants(0.5).unwrap();
        let f = DistributionField::from_fn(grid(), |x, v| (1.0 + 0.3 * x[0].sin()) * maxwellian(v));
        let l2 = f.l2_norm().powi(2);
        assert!((energy_e1(0.0, &f, &k, 0.0) - l2).abs() < 1e-14 * l2);
        let g = DistributionField::from_fn(grid(), |_, v| maxwellian(v));
        let t = 0.7;
        let mut der = Derivatives::new(&g, 0.0);
        let gv = der.sq(&[0, 1]);
        let e = energy_e1(t, &g, &k, 0.0);
        assert!((e - (g.l2_norm().powi(2) + k.a * t * gv)).abs() < 1e-14);
    }

    #[test]
    fn single_mode_closed_form() {
        // f = cos(x) h(v), h = exp(-v^2/2): every piece is a 1-d Gaussian integral.
        let g = GridSpec::new(1, 8, 128, 12.0).unwrap();
        let f = DistributionField::from_fn(g, |x, v| x[0].cos() * (-v[0] * v[0] / 2.0).exp());
        let k = choose_constants(0.5).unwrap();
        let sp = std::f64::consts::PI.sqrt();
        let (h2, dh2, ddh2) = (sp, sp / 2.0, 3.0 * sp / 4.0);
        let pi = std::f64::consts::PI;
        let t = 0.4;
        // sigma = 1: q = 0 -> d_x f, q = 1 -> d_v f.
        let q0 = E1Parts { l2: pi * h2, grad_v: pi * dh2, cross: 0.0, grad_x: pi * h2 };
        let q1 = E1Parts { l2: pi * dh2, grad_v: pi * ddh2, cross: 0.0, grad_x: pi * dh2 };
        let expected = q0.energy(t, &k) + q1.energy(t, &k);
        let got = energy_esigma(t, &f, &k, 1, 0.0).unwrap();
        assert!((got.total - expected).abs() < 1e-8 * expected);
        // D_0 = ||d_v f||^2 + a t ||d_vv f||^2 + b/2 t^2 ||d_x f||^2 + c t^3 ||d_vx f||^2.
        let d0 = pi * dh2 + k.a * t * pi * ddh2 + 0.5 * k.b * t * t * pi * h2 + k.c * t.powi(3) * pi * dh2;
        let dg = dissipation_dsigma(t, &f, &k, 0, 0.0).unwrap();
        assert!((dg - d0).abs() < 1e-8 * d0);
    }

    #[test]
    fn quadratic_and_sigma_zero() {
        let k = choose_constants(0.25).unwrap();
        let f = rough_initial(grid(), 0.2, 4);
        let e0 = energy_esigma(0.3, &f, &k, 0, 2.0).unwrap().total;
        assert!((e0 - energy_e1(0.3, &f, &k, 2.0)).abs() < 1e-13 * e0);
        let e = energy_esigma(0.3, &f, &k, 1, 2.0).unwrap().total;
        let e3 = energy_esigma(0.3, &f.scaled(3.0), &k, 1, 2.0).unwrap().total;
        assert!((e3 - 9.0 * e).abs() < 1e-12 * e3);
        let flat = DistributionField::from_fn(grid(), |_, _| 2.0);
        assert!(dissipation_dsigma(1.0, &flat, &k, 1, 0.0).unwrap().abs() < 1e-20);
    }

    #[test]
    fn d2_tensor_multiplicity() {
        let g = GridSpec::new(2, 8, 16, 6.0).unwrap();
        let f = DistributionField::from_fn(g, |x, v| (x[0] + 2.0 * x[1]).cos() * maxwellian(v));
        let k = choose_constants(0.5).unwrap();
        let e = energy_esigma(0.0, &f, &k, 1, 0.0).unwrap();
        // q = 0 at t = 0 is ||grad_x f||^2 = (1 + 4) ||f||^2.
        let l2 = f.l2_norm().powi(2);
        assert!((e.components[0].energy - 5.0 * l2).abs() < 1e-10 * l2);
    }

    #[test]
    fn rate_fit_on_power_law() {
        let t = log_times(1e-3, 1e-1, 12);
        let y: Vec<f64> = t.iter().map(|s| 2.0 * s.powf(-1.5)).collect();
        let fit = regularization_rate_fit(&t, &y).unwrap();
        assert!((fit.slope + 1.5).abs() < 1e-12);
        assert!((fit.intercept - 2f64.ln()).abs() < 1e-10);
        let mut bad = y.clone();
        bad[3] = 0.0;
        assert!(regularization_rate_fit(&t, &bad).is_err());
        assert!(regularization_rate_fit(&t[..5], &y[..5]).is_err());
    }

    #[test]
    fn damping_series_matches_closed_form() {
        for w in [0.05f64, 0.099, 0.1] {
            let closed = 3.0 - 4.0 * (-w).exp() + (-2.0 * w).exp() - 2.0 * w;
            let series = {
                let mut s = 0.0;
                let mut term = 1.0;
                for n in 1..40 {
                    term *= w / n as f64;
                    if n >= 3 {
                        s += if n % 2 == 0 { 1.0 } else { -1.0 } * (2f64.powi(n) - 4.0) * term;
                    }
                }
                s
            };
            assert!((closed - series).abs() < 1e-12);
            assert!((damping_exponent(w) - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn modal_solution_matches_grid_solver() {
        let g = GridSpec::new(1, 8, 128, 10.0).unwrap();
        let f0 = DistributionField::from_fn(g, |x, v| (2.0 * x[0]).cos() * maxwellian(v));
        let nu = 0.5;
        let dt = 0.005;
        let solver = EulerianSolver::new(g, StepPlan::new(dt, nu))
            .unwrap()
            .with_drift(DriftSource::Zero);
        let mut state = SolverState::new(f0.clone(), NoisePath::new(0, 0, dt, 40));
        solver.run(&mut state, 40).unwrap();
        let t = 0.2;
        let model = ModalFokkerPlanck::new(nu, 1).unwrap();
        let m0 = model.mode(2.0, 1.0, 0.0);
        let mt = model.mode(2.0, 1.0, t);
        let mut der0 = Derivatives::new(&f0, 0.0);
        let base = der0.sq(&[0, 0]);
        let mut der = Derivatives::new(&state.f, 0.0);
        let rel = |grid: f64, modal: f64| (grid / base - modal / m0.l2_sq).abs();
        assert!(rel(der.sq(&[0, 0]), mt.l2_sq) < 1e-5);
        assert!(rel(der.sq(&[1, 0]), mt.dx_sq) < 1e-5);
        assert!(rel(der.sq(&[0, 1]), mt.dv_sq) < 1e-5);
        assert!(rel(der.dot(&[0, 1], &[1, 0]), mt.cross) < 1e-5);
    }
}
