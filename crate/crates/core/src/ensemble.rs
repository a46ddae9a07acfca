//! Monte Carlo runs over external noise realizations.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eulerian::{EulerianSolver, LogRow, SolverState};
use crate::hypo::{energy_esigma, EnergyCoefficients};
use crate::noise_model::NoisePath;
use crate::phase_space::{weighted_sobolev_norm_sq_unchecked, DistributionField, WeightedNormSpec};
use crate::rng::{Domain, KeyedRng};

/// Optional `E_sigma` diagnostic recorded at cadence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyProbe {
    pub coefficients: EnergyCoefficients,
    pub sigma: usize,
    pub m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub realizations: usize,
    pub base_seed: u64,
    pub steps: usize,
    /// Record diagnostics every `cadence` steps (and at the final step).
    pub cadence: usize,
    pub stopping_norm: WeightedNormSpec,
    pub stopping_levels: Vec<f64>,
    pub energy: Option<EnergyProbe>,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.realizations < 1 {
            return Err(Error::Config("ensemble.realizations must be >= 1".into()));
        }
        if self.cadence < 1 {
            return Err(Error::Config("ensemble.cadence must be >= 1".into()));
        }
        if self.stopping_levels.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config("ensemble.stopping_levels must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub t: f64,
    pub mass: f64,
    pub l2: f64,
    pub hs0m0: f64,
    pub e_sigma: Option<f64>,
    pub theta_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub realization: u64,
    pub series: Vec<RecordRow>,
    /// First recorded time with norm above each level; `+inf` if never.
    pub stopping_times: Vec<f64>,
    pub completed: bool,
    pub failure: Option<String>,
    /// Per-step solver log.
    pub log: Vec<LogRow>,
}

pub const RECORD_HEADER: &str = "t,mass,L2,Hs0m0,E_sigma,theta_R";

impl RunRecord {
    pub fn write_series_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{RECORD_HEADER}")?;
        for r in &self.series {
            let e = r.e_sigma.map(|e| format!("{e:e}")).unwrap_or_default();
            writeln!(w, "{:e},{:e},{:e},{:e},{},{:e}", r.t, r.mass, r.l2, r.hs0m0, e, r.theta_r)?;
        }
        Ok(())
    }

    pub fn sup_norm(&self) -> f64 {
        self.series.iter().map(|r| r.hs0m0).fold(0.0, f64::max)
    }
}

/// First crossing `norm > level` per level by linear scan; `+inf` if none.
pub fn detect_stopping(times: &[f64], norms: &[f64], levels: &[f64]) -> Vec<f64> {
    levels
        .iter()
        .map(|&n| {
            times
                .iter()
                .zip(norms)
                .find(|(_, &v)| v > n)
                .map_or(f64::INFINITY, |(t, _)| *t)
        })
        .collect()
}

fn record_row(
    cfg: &EnsembleConfig,
    f: &DistributionField,
    theta_r: f64,
) -> Result<RecordRow> {
    let e_sigma = match &cfg.energy {
        Some(p) => Some(energy_esigma(f.time, f, &p.coefficients, p.sigma, p.m)?.total),
        None => None,
    };
    Ok(RecordRow {
        t: f.time,
        mass: f.mass(),
        l2: f.l2_norm(),
        hs0m0: weighted_sobolev_norm_sq_unchecked(f, cfg.stopping_norm).sqrt(),
        e_sigma,
        theta_r,
    })
}

/// One realization; failures are recorded, never propagated.
pub fn run_realization(
    solver: &EulerianSolver,
    f0: &DistributionField,
    cfg: &EnsembleConfig,
    realization: u64,
) -> RunRecord {
    let path = NoisePath::new(cfg.base_seed, realization, solver.plan.dt, cfg.steps);
    let mut state = SolverState::new(f0.clone(), path);
    let mut series = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps + 1);
    let mut failure = None;
    let outcome = (|| -> Result<()> {
        let row0 = solver.initial_row(&state)?;
        series.push(record_row(cfg, &state.f, row0.theta_r)?);
        log.push(row0);
        for n in 1..=cfg.steps {
            let rec = solver.step(&mut state)?;
            log.push(rec.row);
            if n % cfg.cadence == 0 || n == cfg.steps {
                series.push(record_row(cfg, &state.f, rec.row.theta_r)?);
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        failure = Some(e.to_string());
    }
    let times: Vec<f64> = series.iter().map(|r| r.t).collect();
    let norms: Vec<f64> = series.iter().map(|r| r.hs0m0).collect();
    RunRecord {
        realization,
        stopping_times: detect_stopping(&times, &norms, &cfg.stopping_levels),
        completed: failure.is_none(),
        failure,
        series,
        log,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub p: f64,
    /// Empirical `E[sup_t ||f||^p]`.
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub max: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Moments of `sup_t ||f||_{H^{s0}_{m0}}` with percentile bootstrap 95% intervals.
pub fn moment_summary(records: &[RunRecord], ps: &[f64], seed: u64) -> Result<Vec<MomentRow>> {
    let sups: Vec<f64> = records.iter().filter(|r| r.completed).map(|r| r.sup_norm()).collect();
    if sups.is_empty() {
        return Err(Error::Empty("no completed realizations to summarize".into()));
    }
    let n = sups.len();
    let mut rng = KeyedRng::new(seed, 0, Domain::Bootstrap);
    let picks: Vec<Vec<usize>> = (0..BOOTSTRAP_RESAMPLES)
        .map(|b| {
            (0..n)
                .map(|i| ((rng.uniform(b as u64, i as u64) * n as f64) as usize).min(n - 1))
                .collect()
        })
        .collect();
    Ok(ps
        .iter()
        .map(|&p| {
            let vals: Vec<f64> = sups.iter().map(|s| s.powf(p)).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (ci_low, ci_high) = if n < 2 {
                (mean, mean)
            } else {
                let mut boot: Vec<f64> = picks
                    .iter()
                    .map(|idx| idx.iter().map(|&i| vals[i]).sum::<f64>() / n as f64)
                    .collect();
                boot.sort_by(f64::total_cmp);
                (percentile(&boot, 0.025), percentile(&boot, 0.975))
            };
            MomentRow {
                p,
                mean,
                ci_low,
                ci_high,
                max,
            }
        })
        .collect())
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: f64,
    /// Fraction of realizations whose norm crossed the level.
    pub crossed_fraction: f64,
    /// Quantiles (10%, 50%, 90%) of the stopping time; `None` means `+inf`.
    pub quantiles: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub realization: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub realizations: usize,
    pub completed: usize,
    pub levels: Vec<LevelSummary>,
    pub moments: Vec<MomentRow>,
    pub failures: Vec<Failure>,
    /// Largest `|mass(t) - mass(0)| / mass(0)` over all realizations and steps.
    pub max_mass_drift: f64,
    /// Largest `||f(t)||_2 / (e^{d nu t} ||f_0||_2)` over all realizations and steps.
    pub max_l2_growth_ratio: f64,
}

impl EnsembleSummary {
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

fn level_summary(records: &[RunRecord], cfg: &EnsembleConfig) -> Vec<LevelSummary> {
    cfg.stopping_levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let mut times: Vec<f64> = records.iter().map(|r| r.stopping_times[i]).collect();
            times.sort_by(f64::total_cmp);
            let crossed = times.iter().filter(|t| t.is_finite()).count();
            let q = |p: f64| Some(percentile(&times, p)).filter(|t| t.is_finite());
            LevelSummary {
                level,
                crossed_fraction: crossed as f64 / times.len() as f64,
                quantiles: [q(0.1), q(0.5), q(0.9)],
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub records: Vec<RunRecord>,
    pub summary: EnsembleSummary,
}

/// Run every realization in parallel; results are merged in realization order.
pub fn run_ensemble(
    solver: &EulerianSolver,
    f0: &DistributionField,
    cfg: &EnsembleConfig,
) -> Result<EnsembleOutcome> {
    cfg.validate()?;
    let records: Vec<RunRecord> = (0..cfg.realizations as u64)
        .into_par_iter()
        .map(|r| run_realization(solver, f0, cfg, r))
        .collect();
    let failures: Vec<Failure> = records
        .iter()
        .filter_map(|r| {
            r.failure.as_ref().map(|m| Failure {
                realization: r.realization,
                message: m.clone(),
            })
        })
        .collect();
    let moments = moment_summary(&records, &[2.0, 4.0], cfg.base_seed).unwrap_or_default();
    let m0 = f0.mass();
    let l0 = f0.l2_norm();
    let rate = f0.grid.d as f64 * solver.plan.nu;
    let mut max_mass_drift = 0.0f64;
    let mut max_growth = 0.0f64;
    for r in &records {
        for row in &r.log {
            max_mass_drift = max_mass_drift.max(((row.mass - m0) / m0).abs());
            max_growth = max_growth.max(row.l2 / ((rate * row.t).exp() * l0));
        }
    }
    let summary = EnsembleSummary {
        realizations: records.len(),
        completed: records.iter().filter(|r| r.completed).count(),
        levels: level_summary(&records, cfg),
        moments,
        failures,
        max_mass_drift,
        max_l2_growth_ratio: max_growth,
    };
    Ok(EnsembleOutcome { records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eulerian::{NoiseDriver, StepPlan};
    use crate::noise_model::{build_basis, coloring_law, ColoringLaw};
    use crate::phase_space::{maxwellian, GridSpec};

    fn setup(amplitude: f64) -> (EulerianSolver, DistributionField, EnsembleConfig) {
        let g = GridSpec::new(1, 16, 32, 6.0).unwrap();
        let basis = build_basis(1, 2).unwrap();
        let law = ColoringLaw::Power { p: 2.0, amplitude };
        let table = coloring_law(&law, 4, &basis).unwrap();
        let solver = EulerianSolver::new(g, StepPlan::new(0.05, 0.1))
            .unwrap()
            .with_noise(NoiseDriver::new(&g, basis, table).unwrap());
        let f0 = DistributionField::from_fn(g, |x, v| (1.0 + 0.2 * x[0].cos()) * maxwellian(v));
        let cfg = EnsembleConfig {
            realizations: 4,
            base_seed: 11,
            steps: 6,
            cadence: 2,
            stopping_norm: WeightedNormSpec::new(1, 0.0),
            stopping_levels: vec![0.1, 1e6],
            energy: None,
        };
        (solver, f0, cfg)
    }

    #[test]
    fn stopping_detection() {
        let t = [0.0, 0.25, 0.5, 0.7, 1.0];
        let n = [1.0, 1.5, 2.5, 3.5, 3.0];
        assert_eq!(detect_stopping(&t, &n, &[2.0, 3.0, 9.0]), vec![0.5, 0.7, f64::INFINITY]);
        assert!(detect_stopping(&t, &[0.1; 5], &[1.0, 2.0]).iter().all(|x| x.is_infinite()));
    }

    #[test]
    fn single_realization_matches_direct_run() {
        let (solver, f0, mut cfg) = setup(1.0);
        cfg.realizations = 1;
        let out = run_ensemble(&solver, &f0, &cfg).unwrap();
        let mut state = SolverState::new(f0.clone(), NoisePath::new(11, 0, 0.05, 6));
        let log = solver.run(&mut state, 6).unwrap();
        assert_eq!(out.records[0].log, log);
        let m = &out.summary.moments[0];
        assert_eq!((m.ci_low, m.ci_high), (m.mean, m.mean));
        assert_eq!(out.records[0].series.len(), 4);
    }

    #[test]
    fn zero_noise_realizations_coincide() {
        let (solver, f0, cfg) = setup(0.0);
        let out = run_ensemble(&solver, &f0, &cfg).unwrap();
        for r in &out.records[1..] {
            assert_eq!(r.log, out.records[0].log);
        }
        let m = &out.summary.moments[0];
        assert_eq!(m.ci_low, m.ci_high);
    }

    #[test]
    fn power_mean_ordering_and_thread_independence() {
        let (solver, f0, cfg) = setup(1.0);
        let out = run_ensemble(&solver, &f0, &cfg).unwrap();
        let m = &out.summary.moments;
        assert!(m[1].mean.powf(0.25) >= m[0].mean.sqrt());
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let again = single.install(|| run_ensemble(&solver, &f0, &cfg).unwrap());
        assert_eq!(
            serde_json::to_string(&again.summary).unwrap(),
            serde_json::to_string(&out.summary).unwrap()
        );
        assert!(out.summary.max_l2_growth_ratio <= 1.0 + 1e-6);
    }

    #[test]
    fn all_failed_is_an_error() {
        let rec = RunRecord {
            realization: 0,
            series: vec![],
            stopping_times: vec![],
            completed: false,
            failure: Some("x".into()),
            log: vec![],
        };
        assert!(matches!(moment_summary(&[rec], &[2.0], 0), Err(Error::Empty(_))));
    }
}
