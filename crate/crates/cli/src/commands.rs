//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;
use svpfp::ensemble::{run_ensemble, EnergyProbe, EnsembleConfig};
use svpfp::eulerian::{write_log, DriftSource, EulerianSolver, LogRow, NoiseDriver, SolverState, StepPlan};
use svpfp::field_solver::Kernel;
use svpfp::hypo::{
    choose_constants, modal_rate_study, regularization_rate_fit, rough_initial, EnergyTrace, ModalFokkerPlanck,
    RateFit,
};
use svpfp::lagrangian::{init_particles, pic_step, push, Forcing, PushConfig};
use svpfp::noise_model::{build_basis, coloring_law, read_coloring_csv, BasisSet, ColoringLaw, ColoringTable, NoisePath};
use svpfp::phase_space::snapshot::{read_field, write_field};
use svpfp::phase_space::{maxwellian, regularize_initial, CutoffSpec, DistributionField, GridSpec};
use svpfp::picard::{run_iteration, PicardConfig};
use svpfp::rng::Domain;
use svpfp::Error;

use crate::config::{ConfigError, FieldMode, InitialKind, InitialSection, RunConfig, SolverBackend};

#[derive(Debug)]
pub enum CmdError {
    Config(String),
    Numeric { message: String, last_good: Option<PathBuf> },
    Other(String),
}

impl CmdError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Numeric { .. } => 3,
            CmdError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Config(m) | CmdError::Other(m) => write!(f, "{m}"),
            CmdError::Numeric { message, last_good } => {
                write!(f, "numeric abort: {message}")?;
                if let Some(p) = last_good {
                    write!(f, "; last good snapshot: {}", p.display())?;
                }
                Ok(())
            }
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        match e {
            Error::BlowUp { .. } | Error::NonFinite(_) | Error::ParticleNan(_) | Error::ShiftTooLarge { .. } => {
                CmdError::Numeric {
                    message: e.to_string(),
                    last_good: None,
                }
            }
            Error::Io(_) | Error::Json(_) => CmdError::Other(e.to_string()),
            _ => CmdError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Other(e.to_string())
    }
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub grid: GridSpec,
    pub noise: Option<(BasisSet, ColoringTable)>,
    pub kernel: Kernel,
}

fn build_noise(cfg: &RunConfig, grid: &GridSpec) -> Result<Option<(BasisSet, ColoringTable)>, CmdError> {
    let n = &cfg.noise;
    if n.k_max == 0 || (n.coloring == ColoringLaw::Zero && n.coloring_csv.is_none()) {
        return Ok(None);
    }
    let basis = build_basis(grid.d, n.k_max)?;
    let law = match &n.coloring_csv {
        Some(p) => {
            let file = File::open(p).map_err(|e| CmdError::Config(format!("noise.coloring_csv {}: {e}", p.display())))?;
            read_coloring_csv(grid.d, BufReader::new(file))?
        }
        None => n.coloring.clone(),
    };
    let table = coloring_law(&law, n.sigma_prime, &basis)?;
    Ok(Some((basis, table)))
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self, CmdError> {
        let grid = cfg.grid.spec()?;
        let noise = build_noise(&cfg, &grid)?;
        let kernel = match &cfg.solver.kernel_csv {
            Some(p) => {
                let file =
                    File::open(p).map_err(|e| CmdError::Config(format!("solver.kernel_csv {}: {e}", p.display())))?;
                Kernel::read_csv(&grid, BufReader::new(file))?
            }
            None => Kernel::Coulomb,
        };
        fs::create_dir_all(&out)?;
        Ok(Self {
            cfg,
            out,
            grid,
            noise,
            kernel,
        })
    }

    fn noise_ref(&self) -> Option<(&BasisSet, &ColoringTable)> {
        self.noise.as_ref().map(|(b, t)| (b, t))
    }

    pub fn initial_on(&self, grid: GridSpec) -> Result<DistributionField, CmdError> {
        initial_field(&self.cfg.initial, grid)
    }

    pub fn plan(&self, dt: f64) -> StepPlan {
        let s = &self.cfg.solver;
        StepPlan {
            cutoff: s.r.map_or(CutoffSpec::inactive(), CutoffSpec::new),
            norm: s.norm,
            mollifier_epsilon: s.mollifier_epsilon,
            splitting: s.splitting,
            ..StepPlan::new(dt, s.nu)
        }
    }

    pub fn solver_on(&self, grid: GridSpec, dt: f64) -> Result<EulerianSolver, CmdError> {
        let mut solver = EulerianSolver::new(grid, self.plan(dt))?.with_kernel(if grid == self.grid {
            self.kernel.clone()
        } else {
            Kernel::Coulomb
        });
        if self.cfg.solver.field == FieldMode::Zero {
            solver = solver.with_drift(DriftSource::Zero);
        }
        if let Some((b, t)) = &self.noise {
            solver = solver.with_noise(NoiseDriver::new(&grid, b.clone(), t.clone())?);
        }
        Ok(solver)
    }

    fn file(&self, name: &str) -> Result<BufWriter<File>, CmdError> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CmdError> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| CmdError::Other(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }
}

pub fn initial_field(init: &InitialSection, grid: GridSpec) -> Result<DistributionField, CmdError> {
    let k = init.wavenumber as f64;
    let a = init.amplitude;
    let f = match init.kind {
        InitialKind::Maxwellian => DistributionField::from_fn(grid, |_, v| maxwellian(v)),
        InitialKind::PerturbedMaxwellian => {
            DistributionField::from_fn(grid, |x, v| (1.0 + a * (k * x[0]).cos()) * maxwellian(v))
        }
        InitialKind::Rough => rough_initial(grid, a, init.seed),
        InitialKind::Snapshot => {
            let path = init.path.as_ref().expect("validated");
            let f = read_field(path)?;
            if f.grid != grid {
                return Err(CmdError::Config(format!(
                    "initial.path {}: snapshot grid differs from [grid]",
                    path.display()
                )));
            }
            f
        }
    };
    match init.regularize_n {
        Some(n) => Ok(regularize_initial(&f, n)?.field),
        None => Ok(f),
    }
}

fn snapshot_steps(times: &[f64], dt: f64, steps: usize) -> BTreeSet<usize> {
    times
        .iter()
        .map(|t| (t / dt).round().max(0.0) as usize)
        .filter(|n| *n <= steps)
        .collect()
}

fn final_line(row: &LogRow) {
    println!(
        "final step={} t={:e} mass={:e} L2={:e} Hs0m0={:e} theta_R={:e}",
        row.step, row.t, row.mass, row.l2, row.hs0m0_norm, row.theta_r
    );
}

pub fn cmd_run(ctx: &Context) -> Result<(), CmdError> {
    match ctx.cfg.solver.backend {
        SolverBackend::Eulerian => run_eulerian(ctx),
        SolverBackend::Lagrangian => run_lagrangian(ctx),
    }
}

fn run_eulerian(ctx: &Context) -> Result<(), CmdError> {
    let s = &ctx.cfg.solver;
    let solver = ctx.solver_on(ctx.grid, s.dt)?;
    let f0 = ctx.initial_on(ctx.grid)?;
    let path = NoisePath::new(ctx.cfg.noise.seed, 0, s.dt, s.steps);
    let mut state = SolverState::new(f0, path);
    let snaps = snapshot_steps(&ctx.cfg.output.snapshot_times, s.dt, s.steps);
    let snap = |state: &SolverState| -> Result<PathBuf, CmdError> {
        let stem = ctx.out.join(format!("snapshot_{:06}", state.step_index));
        Ok(write_field(&stem, &state.f)?)
    };
    let mut rows = vec![solver.initial_row(&state)?];
    if snaps.contains(&0) {
        snap(&state)?;
    }
    let mut abort = None;
    for _ in 0..s.steps {
        match solver.step(&mut state) {
            Ok(rec) => {
                rows.push(rec.row);
                if snaps.contains(&state.step_index) {
                    snap(&state)?;
                }
            }
            Err(e) => {
                abort = Some(e);
                break;
            }
        }
    }
    write_log(&rows, ctx.file("step_log.csv")?)?;
    if let Some(e) = abort {
        let stem = ctx.out.join("last_good");
        let p = write_field(&stem, &state.f)?;
        return Err(CmdError::Numeric {
            message: e.to_string(),
            last_good: Some(p),
        });
    }
    final_line(rows.last().expect("initial row"));
    Ok(())
}

fn run_lagrangian(ctx: &Context) -> Result<(), CmdError> {
    let s = &ctx.cfg.solver;
    let p = &s.particles;
    let f0 = ctx.initial_on(ctx.grid)?;
    let mut ens = init_particles(&f0, p.n, p.init, ctx.cfg.noise.seed)?;
    let path = NoisePath::new(ctx.cfg.noise.seed, 0, s.dt, s.steps);
    let internal = NoisePath::new(p.internal_seed, 0, s.dt, s.steps).with_domain(Domain::InternalNoise);
    let cfg = PushConfig {
        nu: s.nu,
        dt: s.dt,
        scheme: p.scheme,
        exact_friction: p.exact_friction,
    };
    let snaps = snapshot_steps(&ctx.cfg.output.snapshot_times, s.dt, s.steps);
    let mut log = ctx.file("step_log.csv")?;
    writeln!(log, "step,t,total_weight,kinetic_energy,E_energy")?;
    let mut last_good = None;
    for n in 0..=s.steps {
        let t = n as f64 * s.dt;
        if snaps.contains(&n) {
            last_good = Some(ens.write_snapshot(&ctx.out.join(format!("particles_{n:06}")), t)?);
        }
        if n == s.steps {
            writeln!(log, "{n},{t:e},{:e},{:e},", ens.total_weight(), ens.kinetic_energy())?;
            break;
        }
        let incs = match ctx.noise_ref() {
            Some((b, tab)) => Some(path.colored_increments(n, b, tab)?),
            None => None,
        };
        let forcing = Forcing {
            noise: ctx.noise_ref().zip(incs.as_deref()).map(|((b, _), i)| (b, i)),
            internal: Some((&internal, n)),
            ..Forcing::default()
        };
        let step = match s.field {
            FieldMode::SelfConsistent => pic_step(&mut ens, &ctx.grid, &ctx.kernel, forcing, &cfg),
            FieldMode::Zero => push(&mut ens, &forcing, &cfg).map(|_| 0.0),
        };
        match step {
            Ok(energy) => writeln!(
                log,
                "{n},{t:e},{:e},{:e},{energy:e}",
                ens.total_weight(),
                ens.kinetic_energy()
            )?,
            Err(e) => {
                log.flush()?;
                return Err(CmdError::Numeric {
                    message: e.to_string(),
                    last_good,
                });
            }
        }
    }
    log.flush()?;
    println!(
        "final step={} t={:e} total_weight={:e} kinetic_energy={:e}",
        s.steps,
        s.steps as f64 * s.dt,
        ens.total_weight(),
        ens.kinetic_energy()
    );
    Ok(())
}

fn required<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CmdError> {
    section
        .as_ref()
        .ok_or_else(|| CmdError::Config(format!("missing [{name}] section")))
}

pub fn cmd_ensemble(ctx: &Context) -> Result<(), CmdError> {
    let e = required(&ctx.cfg.ensemble, "ensemble")?;
    let s = &ctx.cfg.solver;
    let energy = if e.energy {
        let h = required(&ctx.cfg.hypo, "hypo")?;
        Some(EnergyProbe {
            coefficients: choose_constants(h.epsilon)?,
            sigma: h.sigma,
            m: h.m,
        })
    } else {
        None
    };
    let cfg = EnsembleConfig {
        realizations: e.realizations,
        base_seed: ctx.cfg.noise.seed,
        steps: s.steps,
        cadence: e.cadence,
        stopping_norm: s.norm,
        stopping_levels: e.stopping_levels.clone(),
        energy,
    };
    let solver = ctx.solver_on(ctx.grid, s.dt)?;
    let f0 = ctx.initial_on(ctx.grid)?;
    let out = run_ensemble(&solver, &f0, &cfg)?;
    for r in &out.records {
        r.write_series_csv(ctx.file(&format!("run_{:04}.csv", r.realization))?)?;
        write_log(&r.log, ctx.file(&format!("run_{:04}_log.csv", r.realization))?)?;
    }
    ctx.json("summary.json", &out.summary)?;
    println!(
        "ensemble realizations={} completed={} max_mass_drift={:e} max_l2_growth_ratio={:e}",
        out.summary.realizations, out.summary.completed, out.summary.max_mass_drift, out.summary.max_l2_growth_ratio
    );
    Ok(())
}

pub fn cmd_picard(ctx: &Context) -> Result<(), CmdError> {
    let p = required(&ctx.cfg.picard, "picard")?;
    let s = &ctx.cfg.solver;
    let cfg = PicardConfig {
        j_max: p.j_max,
        r: p.r.or(s.r).unwrap_or(f64::INFINITY),
        epsilon: p.epsilon,
        horizon: p.horizon,
        dt: s.dt,
        nu: s.nu,
        backend: p.backend,
        norm: p.norm.unwrap_or(s.norm),
        delta: p.delta,
        replicas: p.replicas,
        refine: p.refine,
        internal_seed: s.particles.internal_seed,
    };
    let steps = cfg.steps()?;
    let path = NoisePath::new(ctx.cfg.noise.seed, 0, s.dt, steps);
    let f0 = ctx.initial_on(ctx.grid)?;
    let run = run_iteration(&f0, &cfg, ctx.noise_ref(), &path)?;
    let report = &run.report;
    report.write_csv(ctx.file("picard_report.csv")?)?;
    ctx.json("picard_report.json", report)?;
    if let Some(n) = &report.fit.notice {
        println!("notice: {n}");
    }
    if let Some(a) = &report.aborted {
        println!("aborted: {a}");
    }
    println!(
        "picard iterates={} cauchy_flag={} K0={:e}",
        report.diffs.len(),
        report.cauchy_flag,
        report.fit.k0
    );
    Ok(())
}

#[derive(Serialize)]
struct HypoReport {
    coefficients: svpfp::hypo::EnergyCoefficients,
    checks: Vec<svpfp::hypo::ConstraintCheck>,
    admissible: bool,
    grid_fit_x: Option<RateFit>,
    grid_fit_v: Option<RateFit>,
    grid_fit_notice: Option<String>,
    modal: Option<svpfp::hypo::RateStudy>,
    sup_e_sigma: f64,
    initial_norm_sq: f64,
}

pub fn cmd_hypo(ctx: &Context) -> Result<(), CmdError> {
    let h = required(&ctx.cfg.hypo, "hypo")?;
    let s = &ctx.cfg.solver;
    let k = choose_constants(h.epsilon)?;
    // Step no coarser than t_min so the fit window is resolved.
    let dt = s.dt.min(h.t_min);
    let solver = EulerianSolver::new(ctx.grid, ctx.plan(dt))?.with_drift(DriftSource::Zero);
    let f0 = ctx.initial_on(ctx.grid)?;
    let steps = (h.t_max / dt - 1e-9).ceil() as usize;
    let mut state = SolverState::new(f0.clone(), NoisePath::new(0, 0, dt, steps));
    let mut states = vec![f0.clone()];
    for _ in 0..steps {
        solver.step(&mut state)?;
        states.push(state.f.clone());
    }
    let trace = EnergyTrace::from_states(&states, &k, h.sigma, h.m)?;
    trace.write_csv(ctx.file("energy_trace.csv")?)?;

    let mut times = Vec::new();
    let mut gx = Vec::new();
    let mut gv = Vec::new();
    for (i, &t) in trace.times.iter().enumerate() {
        if t >= h.t_min && t <= h.t_max * (1.0 + 1e-12) {
            times.push(t);
            gx.push(trace.components[i].iter().map(|c| c.parts.grad_x).sum::<f64>().sqrt());
            gv.push(trace.components[i].iter().map(|c| c.parts.grad_v).sum::<f64>().sqrt());
        }
    }
    let (grid_fit_x, grid_fit_v, grid_fit_notice) =
        match (regularization_rate_fit(&times, &gx), regularization_rate_fit(&times, &gv)) {
            (Ok(a), Ok(b)) => (Some(a), Some(b), None),
            (Err(e), _) | (_, Err(e)) => (None, None, Some(e.to_string())),
        };
    let modal = if s.nu > 0.0 {
        let model = ModalFokkerPlanck::new(s.nu, h.modal_k_max)?;
        let study = modal_rate_study(&model, &k, h.t_min, h.t_max, h.samples)?;
        let mut w = ctx.file("modal_rates.csv")?;
        writeln!(w, "t,grad_x_norm,grad_v_norm,E_sigma")?;
        for i in 0..study.times.len() {
            writeln!(
                w,
                "{:e},{:e},{:e},{:e}",
                study.times[i], study.grad_x[i], study.grad_v[i], study.energy[i]
            )?;
        }
        Some(study)
    } else {
        None
    };
    let initial_norm_sq = svpfp::phase_space::weighted_sobolev_norm(
        &f0,
        svpfp::phase_space::WeightedNormSpec::new(h.sigma, h.m),
    )?
    .powi(2);
    let report = HypoReport {
        admissible: k.admissible(),
        checks: k.checks(),
        coefficients: k,
        grid_fit_x,
        grid_fit_v,
        grid_fit_notice,
        sup_e_sigma: trace.e_sigma.iter().copied().fold(0.0, f64::max),
        initial_norm_sq,
        modal,
    };
    ctx.json("hypo_report.json", &report)?;
    println!(
        "hypo epsilon={} admissible={} sup_E_sigma={:e}",
        h.epsilon, report.admissible, report.sup_e_sigma
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub study: &'static str,
    pub level: usize,
    pub h: f64,
    pub error: f64,
    pub order: Option<f64>,
    pub exact: bool,
}

/// Relative errors at or below this are reported as exact.
pub const EXACT_FLOOR: f64 = 1e-13;

fn run_to_end(solver: &EulerianSolver, f0: &DistributionField, path: NoisePath, steps: usize) -> Result<DistributionField, CmdError> {
    let mut state = SolverState::new(f0.clone(), path);
    for _ in 0..steps {
        solver.step(&mut state)?;
    }
    Ok(state.f)
}

fn rel_l2(a: &DistributionField, b: &DistributionField) -> f64 {
    let diff = a.sub(b).l2_norm();
    diff / b.l2_norm().max(f64::MIN_POSITIVE)
}

/// Values of the fine field at the coarse nodes (every `stride`-th index per axis).
fn restrict(fine: &DistributionField, coarse: GridSpec, stride: usize) -> DistributionField {
    let shape_f = fine.grid.shape();
    let shape_c = coarse.shape();
    let mut idx = vec![0usize; shape_c.len()];
    let values = (0..coarse.len())
        .map(|flat| {
            svpfp::fft::unravel(flat, &shape_c, &mut idx);
            let ff = idx.iter().zip(&shape_f).fold(0usize, |acc, (&i, &n)| acc * n + i * stride);
            fine.values[ff]
        })
        .collect();
    DistributionField {
        grid: coarse,
        values,
        time: fine.time,
    }
}

fn orders(rows: &mut [ConvergenceRow]) {
    for i in 1..rows.len() {
        let (a, b) = (rows[i - 1].error, rows[i].error);
        if a > 0.0 && b > 0.0 && !rows[i].exact {
            rows[i].order = Some((a / b).log2());
        }
    }
}

pub fn convergence_rows(ctx: &Context) -> Result<Vec<ConvergenceRow>, CmdError> {
    let c = ctx.cfg.convergence.clone().unwrap_or_default();
    if c.dt_levels > 4 {
        return Err(CmdError::Config("convergence.dt_levels: must be <= 4".into()));
    }
    let s = &ctx.cfg.solver;
    let f0 = ctx.initial_on(ctx.grid)?;
    let path = NoisePath::new(ctx.cfg.noise.seed, 0, s.dt, s.steps);
    let reference = {
        let solver = ctx.solver_on(ctx.grid, s.dt / 16.0)?;
        run_to_end(&solver, &f0, path.refined(4), s.steps * 16)?
    };
    let mut dt_rows = Vec::new();
    for level in 0..c.dt_levels {
        let dt = s.dt / (1u64 << level) as f64;
        let solver = ctx.solver_on(ctx.grid, dt)?;
        let f = run_to_end(&solver, &f0, path.refined(level as u32), s.steps << level)?;
        let error = rel_l2(&f, &reference);
        dt_rows.push(ConvergenceRow {
            study: "dt",
            level,
            h: dt,
            error,
            order: None,
            exact: error <= EXACT_FLOOR,
        });
    }
    orders(&mut dt_rows);

    let mut n_rows = Vec::new();
    if ctx.cfg.initial.kind != InitialKind::Snapshot && c.n_levels > 0 {
        let grid_at = |level: usize| -> Result<GridSpec, CmdError> {
            let mut g = GridSpec::new(ctx.grid.d, ctx.grid.nx << level, ctx.grid.nv << level, ctx.grid.v_max)?;
            g.dealias_fraction = ctx.grid.dealias_fraction;
            Ok(g)
        };
        let finest_grid = grid_at(c.n_levels)?;
        let finest = run_to_end(&ctx.solver_on(finest_grid, s.dt)?, &ctx.initial_on(finest_grid)?, path, s.steps)?;
        for level in 0..c.n_levels {
            let g = grid_at(level)?;
            let f = run_to_end(&ctx.solver_on(g, s.dt)?, &ctx.initial_on(g)?, path, s.steps)?;
            let error = rel_l2(&f, &restrict(&finest, g, 1 << (c.n_levels - level)));
            n_rows.push(ConvergenceRow {
                study: "N",
                level,
                h: g.dx(),
                error,
                order: None,
                exact: error <= EXACT_FLOOR,
            });
        }
        orders(&mut n_rows);
    }
    dt_rows.extend(n_rows);
    Ok(dt_rows)
}

pub fn cmd_convergence(ctx: &Context) -> Result<(), CmdError> {
    let rows = convergence_rows(ctx)?;
    let mut w = ctx.file("convergence.csv")?;
    writeln!(w, "study,level,h,error,order,flag")?;
    for r in &rows {
        let order = r.order.map(|o| format!("{o:.4}")).unwrap_or_default();
        let flag = if r.exact { "exact" } else { "" };
        writeln!(w, "{},{},{:e},{:e},{},{}", r.study, r.level, r.h, r.error, order, flag)?;
        println!(
            "{} level={} h={:e} error={:e} order={} {}",
            r.study, r.level, r.h, r.error, order, flag
        );
    }
    Ok(())
}
