//! Run configuration: one TOML document shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svpfp::eulerian::Splitting;
use svpfp::lagrangian::{InitStrategy, Scheme};
use svpfp::noise_model::ColoringLaw;
use svpfp::phase_space::{GridSpec, WeightedNormSpec};
use svpfp::picard::Backend as PicardBackend;

#[derive(Debug)]
pub enum ConfigError {
    Read(PathBuf, std::io::Error),
    Parse(String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Read(p, e) => write!(f, "cannot read config {}: {e}", p.display()),
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub d: usize,
    pub nx: usize,
    pub nv: usize,
    pub v_max: f64,
    #[serde(default)]
    pub dealias_fraction: Option<f64>,
}

impl GridSection {
    pub fn spec(&self) -> Result<GridSpec, ConfigError> {
        let mut g = GridSpec::new(self.d, self.nx, self.nv, self.v_max).map_err(invalid("grid"))?;
        if let Some(f) = self.dealias_fraction {
            g.dealias_fraction = f;
            g.validate().map_err(invalid("grid.dealias_fraction"))?;
        }
        Ok(g)
    }
}

fn default_sigma_prime() -> u32 {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub k_max: usize,
    #[serde(default = "zero_law")]
    pub coloring: ColoringLaw,
    /// CSV table `l_1..l_d,polarization,sigma`; overrides `coloring`.
    #[serde(default)]
    pub coloring_csv: Option<PathBuf>,
    #[serde(default = "default_sigma_prime")]
    pub sigma_prime: u32,
}

fn zero_law() -> ColoringLaw {
    ColoringLaw::Zero
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            seed: 0,
            k_max: 0,
            coloring: ColoringLaw::Zero,
            coloring_csv: None,
            sigma_prime: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverBackend {
    Eulerian,
    Lagrangian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSection {
    #[serde(default = "default_particles")]
    pub n: usize,
    #[serde(default = "default_init")]
    pub init: InitStrategy,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default)]
    pub exact_friction: bool,
    #[serde(default)]
    pub internal_seed: u64,
}

fn default_particles() -> usize {
    10_000
}
fn default_init() -> InitStrategy {
    InitStrategy::GridWeighted
}
fn default_scheme() -> Scheme {
    Scheme::StratonovichHeun
}

impl Default for ParticleSection {
    fn default() -> Self {
        Self {
            n: default_particles(),
            init: default_init(),
            scheme: default_scheme(),
            exact_friction: false,
            internal_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_backend")]
    pub backend: SolverBackend,
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub nu: f64,
    /// Cutoff threshold; absent means no cutoff.
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default = "default_norm")]
    pub norm: WeightedNormSpec,
    #[serde(default)]
    pub mollifier_epsilon: f64,
    #[serde(default = "default_splitting")]
    pub splitting: Splitting,
    /// Interaction kernel table (CSV); absent means Coulomb.
    #[serde(default)]
    pub kernel_csv: Option<PathBuf>,
    /// `self_consistent` or `zero`.
    #[serde(default = "default_field")]
    pub field: FieldMode,
    #[serde(default)]
    pub particles: ParticleSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldMode {
    SelfConsistent,
    Zero,
}

fn default_backend() -> SolverBackend {
    SolverBackend::Eulerian
}
fn default_norm() -> WeightedNormSpec {
    WeightedNormSpec::new(1, 2.0)
}
fn default_splitting() -> Splitting {
    Splitting::Strang
}
fn default_field() -> FieldMode {
    FieldMode::SelfConsistent
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    Maxwellian,
    PerturbedMaxwellian,
    Rough,
    Snapshot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub kind: InitialKind,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "one_usize")]
    pub wavenumber: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Apply the regularizer `R^n` first.
    #[serde(default)]
    pub regularize_n: Option<usize>,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardSection {
    pub j_max: usize,
    pub horizon: f64,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_picard_backend")]
    pub backend: PicardBackend,
    #[serde(default)]
    pub norm: Option<WeightedNormSpec>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "one_usize")]
    pub replicas: usize,
    #[serde(default)]
    pub refine: u32,
}

fn default_picard_backend() -> PicardBackend {
    PicardBackend::Eulerian
}
fn default_delta() -> f64 {
    svpfp::picard::DEFAULT_DELTA
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypoSection {
    pub epsilon: f64,
    #[serde(default)]
    pub sigma: usize,
    #[serde(default)]
    pub m: f64,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Highest mode of the modal rate study.
    #[serde(default = "default_modal_k")]
    pub modal_k_max: u64,
}

fn default_t_min() -> f64 {
    1e-3
}
fn default_t_max() -> f64 {
    1e-1
}
fn default_samples() -> usize {
    12
}
fn default_modal_k() -> u64 {
    1 << 22
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub realizations: usize,
    #[serde(default = "one_usize")]
    pub cadence: usize,
    #[serde(default)]
    pub stopping_levels: Vec<f64>,
    /// Record `E_sigma` with the `[hypo]` constants.
    #[serde(default)]
    pub energy: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSection {
    /// Number of halvings of `dt` compared against the `dt/16` reference.
    #[serde(default = "default_dt_levels")]
    pub dt_levels: usize,
    /// Number of grid doublings.
    #[serde(default = "default_n_levels")]
    pub n_levels: usize,
}

fn default_dt_levels() -> usize {
    3
}
fn default_n_levels() -> usize {
    2
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        Self {
            dt_levels: default_dt_levels(),
            n_levels: default_n_levels(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Times at which to write snapshots (rounded to the step grid).
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    #[serde(default)]
    pub noise: NoiseSection,
    pub solver: SolverSection,
    pub initial: InitialSection,
    #[serde(default)]
    pub picard: Option<PicardSection>,
    #[serde(default)]
    pub hypo: Option<HypoSection>,
    #[serde(default)]
    pub ensemble: Option<EnsembleSection>,
    #[serde(default)]
    pub convergence: Option<ConvergenceSection>,
    #[serde(default)]
    pub output: OutputSection,
}

fn invalid<E: std::fmt::Display>(field: &'static str) -> impl Fn(E) -> ConfigError {
    move |e| ConfigError::Invalid(format!("{field}: {e}"))
}

/// Parse `VALUE` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("override `{spec}` is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Invalid(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("override key `{key}`: `{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
    parse(&text, overrides)
}

pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let grid = self.grid.spec()?;
        let s = &self.solver;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(ConfigError::Invalid(format!("solver.dt: {} must be > 0", s.dt)));
        }
        if !(s.nu >= 0.0) {
            return Err(ConfigError::Invalid(format!("solver.nu: {} must be >= 0", s.nu)));
        }
        if let Some(r) = s.r {
            if !(r > 0.0) {
                return Err(ConfigError::Invalid(format!("solver.r: {r} must be > 0")));
            }
        }
        s.norm.validate(&grid).map_err(invalid("solver.norm"))?;
        if s.backend == SolverBackend::Lagrangian && s.particles.n == 0 {
            return Err(ConfigError::Invalid("solver.particles.n: must be >= 1".into()));
        }
        if self.noise.k_max > 0 && 2 * self.noise.k_max >= grid.nx {
            return Err(ConfigError::Invalid(format!(
                "noise.k_max: {} needs 2 k_max < grid.nx = {}",
                self.noise.k_max, grid.nx
            )));
        }
        if self.initial.kind == InitialKind::Snapshot && self.initial.path.is_none() {
            return Err(ConfigError::Invalid("initial.path: required for kind = \"snapshot\"".into()));
        }
        if let Some(p) = &self.picard {
            if p.j_max < 2 {
                return Err(ConfigError::Invalid(format!("picard.j_max: {} must be >= 2", p.j_max)));
            }
            if !(p.horizon > 0.0 && p.horizon <= 1.0) {
                return Err(ConfigError::Invalid(format!("picard.horizon: {} must lie in (0, 1]", p.horizon)));
            }
        }
        if let Some(h) = &self.hypo {
            if !(h.epsilon > 0.0 && h.epsilon < 1.0) {
                return Err(ConfigError::Invalid(format!("hypo.epsilon: {} must lie in (0, 1)", h.epsilon)));
            }
            if !(h.t_min > 0.0 && h.t_max > h.t_min) {
                return Err(ConfigError::Invalid("hypo.t_min/t_max: need 0 < t_min < t_max".into()));
            }
        }
        if let Some(e) = &self.ensemble {
            if e.realizations < 1 {
                return Err(ConfigError::Invalid("ensemble.realizations: must be >= 1".into()));
            }
            if e.cadence < 1 {
                return Err(ConfigError::Invalid("ensemble.cadence: must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[grid]
d = 1
nx = 16
nv = 32
v_max = 6.0

[solver]
dt = 0.05
steps = 4

[initial]
kind = "perturbed_maxwellian"
amplitude = 0.1
"#;

    #[test]
    fn parses_minimal_document() {
        let cfg = parse(BASE, &[]).unwrap();
        assert_eq!(cfg.grid.nx, 16);
        assert_eq!(cfg.solver.backend, SolverBackend::Eulerian);
        assert_eq!(cfg.noise.coloring, ColoringLaw::Zero);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = format!("{BASE}\n[output]\nfoo = 1\n");
        assert!(matches!(parse(&text, &[]), Err(ConfigError::Parse(_))));
        let text = BASE.replace("steps = 4", "steps = 4\nstep = 3");
        assert!(parse(&text, &[]).is_err());
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = parse(
            BASE,
            &[
                "noise.seed=7".into(),
                "solver.nu=0.5".into(),
                "noise.coloring={ law = \"power\", p = 2.0 }".into(),
                "noise.k_max=2".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.noise.seed, 7);
        assert_eq!(cfg.solver.nu, 0.5);
        assert_eq!(cfg.noise.coloring, ColoringLaw::power(2.0));
        assert!(parse(BASE, &["solver.dt=-1".into()]).is_err());
        assert!(parse(BASE, &["novalue".into()]).is_err());
    }

    #[test]
    fn noise_truncation_checked() {
        assert!(parse(BASE, &["noise.k_max=8".into()]).is_err());
    }
}
