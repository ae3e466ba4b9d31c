//! Experiment configuration: TOML file with one section per concern, merged
//! with command-line flags (flags > file > defaults) and validated up front.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dualenkf_core::models::{
    make_smd_model, scalar_lq, validate_lq_assumptions, CartPoleParams, CostSpec, LtiSystem,
    Objective, SmdParams,
};
use dualenkf_core::{DMatrix, Prop2Mode, SnapshotMode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SystemPreset {
    Scalar,
    Smd,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Soc,
    Rsc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GaModel {
    Pendulum,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GainSource {
    Riccati,
    Enkf,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Poisson,
    Dual,
    Convergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub preset: SystemPreset,
    /// Process-noise intensity of the scalar preset.
    pub scalar_sigma: f64,
    pub smd: SmdParams,
    /// Row-major matrices of the custom preset.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            preset: SystemPreset::Smd,
            scalar_sigma: 1.0,
            smd: SmdParams::default(),
            a: Vec::new(),
            b: Vec::new(),
            sigma: Vec::new(),
            c: Vec::new(),
            g: Vec::new(),
            r: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub theta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Soc,
            theta: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnkfConfig {
    pub particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub prop2: Prop2Mode,
    pub snapshots: SnapshotMode,
    pub model: GaModel,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            dt: 0.01,
            horizon: 5.0,
            seed: 0,
            prop2: Prop2Mode::Off,
            snapshots: SnapshotMode::Stats,
            model: GaModel::Pendulum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub gain: GainSource,
    pub rollouts: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Initial state; empty means the all-ones vector.
    pub x0: Vec<f64>,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            gain: GainSource::Enkf,
            rollouts: 500,
            horizon: 5.0,
            dt: 0.01,
            x0: Vec::new(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmdExperimentConfig {
    pub theta_positive: f64,
    pub theta_negative: f64,
    /// Number of seeds averaged in the error summary.
    pub seeds: usize,
}

impl Default for SmdExperimentConfig {
    fn default() -> Self {
        Self {
            theta_positive: 0.5,
            theta_negative: -0.5,
            seeds: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumExperimentConfig {
    pub params: CartPoleParams,
    pub theta_positive: f64,
    pub theta_negative: f64,
    pub particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Initial error state `(x, x_dot, phi - pi, phi_dot)`.
    pub x0: Vec<f64>,
    pub rollouts: usize,
    pub sim_horizon: f64,
    pub sim_dt: f64,
    pub angle_tolerance: f64,
    pub position_tolerance: f64,
    /// Number of full rollout paths written per variant.
    pub saved_paths: usize,
}

impl Default for PendulumExperimentConfig {
    fn default() -> Self {
        Self {
            params: CartPoleParams::default(),
            theta_positive: 0.5,
            theta_negative: -0.5,
            particles: 500,
            dt: 5e-3,
            horizon: 4.0,
            seed: 0,
            x0: vec![0.2, 0.0, 0.3, 0.0],
            rollouts: 200,
            sim_horizon: 10.0,
            sim_dt: 5e-3,
            angle_tolerance: 0.2,
            position_tolerance: 0.5,
            saved_paths: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseConfig {
    pub check: Check,
    pub spacing: f64,
    /// Particle counts of the convergence curve.
    pub particle_counts: Vec<usize>,
    pub seeds: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            check: Check::Dual,
            spacing: 1e-3,
            particle_counts: vec![100, 1000, 10000],
            seeds: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: OutputFormat::Csv,
        }
    }
}

/// Provenance block written into every manifest; ignored on load.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifestInfo {
    pub command: String,
    pub build: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub objective: ObjectiveConfig,
    pub enkf: EnkfConfig,
    pub rollout: RolloutConfig,
    pub smd: SmdExperimentConfig,
    pub pendulum: PendulumExperimentConfig,
    pub diagnose: DiagnoseConfig,
    pub output: OutputConfig,
    pub manifest: ManifestInfo,
}

fn type_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "string",
        toml::Value::Integer(_) => "integer",
        toml::Value::Float(_) => "float",
        toml::Value::Boolean(_) => "boolean",
        toml::Value::Datetime(_) => "datetime",
        toml::Value::Array(_) => "array",
        toml::Value::Table(_) => "table",
    }
}

fn compatible(expected: &toml::Value, found: &toml::Value) -> bool {
    use toml::Value::*;
    matches!(
        (expected, found),
        (String(_), String(_))
            | (Integer(_), Integer(_))
            | (Float(_), Float(_) | Integer(_))
            | (Boolean(_), Boolean(_))
            | (Array(_), Array(_))
            | (Table(_), Table(_))
    )
}

/// Expected element type of an array field, from its default or by name.
fn array_element(path: &str, default: &[toml::Value]) -> Option<&'static str> {
    if let Some(first) = default.first() {
        return Some(match first {
            toml::Value::Integer(_) => "integer",
            toml::Value::Float(_) => "float",
            toml::Value::Array(_) => "array",
            _ => return None,
        });
    }
    if path.starts_with("system.") {
        Some("array")
    } else if path.ends_with("x0") {
        Some("float")
    } else {
        None
    }
}

fn check_array(
    path: &str,
    expected: &toml::Value,
    found: &[toml::Value],
    errors: &mut Vec<String>,
) {
    let toml::Value::Array(default) = expected else {
        return;
    };
    let Some(elem) = array_element(path, default) else {
        return;
    };
    for (i, v) in found.iter().enumerate() {
        let ok = match (elem, v) {
            ("integer", toml::Value::Integer(_)) => true,
            ("float", toml::Value::Float(_) | toml::Value::Integer(_)) => true,
            ("array", toml::Value::Array(row)) => row
                .iter()
                .all(|x| matches!(x, toml::Value::Float(_) | toml::Value::Integer(_))),
            _ => false,
        };
        if !ok {
            let expected = if elem == "array" {
                "array of numbers"
            } else {
                elem
            };
            errors.push(format!(
                "key `{path}[{i}]`: expected {expected}, found {}",
                type_name(v)
            ));
        }
    }
}

/// Collect unknown keys and type mismatches by walking `found` against the
/// serialized defaults.
fn walk(
    prefix: &str,
    expected: &toml::Table,
    found: &toml::Table,
    unknown: &mut Vec<String>,
    errors: &mut Vec<String>,
) {
    for (key, value) in found {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let Some(exp) = expected.get(key) else {
            unknown.push(path);
            continue;
        };
        if !compatible(exp, value) {
            errors.push(format!(
                "key `{path}`: expected {}, found {}",
                type_name(exp),
                type_name(value)
            ));
            continue;
        }
        match (exp, value) {
            (toml::Value::Table(e), toml::Value::Table(f)) => walk(&path, e, f, unknown, errors),
            (toml::Value::Array(_), toml::Value::Array(f)) => check_array(&path, exp, f, errors),
            _ => {}
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML text; an empty string yields the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let found: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("malformed config: {e}")))?;
        let defaults = toml::Table::try_from(Self::default())
            .map_err(|e| CliError::Config(format!("internal schema error: {e}")))?;
        let mut unknown = Vec::new();
        let mut errors = Vec::new();
        walk("", &defaults, &found, &mut unknown, &mut errors);
        if !unknown.is_empty() {
            errors.insert(0, format!("unknown keys: {}", unknown.join(", ")));
        }
        if !errors.is_empty() {
            return Err(CliError::Config(errors.join("; ")));
        }
        toml::Value::Table(found)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn objective(&self) -> Result<Objective, CliError> {
        let obj = match self.objective.kind {
            ObjectiveKind::Soc => Objective::Soc,
            ObjectiveKind::Rsc => Objective::rsc(self.objective.theta)?,
        };
        Ok(obj)
    }

    /// The LQ system and quadratic cost selected by `[system]`.
    pub fn lq_system(&self) -> Result<(LtiSystem, CostSpec), CliError> {
        let sys = &self.system;
        let out = match sys.preset {
            SystemPreset::Scalar => scalar_lq(sys.scalar_sigma)?,
            SystemPreset::Smd => make_smd_model(&sys.smd)?,
            SystemPreset::Custom => {
                let lti = LtiSystem::new(
                    matrix("system.a", &sys.a)?,
                    matrix("system.b", &sys.b)?,
                    matrix("system.sigma", &sys.sigma)?,
                )?;
                let cost = CostSpec::quadratic(
                    matrix("system.c", &sys.c)?,
                    matrix("system.g", &sys.g)?,
                    matrix("system.r", &sys.r)?,
                )?;
                (lti, cost)
            }
        };
        Ok(out)
    }

    /// Precondition checks shared by every command, plus those of `command`.
    pub fn validate(&self, command: &str) -> Result<(), CliError> {
        let mut errors = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("{name} must be positive and finite, got {v}"));
            }
        };
        positive("enkf.dt", self.enkf.dt);
        positive("enkf.horizon", self.enkf.horizon);
        positive("rollout.dt", self.rollout.dt);
        positive("rollout.horizon", self.rollout.horizon);
        positive("pendulum.dt", self.pendulum.dt);
        positive("pendulum.horizon", self.pendulum.horizon);
        positive("pendulum.sim_dt", self.pendulum.sim_dt);
        positive("pendulum.sim_horizon", self.pendulum.sim_horizon);
        positive("pendulum.angle_tolerance", self.pendulum.angle_tolerance);
        positive(
            "pendulum.position_tolerance",
            self.pendulum.position_tolerance,
        );
        positive("diagnose.spacing", self.diagnose.spacing);
        if self.pendulum.theta_positive <= 0.0 {
            errors.push("pendulum.theta_positive must be > 0".into());
        }
        if self.pendulum.theta_negative >= 0.0 {
            errors.push("pendulum.theta_negative must be < 0".into());
        }
        if self.smd.theta_positive <= 0.0 {
            errors.push("smd.theta_positive must be > 0".into());
        }
        if self.smd.theta_negative >= 0.0 {
            errors.push("smd.theta_negative must be < 0".into());
        }
        if self.smd.seeds == 0 {
            errors.push("smd.seeds must be at least 1".into());
        }
        if self.diagnose.seeds == 0 {
            errors.push("diagnose.seeds must be at least 1".into());
        }
        if self.rollout.rollouts < 2 {
            errors.push("rollout.rollouts must be at least 2".into());
        }
        if self.pendulum.rollouts < 2 {
            errors.push("pendulum.rollouts must be at least 2".into());
        }
        if self.pendulum.x0.len() != 4 {
            errors.push(format!(
                "pendulum.x0 must have 4 entries, got {}",
                self.pendulum.x0.len()
            ));
        }
        if self.pendulum.particles < 5 {
            errors.push(format!(
                "pendulum.particles must be at least 5 (state dimension + 1), got {}",
                self.pendulum.particles
            ));
        }
        let counts = &self.diagnose.particle_counts;
        if counts.is_empty() || counts.windows(2).any(|w| w[1] <= w[0]) {
            errors
                .push("diagnose.particle_counts must be non-empty and strictly increasing".into());
        }
        if !errors.is_empty() {
            return Err(CliError::Config(errors.join("; ")));
        }
        self.objective()?;

        let uses_lq = !matches!(command, "pendulum")
            && !(command == "ga-enkf" && self.enkf.model == GaModel::Pendulum);
        if uses_lq {
            let (lti, cost) = self.lq_system()?;
            let d = lti.dim();
            let n_min = |n: usize, name: &str| -> Result<(), CliError> {
                if n < d + 1 {
                    return Err(CliError::Config(format!(
                        "{name} = {n} is below the state dimension + 1 = {}",
                        d + 1
                    )));
                }
                Ok(())
            };
            n_min(self.enkf.particles, "enkf.particles")?;
            if command == "diagnose" && self.diagnose.check == Check::Convergence {
                n_min(counts[0], "diagnose.particle_counts[0]")?;
            }
            if !self.rollout.x0.is_empty() && self.rollout.x0.len() != d {
                return Err(CliError::Config(format!(
                    "rollout.x0 has {} entries, expected {d}",
                    self.rollout.x0.len()
                )));
            }
            let objectives = if command == "smd" {
                vec![
                    Objective::Soc,
                    Objective::rsc(self.smd.theta_positive)?,
                    Objective::rsc(self.smd.theta_negative)?,
                ]
            } else {
                vec![self.objective()?]
            };
            for obj in objectives {
                validate_lq_assumptions(&lti, &cost, &obj)?.into_result()?;
            }
        }
        Ok(())
    }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() {
        return Err(CliError::Config(format!(
            "{name} is required for the custom preset"
        )));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Config(format!(
            "{name} has rows of unequal length"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

/// Flag overrides; `None` leaves the file or default value in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub system: Option<SystemPreset>,
    pub objective: Option<ObjectiveKind>,
    pub theta: Option<f64>,
    pub particles: Option<usize>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub prop2: Option<Prop2Mode>,
    pub snapshots: Option<SnapshotMode>,
    pub model: Option<GaModel>,
    pub gain: Option<GainSource>,
    pub rollouts: Option<usize>,
    pub check: Option<Check>,
    pub output: Option<PathBuf>,
    pub format: Option<OutputFormat>,
}

impl Overrides {
    /// Apply flags; `-N`, `--dt`, `-T` and `--seed` target the section the
    /// command reads them from. For `smd` and `pendulum`, `--theta` replaces
    /// the variant of matching sign.
    pub fn apply(&self, cfg: &mut ExperimentConfig, command: &str) {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.system, cfg.system.preset);
        set!(self.objective, cfg.objective.kind);
        set!(self.theta, cfg.objective.theta);
        set!(self.prop2, cfg.enkf.prop2);
        set!(self.snapshots, cfg.enkf.snapshots);
        set!(self.model, cfg.enkf.model);
        set!(self.gain, cfg.rollout.gain);
        set!(self.rollouts, cfg.rollout.rollouts);
        set!(self.check, cfg.diagnose.check);
        set!(self.output, cfg.output.dir);
        set!(self.format, cfg.output.format);
        if let Some(theta) = self.theta {
            match command {
                "smd" if theta > 0.0 => cfg.smd.theta_positive = theta,
                "smd" => cfg.smd.theta_negative = theta,
                "pendulum" if theta > 0.0 => cfg.pendulum.theta_positive = theta,
                "pendulum" => cfg.pendulum.theta_negative = theta,
                _ => {}
            }
        }
        match command {
            "pendulum" => {
                set!(self.particles, cfg.pendulum.particles);
                set!(self.dt, cfg.pendulum.dt);
                set!(self.horizon, cfg.pendulum.horizon);
                set!(self.seed, cfg.pendulum.seed);
                set!(self.rollouts, cfg.pendulum.rollouts);
            }
            "rollout" => {
                set!(self.particles, cfg.enkf.particles);
                set!(self.dt, cfg.rollout.dt);
                set!(self.horizon, cfg.rollout.horizon);
                set!(self.seed, cfg.rollout.seed);
            }
            _ => {
                set!(self.particles, cfg.enkf.particles);
                set!(self.dt, cfg.enkf.dt);
                set!(self.horizon, cfg.enkf.horizon);
                set!(self.seed, cfg.enkf.seed);
            }
        }
    }
}

/// Flat `section.key = value` view used in error messages and docs.
pub fn flatten(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    fn rec(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let p = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    rec(&p, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut out = BTreeMap::new();
    if let Ok(v) = toml::Value::try_from(cfg) {
        rec("", &v, &mut out);
    }
    out
}
