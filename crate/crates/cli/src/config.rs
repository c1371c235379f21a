//! Run configuration as read from JSON. Every struct rejects unknown keys.

use std::fmt;
use std::path::PathBuf;

use qap_core::{
    validate_model, ClassicalScenario, CoefficientState, Model, PhysicalParams, PolynomialField,
    PotentialSchedule, QapError, SearchBlock, SearchOptions,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: ParamsDto,
    /// Piecewise-constant schedule; absent means U = 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<Vec<SegmentDto>>,
    pub grid: GridDto,
    /// RK4 steps for the coefficient flow.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_order")]
    pub truncation_order: usize,
    pub scenario: Scenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tolerances: TolerancesDto,
}

fn default_steps() -> usize {
    qap_core::dynamics::DEFAULT_STEPS
}

fn default_order() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsDto {
    pub mass: f64,
    pub hbar: f64,
    pub dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDto {
    pub start: f64,
    pub field: FieldDto,
}

/// Taylor coefficients with the ½ and 1/3!, 1/4! factors implied; tensors are
/// flattened row-major.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDto {
    #[serde(default)]
    pub c0: f64,
    #[serde(default)]
    pub c1: Vec<f64>,
    #[serde(default)]
    pub c2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c3: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c4: Option<Vec<f64>>,
}

impl FieldDto {
    /// Missing linear or quadratic parts are filled with zeros.
    pub fn to_field(&self, dim: usize) -> PolynomialField {
        let fill = |v: &Vec<f64>, n: usize| {
            if v.is_empty() {
                vec![0.0; n]
            } else {
                v.clone()
            }
        };
        PolynomialField {
            c0: self.c0,
            c1: fill(&self.c1, dim),
            c2: fill(&self.c2, dim * dim),
            c3: self.c3.clone(),
            c4: self.c4.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDto {
    pub duration: f64,
    pub slices: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolerancesDto {
    #[serde(default = "default_search_tol")]
    pub search: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_search_tol() -> f64 {
    qap_core::stationary::DEFAULT_TOLERANCE
}

fn default_fd_step() -> f64 {
    qap_core::stationary::DEFAULT_FD_STEP
}

fn default_max_iterations() -> usize {
    qap_core::stationary::DEFAULT_MAX_ITERATIONS
}

impl Default for TolerancesDto {
    fn default() -> Self {
        Self {
            search: default_search_tol(),
            fd_step: default_fd_step(),
            max_iterations: default_max_iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDto {
    #[serde(default)]
    pub s: FieldDto,
    #[serde(default)]
    pub rho: FieldDto,
}

impl StateDto {
    pub fn to_state(&self, dim: usize) -> CoefficientState {
        CoefficientState {
            t: 0.0,
            s: self.s.to_field(dim),
            rho: self.rho.to_field(dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDto {
    pub center: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Evolve(EvolveSpec),
    Correspondence(CorrespondenceSpec),
    Probability(ProbabilitySpec),
    Stationary(StationarySpec),
    ClassicalLimit(ClassicalLimitSpec),
    Trajectory(TrajectorySpec),
    Probe(ProbeSpec),
}

impl Scenario {
    /// Subcommand spelling of the scenario.
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Evolve(_) => "evolve",
            Scenario::Correspondence(_) => "correspondence",
            Scenario::Probability(_) => "probability",
            Scenario::Stationary(_) => "stationary",
            Scenario::ClassicalLimit(_) => "classical-limit",
            Scenario::Trajectory(_) => "trajectory",
            Scenario::Probe(_) => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveSpec {
    pub initial: StateDto,
    pub x0: Vec<f64>,
    pub x_t: Vec<f64>,
    /// Crank–Nicolson cross-check (one dimension only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleDto>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleDto {
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    pub grid_steps: usize,
}

fn default_grid_points() -> usize {
    qap_core::oracle::DEFAULT_GRID_POINTS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondenceSpec {
    pub initial: StateDto,
    pub n_list: Vec<usize>,
    pub samples: usize,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    pub lo: f64,
    pub hi: f64,
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Uniform
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbabilityQuery {
    /// One box per node `x₀ … x_N`.
    Path { boxes: Vec<BoxDto> },
    /// Boxes on the endpoints, interior nodes unrestricted.
    Endpoint { start: BoxDto, end: BoxDto },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbabilitySpec {
    pub initial: StateDto,
    pub query: ProbabilityQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockDto {
    #[default]
    Linear,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarySpec {
    pub x0: Vec<f64>,
    pub x_t: Vec<f64>,
    #[serde(default)]
    pub block: BlockDto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemDto {
    Free,
    Linear { alpha: f64 },
    Harmonic { omega: f64 },
}

impl From<SystemDto> for ClassicalScenario {
    fn from(s: SystemDto) -> Self {
        match s {
            SystemDto::Free => ClassicalScenario::Free,
            SystemDto::Linear { alpha } => ClassicalScenario::Linear { alpha },
            SystemDto::Harmonic { omega } => ClassicalScenario::Harmonic { omega },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalLimitSpec {
    /// Fixes the potential; the top-level `potential` must be absent.
    pub system: SystemDto,
    pub hbar_list: Vec<f64>,
    pub x0: f64,
    pub x_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub x0: f64,
    pub p0: f64,
    pub bracket: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeModeDto {
    Stationary,
    /// Packed initial coefficients `(s1, s2, ρ1, ρ2)`.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub x0: Vec<f64>,
    pub x_t: Vec<f64>,
    pub probe: FieldDto,
    pub alpha_step: f64,
    #[serde(default = "default_probe_mode")]
    pub mode: ProbeModeDto,
}

fn default_probe_mode() -> ProbeModeDto {
    ProbeModeDto::Stationary
}

/// Problems with the configuration itself, reported with exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue(pub String);

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn search_options(&self) -> SearchOptions {
        let block = match &self.scenario {
            Scenario::Stationary(s) if s.block == BlockDto::Full => SearchBlock::Full,
            _ => SearchBlock::Linear,
        };
        SearchOptions {
            fd_step: self.tolerances.fd_step,
            tolerance: self.tolerances.search,
            max_iterations: self.tolerances.max_iterations,
            block,
        }
    }

    pub fn physical_params(&self) -> PhysicalParams {
        PhysicalParams::new(self.params.mass, self.params.hbar, self.params.dimension)
    }

    pub fn schedule(&self) -> PotentialSchedule {
        let dim = self.params.dimension;
        match (&self.potential, &self.scenario) {
            (_, Scenario::ClassicalLimit(c)) => PotentialSchedule::constant(
                ClassicalScenario::from(c.system).potential(self.params.mass),
            ),
            (Some(segs), _) => PotentialSchedule::new(
                segs.iter()
                    .map(|s| (s.start, s.field.to_field(dim)))
                    .collect(),
            ),
            (None, _) => PotentialSchedule::free(dim),
        }
    }

    /// Checks the schema-level invariants, then the model invariants.
    pub fn validate(&self) -> Result<Model, CliError> {
        let mut issues = Vec::new();
        let t = &self.tolerances;
        if !(t.search > 0.0) || !(t.fd_step > 0.0) || t.max_iterations == 0 {
            issues.push("tolerances must be positive".to_string());
        }
        if self.steps == 0 {
            issues.push("steps must be positive".to_string());
        }
        let dim = self.params.dimension;
        let dims_ok = |v: &[f64]| v.len() == dim;
        match &self.scenario {
            Scenario::Evolve(s) => {
                if !dims_ok(&s.x0) || !dims_ok(&s.x_t) {
                    issues.push(format!("evolve endpoints must have {dim} components"));
                }
                if s.oracle.is_some() && dim != 1 {
                    issues.push("the grid oracle is one-dimensional".to_string());
                }
            }
            Scenario::Correspondence(s) => {
                if self.seed.is_none() {
                    issues.push("correspondence samples random paths and needs a seed".to_string());
                }
                if s.samples == 0 || !(s.lo < s.hi) {
                    issues.push("correspondence needs samples > 0 and lo < hi".to_string());
                }
            }
            Scenario::Probability(_) => {
                if dim != 1 {
                    issues.push("probability boxes are one-dimensional".to_string());
                }
            }
            Scenario::Stationary(s) => {
                if !dims_ok(&s.x0) || !dims_ok(&s.x_t) {
                    issues.push(format!("stationary endpoints must have {dim} components"));
                }
            }
            Scenario::ClassicalLimit(s) => {
                if self.potential.is_some() {
                    issues.push(
                        "classical-limit takes its potential from `system`; remove `potential`"
                            .to_string(),
                    );
                }
                if dim != 1 {
                    issues.push("classical-limit is one-dimensional".to_string());
                }
                if s.hbar_list.is_empty() || s.hbar_list.iter().any(|h| !(*h > 0.0)) {
                    issues.push("hbar_list must be non-empty with positive entries".to_string());
                }
            }
            Scenario::Trajectory(s) => {
                if dim != 1 {
                    issues.push("trajectory prediction is one-dimensional".to_string());
                }
                if !(s.bracket.0 < s.bracket.1) {
                    issues.push("bracket must satisfy lo < hi".to_string());
                }
            }
            Scenario::Probe(s) => {
                if !dims_ok(&s.x0) || !dims_ok(&s.x_t) {
                    issues.push(format!("probe endpoints must have {dim} components"));
                }
                if !(s.alpha_step > 0.0) {
                    issues.push("alpha_step must be positive".to_string());
                }
            }
        }
        let model = validate_model(
            self.physical_params(),
            self.schedule(),
            self.grid.duration,
            self.grid.slices,
            self.truncation_order,
        );
        match model {
            Ok(m) if issues.is_empty() => Ok(m),
            Ok(_) => Err(CliError::Invalid(issues)),
            Err(QapError::Validation(v)) => {
                issues.extend(v.iter().map(ToString::to_string));
                Err(CliError::Invalid(issues))
            }
            Err(e) => {
                issues.push(e.to_string());
                Err(CliError::Invalid(issues))
            }
        }
    }

    /// Canonical JSON of every field that affects results. The output
    /// directory is excluded.
    pub fn semantic_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        v
    }
}
