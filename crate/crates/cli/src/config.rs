//! Experiment configuration: JSON file, command-line overrides and validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use horizonlab::limits::HorizonSequence;
use horizonlab::problem::{ControlProblem, ProblemDescriptor};
use horizonlab::value::GridSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_TOL: f64 = 2e-2;
pub const DEFAULT_SEED: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Value,
    Limits,
    Pmp,
    Criteria,
    Regularity,
    ExampleSuite,
    PlotData,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Value,
        Task::Limits,
        Task::Pmp,
        Task::Criteria,
        Task::Regularity,
        Task::ExampleSuite,
        Task::PlotData,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Value => "value",
            Task::Limits => "limits",
            Task::Pmp => "pmp",
            Task::Criteria => "criteria",
            Task::Regularity => "regularity",
            Task::ExampleSuite => "example-suite",
            Task::PlotData => "plot-data",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Task::ALL.iter().copied().find(|t| t.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Task::ALL.iter().map(|t| t.name()).collect();
            CliError::Validation(format!("unknown task '{s}' (valid: {})", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub h: f64,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub t0: f64,
    pub ratio: f64,
    pub count: usize,
}

/// Contents of a `--config` JSON file. Every field is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub problem: Option<ProblemDescriptor>,
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub horizons: Option<HorizonConfig>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Constant candidate control; the origin clipped into the control box by default.
    #[serde(default)]
    pub u_star: Option<Vec<f64>>,
    /// Region-map cells per axis.
    #[serde(default)]
    pub cells: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub problem: Option<String>,
    pub task: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub grid: Option<String>,
    pub horizons: Option<String>,
}

fn parse_triple(flag: &str, text: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(CliError::Validation(format!("{flag} expects three comma-separated numbers, got '{text}'")));
    }
    let mut out = [0.0; 3];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p
            .parse()
            .map_err(|_| CliError::Validation(format!("{flag}: '{p}' is not a number")))?;
    }
    Ok(out)
}

/// Default box, spacing and horizon for each built-in.
fn default_grid(problem: &ControlProblem) -> GridConfig {
    let (lower, upper, h, horizon) = match problem.name() {
        "capital-stock" => (vec![-0.5], vec![3.5], 0.01, 6.0),
        "double-integrator" => (vec![-3.0, -3.0], vec![3.0, 3.0], 0.05, 2.0),
        _ => (vec![-3.0; problem.state_dim()], vec![3.0; problem.state_dim()], 0.01, 16.0),
    };
    GridConfig {
        h,
        dt: h,
        horizon,
        lower: Some(lower),
        upper: Some(upper),
    }
}

/// Fully validated run settings.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub descriptor: ProblemDescriptor,
    pub problem: ControlProblem,
    pub task: Task,
    pub grid: GridConfig,
    pub spec: GridSpec,
    pub horizon_config: HorizonConfig,
    pub horizons: HorizonSequence,
    pub tol: f64,
    pub out: PathBuf,
    pub seed: u64,
    pub u_star: Vec<f64>,
    pub cells: usize,
}

/// Echo of the resolved settings written to the summary and manifest.
#[derive(Clone, Debug, Serialize)]
pub struct ConfigEcho<'a> {
    pub problem: &'a ProblemDescriptor,
    pub task: Task,
    pub grid: &'a GridConfig,
    pub horizons: &'a HorizonConfig,
    pub tol: f64,
    pub seed: u64,
    pub u_star: &'a [f64],
    pub cells: usize,
}

impl ResolvedConfig {
    pub fn resolve(cfg: ExperimentConfig, ov: Overrides) -> Result<Self, CliError> {
        let task: Task = ov
            .task
            .or(cfg.task)
            .ok_or_else(|| CliError::Validation("no task given (use --task or the config 'task' field)".into()))?
            .parse()?;
        let mut descriptor = cfg.problem.unwrap_or_else(|| ProblemDescriptor::named("linear-l1"));
        if let Some(name) = ov.problem {
            descriptor = ProblemDescriptor::named(&name);
        }
        let problem = descriptor.build().map_err(|e| CliError::Validation(e.to_string()))?;

        let mut grid = cfg.grid.unwrap_or_else(|| default_grid(&problem));
        if let Some(text) = ov.grid {
            let [h, dt, horizon] = parse_triple("--grid", &text)?;
            grid.h = h;
            grid.dt = dt;
            grid.horizon = horizon;
        }
        let fallback = default_grid(&problem);
        let lower = grid.lower.clone().or(fallback.lower).unwrap_or_default();
        let upper = grid.upper.clone().or(fallback.upper).unwrap_or_default();
        grid.lower = Some(lower.clone());
        grid.upper = Some(upper.clone());
        if lower.len() != problem.state_dim() || upper.len() != problem.state_dim() {
            return Err(CliError::Validation(format!(
                "grid box must have {} coordinates",
                problem.state_dim()
            )));
        }
        let spec = GridSpec::uniform(&lower, &upper, grid.h, grid.dt, grid.horizon)
            .map_err(|e| CliError::Validation(e.to_string()))?;

        let mut horizon_config = cfg.horizons.unwrap_or(HorizonConfig {
            t0: 2.0,
            ratio: 2.0,
            count: 4,
        });
        if let Some(text) = ov.horizons {
            let [t0, ratio, count] = parse_triple("--horizons", &text)?;
            if count.fract() != 0.0 || count < 1.0 {
                return Err(CliError::Validation("--horizons count must be a positive integer".into()));
            }
            horizon_config = HorizonConfig {
                t0,
                ratio,
                count: count as usize,
            };
        }
        if !(horizon_config.ratio > 1.0) {
            return Err(CliError::Validation("horizon ratio must exceed 1".into()));
        }
        let horizons = HorizonSequence::geometric(horizon_config.t0, horizon_config.ratio, horizon_config.count)
            .map_err(|e| CliError::Validation(e.to_string()))?;

        let tol = ov.tol.or(cfg.tol).unwrap_or(DEFAULT_TOL);
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(CliError::Validation(format!("tolerance must be positive, got {tol}")));
        }
        let cells = cfg.cells.unwrap_or(if problem.state_dim() == 1 { 40 } else { 12 });
        if cells == 0 {
            return Err(CliError::Validation("cells must be positive".into()));
        }
        let cbox = problem.control_box();
        let u_star = match cfg.u_star {
            Some(u) => {
                if u.len() != cbox.dim() || !cbox.contains(&u, 1e-12) {
                    return Err(CliError::Validation(format!("u_star {u:?} lies outside the control box")));
                }
                u
            }
            None => cbox.lo.iter().zip(&cbox.hi).map(|(l, h)| 0f64.clamp(*l, *h)).collect(),
        };
        Ok(ResolvedConfig {
            descriptor,
            problem,
            task,
            grid,
            spec,
            horizon_config,
            horizons,
            tol,
            out: ov.out.or(cfg.out).unwrap_or_else(|| PathBuf::from("horizonlab-out")),
            seed: ov.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
            u_star,
            cells,
        })
    }

    pub fn echo(&self) -> ConfigEcho<'_> {
        ConfigEcho {
            problem: &self.descriptor,
            task: self.task,
            grid: &self.grid,
            horizons: &self.horizon_config,
            tol: self.tol,
            seed: self.seed,
            u_star: &self.u_star,
            cells: self.cells,
        }
    }
}
