//! Experiment harness: config files, subcommands writing CSV artifacts, and
//! log-log rate fits.
//!
//! Config files are flat `section.key = value` lines with `#` comments; lists
//! are written `[a, b, c]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::continuum::{analytic_effective_hamiltonian, compare_on_coarser, PendulumProfile};
use crate::error::{Result, WeakKamError};
use crate::grid::{format_digits, GridFunction, PeriodicGrid};
use crate::laxoleinik::{backward_lax_oleinik, discounted_lax_oleinik, forward_lax_oleinik, tabulate_kernel, ActionKernel};
use crate::mather::{mane_potential, mather_set, minimizing_measure, selected_solution_dual};
use crate::models::{estimate_bounds, AprioriBounds, CustomTable, DiscreteAction, LagrangianModel, PotentialTerm, TrigPotential};
use crate::solvers::{
    calibration_defect, continuum_limit_sweep, default_delta_schedule, effective_action_discounted, effective_action_karp,
    effective_action_mean_per_site, mean_per_site_sequence, selected_solution, solve_discounted, solve_weak_kam, supinf_gap,
    SolveReport, SweepSettings,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_PROPERTY: i32 = 4;

pub const SUBCOMMANDS: [&str; 8] =
    ["effective-action", "weak-kam", "discounted", "select", "mane", "sweep-tau", "sweep-delta", "validate"];

/// Process exit code for an error.
pub fn exit_code(err: &WeakKamError) -> i32 {
    match err {
        WeakKamError::Config(_) | WeakKamError::InvalidInput(_) => EXIT_CONFIG,
        WeakKamError::PropertyViolation(_) => EXIT_PROPERTY,
        _ => EXIT_SOLVER,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Pendulum { strength: f64 },
    Free { dim: usize, mass: f64 },
    Trig { dim: usize, mass: f64, terms: Vec<PotentialTerm> },
    Table { path: PathBuf, x_nodes: usize, v_min: f64, v_max: f64, v_nodes: usize, legendre_radius: Option<f64> },
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Pendulum { .. } | ModelSpec::Table { .. } => 1,
            ModelSpec::Free { dim, .. } | ModelSpec::Trig { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<LagrangianModel> {
        match self {
            ModelSpec::Pendulum { strength } => Ok(LagrangianModel::pendulum(*strength)),
            ModelSpec::Free { dim, mass } => LagrangianModel::free(*dim, *mass),
            ModelSpec::Trig { dim, mass, terms } => LagrangianModel::mechanical(*mass, TrigPotential::new(*dim, terms.clone())?),
            ModelSpec::Table { path, x_nodes, v_min, v_max, v_nodes, legendre_radius } => {
                let text = fs::read_to_string(path)
                    .map_err(|e| WeakKamError::Config(format!("cannot read table {}: {e}", path.display())))?;
                let values = text
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|_| WeakKamError::Config(format!("bad table value '{s}'"))))
                    .collect::<Result<Vec<_>>>()?;
                let mut t = CustomTable::new(*x_nodes, *v_min, *v_max, *v_nodes, values)?;
                if let Some(r) = legendre_radius {
                    t = t.with_legendre_radius(*r);
                }
                Ok(LagrangianModel::custom(t))
            }
        }
    }
}

/// Either a fixed node count or the refinement rule `h <= c_h tau^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridRule {
    Fixed(usize),
    Refine { c_h: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub grid: GridRule,
    /// Time steps, strictly decreasing.
    pub taus: Vec<f64>,
    pub momentum: Vec<f64>,
    /// Discounts, strictly decreasing.
    pub deltas: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub safety: f64,
    pub output_dir: Option<PathBuf>,
    /// Significant digits in CSV output.
    pub precision: usize,
    /// Sources of Mañé columns; empty means the support of the minimizing measure.
    pub mane_sources: Vec<usize>,
    pub mather_tolerance: Option<f64>,
}

fn config_err(msg: impl Into<String>) -> WeakKamError {
    WeakKamError::Config(msg.into())
}

fn parse_f64(key: &str, s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| config_err(format!("{key}: '{s}' is not a number")))
}

fn parse_usize(key: &str, s: &str) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|_| config_err(format!("{key}: '{s}' is not a nonnegative integer")))
}

fn parse_list(key: &str, s: &str) -> Result<Vec<String>> {
    let s = s.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| config_err(format!("{key}: expected a bracketed list, got '{s}'")))?;
    Ok(inner.split(',').map(|e| e.trim().to_string()).filter(|e| !e.is_empty()).collect())
}

fn parse_f64_list(key: &str, s: &str) -> Result<Vec<f64>> {
    parse_list(key, s)?.iter().map(|e| parse_f64(key, e)).collect()
}

/// `[[k, a_cos, a_sin], ...]`; in several dimensions `k` is written as
/// space-separated integers, e.g. `[[1 0, 0.5, 0], [0 1, 0.5, 0]]`.
fn parse_potential(s: &str, dim: usize) -> Result<Vec<PotentialTerm>> {
    const KEY: &str = "model.potential";
    let s = s.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| config_err(format!("{KEY}: expected [[k, a_cos, a_sin], ...]")))?;
    let mut terms = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let open = rest.strip_prefix('[').ok_or_else(|| config_err(format!("{KEY}: expected '[' at '{rest}'")))?;
        let close = open.find(']').ok_or_else(|| config_err(format!("{KEY}: unbalanced brackets")))?;
        let parts: Vec<&str> = open[..close].split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(config_err(format!("{KEY}: each term needs [k, a_cos, a_sin], got '[{}]'", &open[..close])));
        }
        let frequency = parts[0]
            .split_whitespace()
            .map(|t| t.parse::<i64>().map_err(|_| config_err(format!("{KEY}: bad frequency '{}'", parts[0]))))
            .collect::<Result<Vec<_>>>()?;
        if frequency.len() != dim {
            return Err(config_err(format!("{KEY}: frequency '{}' does not have {dim} components", parts[0])));
        }
        terms.push(PotentialTerm { frequency, cos_coeff: parse_f64(KEY, parts[1])?, sin_coeff: parse_f64(KEY, parts[2])? });
        rest = open[close + 1..].trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Ok(terms)
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err(format!("line {}: expected 'key = value'", no + 1)))?;
            let k = k.trim().to_string();
            if !k.contains('.') {
                return Err(config_err(format!("line {}: key '{k}' must be 'section.key'", no + 1)));
            }
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(config_err(format!("line {}: duplicate key '{k}'", no + 1)));
            }
        }
        let mut take = |k: &str| kv.remove(k);

        let kind = take("model.kind").ok_or_else(|| config_err("model.kind is required"))?;
        let mass = take("model.mass").map(|s| parse_f64("model.mass", &s)).transpose()?.unwrap_or(1.0);
        let dim = take("model.dim").map(|s| parse_usize("model.dim", &s)).transpose()?.unwrap_or(1);
        let model = match kind.as_str() {
            "pendulum" => {
                let strength = take("model.strength").map(|s| parse_f64("model.strength", &s)).transpose()?.unwrap_or(1.0);
                ModelSpec::Pendulum { strength }
            }
            "free" => ModelSpec::Free { dim, mass },
            "trig" => {
                let spec = take("model.potential").ok_or_else(|| config_err("model.potential is required for trig models"))?;
                let terms = parse_potential(&spec, dim)?;
                ModelSpec::Trig { dim, mass, terms }
            }
            "table" => {
                let path = take("model.table").ok_or_else(|| config_err("model.table is required for table models"))?;
                let need = |k: &str, v: Option<String>| v.ok_or_else(|| config_err(format!("{k} is required for table models")));
                let x_nodes = parse_usize("model.x_nodes", &need("model.x_nodes", take("model.x_nodes"))?)?;
                let v_min = parse_f64("model.v_min", &need("model.v_min", take("model.v_min"))?)?;
                let v_max = parse_f64("model.v_max", &need("model.v_max", take("model.v_max"))?)?;
                let v_nodes = parse_usize("model.v_nodes", &need("model.v_nodes", take("model.v_nodes"))?)?;
                let legendre_radius = take("model.legendre_radius").map(|s| parse_f64("model.legendre_radius", &s)).transpose()?;
                ModelSpec::Table { path: PathBuf::from(path), x_nodes, v_min, v_max, v_nodes, legendre_radius }
            }
            other => return Err(config_err(format!("model.kind '{other}' is not one of pendulum, free, trig, table"))),
        };

        let grid = match (take("grid.n"), take("grid.c_h")) {
            (Some(n), None) => GridRule::Fixed(parse_usize("grid.n", &n)?),
            (None, Some(c)) => GridRule::Refine { c_h: parse_f64("grid.c_h", &c)? },
            (None, None) => return Err(config_err("one of grid.n or grid.c_h is required")),
            (Some(_), Some(_)) => return Err(config_err("grid.n and grid.c_h are mutually exclusive")),
        };
        let taus = match (take("action.tau"), take("action.taus")) {
            (Some(t), None) => vec![parse_f64("action.tau", &t)?],
            (None, Some(ts)) => parse_f64_list("action.taus", &ts)?,
            (None, None) => return Err(config_err("one of action.tau or action.taus is required")),
            (Some(_), Some(_)) => return Err(config_err("action.tau and action.taus are mutually exclusive")),
        };
        let d = model.dim();
        let momentum = take("action.p").map(|s| parse_f64_list("action.p", &s)).transpose()?.unwrap_or_else(|| vec![0.0; d]);
        let deltas = take("solver.deltas").map(|s| parse_f64_list("solver.deltas", &s)).transpose()?.unwrap_or_else(|| default_delta_schedule(8));
        let tol = take("solver.tol").map(|s| parse_f64("solver.tol", &s)).transpose()?.unwrap_or(1e-6);
        let max_iter = take("solver.max_iter").map(|s| parse_usize("solver.max_iter", &s)).transpose()?.unwrap_or(crate::solvers::DEFAULT_MAX_ITER);
        let safety = take("solver.safety").map(|s| parse_f64("solver.safety", &s)).transpose()?.unwrap_or(1.5);
        let output_dir = take("output.dir").map(PathBuf::from);
        let precision = take("output.precision").map(|s| parse_usize("output.precision", &s)).transpose()?.unwrap_or(17);
        let mane_sources = take("mane.sources")
            .map(|s| parse_list("mane.sources", &s)?.iter().map(|e| parse_usize("mane.sources", e)).collect::<Result<Vec<_>>>())
            .transpose()?
            .unwrap_or_default();
        let mather_tolerance = take("mane.tolerance").map(|s| parse_f64("mane.tolerance", &s)).transpose()?;
        if let Some(k) = kv.keys().next() {
            return Err(config_err(format!("unknown key '{k}'")));
        }
        let cfg = Self { model, grid, taus, momentum, deltas, tol, max_iter, safety, output_dir, precision, mane_sources, mather_tolerance };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Structural checks; the window precondition is checked per kernel.
    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() || self.taus.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(config_err("time steps must lie in (0, 1]"));
        }
        if !strictly_decreasing(&self.taus) {
            return Err(config_err("action.taus must be strictly decreasing"));
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(config_err("discounts must lie in (0, 1]"));
        }
        if !strictly_decreasing(&self.deltas) {
            return Err(config_err("solver.deltas must be strictly decreasing"));
        }
        if !(self.tol > 0.0) {
            return Err(config_err("solver.tol must be positive"));
        }
        if !(self.safety >= 1.0) {
            return Err(config_err("solver.safety must be at least 1"));
        }
        if self.max_iter == 0 {
            return Err(config_err("solver.max_iter must be positive"));
        }
        if !(1..=17).contains(&self.precision) {
            return Err(config_err("output.precision must be between 1 and 17"));
        }
        if self.momentum.len() != self.model.dim() {
            return Err(config_err("action.p must have one entry per dimension"));
        }
        match self.grid {
            GridRule::Fixed(n) if n < 4 => return Err(config_err("grid.n must be at least 4")),
            GridRule::Refine { c_h } if !(c_h > 0.0) => return Err(config_err("grid.c_h must be positive")),
            _ => {}
        }
        if let Some(t) = self.mather_tolerance {
            if !(t >= 0.0) {
                return Err(config_err("mane.tolerance must be nonnegative"));
            }
        }
        Ok(())
    }

    /// The config in its text form; `parse(to_text())` reproduces every field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.model {
            ModelSpec::Pendulum { strength } => {
                let _ = writeln!(s, "model.kind = pendulum\nmodel.strength = {strength:?}");
            }
            ModelSpec::Free { dim, mass } => {
                let _ = writeln!(s, "model.kind = free\nmodel.dim = {dim}\nmodel.mass = {mass:?}");
            }
            ModelSpec::Trig { dim, mass, terms } => {
                let entries: Vec<String> = terms
                    .iter()
                    .map(|t| {
                        let k: Vec<String> = t.frequency.iter().map(|k| k.to_string()).collect();
                        format!("[{}, {:?}, {:?}]", k.join(" "), t.cos_coeff, t.sin_coeff)
                    })
                    .collect();
                let _ = writeln!(s, "model.kind = trig\nmodel.dim = {dim}\nmodel.mass = {mass:?}");
                let _ = writeln!(s, "model.potential = [{}]", entries.join(", "));
            }
            ModelSpec::Table { path, x_nodes, v_min, v_max, v_nodes, legendre_radius } => {
                let _ = writeln!(s, "model.kind = table\nmodel.table = {}", path.display());
                let _ = writeln!(s, "model.x_nodes = {x_nodes}\nmodel.v_min = {v_min:?}\nmodel.v_max = {v_max:?}\nmodel.v_nodes = {v_nodes}");
                if let Some(r) = legendre_radius {
                    let _ = writeln!(s, "model.legendre_radius = {r:?}");
                }
            }
        }
        match self.grid {
            GridRule::Fixed(n) => {
                let _ = writeln!(s, "grid.n = {n}");
            }
            GridRule::Refine { c_h } => {
                let _ = writeln!(s, "grid.c_h = {c_h:?}");
            }
        }
        let dbg = |v: &[f64]| fmt_list(&v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>());
        let _ = writeln!(s, "action.taus = {}\naction.p = {}", dbg(&self.taus), dbg(&self.momentum));
        let _ = writeln!(s, "solver.deltas = {}\nsolver.tol = {:?}", dbg(&self.deltas), self.tol);
        let _ = writeln!(s, "solver.max_iter = {}\nsolver.safety = {:?}", self.max_iter, self.safety);
        if let Some(d) = &self.output_dir {
            let _ = writeln!(s, "output.dir = {}", d.display());
        }
        let _ = writeln!(s, "output.precision = {}", self.precision);
        if !self.mane_sources.is_empty() {
            let _ = writeln!(s, "mane.sources = {}", fmt_list(&self.mane_sources));
        }
        if let Some(t) = self.mather_tolerance {
            let _ = writeln!(s, "mane.tolerance = {t:?}");
        }
        s
    }

    /// Nodes per axis for `tau`: fixed, or the smallest `n` with `1/n <= c_h tau^2`.
    pub fn nodes_for(&self, tau: f64) -> usize {
        match self.grid {
            GridRule::Fixed(n) => n,
            GridRule::Refine { c_h } => ((1.0 / (c_h * tau * tau)) * (1.0 - 1e-12)).ceil().max(4.0) as usize,
        }
    }
}

/// Model, bounds and tabulated kernel for one time step of a config.
pub struct Cell {
    pub tau: f64,
    pub model: LagrangianModel,
    pub bounds: AprioriBounds,
    pub kernel: ActionKernel,
}

impl Cell {
    pub fn build(cfg: &ExperimentConfig, tau: f64) -> Result<Self> {
        let model = cfg.model.build()?;
        let action = DiscreteAction::new(model.clone(), tau, cfg.momentum.clone())?;
        let bounds = estimate_bounds(&action, cfg.safety)?;
        let grid = PeriodicGrid::new(model.dim(), cfg.nodes_for(tau))?;
        let kernel = tabulate_kernel(&action, &grid, &bounds).map_err(|e| match e {
            WeakKamError::WindowTooSmall { radius, spacing } => {
                config_err(format!("tau = {tau}: window radius {radius} is below the grid spacing {spacing}; refine the grid"))
            }
            other => other,
        })?;
        Ok(Self { tau, model, bounds, kernel })
    }
}

/// Least-squares line through `(log scale, log error)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub pairs: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    /// Points dropped because their error was not positive.
    pub saturated: usize,
}

pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    let logs: Vec<(f64, f64)> =
        pairs.iter().filter(|&&(s, e)| s > 0.0 && e > 0.0 && e.is_finite()).map(|&(s, e)| (s.ln(), e.ln())).collect();
    let saturated = pairs.len() - logs.len();
    if logs.len() < 3 {
        return Err(WeakKamError::InsufficientPoints { needed: 3, got: logs.len() });
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(WeakKamError::InvalidInput("rate fit needs at least two distinct scales".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    let n_points = logs.len();
    Ok(RateFit { pairs: logs, slope, intercept, r_squared, n_points, saturated })
}

/// Options shared by all subcommands.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
}

/// Human-readable lines summarizing a run; artifacts are already on disk.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub lines: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

impl RunSummary {
    fn say(&mut self, line: String) {
        info!("{line}");
        self.lines.push(line);
    }
}

struct Out<'a> {
    dir: &'a Path,
    digits: usize,
    summary: RunSummary,
}

impl Out<'_> {
    fn num(&self, v: f64) -> String {
        format_digits(v, self.digits)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        self.summary.artifacts.push(path.clone());
        Ok(BufWriter::new(File::create(path)?))
    }

    fn grid_function(&mut self, name: &str, f: &GridFunction, provenance: &[String]) -> Result<()> {
        let w = self.create(name)?;
        f.write_csv_digits(w, provenance, self.digits)
    }

    fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(self.create(name)?);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn report_row(&self, r: &SolveReport) -> Vec<String> {
        vec![
            r.route.as_str().to_string(),
            self.num(r.tau),
            r.delta.map(|d| self.num(d)).unwrap_or_default(),
            r.n.to_string(),
            self.num(r.effective_action),
            self.num(r.normalized_effective),
            r.iterations.to_string(),
            self.num(r.final_residual),
            self.num(r.wall_time),
        ]
    }
}

fn tag(i: usize, tau: f64) -> String {
    format!("{i:02}_tau{tau}")
}

/// Run one subcommand, writing its artifacts under `opts.out_dir`.
pub fn run_subcommand(name: &str, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    fs::create_dir_all(&opts.out_dir)?;
    let mut out = Out { dir: &opts.out_dir, digits: cfg.precision, summary: RunSummary::default() };
    match name {
        "effective-action" => run_effective_action(cfg, &mut out)?,
        "weak-kam" => run_weak_kam(cfg, &mut out)?,
        "discounted" => run_discounted(cfg, &mut out)?,
        "select" => run_select(cfg, &mut out)?,
        "mane" => run_mane(cfg, &mut out)?,
        "sweep-tau" => run_sweep_tau(cfg, &mut out)?,
        "sweep-delta" => run_sweep_delta(cfg, &mut out)?,
        "validate" => run_validate(cfg, &mut out, opts.seed)?,
        other => return Err(config_err(format!("unknown subcommand '{other}'; expected one of {}", SUBCOMMANDS.join(", ")))),
    }
    Ok(out.summary)
}

fn run_effective_action(cfg: &ExperimentConfig, out: &mut Out) -> Result<()> {
    let mut rows = Vec::new();
    for &tau in &cfg.taus {
        let cell = Cell::build(cfg, tau)?;
        let (karp, _) = effective_action_karp(&cell.kernel)?;
        let limit = effective_action_discounted(&cell.kernel, &cfg.deltas, cfg.tol)?;
        let steps = cell.kernel.grid().len().max(16);
        let mps = effective_action_mean_per_site(&cell.kernel, steps)?;
        let spread = *limit.spreads.last().expect("nonempty schedule");
        let tolerances = [0.0, cfg.tol.max(2.0 * spread), mps.final_residual.max(cfg.tol)];
        for (r, tolerance) in [&karp, &limit.report, &mps].into_iter().zip(tolerances) {
            let mut row = out.report_row(r);
            row.push(out.num((r.effective_action - karp.effective_action).abs()));
            row.push(out.num(tolerance));
            rows.push(row);
        }
        out.summary.say(format!(
            "tau={tau}: karp {:e}, discounted-limit {:e}, mean-per-site {:e}",
            karp.effective_action, limit.report.effective_action, mps.effective_action
        ));
    }
    let mut header: Vec<&str> = SolveReport::CSV_HEADER.to_vec();
    header.extend(["cross_check", "tolerance"]);
    out.table("effective_action.csv", &header, &rows)
}

fn run_weak_kam(cfg: &ExperimentConfig, out: &mut Out) -> Result<()> {
    let mut rows = Vec::new();
    for (i, &tau) in cfg.taus.iter().enumerate() {
        let cell = Cell::build(cfg, tau)?;
        let sol = solve_weak_kam(&cell.kernel, &cfg.deltas, cfg.tol)?;
        let gap = supinf_gap(&sol.u, &cell.kernel, sol.effective_action)?;
        let note = vec![format!("weak KAM solution, tau = {tau}, effective action = {:e}", sol.effective_action)];
        out.grid_function(&format!("weak_kam_{}.csv", tag(i, tau)), &sol.u, &note)?;
        out.grid_function(&format!("calibration_defect_{}.csv", tag(i, tau)), &sol.calibration_defect, &[])?;
        let mut row = out.report_row(&sol.report);
        row.push(out.num(gap));
        rows.push(row);
        out.summary.say(format!("tau={tau}: effective action {:e}, supinf gap {gap:e}", sol.effective_action));
    }
    let mut header: Vec<&str> = SolveReport::CSV_HEADER.to_vec();
    header.push("supinf_gap");
    out.table("weak_kam.csv", &header, &rows)
}

fn run_discounted(cfg: &ExperimentConfig, out: &mut Out) -> Result<()> {
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for (i, &tau) in cfg.taus.iter().enumerate() {
        let cell = Cell::build(cfg, tau)?;
        let k = &cell.kernel;
        let lower = k.min_weight() / tau;
        let z = k.offsets().zero_index().expect("zero offset");
        let upper = (0..k.grid().len()).map(|x| k.weight(x, z)).fold(f64::NEG_INFINITY, f64::max) / tau;
        for (j, &delta) in cfg.deltas.iter().enumerate() {
            let (u, rep) = solve_discounted(k, delta, cfg.tol, cfg.max_iter)?;
            let (lo, hi) = (delta * u.min(), delta * u.max());
            let slack = delta * cfg.tol + 1e-12;
            let ok = lo >= lower - slack && hi <= upper + slack;
            if !ok {
                violations.push(format!("tau={tau} delta={delta}: delta*u in [{lo:e}, {hi:e}] outside [{lower:e}, {upper:e}]"));
            }
            out.grid_function(&format!("discounted_{}_d{j:02}.csv", tag(i, tau)), &u, &[format!("tau = {tau}, delta = {delta}")])?;
            let mut row = out.report_row(&rep);
            row.extend([out.num(lo), out.num(hi), out.num(lower), out.num(upper), ok.to_string()]);
            rows.push(row);
        }
        out.summary.say(format!("tau={tau}: {} discounted solves", cfg.deltas.len()));
    }
    let mut header: Vec<&str> = SolveReport::CSV_HEADER.to_vec();
    header.extend(["delta_u_min", "delta_u_max", "lower_bound", "upper_bound", "within_bounds"]);
    out.table("discounted.csv", &header, &rows)?;
    if violations.is_empty() {
        Ok(())
    } else {
        Err(WeakKamError::PropertyViolation(format!("discounted solution bounds: {}", violations.join("; "))))
    }
}

fn run_select(cfg: &ExperimentConfig, out: &mut Out) -> Result<()> {
    let mut rows = Vec::new();
    for (i, &tau) in cfg.taus.iter().enumerate() {
        let cell = Cell::build(cfg, tau)?;
        let sel = selected_solution(&cell.kernel, &cfg.deltas, cfg.tol)?;
        let mu = minimizing_measure(&cell.kernel)?;
        let dual = selected_solution_dual(&cell.kernel, sel.effective_action, std::slice::from_ref(&mu))?;
        let gap = dual.sup_norm_diff(&sel.u)?;
        let integral = mu.integrate(&sel.u)?;
        out.grid_function(&format!("selected_{}.csv", tag(i, tau)), &sel.u, &[format!("selected solution, tau = {tau}")])?;
        out.grid_function(&format!("selected_dual_{}.csv", tag(i, tau)), &dual, &[format!("dual characterization, tau = {tau}")])?;
        let mut row = out.report_row(&sel.report);
        row.extend([out.num(gap), out.num(integral)]);
        rows.push(row);
        out.summary.say(format!("tau={tau}: dual gap {gap:e}, measure integral {integral:e}"));
    }
    let mut header: Vec<&str> = SolveReport::CSV_HEADER.to_vec();
    header.extend(["dual_gap", "measure_integral"]);
    out.table("select.csv", &header, &rows)
}

fn run_mane(cfg: &ExperimentConfig, out: &mut Out) -> Result<()> {
    for (i, &tau) in cfg.taus.iter().enumerate() {
        let cell = Cell::build(cfg, tau)?;
        let (karp, _) = effective_action_karp(&cell.kernel)?;
        let ebar = karp.effective_action;
        let mu = minimizing_measure(&cell.kernel)?;
        mu.write_csv(out.create(&format!("measure_{}.csv", tag(i, tau)))?)?;
        let mut sources = cfg.mane_sources.clone();
        if sources.is_empty() {
            sources = mu.iter().map(|(x, _, _)| x).collect();
            sources.dedup();
        }
        for &s in &sources {
            if s >= cell.kernel.grid().len() {
                return Err(config_err(format!("mane.sources: node {s} outside the grid")));
            }
            let phi = mane_potential(&cell.kernel, ebar, s)?;
            out.grid_function(&format!("mane_{}_src{s}.csv", tag(i, tau)), &phi, &[format!("Mane potential from node {s}, tau = {tau}")])?;
        }
        let set = mather_set(&cell.kernel, cfg.mather_tolerance.unwrap_or(cfg.tol))?;
        let mut w = out.create(&format!("mather_set_{}.txt", tag(i, tau)))?;
        for x in &set {
            writeln!(w, "{x}")?;
        }
        w.flush()?;
        out.summary.say(format!("tau={tau}: effective action {ebar:e}, {} Mather nodes, {} potential columns", set.len(), sources.len()));
    }
    Ok(())
}

fn run_sweep_tau(cfg: &ExperimentConfig, out: &mut Out) -> Result<()> {
    let model = cfg.model.build()?;
    if cfg.momentum.iter().any(|&p| p != 0.0) {
        return Err(config_err("sweep-tau compares with the analytic effective Hamiltonian, which needs zero momentum"));
    }
    let hbar = analytic_effective_hamiltonian(&model)?;
    let ladder: Vec<(f64, usize)> = cfg.taus.iter().map(|&t| (t, cfg.nodes_for(t))).collect();
    let settings = SweepSettings { safety: cfg.safety, schedule: cfg.deltas.clone(), tol: cfg.tol };
    let sweep = continuum_limit_sweep(&model, &cfg.momentum, &ladder, &settings)?;
    let profile = PendulumProfile::recognize(&model);
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for (i, e) in sweep.entries.iter().enumerate() {
        let err = (e.normalized_effective + hbar).abs();
        pairs.push((e.tau, err));
        let gap = if i == 0 { String::new() } else { out.num(sweep.cauchy_gaps[i - 1]) };
        let prof = match &profile {
            Some(p) => out.num(p.to_grid(e.u.grid())?.sup_norm_diff(&e.u)?),
            None => String::new(),
        };
        rows.push(vec![
            out.num(e.tau),
            e.n.to_string(),
            out.num(e.normalized_effective),
            out.num(err),
            out.num(e.lipschitz),
            out.num(e.bounds.lipschitz_bound),
            gap,
            prof,
        ]);
        out.grid_function(&format!("sweep_u_{}.csv", tag(i, e.tau)), &e.u, &[format!("weak KAM solution, tau = {}", e.tau)])?;
    }
    out.table(
        "sweep_tau.csv",
        &["tau", "n", "normalized_effective", "rate_error", "lipschitz", "lipschitz_bound", "cauchy_gap", "profile_error"],
        &rows,
    )?;
    write_fit(out, "sweep_tau_fit.csv", &pairs)
}

fn write_fit(out: &mut Out, name: &str, pairs: &[(f64, f64)]) -> Result<()> {
    let header = ["status", "slope", "intercept", "r_squared", "n_points", "saturated"];
    match fit_rate(pairs) {
        Ok(f) => {
            out.summary.say(format!("rate fit: slope {:.4}, r^2 {:.4} over {} points", f.slope, f.r_squared, f.n_points));
            let row = vec![
                "ok".to_string(),
                out.num(f.slope),
                out.num(f.intercept),
                out.num(f.r_squared),
                f.n_points.to_string(),
                f.saturated.to_string(),
            ];
            out.table(name, &header, &[row])
        }
        Err(WeakKamError::InsufficientPoints { got, .. }) => {
            let zeros = pairs.len() - got;
            let status = if zeros > 0 { "saturated" } else { "insufficient" };
            if zeros > 0 {
                out.summary.say(format!("rate fit: {zeros} of {} errors are exactly zero (no signal), {got} usable", pairs.len()));
            } else {
                out.summary.say(format!("rate fit: {got} points, at least 3 are needed"));
            }
            let row = vec![status.into(), String::new(), String::new(), String::new(), got.to_string(), zeros.to_string()];
            out.table(name, &header, &[row])
        }
        Err(e) => Err(e),
    }
}

fn run_sweep_delta(cfg: &ExperimentConfig, out: &mut Out) -> Result<()> {
    if cfg.taus.len() < 3 {
        return Err(config_err("sweep-delta needs at least three time steps (the smallest is the reference)"));
    }
    let delta = cfg.deltas[0];
    let solutions = cfg
        .taus
        .iter()
        .map(|&tau| {
            let cell = Cell::build(cfg, tau)?;
            Ok(solve_discounted(&cell.kernel, delta, cfg.tol, cfg.max_iter)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = solutions.last().expect("three or more");
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for (i, (u, &tau)) in solutions.iter().zip(&cfg.taus).enumerate().take(solutions.len() - 1) {
        let err = compare_on_coarser(u, reference)?;
        pairs.push((tau, err));
        rows.push(vec![out.num(tau), u.grid().nodes_per_axis().to_string(), out.num(delta), out.num(err)]);
        out.grid_function(&format!("sweep_delta_u_{}.csv", tag(i, tau)), u, &[format!("tau = {tau}, delta = {delta}")])?;
    }
    out.table("sweep_delta.csv", &["tau", "n", "delta", "error_vs_reference"], &rows)?;
    write_fit(out, "sweep_delta_fit.csv", &pairs)
}

/// One checked property: name, measured value, limit, pass flag.
type Check = (String, f64, f64, bool);

fn run_validate(cfg: &ExperimentConfig, out: &mut Out, seed: u64) -> Result<()> {
    let mut checks: Vec<Check> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let push = |checks: &mut Vec<Check>, name: String, value: f64, limit: f64| {
        let ok = value <= limit;
        checks.push((name, value, limit, ok));
    };
    for (i, &tau) in cfg.taus.iter().enumerate() {
        let cell = Cell::build(cfg, tau)?;
        let k = &cell.kernel;
        let g = *k.grid();
        let random = |rng: &mut ChaCha8Rng| GridFunction::from_raw(g, (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (mut mono, mut nonexp, mut shift, mut infc, mut contr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for _ in 0..20 {
            let u = random(&mut rng);
            let v = random(&mut rng);
            let (tu, _) = backward_lax_oleinik(&u, k)?;
            let (tv, _) = backward_lax_oleinik(&v, k)?;
            // monotonicity on the ordered pair (min(u,v), u)
            let w = GridFunction::from_raw(g, u.values().iter().zip(v.values()).map(|(a, b)| a.min(*b)).collect());
            let (tw, _) = backward_lax_oleinik(&w, k)?;
            mono = mono.max(tw.values().iter().zip(tu.values()).map(|(a, b)| a - b).fold(0.0, f64::max));
            nonexp = nonexp.max(tu.sup_norm_diff(&tv)? - u.sup_norm_diff(&v)?);
            let c = rng.gen_range(-2.0..2.0);
            let (tc, _) = backward_lax_oleinik(&u.add_constant(c), k)?;
            shift = shift.max(tc.sup_norm_diff(&tu.add_constant(c))?);
            let twmin = GridFunction::from_raw(g, tu.values().iter().zip(tv.values()).map(|(a, b)| a.min(*b)).collect());
            infc = infc.max(tw.sup_norm_diff(&twmin)?);
            for &delta in &cfg.deltas {
                if tau * delta < 1.0 {
                    let (du, _) = discounted_lax_oleinik(&u, k, delta)?;
                    let (dv, _) = discounted_lax_oleinik(&v, k, delta)?;
                    contr = contr.max(du.sup_norm_diff(&dv)? - (1.0 - tau * delta) * u.sup_norm_diff(&v)?);
                }
            }
        }
        let scale = 1e-12;
        push(&mut checks, format!("tau{i}: monotonicity"), mono, scale);
        push(&mut checks, format!("tau{i}: non-expansiveness"), nonexp, scale);
        push(&mut checks, format!("tau{i}: constant shift"), shift, scale);
        push(&mut checks, format!("tau{i}: inf commutation"), infc, scale);
        push(&mut checks, format!("tau{i}: discounted contraction"), contr, scale);

        let fwd = forward_lax_oleinik(&GridFunction::constant(g, 0.0), k)?;
        // max_x T^+[0](x) = -min E
        push(&mut checks, format!("tau{i}: forward operator on zero"), (fwd.max() + k.min_weight()).abs(), 1e-12 * (1.0 + k.min_weight().abs()));

        let (karp, _) = effective_action_karp(k)?;
        let ebar = karp.effective_action;
        let z = k.offsets().zero_index().expect("zero offset");
        let diag_min = (0..g.len()).map(|x| k.weight(x, z)).fold(f64::INFINITY, f64::min);
        push(&mut checks, format!("tau{i}: bracket lower"), k.min_weight() - ebar, 1e-12);
        push(&mut checks, format!("tau{i}: bracket upper"), ebar - diag_min, 1e-12);

        let limit = effective_action_discounted(k, &cfg.deltas, cfg.tol)?;
        let allowed = cfg.tol.max(2.0 * limit.spreads.last().copied().unwrap_or(0.0));
        push(&mut checks, format!("tau{i}: karp vs discounted limit"), (limit.report.effective_action - ebar).abs(), allowed);

        let seq = mean_per_site_sequence(k, 12);
        let mut superadd = f64::NEG_INFINITY;
        for a in 1..=6 {
            for b in 1..=6 {
                superadd = superadd.max(seq[a - 1] + seq[b - 1] - seq[a + b - 1]);
            }
        }
        push(&mut checks, format!("tau{i}: mean-per-site superadditivity"), superadd, 1e-12 * (1.0 + seq[11].abs()));

        let sol = solve_weak_kam(k, &cfg.deltas, cfg.tol)?;
        let defect = calibration_defect(&sol.u, k, ebar)?;
        let worst = defect.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        push(&mut checks, format!("tau{i}: weak KAM calibration defect"), worst, cfg.tol);
        push(&mut checks, format!("tau{i}: supinf gap"), supinf_gap(&sol.u, k, ebar)?.abs(), cfg.tol);

        let mu = minimizing_measure(k)?;
        push(&mut checks, format!("tau{i}: measure holonomy"), mu.holonomy_residual(), 1e-10);
        push(&mut checks, format!("tau{i}: measure action"), (mu.action(k)? - ebar).abs(), 1e-12 * (1.0 + ebar.abs()));

        let samples: Vec<usize> = (0..3).map(|_| rng.gen_range(0..g.len())).collect();
        let cols = samples.iter().map(|&s| mane_potential(k, ebar, s)).collect::<Result<Vec<_>>>()?;
        let mut tri = f64::NEG_INFINITY;
        let mut dom = f64::NEG_INFINITY;
        for (a, ca) in samples.iter().zip(&cols) {
            for (b, cb) in samples.iter().zip(&cols) {
                let _ = cb;
                for z in 0..g.len() {
                    if a != b {
                        tri = tri.max(ca.values()[z] - (ca.values()[*b] + cb.values()[z]));
                    }
                }
            }
            for y in 0..g.len() {
                dom = dom.max(sol.u.values()[y] - sol.u.values()[*a] - ca.values()[y]);
            }
        }
        push(&mut checks, format!("tau{i}: Mane triangle inequality"), tri, 1e-9);
        push(&mut checks, format!("tau{i}: sub-action domination"), dom, cfg.tol);
    }
    let rows: Vec<Vec<String>> =
        checks.iter().map(|(n, v, l, ok)| vec![n.clone(), out.num(*v), out.num(*l), if *ok { "pass" } else { "fail" }.to_string()]).collect();
    out.table("validate.csv", &["property", "value", "limit", "status"], &rows)?;
    let failed: Vec<String> = checks.iter().filter(|c| !c.3).map(|c| format!("{} ({:e} > {:e})", c.0, c.1, c.2)).collect();
    out.summary.say(format!("{} properties checked, {} failed", checks.len(), failed.len()));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(WeakKamError::PropertyViolation(failed.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
# pendulum on a fixed grid
model.kind = pendulum
model.strength = 1.0
grid.n = 64
action.taus = [0.2, 0.1]
solver.deltas = [0.4, 0.2, 0.1]   # halving
solver.tol = 1e-6
";

    #[test]
    fn parses_and_round_trips() {
        let c = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.model, ModelSpec::Pendulum { strength: 1.0 });
        assert_eq!(c.grid, GridRule::Fixed(64));
        assert_eq!(c.taus, vec![0.2, 0.1]);
        assert_eq!(c.momentum, vec![0.0]);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        let trig = "model.kind = trig\nmodel.dim = 2\nmodel.potential = [[1 0, 0.01, 0], [0 1, -0.02, 0.5]]\naction.p = [0.1, 0]\ngrid.c_h = 2\naction.tau = 0.25\nmane.sources = [0, 5]\n";
        let t = ExperimentConfig::parse(trig).unwrap();
        assert_eq!(ExperimentConfig::parse(&t.to_text()).unwrap(), t);
        assert_eq!(t.nodes_for(0.25), 8);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "model.kind = pendulum\ngrid.n = 64\naction.taus = [0.1, 0.2]\n",
            "model.kind = pendulum\ngrid.n = 64\naction.tau = 0.1\nsolver.tol = 0\n",
            "model.kind = pendulum\ngrid.n = 64\naction.tau = 0.1\nsolver.colour = red\n",
            "model.kind = pendulum\ngrid.n = 64\ngrid.n = 32\naction.tau = 0.1\n",
            "model.kind = rotor\ngrid.n = 64\naction.tau = 0.1\n",
            "model.kind = pendulum\naction.tau = 0.1\n",
        ] {
            let err = ExperimentConfig::parse(bad).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_CONFIG, "{bad}: {err}");
        }
    }

    #[test]
    fn refinement_rule_respects_spacing() {
        let c = ExperimentConfig::parse("model.kind = pendulum\ngrid.c_h = 1\naction.taus = [0.2, 0.1, 0.05, 0.025]\n").unwrap();
        let ns: Vec<usize> = c.taus.iter().map(|&t| c.nodes_for(t)).collect();
        assert_eq!(ns, vec![25, 100, 400, 1600]);
        for (&t, &n) in c.taus.iter().zip(&ns) {
            assert!(1.0 / n as f64 <= t * t * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rate_fit_recovers_exact_powers() {
        let taus = [0.1, 0.05, 0.025];
        let lin = fit_rate(&taus.map(|t| (t, 3.0 * t))).unwrap();
        assert!((lin.slope - 1.0).abs() < 1e-12);
        assert!((lin.r_squared - 1.0).abs() < 1e-12);
        let quad = fit_rate(&taus.map(|t| (t, 0.5 * t * t))).unwrap();
        assert!((quad.slope - 2.0).abs() < 1e-12);
        assert!((quad.intercept - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rate_fit_flags_zero_signal() {
        let err = fit_rate(&[(0.1, 0.0), (0.05, 0.0), (0.025, 1e-3)]).unwrap_err();
        assert!(matches!(err, WeakKamError::InsufficientPoints { needed: 3, got: 1 }));
        let f = fit_rate(&[(0.2, 0.0), (0.1, 0.4), (0.05, 0.2), (0.025, 0.1)]).unwrap();
        assert_eq!((f.n_points, f.saturated), (3, 1));
    }
}
