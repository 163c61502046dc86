//! Batch benchmark harness: parse run configurations, dispatch to the
//! lattice or regression Monte Carlo solver, validate monotonicity
//! preconditions, and emit convergence tables as CSV, JSON, or log-log plot
//! data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use tripde::error::{Error, Result};
use tripde::generator::{epsilon_truncate, lookup, PdeProblem};
use tripde::lattice::{monotone_check_at, solve_tree};
use tripde::lsmc::{run_repeats, BasisSet};
use tripde::params::{build_params, MonotonicityParams};
use tripde::symmat::SymMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Tree,
    Lsmc,
}

impl Solver {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(Solver::Tree),
            "lsmc" => Ok(Solver::Lsmc),
            other => Err(Error::InvalidArgument(format!(
                "unknown solver {other:?}; expected tree or lsmc"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
    PlotData,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "plotdata" => Ok(OutputFormat::PlotData),
            other => Err(Error::InvalidArgument(format!(
                "unknown format {other:?}; expected csv, json or plotdata"
            ))),
        }
    }
}

/// One benchmark run: a problem, a solver, and a schedule of `(n, L, K)`
/// rows.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: String,
    pub solver: Solver,
    /// Initial state; defaults to the registry's benchmark point.
    pub x0: Option<Vec<f64>>,
    pub schedule: Vec<(usize, usize, usize)>,
    pub seed: u64,
    /// Optional `(p, sigma0 scale)` override replacing the automatic recipe.
    pub params_override: Option<(f64, f64)>,
    /// Optional truncation sigma-bound for degenerate generators.
    pub eps_truncation: Option<f64>,
    pub output: PathBuf,
    pub format: OutputFormat,
    pub allow_nonmonotone: bool,
}

impl RunConfig {
    /// Parses the flat `key = value` format. Recognized keys:
    /// `problem`, `solver`, `x0` (comma-separated), `schedule`
    /// (comma-separated `n:L:K` triples), `seed`, `p`, `sigma0_scale`,
    /// `eps`, `output`, `format`, `allow_nonmonotone`, `T` (must match the
    /// registered horizon). Lines starting with `#` are comments.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut problem = None;
        let mut solver = Solver::Tree;
        let mut x0 = None;
        let mut schedule = Vec::new();
        let mut seed = 0u64;
        let mut p_override = None;
        let mut sigma0_scale = None;
        let mut eps = None;
        let mut output = PathBuf::from("out");
        let mut format = OutputFormat::Csv;
        let mut allow_nonmonotone = false;
        let mut horizon_check: Option<f64> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidArgument(format!(
                    "config line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::InvalidArgument(format!(
                    "config line {}: cannot parse {what} from {value:?}",
                    lineno + 1
                ))
            };
            match key {
                "problem" => problem = Some(value.to_string()),
                "solver" => solver = Solver::parse(value)?,
                "x0" => {
                    let parsed: std::result::Result<Vec<f64>, _> =
                        value.split(',').map(|v| v.trim().parse::<f64>()).collect();
                    x0 = Some(parsed.map_err(|_| bad("a comma-separated vector"))?);
                }
                "schedule" => {
                    for item in value.split(',') {
                        let parts: Vec<&str> = item.trim().split(':').collect();
                        if parts.len() != 3 {
                            return Err(bad("n:L:K triples"));
                        }
                        let n = parts[0].parse().map_err(|_| bad("n"))?;
                        let l = parts[1].parse().map_err(|_| bad("L"))?;
                        let k = parts[2].parse().map_err(|_| bad("K"))?;
                        schedule.push((n, l, k));
                    }
                }
                "seed" => seed = value.parse().map_err(|_| bad("an integer seed"))?,
                "p" => p_override = Some(value.parse().map_err(|_| bad("p"))?),
                "sigma0_scale" => {
                    sigma0_scale = Some(value.parse().map_err(|_| bad("sigma0_scale"))?)
                }
                "eps" => eps = Some(value.parse().map_err(|_| bad("eps"))?),
                "output" => output = PathBuf::from(value),
                "format" => format = OutputFormat::parse(value)?,
                "allow_nonmonotone" => {
                    allow_nonmonotone = value.parse().map_err(|_| bad("a boolean"))?
                }
                "T" => horizon_check = Some(value.parse().map_err(|_| bad("T"))?),
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "config line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let problem = problem
            .ok_or_else(|| Error::InvalidArgument("config is missing `problem`".into()))?;
        let params_override = match (p_override, sigma0_scale) {
            (None, None) => None,
            (Some(p), Some(s)) => Some((p, s)),
            _ => {
                return Err(Error::InvalidArgument(
                    "p and sigma0_scale must be overridden together".into(),
                ))
            }
        };
        let config = RunConfig {
            problem,
            solver,
            x0,
            schedule,
            seed,
            params_override,
            eps_truncation: eps,
            output,
            format,
            allow_nonmonotone,
        };
        config.validate(horizon_check)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::InvalidArgument(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    fn validate(&self, horizon_check: Option<f64>) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidArgument("schedule must not be empty".into()));
        }
        for w in self.schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidArgument(
                    "schedule rows must be strictly ascending in n".into(),
                ));
            }
        }
        if self.solver == Solver::Tree {
            if let Some(&(n, l, k)) = self.schedule.iter().find(|&&(_, l, k)| l != 1 || k != 1) {
                return Err(Error::InvalidArgument(format!(
                    "tree solver is deterministic: row n={n} must use L=1 K=1, got L={l} K={k}"
                )));
            }
        }
        if let Some(t) = horizon_check {
            let entry = lookup(&self.problem)?;
            if (entry.problem.horizon - t).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "T={t} differs from the registered horizon {}; the horizon is part of the problem definition",
                    entry.problem.horizon
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub avg: f64,
    pub var_avg: Option<f64>,
    pub abs_error: Option<f64>,
    pub seconds: f64,
    /// Runtime monotone-coefficient check outcome at this row's step size.
    pub monotone_check: bool,
    /// `NR_{2n} - NR_n` against the previous row when `n` doubled.
    pub nr_diff: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTable {
    pub problem: String,
    pub solver: String,
    pub seed: u64,
    pub horizon: f64,
    pub rows: Vec<TableRow>,
}

impl ConvergenceTable {
    /// Human-readable rendering; includes the successive-difference column
    /// for problems without a closed-form solution.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let has_error = self.rows.iter().any(|r| r.abs_error.is_some());
        let _ = writeln!(s, "# {} ({}, seed {})", self.problem, self.solver, self.seed);
        let header = if has_error {
            "      n          L    K           avg       var_avg     abs_error   mono"
        } else {
            "      n          L    K           avg       var_avg       nr_diff   mono"
        };
        let _ = writeln!(s, "{header}");
        for r in &self.rows {
            let third = if has_error { r.abs_error } else { r.nr_diff };
            let _ = writeln!(
                s,
                "{:>7} {:>10} {:>4}  {:>12.6} {:>13} {:>13}   {}",
                r.n,
                r.l,
                r.k,
                r.avg,
                r.var_avg.map_or("NA".to_string(), |v| format!("{v:.3e}")),
                third.map_or("NA".to_string(), |v| format!("{v:.6}")),
                if r.monotone_check { "ok" } else { "FAIL" },
            );
        }
        s
    }
}

/// Resolved inputs for one run.
pub struct PreparedRun {
    pub problem: PdeProblem,
    pub params: MonotonicityParams,
    pub x0: Vec<f64>,
    pub basis: BasisSet,
}

/// Resolves the registry entry, applies truncation and parameter overrides,
/// and enforces the monotonicity gate.
pub fn prepare(config: &RunConfig) -> Result<PreparedRun> {
    let entry = lookup(&config.problem)?;
    let mut problem = entry.problem;
    if let Some(eps) = config.eps_truncation {
        problem = epsilon_truncate(&problem, eps, &SymMatrix::identity(problem.dim))?;
    }
    let d = problem.dim;
    let theta = problem.bounds.theta;
    if theta >= 2.0 / d as f64 && !config.allow_nonmonotone {
        return Err(Error::InvalidArgument(format!(
            "problem {:?} declares diagonal-dominance defect theta = {theta:.4} >= 2/d = {:.4}; \
             no trinomial weight keeps the scheme monotone. Re-run with --allow-nonmonotone \
             to proceed anyway.",
            config.problem,
            2.0 / d as f64
        )));
    }
    let params = match config.params_override {
        Some((p, scale)) => MonotonicityParams::with_override(
            p,
            SymMatrix::scaled_identity(d, scale),
            &problem.bounds,
        )?,
        None => build_params(&problem.bounds, &SymMatrix::identity(d))?,
    };
    let x0 = match &config.x0 {
        Some(v) => {
            if v.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "x0 has {} entries for d={d}",
                    v.len()
                )));
            }
            v.clone()
        }
        None => entry.x0,
    };
    let basis = BasisSet::affine_trig(d, &entry.basis_weights)?;
    Ok(PreparedRun { problem, params, x0, basis })
}

/// Executes the schedule sequentially and assembles the convergence table.
pub fn run(config: &RunConfig) -> Result<ConvergenceTable> {
    let prepared = prepare(config)?;
    let problem = &prepared.problem;
    let mut rows: Vec<TableRow> = Vec::with_capacity(config.schedule.len());
    for &(n, l, k) in &config.schedule {
        let h = problem.horizon / n as f64;
        let mono = monotone_check_at(&prepared.params, problem, h)?;
        let row = match config.solver {
            Solver::Tree => {
                let start = Instant::now();
                let sol = solve_tree(problem, &prepared.params, &prepared.x0, n)?;
                let abs_error = problem
                    .true_solution
                    .as_ref()
                    .map(|u| (sol.value - u(0.0, &prepared.x0)).abs());
                TableRow {
                    n,
                    l,
                    k,
                    avg: sol.value,
                    var_avg: None,
                    abs_error,
                    seconds: start.elapsed().as_secs_f64(),
                    monotone_check: mono,
                    nr_diff: None,
                }
            }
            Solver::Lsmc => {
                let report = run_repeats(
                    problem,
                    &prepared.params,
                    &prepared.x0,
                    n,
                    l,
                    k,
                    config.seed,
                    &prepared.basis,
                )?;
                TableRow {
                    n,
                    l,
                    k,
                    avg: report.avg,
                    var_avg: report.var_avg,
                    abs_error: report.abs_error,
                    seconds: report.seconds,
                    monotone_check: mono,
                    nr_diff: None,
                }
            }
        };
        let nr_diff = rows
            .last()
            .filter(|prev| n == 2 * prev.n)
            .map(|prev| row.avg - prev.avg);
        rows.push(TableRow { nr_diff, ..row });
    }
    Ok(ConvergenceTable {
        problem: config.problem.clone(),
        solver: match config.solver {
            Solver::Tree => "tree".into(),
            Solver::Lsmc => "lsmc".into(),
        },
        seed: config.seed,
        horizon: prepared.problem.horizon,
        rows,
    })
}

/// Ten-significant-digit decimal rendering used by the CSV and plot outputs.
pub fn format_value(v: f64) -> String {
    format!("{v:.9e}")
}

fn format_opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), format_value)
}

/// Writes the table in the requested format; returns the paths written.
pub fn emit(table: &ConvergenceTable, format: OutputFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::InvalidArgument("refusing to emit an empty table".into()));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", out_dir.display())))?;
    let stem = format!(
        "{}_{}",
        table.problem.replace(['.', '/'], "_"),
        table.solver
    );
    let write = |path: &Path, contents: &str| -> Result<()> {
        fs::write(path, contents).map_err(|e| {
            Error::InvalidArgument(format!("cannot write {}: {e}", path.display()))
        })
    };
    let mut written = Vec::new();
    match format {
        OutputFormat::Csv => {
            let path = out_dir.join(format!("{stem}.csv"));
            write(&path, &to_csv(table))?;
            written.push(path);
        }
        OutputFormat::Json => {
            let path = out_dir.join(format!("{stem}.json"));
            let json = serde_json::to_string_pretty(table)
                .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
            write(&path, &json)?;
            written.push(path);
        }
        OutputFormat::PlotData => {
            let path = out_dir.join(format!("{stem}.dat"));
            write(&path, &to_plotdata(table))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// CSV with the fixed header `n,L,K,avg,var_avg,abs_error,seconds`.
pub fn to_csv(table: &ConvergenceTable) -> String {
    let mut s = String::from("n,L,K,avg,var_avg,abs_error,seconds\n");
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.n,
            r.l,
            r.k,
            format_value(r.avg),
            format_opt(r.var_avg),
            format_opt(r.abs_error),
            format_value(r.seconds),
        );
    }
    s
}

/// Two columns `h |error|`, ready for log-log plotting; rows without a
/// closed-form error are skipped.
pub fn to_plotdata(table: &ConvergenceTable) -> String {
    let mut s = String::new();
    for r in &table.rows {
        if let Some(err) = r.abs_error {
            let h = table.horizon / r.n as f64;
            let _ = writeln!(s, "{} {}", format_value(h), format_value(err));
        }
    }
    s
}
