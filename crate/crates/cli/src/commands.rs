//! The `run`, `sweep-exponents`, `sweep-dt` and `bounds` commands.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fxdist::protocol::{gain_check, settling_bounds, GainCheck, SettlingBounds};
use fxdist::sim::{self, first_crossing, monotone_tail, Metric, Scenario, StopTolerances, Trace};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ResolvedConfig, ScenarioConfig};
use crate::error::CliError;

/// Where a config came from: relative dataset paths resolve against `base_dir`.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub resolved: ResolvedConfig,
    pub base_dir: Option<PathBuf>,
}

/// Reads `--config` or `--preset` and applies the `--seed`/`--stride` overrides.
pub fn load(config: Option<&Path>, preset: Option<&str>, seed: Option<u64>, stride: Option<usize>) -> Result<LoadedConfig, CliError> {
    let (cfg, base_dir) = match (config, preset) {
        (Some(_), Some(_)) => return Err(CliError::Config("give either --config or --preset, not both".into())),
        (Some(p), None) => (ScenarioConfig::load(p)?, p.parent().map(Path::to_path_buf)),
        (None, Some(name)) => (ScenarioConfig::from_preset(name)?, None),
        (None, None) => return Err(CliError::Config("one of --config or --preset is required".into())),
    };
    let mut resolved = cfg.resolve()?;
    if let Some(s) = seed {
        resolved.seed = s;
    }
    if let Some(s) = stride {
        if s == 0 {
            return Err(CliError::Config("--stride must be at least 1".into()));
        }
        resolved.record_stride = s;
    }
    Ok(LoadedConfig { resolved, base_dir })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub n_agents: usize,
    pub lambda2_star: f64,
    pub settling_bounds: SettlingBounds,
    pub gain_check: GainCheck,
}

fn bounds_for(s: &Scenario) -> Result<BoundsReport, CliError> {
    let n = s.n_agents();
    let lambda2_star = s.schedule.lambda2_star()?;
    Ok(BoundsReport {
        n_agents: n,
        lambda2_star,
        settling_bounds: settling_bounds(&s.params, n, lambda2_star)?,
        gain_check: gain_check(&s.params, n),
    })
}

/// Settling-time bounds and gain verdict without simulating.
pub fn cmd_bounds(cfg: &LoadedConfig) -> Result<BoundsReport, CliError> {
    let mut r = cfg.resolved.clone();
    r.optimum = crate::config::OptimumSpec::None;
    r.track_objective_gap = false;
    let s = r.scenario(cfg.base_dir.as_deref())?;
    sim::validate(&s)?;
    bounds_for(&s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub metric: Metric,
    pub threshold: f64,
    pub time: Option<f64>,
    /// Which bound interval the crossing falls in.
    pub phase: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub t: f64,
    pub grad_sum_norm: f64,
    pub max_disagreement: f64,
    pub max_err_to_opt: Option<f64>,
    pub theta_disagreement: f64,
    pub objective_gap: Option<f64>,
    pub conservation_defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_agents: usize,
    pub dim: usize,
    pub lambda2_star: f64,
    pub settling_bounds: SettlingBounds,
    pub gain_check: GainCheck,
    pub warnings: Vec<String>,
    pub x_star: Option<Vec<f64>>,
    pub final_x: Vec<Vec<f64>>,
    #[serde(rename = "final")]
    pub last: FinalMetrics,
    pub crossings: Vec<Crossing>,
    /// After `grad_sum_norm` first reaches 1e-3 it stays within 10x of that value.
    pub monotone_tail: Option<bool>,
    /// Largest `|h_i - h_j|` seen at recorded steps, to check `rho` against.
    pub observed_rho: f64,
    pub condition_events: u64,
    pub iterations: u64,
    pub stopped_early: bool,
    pub wall_clock_s: f64,
    pub time_per_iteration_s: f64,
}

pub const DEFAULT_CROSSINGS: [(Metric, f64); 5] = [
    (Metric::GradSumNorm, 1e-3),
    (Metric::GradSumNorm, 1e-6),
    (Metric::MaxDisagreement, 1e-4),
    (Metric::MaxErrToOpt, 1e-3),
    (Metric::ObjectiveGap, 1e-8),
];

fn phase_of(t: f64, b: &SettlingBounds) -> &'static str {
    if t <= b.t1 {
        "estimation"
    } else if t <= b.t1 + b.t2 {
        "consensus"
    } else if t <= b.total {
        "optimization"
    } else {
        "beyond_bound"
    }
}

/// Runs a scenario and collects the summary; nothing is written.
pub fn simulate(s: &Scenario) -> Result<(Trace, RunSummary), CliError> {
    let validation = sim::validate(s)?;
    let bounds = bounds_for(s)?;
    let start = Instant::now();
    let trace = sim::run(s)?;
    let wall = start.elapsed().as_secs_f64();
    let last = trace.final_row().ok_or_else(|| CliError::Config("empty trace".into()))?;
    let crossings = DEFAULT_CROSSINGS
        .iter()
        .filter(|(m, _)| trace.has(*m))
        .map(|&(metric, threshold)| {
            let time = first_crossing(&trace, metric, threshold)?;
            Ok(Crossing { metric, threshold, time, phase: time.map(|t| phase_of(t, &bounds.settling_bounds).to_string()) })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let summary = RunSummary {
        n_agents: s.n_agents(),
        dim: s.dim(),
        lambda2_star: bounds.lambda2_star,
        settling_bounds: bounds.settling_bounds,
        gain_check: bounds.gain_check,
        warnings: validation.warnings,
        x_star: s.x_star.clone(),
        final_x: trace.final_x.clone(),
        last: FinalMetrics {
            t: last.t,
            grad_sum_norm: last.grad_sum_norm,
            max_disagreement: last.max_disagreement,
            max_err_to_opt: last.max_err_to_opt,
            theta_disagreement: last.theta_disagreement,
            objective_gap: last.objective_gap,
            conservation_defect: last.conservation_defect,
        },
        crossings,
        monotone_tail: monotone_tail(&trace, 1e-3, 10.0),
        observed_rho: trace.observed_rho,
        condition_events: trace.condition_events,
        iterations: trace.iterations,
        stopped_early: trace.stopped_early,
        wall_clock_s: wall,
        time_per_iteration_s: if trace.iterations > 0 { wall / trace.iterations as f64 } else { 0.0 },
    };
    Ok((trace, summary))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

/// Runs and writes `trace.csv`, `diagnostics.csv`, `states.csv` (when
/// recorded), `summary.json` and `resolved_config.json` into `out_dir`.
pub fn run_to_dir(cfg: &ResolvedConfig, base_dir: Option<&Path>, out_dir: &Path) -> Result<RunSummary, CliError> {
    fs::create_dir_all(out_dir)?;
    let s = cfg.scenario(base_dir)?;
    let (trace, summary) = simulate(&s)?;
    trace.write_csv(BufWriter::new(File::create(out_dir.join("trace.csv"))?))?;
    trace.write_diagnostics_csv(BufWriter::new(File::create(out_dir.join("diagnostics.csv"))?))?;
    if s.record_states {
        trace.write_states_csv(BufWriter::new(File::create(out_dir.join("states.csv"))?))?;
    }
    write_json(&out_dir.join("summary.json"), &summary)?;
    write_json(&out_dir.join("resolved_config.json"), cfg)?;
    Ok(summary)
}

pub fn cmd_run(cfg: &LoadedConfig, out_dir: &Path) -> Result<RunSummary, CliError> {
    run_to_dir(&cfg.resolved, cfg.base_dir.as_deref(), out_dir)
}

/// Ten pairs with the high exponent rising from 1.05 to 1.5 and the low
/// one falling from 0.95 to 0.5.
pub fn default_exponent_grid() -> Vec<(f64, f64)> {
    (0..10).map(|k| ((105 + 5 * k) as f64 / 100.0, (95 - 5 * k) as f64 / 100.0)).collect()
}

/// `high:low` pairs separated by commas, e.g. `1.1:0.9,1.2:0.8`.
pub fn parse_grid(spec: &str) -> Result<Vec<(f64, f64)>, CliError> {
    let grid = spec
        .split(',')
        .map(|pair| {
            let (h, l) = pair
                .split_once(':')
                .ok_or_else(|| CliError::Config(format!("grid entry `{pair}` is not high:low")))?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| CliError::Config(format!("grid value `{s}` is not a number")))
            };
            Ok((parse(h)?, parse(l)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    validate_grid(&grid)?;
    Ok(grid)
}

fn validate_grid(grid: &[(f64, f64)]) -> Result<(), CliError> {
    if grid.is_empty() {
        return Err(CliError::Config("empty exponent grid".into()));
    }
    for &(h, l) in grid {
        if !(h > 1.0) || !h.is_finite() || !(l > 0.0 && l < 1.0) {
            return Err(CliError::Config(format!("invalid exponent pair ({h}, {l}): need high > 1 and low in (0, 1)")));
        }
    }
    Ok(())
}

pub fn parse_dts(spec: &str) -> Result<Vec<f64>, CliError> {
    let dts = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Config(format!("dt `{s}` is not a number"))))
        .collect::<Result<Vec<_>, _>>()?;
    validate_dts(&dts)?;
    Ok(dts)
}

fn validate_dts(dts: &[f64]) -> Result<(), CliError> {
    if dts.is_empty() {
        return Err(CliError::Config("empty dt list".into()));
    }
    if let Some(bad) = dts.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(CliError::Config(format!("dt {bad} must be positive")));
    }
    Ok(())
}

pub const DEFAULT_DTS: [f64; 5] = [1e-4, 5e-5, 1e-5, 5e-6, 1e-6];

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        b = b.num_threads(w);
    }
    b.build().map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentRun {
    pub index: usize,
    pub high: f64,
    pub low: f64,
    pub crossing_time: Option<f64>,
    pub wall_clock_s: f64,
    /// Set when the run blew up; the crossing then counts as never.
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepExponentsReport {
    pub threshold: f64,
    pub runs: Vec<ExponentRun>,
    /// Grid indices ordered by crossing time, never-crossing runs last.
    pub sorted_by_crossing: Vec<usize>,
    /// Adjacent grid pairs whose crossing time increases.
    pub adjacent_violations: usize,
}

/// Sets every high exponent to `high` and every low one to `low`.
pub fn with_exponents(cfg: &ResolvedConfig, high: f64, low: f64) -> ResolvedConfig {
    let mut c = cfg.clone();
    c.params.l1 = high;
    c.params.mu1 = high;
    c.params.nu1 = high;
    c.params.l2 = low;
    c.params.mu2 = low;
    c.params.nu2 = low;
    c
}

fn crossing_key(t: Option<f64>) -> f64 {
    t.unwrap_or(f64::INFINITY)
}

/// One run per exponent pair, each stopping once `grad_sum_norm` reaches
/// `threshold`. A single pair is an ordinary run.
pub fn cmd_sweep_exponents(
    cfg: &LoadedConfig,
    grid: &[(f64, f64)],
    threshold: f64,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<SweepExponentsReport, CliError> {
    validate_grid(grid)?;
    if !(threshold > 0.0) {
        return Err(CliError::Config(format!("threshold {threshold} must be positive")));
    }
    fs::create_dir_all(out_dir)?;
    let base = cfg.base_dir.as_deref();
    let runs: Vec<ExponentRun> = if let [(high, low)] = grid {
        let c = with_exponents(&cfg.resolved, *high, *low);
        let summary = run_to_dir(&c, base, out_dir)?;
        let time = summary
            .crossings
            .iter()
            .find(|c| c.metric == Metric::GradSumNorm && c.threshold == threshold)
            .and_then(|c| c.time);
        let time = match time {
            Some(t) => Some(t),
            None => {
                let trace = Trace::read_csv(File::open(out_dir.join("trace.csv"))?)?;
                first_crossing(&trace, Metric::GradSumNorm, threshold)?
            }
        };
        vec![ExponentRun {
            index: 0,
            high: *high,
            low: *low,
            crossing_time: time,
            wall_clock_s: summary.wall_clock_s,
            diverged: None,
        }]
    } else {
        pool(workers)?.install(|| {
            grid.par_iter()
                .enumerate()
                .map(|(index, &(high, low))| {
                    let mut c = with_exponents(&cfg.resolved, high, low);
                    c.stop = Some(StopTolerances { grad_sum_tol: threshold, disagreement_tol: f64::INFINITY });
                    let dir = out_dir.join(format!("pair_{index:02}"));
                    let summary = match run_to_dir(&c, base, &dir) {
                        Err(CliError::Core(e @ fxdist::Error::Divergence { .. })) => {
                            log::warn!("pair {index} ({high}, {low}): {e}");
                            let diverged = Some(e.to_string());
                            return Ok(ExponentRun { index, high, low, crossing_time: None, wall_clock_s: 0.0, diverged });
                        }
                        r => r?,
                    };
                    let trace = Trace::read_csv(File::open(dir.join("trace.csv"))?)?;
                    let crossing_time = first_crossing(&trace, Metric::GradSumNorm, threshold)?;
                    Ok(ExponentRun { index, high, low, crossing_time, wall_clock_s: summary.wall_clock_s, diverged: None })
                })
                .collect::<Result<Vec<_>, CliError>>()
        })?
    };
    let mut sorted: Vec<usize> = (0..runs.len()).collect();
    sorted.sort_by(|&a, &b| crossing_key(runs[a].crossing_time).total_cmp(&crossing_key(runs[b].crossing_time)));
    let adjacent_violations = runs
        .windows(2)
        .filter(|w| crossing_key(w[1].crossing_time) > crossing_key(w[0].crossing_time))
        .count();
    let report = SweepExponentsReport { threshold, runs, sorted_by_crossing: sorted, adjacent_violations };
    let mut wr = csv::Writer::from_path(out_dir.join("crossings.csv")).map_err(fxdist::Error::from)?;
    wr.write_record(["index", "high", "low", "crossing_time"]).map_err(fxdist::Error::from)?;
    for r in &report.runs {
        wr.write_record([
            r.index.to_string(),
            r.high.to_string(),
            r.low.to_string(),
            r.crossing_time.map(sim::fmt17).unwrap_or_default(),
        ])
        .map_err(fxdist::Error::from)?;
    }
    wr.flush()?;
    write_json(&out_dir.join("sweep_exponents.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtRow {
    pub dt: f64,
    pub iterations: u64,
    pub wall_clock_s: f64,
    pub time_per_iteration_s: f64,
    pub final_error: Option<f64>,
}

/// One run per step size over the configured horizon, early stopping off.
/// Rows keep the order of `dts`.
pub fn cmd_sweep_dt(cfg: &LoadedConfig, dts: &[f64], out_dir: &Path, workers: Option<usize>) -> Result<Vec<DtRow>, CliError> {
    validate_dts(dts)?;
    fs::create_dir_all(out_dir)?;
    let base = cfg.base_dir.as_deref();
    let record_every = cfg.resolved.record_stride as f64 * cfg.resolved.dt;
    let rows = pool(workers)?.install(|| {
        dts.par_iter()
            .enumerate()
            .map(|(k, &dt)| {
                let mut c = cfg.resolved.clone();
                c.dt = dt;
                c.stop = None;
                c.record_stride = ((record_every / dt).round() as usize).max(1);
                let summary = run_to_dir(&c, base, &out_dir.join(format!("dt_{k:02}")))?;
                Ok(DtRow {
                    dt,
                    iterations: summary.iterations,
                    wall_clock_s: summary.wall_clock_s,
                    time_per_iteration_s: summary.time_per_iteration_s,
                    final_error: summary.last.max_err_to_opt,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let mut wr = csv::Writer::from_path(out_dir.join("dt_table.csv")).map_err(fxdist::Error::from)?;
    wr.write_record(["dt", "iterations", "wall_clock_s", "time_per_iteration_s", "final_error"])
        .map_err(fxdist::Error::from)?;
    for r in &rows {
        wr.write_record([
            sim::fmt17(r.dt),
            r.iterations.to_string(),
            sim::fmt17(r.wall_clock_s),
            sim::fmt17(r.time_per_iteration_s),
            r.final_error.map(sim::fmt17).unwrap_or_default(),
        ])
        .map_err(fxdist::Error::from)?;
    }
    wr.flush()?;
    write_json(&out_dir.join("sweep_dt.json"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_matches_uniform_pairs() {
        let g = default_exponent_grid();
        assert_eq!(g.len(), 10);
        assert!((g[0].0 - 1.05).abs() < 1e-12 && (g[0].1 - 0.95).abs() < 1e-12);
        assert!((g[9].0 - 1.5).abs() < 1e-12 && (g[9].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grid_and_dt_parsing() {
        assert_eq!(parse_grid("1.1:0.9, 1.2:0.8").unwrap(), vec![(1.1, 0.9), (1.2, 0.8)]);
        assert!(parse_grid("0.9:0.8").is_err());
        assert!(parse_grid("1.2").is_err());
        assert!(parse_grid("1.2:1.0").is_err());
        assert_eq!(parse_dts("1e-4,5e-5").unwrap(), vec![1e-4, 5e-5]);
        assert!(parse_dts("1e-4,-1").is_err());
        assert!(parse_dts("x").is_err());
    }

    #[test]
    fn phases() {
        let b = SettlingBounds { t1: 1.0, t2: 2.0, t3: 3.0, total: 6.0 };
        assert_eq!(phase_of(0.5, &b), "estimation");
        assert_eq!(phase_of(2.5, &b), "consensus");
        assert_eq!(phase_of(5.0, &b), "optimization");
        assert_eq!(phase_of(7.0, &b), "beyond_bound");
    }
}
