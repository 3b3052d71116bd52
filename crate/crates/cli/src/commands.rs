//! The subcommands, callable without the argument parser.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swimlane_core::config::ConfigError;
use swimlane_core::placement::{Ratio, Strategy};
use swimlane_core::pool::{run_churn, ChurnConfig, ChurnReport};
use swimlane_core::{ExperimentConfig, RunMode};
use swimlane_runtime::{run_with, RunOptions, RunResult, RuntimeError};
use swimlane_sim::{curve_csv, simulate, sweep_envs, SimError, SimResult, CSV_HEADER};

use crate::plot::{bars_svg, lines_svg, stacked_svg, PlotKind, Series};
use crate::records::{
    read_jsonl, Body, EpochRecord, MetricWriter, PoolRecord, RunSummary, UpdateRecord,
};
use crate::summary::{success_rate_curve, summarize_epochs, trailing_mean};
use crate::CliError;

/// Versions averaged for the reported success rate.
pub const SUCCESS_WINDOW: usize = 5;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

/// Reads and validates a config file; `None` gives the defaults.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    ExperimentConfig::from_json_str(&text).map_err(|e| match e {
        ConfigError::Parse(m) | ConfigError::Invalid(m) => {
            CliError::Invalid(format!("{}: {m}", path.display()))
        }
    })
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<RunMode>,
    pub strategy: Option<Strategy>,
    pub ratio: Option<Ratio>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        if let Some(m) = self.mode {
            cfg.runtime.mode = m;
        }
        if let Some(s) = self.strategy {
            cfg.placement.strategy = s;
        }
        if let Some(r) = self.ratio {
            cfg.placement.ratio = r;
        }
        if let Some(s) = self.seed {
            cfg.runtime.seed = s;
        }
        cfg.validate().map_err(invalid)
    }
}

pub fn run_label(cfg: &ExperimentConfig) -> String {
    format!(
        "{}-{}-{}-seed{}",
        cfg.runtime.mode, cfg.placement.strategy, cfg.placement.ratio, cfg.runtime.seed
    )
}

pub fn params_digest(r: &RunResult) -> String {
    let mut h = DefaultHasher::new();
    for v in r.final_params.flatten().as_slice() {
        v.to_bits().hash(&mut h);
    }
    format!("{:016x}", h.finish())
}

/// Policy inferences per epoch over every env of every node.
pub fn inference_steps(cfg: &ExperimentConfig) -> u64 {
    let per_env = (cfg.env.horizon as usize).div_ceil(cfg.policy.chunk) as u64;
    cfg.placement.nodes as u64 * cfg.env.n_envs as u64 * per_env
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Metric records of a finished run, in file order.
pub fn run_records(cfg: &ExperimentConfig, r: &RunResult) -> Result<Vec<Body>, CliError> {
    let label = run_label(cfg);
    let warmup = cfg.runtime.warmup_epochs;
    let steps = inference_steps(cfg);
    let epochs: Vec<EpochRecord> = r
        .reports
        .iter()
        .map(|rep| EpochRecord {
            run: label.clone(),
            chunk: cfg.policy.chunk,
            horizon: cfg.env.horizon,
            inference_steps: steps,
            report: rep.clone(),
        })
        .collect();
    let epoch_refs: Vec<&EpochRecord> = epochs.iter().collect();
    let throughput = summarize_epochs(&epoch_refs, warmup)?;
    let tail = r.reports.get(warmup..).unwrap_or(&[]);
    let updates: Vec<UpdateRecord> = r
        .updates
        .iter()
        .map(|u| UpdateRecord {
            run: label.clone(),
            epoch: r
                .reports
                .iter()
                .filter(|e| !e.quarantined)
                .nth(u.version as usize - 1)
                .map_or(0, |e| e.epoch),
            stats: u.clone(),
        })
        .collect();
    let curve: Vec<(u64, f64)> = r
        .updates
        .iter()
        .map(|u| (u.version, u.mean_reward))
        .collect();
    let summary = RunSummary {
        run: label.clone(),
        mode: r.mode.to_string(),
        strategy: cfg.placement.strategy.to_string(),
        ratio: cfg.placement.ratio.to_string(),
        nodes: cfg.placement.nodes,
        seed: cfg.runtime.seed,
        epochs: r.reports.len() as u64,
        warmup,
        virtual_time: r.virtual_time,
        throughput,
        rollout_time: mean(tail.iter().map(|e| e.rollout_time)),
        actor_time: mean(tail.iter().map(|e| e.actor_time)),
        transfer_time: mean(tail.iter().map(|e| e.transfer_time)),
        broadcast_time: mean(tail.iter().map(|e| e.broadcast_time)),
        sampler_bubble: r.bubble_stats(warmup).sampler_bubble,
        max_staleness: r.max_staleness,
        quarantined: r.quarantined,
        final_version: r.final_version,
        params_digest: params_digest(r),
        final_success_rate: trailing_mean(&curve, SUCCESS_WINDOW)
            .last()
            .map_or(0.0, |p| p.1),
        data_plane_bytes: r.data_plane.bytes,
        data_plane_copies: r.data_plane.copies,
        inter_node_data_bytes: r.inter_node.data,
        inter_node_control_bytes: r.inter_node.control,
        inter_node_gradient_bytes: r.inter_node.gradient,
    };
    let mut out: Vec<Body> = epochs.into_iter().map(Body::Epoch).collect();
    out.extend(updates.into_iter().map(Body::Update));
    out.extend(r.pools.iter().enumerate().map(|(index, stats)| {
        Body::Pool(PoolRecord {
            run: label.clone(),
            index,
            stats: *stats,
        })
    }));
    out.push(Body::RunSummary(summary));
    Ok(out)
}

fn abort(err: RuntimeError, cfg: &ExperimentConfig, diagnostics: &Path) -> CliError {
    if let RuntimeError::Config(m) = err {
        return CliError::Invalid(m);
    }
    let message = err.to_string();
    let text = format!("{message}\n\nconfig:\n{}\n", cfg.to_json_pretty());
    if let Err(e) = std::fs::write(diagnostics, text) {
        tracing::error!("cannot write {}: {e}", diagnostics.display());
    }
    CliError::Aborted {
        message,
        diagnostics: diagnostics.to_path_buf(),
    }
}

fn diagnostics_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".abort.txt");
    PathBuf::from(name)
}

/// Runs the live runtime once; `diagnostics` receives the abort report.
pub fn execute(cfg: &ExperimentConfig, diagnostics: &Path) -> Result<RunResult, CliError> {
    let topo = cfg.topology().map_err(invalid)?;
    tracing::info!(
        mode = %cfg.runtime.mode,
        strategy = %cfg.placement.strategy,
        ratio = %cfg.placement.ratio,
        epochs = cfg.runtime.epochs,
        "starting run"
    );
    run_with(
        cfg,
        &topo,
        cfg.runtime.mode,
        cfg.runtime.epochs,
        &RunOptions::default(),
    )
    .map_err(|e| abort(e, cfg, diagnostics))
}

/// `train`: one live run, records appended to `out`.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, CliError> {
    let r = execute(cfg, &diagnostics_path(out))?;
    let bodies = run_records(cfg, &r)?;
    let writer = MetricWriter::append(out)?;
    let mut summary = None;
    for b in bodies {
        if let Body::RunSummary(s) = &b {
            summary = Some(s.clone());
        }
        writer.send(b);
    }
    let n = writer.finish()?;
    let summary = summary.expect("run_records ends with a summary");
    tracing::info!(
        records = n,
        throughput = summary.throughput.transitions_per_sec,
        out = %out.display(),
        "run finished"
    );
    Ok(summary)
}

fn sim_err(e: SimError) -> CliError {
    match e {
        SimError::Config(m) => CliError::Invalid(m),
        other => CliError::Invalid(format!("simulation failed: {other}")),
    }
}

/// Parses `envs=A..B:step` into the counts `A, A+step, ..., <= B`.
pub fn parse_sweep(arg: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Invalid(format!("bad sweep {arg:?}, expected envs=A..B:step"));
    let range = arg.strip_prefix("envs=").ok_or_else(bad)?;
    let (span, step) = range.split_once(':').ok_or_else(bad)?;
    let (a, b) = span.split_once("..").ok_or_else(bad)?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let (a, b, step) = (parse(a)?, parse(b)?, parse(step)?);
    if step == 0 || a == 0 || b < a {
        return Err(bad());
    }
    Ok((a..=b).step_by(step).collect())
}

/// `simulate`: one point, or a sweep over env counts.
pub fn simulate_cmd(
    cfg: &ExperimentConfig,
    sweep: Option<&str>,
) -> Result<Vec<SimResult>, CliError> {
    let mode = cfg.runtime.mode;
    let epochs = cfg.runtime.epochs;
    match sweep {
        None => {
            let topo = cfg.topology().map_err(invalid)?;
            Ok(vec![simulate(cfg, &topo, mode, epochs).map_err(sim_err)?])
        }
        Some(arg) => sweep_envs(cfg, mode, epochs, &parse_sweep(arg)?).map_err(sim_err),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema: u32,
    pub sync: RunSummary,
    #[serde(rename = "async")]
    pub async_: RunSummary,
    /// Async over sync transitions per second.
    pub speedup: f64,
    /// The same ratio predicted by the discrete-event model.
    pub sim_speedup: f64,
    /// Sync rollout time over sync actor time.
    pub stage_balance: f64,
    /// Stage that bounds the async pipeline in the model.
    pub bottleneck: String,
    /// The async pipeline gains little because one stage dominates.
    pub quasi_synchronous: bool,
    pub max_staleness: u64,
}

/// Speedup at or below this is reported as quasi-synchronous.
pub const QUASI_SYNC_SPEEDUP: f64 = 1.4;

/// `compare`: sync and async with otherwise identical configs.
pub fn compare(cfg: &ExperimentConfig, out: &Path) -> Result<CompareReport, CliError> {
    let mut summaries = BTreeMap::new();
    let mut sims = BTreeMap::new();
    let topo = cfg.topology().map_err(invalid)?;
    for mode in [RunMode::Sync, RunMode::Async] {
        let mut c = cfg.clone();
        c.runtime.mode = mode;
        let r = execute(&c, &diagnostics_path(out))?;
        let s = run_records(&c, &r)?
            .into_iter()
            .find_map(|b| match b {
                Body::RunSummary(s) => Some(s),
                _ => None,
            })
            .expect("summary record");
        summaries.insert(mode.to_string(), s);
        sims.insert(
            mode.to_string(),
            simulate(&c, &topo, mode, c.runtime.epochs).map_err(sim_err)?,
        );
    }
    let sync = summaries.remove("sync").expect("sync run");
    let async_ = summaries.remove("async").expect("async run");
    let speedup = async_.throughput.transitions_per_sec / sync.throughput.transitions_per_sec;
    let sim_speedup = sims["async"].throughput / sims["sync"].throughput;
    let report = CompareReport {
        schema: crate::records::SCHEMA,
        stage_balance: sync.rollout_time / sync.actor_time,
        bottleneck: sims["async"].bottleneck.to_string(),
        quasi_synchronous: speedup <= QUASI_SYNC_SPEEDUP,
        max_staleness: async_.max_staleness,
        speedup,
        sim_speedup,
        sync,
        async_,
    };
    let text = serde_json::to_string_pretty(&report).map_err(invalid)?;
    std::fs::write(out, text + "\n").map_err(|e| CliError::io(out, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembenchReport {
    pub schema: u32,
    pub churn: ChurnConfig,
    pub dual: ChurnReport,
    pub unified: ChurnReport,
    /// Unified minus dual.
    pub model_failure_delta: i64,
    pub env_failure_delta: i64,
}

/// `membench`: the churn script against dual pools and the unified baseline.
pub fn membench(cfg: &ExperimentConfig) -> Result<MembenchReport, CliError> {
    let churn = ChurnConfig {
        param_count: cfg.policy.param_count(),
        seed: cfg.runtime.seed,
        ..ChurnConfig::default()
    };
    let dual = run_churn(&churn, &cfg.pools, false).map_err(invalid)?;
    let unified = run_churn(&churn, &cfg.pools, true).map_err(invalid)?;
    Ok(MembenchReport {
        schema: crate::records::SCHEMA,
        model_failure_delta: unified.model_failures as i64 - dual.model_failures as i64,
        env_failure_delta: unified.env_failures as i64 - dual.env_failures as i64,
        churn,
        dual,
        unified,
    })
}

/// Run summaries from a metrics file or a compare report.
fn load_summaries(path: &Path) -> Result<Vec<RunSummary>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if let Ok(report) = serde_json::from_str::<CompareReport>(&text) {
        return Ok(vec![report.sync, report.async_]);
    }
    let records = read_jsonl(path)?;
    let runs: Vec<RunSummary> = records
        .into_iter()
        .filter_map(|r| match r.body {
            Body::RunSummary(s) => Some(s),
            _ => None,
        })
        .collect();
    if runs.is_empty() {
        return Err(CliError::Invalid(format!(
            "{}: no run_summary records",
            path.display()
        )));
    }
    Ok(runs)
}

/// Series of (n_envs, throughput) per mode/strategy/ratio from a sweep CSV.
fn load_curve(path: &Path) -> Result<Vec<Series>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(CliError::Invalid(format!(
            "{}: scaling plots need a sweep CSV from `simulate`",
            path.display()
        )));
    }
    let mut series: Vec<Series> = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad =
            || CliError::Invalid(format!("{}: line {}: malformed row", path.display(), i + 2));
        if f.len() != CSV_HEADER.split(',').count() {
            return Err(bad());
        }
        let x: f64 = f[0].parse().map_err(|_| bad())?;
        let y: f64 = f[4].parse().map_err(|_| bad())?;
        let name = format!("{} {} {}", f[1], f[2], f[3]);
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((x, y)),
            None => series.push(Series {
                name,
                points: vec![(x, y)],
            }),
        }
    }
    if series.is_empty() {
        return Err(CliError::Invalid(format!(
            "{}: empty curve",
            path.display()
        )));
    }
    Ok(series)
}

fn bar_label(s: &RunSummary) -> String {
    format!("{} {} {}", s.mode, s.strategy, s.ratio)
}

/// `plot`: SVG text for `input`.
pub fn plot(input: &Path, kind: PlotKind) -> Result<String, CliError> {
    Ok(match kind {
        PlotKind::Throughput => {
            let bars: Vec<(String, f64)> = load_summaries(input)?
                .iter()
                .map(|s| (bar_label(s), s.throughput.transitions_per_sec))
                .collect();
            bars_svg("Throughput", "transitions / s", &bars)
        }
        PlotKind::Breakdown => {
            let bars: Vec<(String, Vec<f64>)> = load_summaries(input)?
                .iter()
                .map(|s| (bar_label(s), vec![s.rollout_time * 1e3, s.actor_time * 1e3]))
                .collect();
            stacked_svg("Time per epoch", "ms", &["rollout", "actor"], &bars)
        }
        PlotKind::Scaling => lines_svg(
            "Scaling",
            "environments",
            "transitions / s",
            &load_curve(input)?,
        ),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn curve_text(results: &[SimResult]) -> String {
    curve_csv(results)
}

/// Success-rate series of the update records of `run`.
pub fn success_curve_of(path: &Path, run: Option<&str>) -> Result<Vec<(u64, f64)>, CliError> {
    Ok(success_rate_curve(&read_jsonl(path)?, run))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        assert_eq!(
            parse_sweep("envs=384..1536:384").unwrap(),
            vec![384, 768, 1152, 1536]
        );
        assert_eq!(parse_sweep("envs=64..100:64").unwrap(), vec![64]);
        for bad in [
            "384..768:384",
            "envs=10..5:1",
            "envs=1..5:0",
            "envs=a..5:1",
            "envs=1..5",
        ] {
            assert!(parse_sweep(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn inference_steps_round_up_ragged_chunks() {
        let mut cfg = ExperimentConfig::default();
        cfg.env.horizon = 10;
        cfg.policy.chunk = 4;
        cfg.env.n_envs = 8;
        assert_eq!(inference_steps(&cfg), 24);
    }

    #[test]
    fn records_summarize_to_the_runtime_throughput() {
        let mut cfg = ExperimentConfig::default();
        cfg.runtime.epochs = 5;
        cfg.runtime.costs.train_us_per_transition = 2.0;
        let r = execute(&cfg, Path::new("/nonexistent")).unwrap();
        let bodies = run_records(&cfg, &r).unwrap();
        let Some(Body::RunSummary(s)) = bodies.last() else {
            panic!("summary last")
        };
        let want = r.throughput(cfg.runtime.warmup_epochs);
        assert!((s.throughput.transitions_per_sec - want).abs() <= 1e-9 * want);
        assert_eq!(
            bodies
                .iter()
                .filter(|b| matches!(b, Body::Update(_)))
                .count(),
            5
        );
        assert_eq!(s.final_version, 5);
    }
}
