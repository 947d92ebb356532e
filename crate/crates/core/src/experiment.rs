//! Experiment runner: construct the dataset, run the MLR model (shared
//! distributed prediction through the simulator, or a per-node local
//! loop), run the Persistence and EWMA baselines over the same span, and
//! emit reports and plot-ready files.
//!
//! Artifacts written per run, all byte-deterministic for a fixed
//! (config, seed):
//!
//! - `predictions.csv` — `model,day,predicted,observed,error` rows
//! - `report_<model>.json` — one evaluation report per model
//! - `simlog.jsonl` — the simulation log (empty in per-node mode)
//! - `plot_<model>.csv` — `day,observed,predicted` series per model
//! - `reports.txt` — the aligned metrics table

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::baselines::EwmaState;
use crate::config::{ConfigError, ExperimentConfig};
use crate::dataio::{self, DataError, SyntheticConfig, TimeSeries};
use crate::features::FeatureSpec;
use crate::metrics::{self, Counters, EvalReport};
use crate::predictor::{PredictionMode, PredictorState, RecalPolicy};
use crate::simnet::{self, NodeData, SimConfig, SimulationLog};
use crate::NodeId;

pub const MODEL_MLR: &str = "mlr";

/// Predictions by target day, the simulation log, and per-node counters
/// of one model run.
type ModelRun = (BTreeMap<usize, f64>, SimulationLog, Vec<Counters>);
pub const MODEL_PERSISTENCE: &str = "persistence";
pub const MODEL_EWMA: &str = "ewma";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("io error: {0}")]
    Io(String),
}

impl ExperimentError {
    /// CLI exit code: 2 for config/data validation, 1 for runtime/io.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Data(_) => 2,
            ExperimentError::Runtime(_) | ExperimentError::Io(_) => 1,
        }
    }
}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

impl From<DataError> for ExperimentError {
    fn from(e: DataError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

/// Day-indexed dataset shared by the model and the baselines.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub node_data: Vec<NodeData>,
    /// Master (node 0) solar series, the prediction target.
    pub observed: Vec<f64>,
    /// Days whose observation was gap-filled; excluded from evaluation.
    pub flagged: Vec<bool>,
    pub days: usize,
    pub nodes: usize,
}

/// In-memory result of a run, before artifact serialization.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Reports in model order: mlr, then enabled baselines.
    pub reports: Vec<EvalReport>,
    pub eval_days: Vec<usize>,
    pub observed: Vec<f64>,
    /// Per-model predictions keyed by target day.
    pub predictions: BTreeMap<String, BTreeMap<usize, f64>>,
    pub simlog: SimulationLog,
}

/// Paths produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub reports: Vec<EvalReport>,
}

pub fn dataset_from_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, ExperimentError> {
    let series = dataio::generate_synthetic(cfg)?;
    dataset_from_series(&series, None)
}

pub fn dataset_from_csv(path: &Path) -> Result<Dataset, ExperimentError> {
    let file = fs::File::open(path)
        .map_err(|e| ExperimentError::Data(format!("cannot open {}: {e}", path.display())))?;
    let raw = dataio::load_csv(BufReader::new(file))?;
    let daily: Vec<TimeSeries> = raw.iter().map(dataio::daily_average).collect();
    dataset_from_series(&daily, None)
}

/// Aligns per-node daily series onto a common day-indexed span. All
/// solar series plus node 0's environmental sensors must overlap; gap
/// flags of the master solar series mark days excluded from evaluation.
pub fn dataset_from_series(
    series: &[TimeSeries],
    require_nodes: Option<usize>,
) -> Result<Dataset, ExperimentError> {
    let mut solar: BTreeMap<NodeId, &TimeSeries> = BTreeMap::new();
    let mut env: BTreeMap<String, &TimeSeries> = BTreeMap::new();
    for ts in series {
        if ts.sensor == "solar" {
            solar.insert(ts.node, ts);
        } else if ts.node == 0 {
            env.insert(ts.sensor.clone(), ts);
        }
    }
    if solar.is_empty() {
        return Err(ExperimentError::Data("no solar series in dataset".into()));
    }
    let nodes = solar.len();
    for id in 0..nodes as NodeId {
        if !solar.contains_key(&id) {
            return Err(ExperimentError::Data(format!(
                "solar series missing for node {id}; nodes must be 0..{nodes}"
            )));
        }
    }
    if let Some(required) = require_nodes {
        if nodes != required {
            return Err(ExperimentError::Data(format!(
                "dataset has {nodes} nodes, config requires {required}"
            )));
        }
    }

    let mut span_start = i64::MIN;
    let mut span_end = i64::MAX;
    for ts in solar.values().copied().chain(env.values().copied()) {
        let first = ts
            .first_day()
            .ok_or_else(|| ExperimentError::Data(format!("empty series {}", ts.sensor)))?;
        let last = first + ts.samples.len() as i64 - 1;
        span_start = span_start.max(first);
        span_end = span_end.min(last);
    }
    if span_end < span_start {
        return Err(ExperimentError::Data(
            "series do not overlap on any day".into(),
        ));
    }
    let days = (span_end - span_start + 1) as usize;

    let slice_of = |ts: &TimeSeries| -> (Vec<f64>, Vec<bool>) {
        let first = ts.first_day().unwrap();
        let offset = (span_start - first) as usize;
        let values = ts.daily_values()[offset..offset + days].to_vec();
        let flags = if ts.gap_flags.len() == ts.samples.len() {
            ts.gap_flags[offset..offset + days].to_vec()
        } else {
            vec![false; days]
        };
        (values, flags)
    };

    let mut node_data = Vec::with_capacity(nodes);
    let mut observed = Vec::new();
    let mut flagged = vec![false; days];
    for id in 0..nodes as NodeId {
        let (values, flags) = slice_of(solar[&id]);
        if id == 0 {
            observed = values.clone();
            flagged = flags;
        }
        node_data.push(NodeData {
            solar: values,
            env: BTreeMap::new(),
        });
    }
    for (name, ts) in &env {
        let (values, _) = slice_of(ts);
        node_data[0].env.insert(name.clone(), values);
    }

    Ok(Dataset {
        node_data,
        observed,
        flagged,
        days,
        nodes,
    })
}

/// Runs the configured experiment in memory.
pub fn run_in_memory(
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<RunResult, ExperimentError> {
    cfg.validate()?;
    let seed = seed_override.or(cfg.seed).unwrap_or(0);
    let dataset = match cfg.data.source.as_str() {
        "synthetic" => {
            let synth = cfg
                .data
                .synthetic
                .clone()
                .unwrap_or_default()
                .resolve(seed);
            dataset_from_synthetic(&synth)?
        }
        "csv" => dataset_from_csv(cfg.data.path.as_ref().expect("validated"))?,
        _ => unreachable!("validated"),
    };

    let spec = cfg.features.resolve(dataset.nodes);
    spec.validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    for (sensor, _) in &spec.env_lags {
        if !dataset.node_data[0].env.contains_key(sensor) {
            return Err(ExperimentError::Config(format!(
                "unknown sensor {sensor:?}: not present in the dataset"
            )));
        }
    }
    let policy = cfg.policy.resolve(spec.recal_window)?;
    let mode = cfg.mode.unwrap_or(PredictionMode::SharedSingle);

    let (mlr_predictions, simlog, mlr_counters) = match mode {
        PredictionMode::SharedSingle => run_shared(cfg, &spec, policy, &dataset, seed)?,
        PredictionMode::PerNode => run_per_node(&spec, policy, &dataset)?,
    };

    // Evaluation span: days with a model prediction and a real (unfilled)
    // observation.
    let eval_days: Vec<usize> = mlr_predictions
        .keys()
        .copied()
        .filter(|&d| d < dataset.days && !dataset.flagged[d] && d >= spec.lead)
        .collect();
    if eval_days.len() < 2 {
        return Err(ExperimentError::Runtime(format!(
            "only {} evaluation days; increase the dataset length",
            eval_days.len()
        )));
    }
    let span = (eval_days[0], *eval_days.last().unwrap());
    let observed_at: Vec<f64> = eval_days.iter().map(|&d| dataset.observed[d]).collect();

    let mut predictions = BTreeMap::new();
    let mut reports = Vec::new();

    let mlr_at: Vec<f64> = eval_days.iter().map(|&d| mlr_predictions[&d]).collect();
    let mut mlr_report = metrics::evaluate(MODEL_MLR, &mlr_at, &observed_at, span)
        .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    mlr_report.counters = mlr_counters.iter().fold(Counters::default(), |mut acc, c| {
        acc.merge(c);
        acc
    });
    mlr_report.per_node_counters = mlr_counters;
    reports.push(mlr_report);
    predictions.insert(MODEL_MLR.to_string(), mlr_predictions);

    if cfg.baselines.enabled {
        let lead = spec.lead;
        // Persistence: the future equals the current value.
        let mut persistence = BTreeMap::new();
        for &d in &eval_days {
            persistence.insert(d, dataset.observed[d - lead]);
        }
        let at: Vec<f64> = eval_days.iter().map(|&d| persistence[&d]).collect();
        reports.push(
            metrics::evaluate(MODEL_PERSISTENCE, &at, &observed_at, span)
                .map_err(|e| ExperimentError::Runtime(e.to_string()))?,
        );
        predictions.insert(MODEL_PERSISTENCE.to_string(), persistence);

        // EWMA over the daily history; the state after consuming day t
        // predicts day t + lead.
        let mut ewma = EwmaState::new(cfg.baselines.ewma_alpha);
        let mut ewma_preds = BTreeMap::new();
        let mut ewma_flops = 0u64;
        for t in 0..dataset.days {
            let p = ewma.update(dataset.observed[t]);
            ewma_flops += metrics::EWMA_UPDATE_OPS;
            ewma_preds.insert(t + lead, p);
        }
        let at: Vec<f64> = eval_days.iter().map(|&d| ewma_preds[&d]).collect();
        let mut report = metrics::evaluate(MODEL_EWMA, &at, &observed_at, span)
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        report.counters.flops = ewma_flops;
        reports.push(report);
        predictions.insert(
            MODEL_EWMA.to_string(),
            ewma_preds
                .into_iter()
                .filter(|(d, _)| eval_days.binary_search(d).is_ok())
                .collect(),
        );
    }

    Ok(RunResult {
        reports,
        eval_days,
        observed: dataset.observed.clone(),
        predictions,
        simlog,
    })
}

fn run_shared(
    cfg: &ExperimentConfig,
    spec: &FeatureSpec,
    policy: RecalPolicy,
    dataset: &Dataset,
    seed: u64,
) -> Result<ModelRun, ExperimentError> {
    let sim_cfg = SimConfig {
        spec: spec.clone(),
        policy,
        schedule: cfg
            .schedule
            .resolve(dataset.days, spec.recal_window),
        message_delay: cfg.schedule.message_delay,
        timeout_ticks: cfg.schedule.timeout_ticks,
        drop_probability: cfg.faults.drop_probability,
        faults: cfg.faults.resolve(),
        seed,
    };
    let log = simnet::run(&sim_cfg, &dataset.node_data)
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut predictions = BTreeMap::new();
    for (day, value, _raw) in log.predictions() {
        predictions.insert(day, value);
    }
    if predictions.is_empty() {
        return Err(ExperimentError::Runtime(
            "simulation produced no predictions; check windows and faults".into(),
        ));
    }
    let counters = log.node_counters();
    Ok((predictions, log, counters))
}

fn run_per_node(
    spec: &FeatureSpec,
    policy: RecalPolicy,
    dataset: &Dataset,
) -> Result<ModelRun, ExperimentError> {
    let mut state = PredictorState::new(spec.clone(), PredictionMode::PerNode, policy)
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    for day in 0..dataset.days {
        for (id, _) in &spec.neighbor_lags {
            state.record_neighbor(*id, day, dataset.node_data[*id as usize].solar[day]);
        }
        for (sensor, _) in &spec.env_lags {
            state.record_env(sensor, day, dataset.node_data[0].env[sensor][day]);
        }
        state
            .step(day, dataset.observed[day])
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        if state.ready_to_bootstrap() {
            state
                .bootstrap()
                .map_err(|e| ExperimentError::Runtime(format!("bootstrap failed: {e}")))?;
        }
        if state.coefficients().is_some() {
            // prediction for day + lead from data through today
            let _ = state.predict_local(day);
        }
    }
    let predictions: BTreeMap<usize, f64> = state
        .control()
        .predictions()
        .map(|(d, p)| (d, p.value))
        .collect();
    if predictions.is_empty() {
        return Err(ExperimentError::Runtime(
            "per-node run produced no predictions".into(),
        ));
    }
    let counters = vec![state.counters];
    Ok((predictions, SimulationLog { records: vec![] }, counters))
}

/// Runs the experiment and writes all artifacts under `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<RunArtifacts, ExperimentError> {
    let result = run_in_memory(cfg, seed_override)?;
    let io = |e: std::io::Error| ExperimentError::Io(e.to_string());
    fs::create_dir_all(out_dir).map_err(io)?;
    let mut files = Vec::new();

    let mut predictions_csv = String::from("model,day,predicted,observed,error\n");
    for (model, preds) in &result.predictions {
        for &day in &result.eval_days {
            let p = preds[&day];
            let o = result.observed[day];
            predictions_csv.push_str(&format!("{model},{day},{p},{o},{}\n", p - o));
        }
    }
    let path = out_dir.join("predictions.csv");
    fs::write(&path, predictions_csv).map_err(io)?;
    files.push(path);

    for report in &result.reports {
        let path = out_dir.join(format!("report_{}.json", report.model));
        let mut text = serde_json::to_string(report).expect("report serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io)?;
        files.push(path);
    }

    let path = out_dir.join("simlog.jsonl");
    fs::write(&path, result.simlog.to_jsonl()).map_err(io)?;
    files.push(path);

    for (model, preds) in &result.predictions {
        let mut plot = String::from("day,observed,predicted\n");
        for &day in &result.eval_days {
            plot.push_str(&format!("{day},{},{}\n", result.observed[day], preds[&day]));
        }
        let path = out_dir.join(format!("plot_{model}.csv"));
        fs::write(&path, plot).map_err(io)?;
        files.push(path);
    }

    let path = out_dir.join("reports.txt");
    fs::write(&path, metrics::render_table(&result.reports)).map_err(io)?;
    files.push(path);

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        files,
        reports: result.reports,
    })
}

/// Renders the comparison table for reports computed over the same span:
/// the error metrics per model plus the pairwise improvement of the
/// first model over each other, as (other - first) / other.
pub fn compare_reports(reports: &[EvalReport]) -> Result<String, ExperimentError> {
    if reports.len() < 2 {
        return Err(ExperimentError::Config(
            "compare needs at least two reports".into(),
        ));
    }
    let span = reports[0].span;
    let n = reports[0].n_points;
    for r in &reports[1..] {
        if r.span != span || r.n_points != n {
            return Err(ExperimentError::Data(format!(
                "span mismatch: {} covers days {}..={} ({} points), {} covers days {}..={} ({} points)",
                reports[0].model, span.0, span.1, n, r.model, r.span.0, r.span.1, r.n_points
            )));
        }
    }
    let mut out = metrics::render_table(reports);
    out.push('\n');
    let ours = &reports[0];
    for other in &reports[1..] {
        out.push_str(&format!(
            "{} vs {}: RMSE improvement {:.1}%, max abs error improvement {:.1}%\n",
            ours.model,
            other.model,
            improvement(ours.rmse, other.rmse),
            improvement(ours.max_abs_error, other.max_abs_error),
        ));
    }
    Ok(out)
}

/// Percentage improvement of `ours` over `other`: (other - ours) / other.
pub fn improvement(ours: f64, other: f64) -> f64 {
    if other == 0.0 {
        return 0.0;
    }
    100.0 * (other - ours) / other
}

/// Writes a synthetic dataset as CSV (the `gen-data` subcommand).
pub fn generate_to_csv(cfg: &SyntheticConfig, path: &Path) -> Result<(), ExperimentError> {
    let series = dataio::generate_synthetic(cfg)?;
    let mut buf = Vec::new();
    dataio::write_csv(&mut buf, &series)?;
    fs::write(path, buf).map_err(|e| ExperimentError::Io(e.to_string()))
}
