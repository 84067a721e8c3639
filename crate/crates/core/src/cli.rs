//! Workflow driver behind the `mpsd` binary: configuration loading,
//! the fit/sample/evaluate commands and the privacy-sweep experiment.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{self, ClipConfig, DpError, Mechanism, NoiseConfig, TrainConfig};
use crate::encoding::{
    decode_record, encode_record, handle_missing, infer_schema, order_features, EncodingError,
    MissingPolicy, Schema, SchemaHints, Table,
};
use crate::metrics::{self, EvalConfig, MetricReport, MetricsError};
use crate::mps::{MpsError, MpsModel};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("privacy budget exhausted")]
    Budget,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Budget => EXIT_BUDGET,
        }
    }
}

impl From<EncodingError> for CliError {
    fn from(e: EncodingError) -> CliError {
        match e {
            // Unreadable files are usage problems; everything else means
            // the data or schema content is bad.
            EncodingError::Io(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MpsError> for CliError {
    fn from(e: MpsError) -> CliError {
        match e {
            MpsError::Io(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DpError> for CliError {
    fn from(e: DpError) -> CliError {
        match e {
            DpError::BudgetExhausted => CliError::Budget,
            DpError::InvalidConfig(m) => CliError::Usage(m),
            DpError::EmptyData => CliError::Data(e.to_string()),
            DpError::Mps(inner) => inner.into(),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> CliError {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    NoPrivacy,
    Clipped,
    Dp,
}

impl std::str::FromStr for Preset {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Preset, CliError> {
        match s {
            "no_privacy" => Ok(Preset::NoPrivacy),
            "clipped" => Ok(Preset::Clipped),
            "dp" => Ok(Preset::Dp),
            other => Err(CliError::Usage(format!(
                "unknown preset {other:?}; expected no_privacy, clipped or dp"
            ))),
        }
    }
}

const DEFAULT_CLIP_THRESHOLD: f64 = 1.0;

/// One JSON document covering every command; CLI flags override file
/// values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    /// Existing schema JSON; inferred from the data when absent.
    pub schema: Option<PathBuf>,
    pub missing_policy: MissingPolicy,
    pub missing_marker: String,
    pub target_feature: Option<String>,
    /// Columns forced categorical during inference.
    pub categorical_columns: Vec<String>,
    /// Columns quantized at 1/100 resolution.
    pub monetary_columns: Vec<String>,
    pub max_bond: usize,
    pub train: TrainConfig,
    pub clip: ClipConfig,
    pub noise: NoiseConfig,
    pub sample_count: usize,
    /// Synthetic sample sets drawn per evaluation/experiment cell.
    pub sample_sets: usize,
    pub eval: EvalConfig,
    /// Epsilon sweep for the experiment command.
    pub epsilons: Vec<f64>,
    /// Mechanisms swept by the experiment command.
    pub mechanisms: Vec<Mechanism>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            schema: None,
            missing_policy: MissingPolicy::OwnCategory,
            missing_marker: "?".into(),
            target_feature: None,
            categorical_columns: Vec::new(),
            monetary_columns: Vec::new(),
            max_bond: 20,
            train: TrainConfig::default(),
            clip: ClipConfig::default(),
            noise: NoiseConfig::default(),
            sample_count: 1000,
            sample_sets: 1,
            eval: EvalConfig::default(),
            epsilons: Vec::new(),
            mechanisms: vec![Mechanism::Gaussian, Mechanism::Laplacian],
            out_dir: PathBuf::from("."),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Enforce the preset's mechanism/clipping invariants.
    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::NoPrivacy => {
                self.noise.mechanism = Mechanism::None;
                self.clip.threshold = None;
            }
            Preset::Clipped => {
                self.noise.mechanism = Mechanism::None;
                self.clip.threshold = Some(
                    self.clip.threshold.unwrap_or(DEFAULT_CLIP_THRESHOLD),
                );
            }
            Preset::Dp => {
                if self.noise.mechanism == Mechanism::None {
                    self.noise.mechanism = Mechanism::Gaussian;
                }
                self.clip.threshold = Some(
                    self.clip.threshold.unwrap_or(DEFAULT_CLIP_THRESHOLD),
                );
            }
        }
    }
}

#[derive(Debug)]
pub struct FitOutput {
    pub model_path: PathBuf,
    pub schema_path: PathBuf,
    pub run_log_path: PathBuf,
    pub final_nll: Option<f64>,
    pub spent_epsilon: f64,
    pub updates: usize,
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn load_table(cfg: &RunConfig) -> Result<Table, CliError> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("no data path given".into()))?;
    if !data.exists() {
        return Err(CliError::Usage(format!("data file {} not found", data.display())));
    }
    Ok(Table::read_csv(data, &cfg.missing_marker)?)
}

fn build_schema(cfg: &RunConfig, table: &Table) -> Result<Schema, CliError> {
    if let Some(path) = &cfg.schema {
        return Ok(Schema::load(path)?);
    }
    let mut hints = SchemaHints::default();
    for col in &cfg.categorical_columns {
        hints
            .kinds
            .insert(col.clone(), crate::encoding::FeatureKind::Categorical);
    }
    hints.monetary = cfg.monetary_columns.iter().cloned().collect();
    hints.target_feature = cfg.target_feature.clone();
    let schema = infer_schema(table, &hints)?;
    Ok(order_features(&schema))
}

/// Full training pipeline: ingest, resolve missing cells, build the
/// schema, encode, train and write the artifact, schema and run log.
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitOutput, CliError> {
    let raw = load_table(cfg)?;
    let table = handle_missing(&raw, cfg.missing_policy)?;
    let schema = build_schema(cfg, &table)?;
    let records = table
        .rows
        .iter()
        .map(|row| encode_record(row, &schema))
        .collect::<Result<Vec<_>, _>>()?;

    let model = MpsModel::init(schema.clone(), cfg.max_bond, cfg.seed);
    let result = dp::train(&model, &records, &cfg.train, &cfg.clip, &cfg.noise)?;

    ensure_out_dir(&cfg.out_dir)?;
    let model_path = cfg.out_dir.join("model.mpsd");
    let schema_path = cfg.out_dir.join("schema.json");
    let run_log_path = cfg.out_dir.join("run_log.jsonl");
    result.model.save(&model_path)?;
    schema.save(&schema_path)?;
    let mut log = fs::File::create(&run_log_path)
        .map_err(|e| CliError::Usage(format!("cannot write run log: {e}")))?;
    for record in &result.trace {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::Data(format!("run log serialization: {e}")))?;
        writeln!(log, "{line}").map_err(|e| CliError::Usage(format!("run log write: {e}")))?;
    }

    Ok(FitOutput {
        model_path,
        schema_path,
        run_log_path,
        final_nll: result.trace.last().map(|r| r.batch_nll),
        spent_epsilon: dp::epsilon_spent(&result.accountant),
        updates: result.trace.len(),
    })
}

/// Draw `count` records from a saved model and write them as CSV with
/// the original column names and order.
pub fn cmd_sample(
    model_path: &Path,
    count: usize,
    seed: u64,
    out_path: &Path,
) -> Result<(), CliError> {
    let model = MpsModel::load(model_path)?;
    let table = sample_table(&model, count, seed)?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out_dir(parent)?;
        }
    }
    table.write_csv(out_path, "?")?;
    Ok(())
}

fn sample_table(model: &MpsModel, count: usize, seed: u64) -> Result<Table, CliError> {
    let schema = model.schema();
    let columns: Vec<String> = schema.features.iter().map(|f| f.name.clone()).collect();
    let rows = model
        .sample(count, seed)
        .iter()
        .map(|rec| {
            decode_record(rec, schema)
                .map(|cells| cells.into_iter().map(Some).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Table::new(columns, rows)?)
}

/// Score one or more synthetic CSVs against the real data; writes
/// report.json and report.csv under `out_dir`.
pub fn cmd_evaluate(
    real_path: &Path,
    synth_paths: &[PathBuf],
    schema_path: &Path,
    cfg: &RunConfig,
) -> Result<MetricReport, CliError> {
    if synth_paths.is_empty() {
        return Err(CliError::Usage("no synthetic files given".into()));
    }
    let schema = Schema::load(schema_path)?;
    let real = handle_missing(
        &Table::read_csv(real_path, &cfg.missing_marker)?,
        cfg.missing_policy,
    )?;
    let synth_sets = synth_paths
        .iter()
        .map(|p| Table::read_csv(p, &cfg.missing_marker))
        .collect::<Result<Vec<_>, _>>()?;
    let report = metrics::evaluate(&real, &synth_sets, &schema, &cfg.eval)?;

    ensure_out_dir(&cfg.out_dir)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(format!("report serialization: {e}")))?;
    fs::write(cfg.out_dir.join("report.json"), json)
        .map_err(|e| CliError::Usage(format!("cannot write report: {e}")))?;
    fs::write(cfg.out_dir.join("report.csv"), report.to_csv())
        .map_err(|e| CliError::Usage(format!("cannot write report: {e}")))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRow {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// Sweep (mechanism, epsilon) cells: fit, sample `sample_sets` sets and
/// evaluate each cell; returns the consolidated rows also written to
/// experiment.csv. Cells run in parallel with derived seeds.
pub fn cmd_experiment(cfg: &RunConfig) -> Result<Vec<ExperimentRow>, CliError> {
    if cfg.epsilons.is_empty() {
        return Err(CliError::Usage("empty epsilon sweep".into()));
    }
    if cfg.mechanisms.is_empty() {
        return Err(CliError::Usage("empty mechanism sweep".into()));
    }
    let raw = load_table(cfg)?;
    let real = handle_missing(&raw, cfg.missing_policy)?;
    let schema = build_schema(cfg, &real)?;

    let mut cells = Vec::new();
    for &mechanism in &cfg.mechanisms {
        for &epsilon in &cfg.epsilons {
            cells.push((mechanism, epsilon));
        }
    }

    let results: Vec<(Mechanism, f64, MetricReport)> = cells
        .par_iter()
        .enumerate()
        .map(|(cell, &(mechanism, epsilon))| {
            let mut cell_cfg = cfg.clone();
            cell_cfg.noise.mechanism = mechanism;
            cell_cfg.noise.epsilon = epsilon;
            if mechanism != Mechanism::None {
                cell_cfg.clip.threshold = Some(
                    cell_cfg.clip.threshold.unwrap_or(DEFAULT_CLIP_THRESHOLD),
                );
            }
            // Every cell trains and samples with its own derived seed.
            let seed = cfg.seed.wrapping_add(1 + cell as u64);
            cell_cfg.train.seed = seed;

            let records = real
                .rows
                .iter()
                .map(|row| encode_record(row, &schema))
                .collect::<Result<Vec<_>, _>>()?;
            let model = MpsModel::init(schema.clone(), cell_cfg.max_bond, seed);
            let trained = dp::train(
                &model,
                &records,
                &cell_cfg.train,
                &cell_cfg.clip,
                &cell_cfg.noise,
            )?;

            let synth_sets = (0..cfg.sample_sets.max(1))
                .map(|set| {
                    sample_table(
                        &trained.model,
                        cfg.sample_count,
                        seed.wrapping_add(1000 + set as u64),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut eval_cfg = cfg.eval.clone();
            eval_cfg.seed = cfg.seed;
            let report = metrics::evaluate(&real, &synth_sets, &schema, &eval_cfg)?;
            Ok((mechanism, epsilon, report))
        })
        .collect::<Result<_, CliError>>()?;

    let mut rows = Vec::new();
    for (mechanism, epsilon, report) in &results {
        for (metric, ms) in &report.aggregates {
            rows.push(ExperimentRow {
                mechanism: *mechanism,
                epsilon: *epsilon,
                metric: metric.clone(),
                mean: ms.mean,
                std: ms.std,
            });
        }
    }

    ensure_out_dir(&cfg.out_dir)?;
    let mut csv = String::from("mechanism,epsilon,metric,mean,std\n");
    for row in &rows {
        let mech = match row.mechanism {
            Mechanism::None => "none",
            Mechanism::Gaussian => "gaussian",
            Mechanism::Laplacian => "laplacian",
        };
        csv.push_str(&format!(
            "{mech},{},{},{},{}\n",
            row.epsilon, row.metric, row.mean, row.std
        ));
    }
    fs::write(cfg.out_dir.join("experiment.csv"), csv)
        .map_err(|e| CliError::Usage(format!("cannot write experiment report: {e}")))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_csv(path: &Path, rows: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut text = String::from("color,size,label\n");
        for _ in 0..rows {
            let color = ["red", "green", "blue"][rng.gen_range(0..3)];
            let size = rng.gen_range(0..8);
            let label = if size >= 4 { "yes" } else { "no" };
            text.push_str(&format!("{color},{size},{label}\n"));
        }
        fs::write(path, text).unwrap();
    }

    fn base_config(dir: &Path) -> RunConfig {
        let data = dir.join("data.csv");
        toy_csv(&data, 200);
        RunConfig {
            data: Some(data),
            target_feature: Some("label".into()),
            max_bond: 6,
            train: TrainConfig {
                epochs: 5,
                num_batches: 4,
                descent_steps: 4,
                batch_size: 32,
                learning_rate: 0.05,
                lr_decay: 1.0,
                seed: 1,
            },
            sample_count: 100,
            out_dir: dir.join("out"),
            seed: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn preset_invariants() {
        let mut cfg = RunConfig::default();
        cfg.apply_preset(Preset::NoPrivacy);
        assert_eq!(cfg.noise.mechanism, Mechanism::None);
        assert!(cfg.clip.threshold.is_none());

        cfg.apply_preset(Preset::Clipped);
        assert_eq!(cfg.noise.mechanism, Mechanism::None);
        assert!(cfg.clip.threshold.is_some());

        let mut cfg = RunConfig::default();
        cfg.apply_preset(Preset::Dp);
        assert_eq!(cfg.noise.mechanism, Mechanism::Gaussian);
        assert!(cfg.clip.threshold.is_some());

        // dp keeps an explicitly chosen mechanism.
        let mut cfg = RunConfig::default();
        cfg.noise.mechanism = Mechanism::Laplacian;
        cfg.apply_preset(Preset::Dp);
        assert_eq!(cfg.noise.mechanism, Mechanism::Laplacian);
    }

    #[test]
    fn config_round_trip_and_unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let path = dir.path().join("config.json");
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.max_bond, cfg.max_bond);
        assert_eq!(loaded.train.epochs, cfg.train.epochs);

        fs::write(&path, r#"{"max_bnod": 3}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn fit_sample_evaluate_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let fit = cmd_fit(&cfg).unwrap();
        assert!(fit.model_path.exists());
        assert!(fit.schema_path.exists());
        assert!(fit.updates > 0);
        // Run log parses as JSONL.
        let log = fs::read_to_string(&fit.run_log_path).unwrap();
        assert_eq!(log.lines().count(), fit.updates);
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("batch_nll").is_some());
        }

        let synth = dir.path().join("synth.csv");
        cmd_sample(&fit.model_path, 150, 9, &synth).unwrap();
        let table = Table::read_csv(&synth, "?").unwrap();
        assert_eq!(table.rows.len(), 150);
        assert_eq!(table.columns, vec!["color", "size", "label"]);

        // Deterministic resampling.
        let synth2 = dir.path().join("synth2.csv");
        cmd_sample(&fit.model_path, 150, 9, &synth2).unwrap();
        assert_eq!(fs::read(&synth).unwrap(), fs::read(&synth2).unwrap());

        let report = cmd_evaluate(
            cfg.data.as_ref().unwrap(),
            &[synth],
            &fit.schema_path,
            &cfg,
        )
        .unwrap();
        assert!(cfg.out_dir.join("report.json").exists());
        assert!(cfg.out_dir.join("report.csv").exists());
        assert!(report.aggregates.contains_key("tv_complement"));
        assert!(report.downstream_real.is_some());
    }

    #[test]
    fn sample_zero_rows_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let fit = cmd_fit(&cfg).unwrap();
        let out = dir.path().join("empty.csv");
        cmd_sample(&fit.model_path, 0, 0, &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        assert_eq!(text.trim(), "color,size,label");
    }

    #[test]
    fn missing_data_file_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.data = Some(dir.path().join("nope.csv"));
        let err = cmd_fit(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(!cfg.out_dir.join("model.mpsd").exists());
    }

    #[test]
    fn budget_exhaustion_maps_to_exit_4() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.clip.threshold = Some(1.0);
        cfg.noise.mechanism = Mechanism::Laplacian;
        cfg.noise.epsilon = 0.5;
        // A fixed scale the tiny budget cannot pay even one update for.
        cfg.noise.sigma_override = Some(0.1);
        let err = cmd_fit(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_BUDGET);
    }

    #[test]
    fn dp_run_respects_budget_in_log() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.apply_preset(Preset::Dp);
        cfg.noise.epsilon = 1.0;
        let fit = cmd_fit(&cfg).unwrap();
        assert!(fit.spent_epsilon <= 1.0 + 1e-9, "{}", fit.spent_epsilon);
        let log = fs::read_to_string(&fit.run_log_path).unwrap();
        let last: serde_json::Value =
            serde_json::from_str(log.lines().last().unwrap()).unwrap();
        assert!(last["spent_epsilon"].as_f64().unwrap() <= 1.0 + 1e-9);
    }

    #[test]
    fn experiment_sweep_structure() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.train.epochs = 2;
        cfg.sample_count = 60;
        cfg.eval.downstream = false;
        cfg.epsilons = vec![1.0, 10.0];
        cfg.mechanisms = vec![Mechanism::Laplacian];
        let rows = cmd_experiment(&cfg).unwrap();
        for eps in [1.0, 10.0] {
            for metric in ["tv_complement", "category_coverage", "ks_complement"] {
                assert!(
                    rows.iter()
                        .any(|r| r.epsilon == eps && r.metric == metric),
                    "missing ({eps}, {metric})"
                );
            }
        }
        let csv = fs::read_to_string(cfg.out_dir.join("experiment.csv")).unwrap();
        assert!(csv.starts_with("mechanism,epsilon,metric,mean,std"));

        cfg.epsilons.clear();
        let err = cmd_experiment(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }
}
