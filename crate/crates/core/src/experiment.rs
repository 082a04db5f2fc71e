//! Run configuration and the commands behind the command-line tool:
//! generate a lake pair, train a source annotator, adapt it, evaluate a
//! checkpoint, and summarize finished runs.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, AdaptConfig, AdaptationState, BudgetLedger, IterationRecord, ResidualRecord, Target};
use crate::annotator::{Annotator, Architecture, EarlyStopLog, Example, FeatureVector, TrainConfig};
use crate::corpus::{
    gen_lake_pair, load_data_lake, save_data_lake, split_data_lake, ColumnId, DataLake, LakePairSpec, SplitKind,
    LABELS_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::{self, CurvePoint, MetricsReport};
use crate::rng::{derive_seed, tags};
use crate::verifier::{AuditRecord, RemoteConfig, VerifierBackend};

pub const SOURCE_CHECKPOINT: &str = "source_annotator.json";
pub const TARGET_CHECKPOINT: &str = "target_annotator.json";
pub const REPORT_FILE: &str = "report.json";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const CURVE_FILE: &str = "curve.csv";
pub const TIMINGS_FILE: &str = "timings.json";
pub const CLUSTERS_FILE: &str = "clusters.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    #[default]
    Oracle,
    Noisy,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisySettings {
    /// Probability of answering correctly.
    pub p: f64,
    /// Probability of answering "I don't know".
    pub q: f64,
}

impl Default for NoisySettings {
    fn default() -> Self {
        NoisySettings { p: 0.9, q: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceTraining {
    pub feature_dim: usize,
    /// 0 selects a linear model.
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for SourceTraining {
    fn default() -> Self {
        let arch = Architecture::default();
        let train = TrainConfig::default();
        SourceTraining {
            feature_dim: arch.feature_dim,
            hidden: arch.hidden.unwrap_or(0),
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            max_epochs: 200,
            patience: 5,
        }
    }
}

impl SourceTraining {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            feature_dim: self.feature_dim,
            hidden: (self.hidden > 0).then_some(self.hidden),
        }
    }
}

/// Everything one command needs. Loaded from TOML; command-line flags
/// override individual keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Lake directory holding `labels.jsonl`, the tables and optionally
    /// `manifest.json`.
    #[serde(default)]
    pub source_lake: Option<PathBuf>,
    #[serde(default)]
    pub target_lake: Option<PathBuf>,
    /// Pretrained source annotator; skips source training.
    #[serde(default)]
    pub source_checkpoint: Option<PathBuf>,
    /// Generate both lakes in memory instead of reading them.
    #[serde(default)]
    pub lake_pair: Option<LakePairSpec>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub budget_sweep: Vec<usize>,
    #[serde(default)]
    pub verifier: VerifierKind,
    #[serde(default)]
    pub noisy: NoisySettings,
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub train: SourceTraining,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            source_lake: None,
            target_lake: None,
            source_checkpoint: None,
            lake_pair: None,
            out: default_out(),
            baseline: false,
            budget_sweep: Vec::new(),
            verifier: VerifierKind::Oracle,
            noisy: NoisySettings::default(),
            remote: None,
            adapt: AdaptConfig::default(),
            train: SourceTraining::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.target_lake, &self.lake_pair) {
            (Some(_), Some(_)) => return Err(Error::config("set either target_lake or lake_pair, not both")),
            (None, None) => return Err(Error::config("one of target_lake or lake_pair is required")),
            _ => {}
        }
        if self.target_lake.is_some() && self.source_lake.is_none() && self.source_checkpoint.is_none() {
            return Err(Error::config("target_lake needs source_lake or source_checkpoint"));
        }
        if let Some(spec) = &self.lake_pair {
            spec.validate()?;
        }
        self.backend()?.validate()?;
        if self.budget_sweep.is_empty() {
            self.adapt_config(self.adapt.budget).validate()
        } else {
            self.budget_sweep
                .iter()
                .try_for_each(|&b| self.adapt_config(b).validate())
        }
    }

    /// Adaptation settings with the run seed applied.
    pub fn adapt_config(&self, budget: usize) -> AdaptConfig {
        AdaptConfig {
            budget,
            seed: self.seed,
            ..self.adapt.clone()
        }
    }

    pub fn backend(&self) -> Result<VerifierBackend> {
        Ok(match self.verifier {
            VerifierKind::Oracle => VerifierBackend::Oracle,
            VerifierKind::Noisy => VerifierBackend::NoisyOracle {
                accuracy: self.noisy.p,
                idk_rate: self.noisy.q,
                seed: derive_seed(self.seed, tags::NOISY),
            },
            VerifierKind::Remote => VerifierBackend::Remote(
                self.remote
                    .clone()
                    .ok_or_else(|| Error::config("verifier = \"remote\" needs a [remote] table"))?,
            ),
        })
    }

    /// Source and target lakes, both split.
    pub fn lakes(&self) -> Result<(Option<DataLake>, DataLake)> {
        if let Some(spec) = &self.lake_pair {
            let (s, t) = gen_lake_pair(spec)?;
            return Ok((Some(s), t));
        }
        let source = match &self.source_lake {
            Some(p) => Some(load_lake_dir(p, derive_seed(self.seed, tags::SOURCE_SPLIT))?),
            None => None,
        };
        let target_path = self.target_lake.as_ref().expect("validated");
        let target = load_lake_dir(target_path, derive_seed(self.seed, tags::TARGET_SPLIT))?;
        Ok((source, target))
    }
}

/// Loads a lake directory; lakes without stored splits get a seeded
/// 80/10/10 split.
pub fn load_lake_dir(dir: &Path, seed: u64) -> Result<DataLake> {
    let lake = load_data_lake(dir, &dir.join(LABELS_FILE))?;
    if lake.has_splits() {
        Ok(lake)
    } else {
        log::info!("{} has no stored splits; splitting 80/10/10", dir.display());
        split_data_lake(&lake, 0.8, 0.1, seed)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn featurize_split(model: &Annotator, lake: &DataLake, split: SplitKind) -> Result<Vec<(ColumnId, FeatureVector)>> {
    let f = model.featurizer();
    Ok(lake
        .split(split)?
        .par_iter()
        .map(|&id| (id, f.featurize(lake.column(id))))
        .collect())
}

/// Predicts every column of `split` and scores the predictions.
pub fn evaluate_model(model: &Annotator, lake: &DataLake, split: SplitKind) -> Result<MetricsReport> {
    let feats = featurize_split(model, lake, split)?;
    let predictions = feats
        .par_iter()
        .map(|(id, f)| {
            let p = model.predict_features(f)?;
            Ok((*id, model.type_set().name(p.type_id).expect("closed output layer").to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate(&predictions, lake, split)
}

/// Writes `source/` and `target/` lake directories under `out`.
pub fn cmd_gen(spec: &LakePairSpec, out: &Path) -> Result<(DataLake, DataLake)> {
    spec.validate()?;
    let (source, target) = gen_lake_pair(spec)?;
    save_data_lake(&source, &out.join("source"))?;
    save_data_lake(&target, &out.join("target"))?;
    log::info!(
        "wrote {} source and {} target columns under {}",
        source.columns().len(),
        target.columns().len(),
        out.display()
    );
    Ok((source, target))
}

/// Reads a lake-pair spec from TOML, either bare or as a `[lake_pair]`
/// table of a run config.
pub fn read_lake_pair_spec(path: &Path) -> Result<LakePairSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: toml::Table = toml::from_str(&text).map_err(|e| Error::config(format!("invalid spec: {e}")))?;
    let table = match value.get("lake_pair") {
        Some(toml::Value::Table(t)) => t.clone(),
        _ => value,
    };
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("invalid spec: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub training: EarlyStopLog,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

/// Trains on the source train split until validation loss stalls.
pub fn train_source(lake: &DataLake, settings: &SourceTraining, seed: u64) -> Result<(Annotator, SourceReport)> {
    let mut model = Annotator::new(lake.type_set.clone(), settings.architecture(), seed)?;
    let train = featurize_split(&model, lake, SplitKind::Train)?;
    let valid = featurize_split(&model, lake, SplitKind::Validation)?;
    let examples = |set: &[(ColumnId, FeatureVector)]| -> Vec<(FeatureVector, usize)> {
        set.iter()
            .map(|(id, f)| (f.clone(), lake.label(*id).expect("split columns are labeled")))
            .collect()
    };
    let (train, valid) = (examples(&train), examples(&valid));
    let train_ex: Vec<Example> = train.iter().map(|(features, label)| Example { features, label: *label }).collect();
    let valid_ex: Vec<Example> = valid.iter().map(|(features, label)| Example { features, label: *label }).collect();
    let cfg = TrainConfig {
        learning_rate: settings.learning_rate,
        batch_size: settings.batch_size,
        epochs: settings.max_epochs,
        seed: derive_seed(seed, tags::SHUFFLE),
    };
    let log = model.train_early_stopping(&train_ex, &valid_ex, &cfg, settings.patience)?;
    log::info!(
        "source training stopped after {} epochs (best {})",
        log.epoch_losses.len(),
        log.best_epoch
    );
    let report = SourceReport {
        training: log,
        validation: evaluate_model(&model, lake, SplitKind::Validation)?,
        test: evaluate_model(&model, lake, SplitKind::Test)?,
    };
    Ok((model, report))
}

pub fn cmd_train_source(cfg: &RunConfig) -> Result<(Annotator, SourceReport)> {
    cfg.validate()?;
    let (source, _) = cfg.lakes()?;
    let source = source.ok_or_else(|| Error::config("train-source needs source_lake or lake_pair"))?;
    let (model, report) = train_source(&source, &cfg.train, cfg.seed)?;
    write_text(&cfg.out.join(SOURCE_CHECKPOINT), &model.to_json()?)?;
    write_json(&cfg.out.join("source_metrics.json"), &report)?;
    log::info!("source test sw_f1 {:.4} ma_f1 {:.4}", report.test.sw_f1, report.test.ma_f1);
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Lakehopper,
    RandomBaseline,
}

/// Contents of `report.json`. Wall-clock times live in `timings.json` so
/// that reports of identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub budget: usize,
    pub config: AdaptConfig,
    pub verifier: VerifierKind,
    pub ledger: BudgetLedger,
    pub iterations: Vec<IterationRecord>,
    pub best_iteration: usize,
    pub best_validation_loss: f64,
    pub stopped_early: bool,
    pub residual: Option<ResidualRecord>,
    pub verifier_queries: usize,
    pub token_estimate: usize,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub total_ms: u64,
    #[serde(flatten)]
    pub phases: adapt::Timings,
}

pub struct AdaptOutcome {
    pub model: Annotator,
    pub state: AdaptationState<Annotator>,
    pub report: RunReport,
}

/// One adaptation at one budget, with every artifact written to `out`.
pub fn adapt_once(
    cfg: &RunConfig,
    source: &Annotator,
    target_lake: &DataLake,
    budget: usize,
    out: &Path,
) -> Result<AdaptOutcome> {
    let start = std::time::Instant::now();
    let mut acfg = cfg.adapt_config(budget);
    acfg.checkpoint_dir = Some(out.to_path_buf());
    let target = Target::new(target_lake, &source.featurizer())?;
    let (model, state) = if cfg.baseline {
        adapt::run_random_baseline(source, &target, &acfg)?
    } else {
        let verifier = cfg.backend()?.build(target_lake)?;
        adapt::run_adaptation(source, &target, verifier.as_ref(), &acfg)?
    };
    let report = RunReport {
        mode: if cfg.baseline { Mode::RandomBaseline } else { Mode::Lakehopper },
        seed: cfg.seed,
        budget,
        config: acfg.clone(),
        verifier: cfg.verifier,
        ledger: state.ledger.clone(),
        iterations: state.records.clone(),
        best_iteration: state.best_iteration,
        best_validation_loss: state.best_loss,
        stopped_early: state.stopped_early,
        residual: state.residual.clone(),
        verifier_queries: state.verifier_calls,
        token_estimate: state.token_estimate,
        validation: evaluate_model(&model, target_lake, SplitKind::Validation)?,
        test: evaluate_model(&model, target_lake, SplitKind::Test)?,
    };

    fs::remove_file(out.join(adapt::BEST_CHECKPOINT)).ok();
    write_text(&out.join(TARGET_CHECKPOINT), &model.to_json()?)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_text(&out.join(AUDIT_FILE), &audit_lines(&state.audit)?)?;
    if acfg.cluster_dump {
        write_json(&out.join(CLUSTERS_FILE), &state.cluster_dumps)?;
    }
    let point = CurvePoint {
        budget,
        sw_f1: report.test.sw_f1,
        ma_f1: report.test.ma_f1,
    };
    write_text(&out.join(CURVE_FILE), &metrics::curve_to_csv(&[point])?)?;
    write_json(
        &out.join(TIMINGS_FILE),
        &RunTimings {
            total_ms: start.elapsed().as_millis() as u64,
            phases: state.timings.clone(),
        },
    )?;
    log::info!(
        "budget {budget}: test sw_f1 {:.4} ma_f1 {:.4}, {} verifier queries",
        report.test.sw_f1,
        report.test.ma_f1,
        report.verifier_queries
    );
    Ok(AdaptOutcome { model, state, report })
}

fn audit_lines(records: &[AuditRecord]) -> Result<String> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    Ok(text)
}

/// Source annotator for an adaptation run: the configured checkpoint, or
/// one trained now and saved under `out`.
pub fn obtain_source(cfg: &RunConfig, source_lake: Option<&DataLake>) -> Result<Annotator> {
    if let Some(path) = &cfg.source_checkpoint {
        return Annotator::load_checkpoint(path);
    }
    let lake = source_lake.ok_or_else(|| Error::config("no source lake or source checkpoint"))?;
    let (model, report) = train_source(lake, &cfg.train, cfg.seed)?;
    write_text(&cfg.out.join(SOURCE_CHECKPOINT), &model.to_json()?)?;
    write_json(&cfg.out.join("source_metrics.json"), &report)?;
    Ok(model)
}

/// Adapts at the configured budget, or at every budget of the sweep with
/// one `budget_<n>` directory per budget and a combined curve.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let (source_lake, target_lake) = cfg.lakes()?;
    let source = obtain_source(cfg, source_lake.as_ref())?;
    if cfg.budget_sweep.is_empty() {
        let outcome = adapt_once(cfg, &source, &target_lake, cfg.adapt.budget, &cfg.out)?;
        return Ok(vec![outcome.report]);
    }
    let mut budgets = cfg.budget_sweep.clone();
    budgets.sort_unstable();
    if budgets.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("budget_sweep lists a budget twice"));
    }
    let mut reports = Vec::new();
    for &b in &budgets {
        let dir = cfg.out.join(format!("budget_{b}"));
        reports.push(adapt_once(cfg, &source, &target_lake, b, &dir)?.report);
    }
    let tagged: Vec<(usize, &MetricsReport)> = reports.iter().map(|r| (r.budget, &r.test)).collect();
    write_text(&cfg.out.join(CURVE_FILE), &metrics::curve_to_csv(&metrics::curve(&tagged)?)?)?;
    Ok(reports)
}

/// Scores a checkpoint on one split of a lake directory and writes
/// `eval.json` and `eval.csv` to `out` when given.
pub fn cmd_eval(checkpoint: &Path, lake_dir: &Path, split: SplitKind, out: Option<&Path>) -> Result<MetricsReport> {
    let model = Annotator::load_checkpoint(checkpoint)?;
    let lake = load_lake_dir(lake_dir, 0)?;
    let report = evaluate_model(&model, &lake, split)?;
    if let Some(dir) = out {
        write_json(&dir.join("eval.json"), &report)?;
        write_text(&dir.join("eval.csv"), &report.to_csv()?)?;
    }
    Ok(report)
}

/// Collects `report.json` files in `run_dir` and its `budget_*`
/// subdirectories, writes their curve and returns a text summary.
pub fn cmd_report(run_dir: &Path) -> Result<(Vec<RunReport>, String)> {
    let mut paths = Vec::new();
    if run_dir.join(REPORT_FILE).is_file() {
        paths.push(run_dir.join(REPORT_FILE));
    }
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("budget_"))
        })
        .collect();
    subdirs.sort();
    paths.extend(subdirs.into_iter().map(|d| d.join(REPORT_FILE)).filter(|p| p.is_file()));
    if paths.is_empty() {
        return Err(Error::data(format!("no {REPORT_FILE} under {}", run_dir.display())));
    }
    let mut reports = Vec::new();
    for p in &paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        reports.push(serde_json::from_str::<RunReport>(&text)?);
    }
    reports.sort_by_key(|r| r.budget);
    let tagged: Vec<(usize, &MetricsReport)> = reports.iter().map(|r| (r.budget, &r.test)).collect();
    let points = metrics::curve(&tagged)?;
    write_text(&run_dir.join(CURVE_FILE), &metrics::curve_to_csv(&points)?)?;

    let mut summary = format!(
        "{:>8} {:>16} {:>8} {:>8} {:>8} {:>10} {:>8}\n",
        "budget", "mode", "spent", "iters", "queries", "sw_f1", "ma_f1"
    );
    for r in &reports {
        summary.push_str(&format!(
            "{:>8} {:>16} {:>8} {:>8} {:>8} {:>10.4} {:>8.4}\n",
            r.budget,
            match r.mode {
                Mode::Lakehopper => "lakehopper",
                Mode::RandomBaseline => "random_baseline",
            },
            r.ledger.spent(),
            r.iterations.len(),
            r.verifier_queries,
            r.test.sw_f1,
            r.test.ma_f1
        ));
    }
    Ok((reports, summary))
}
