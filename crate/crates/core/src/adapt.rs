//! The adaptation loop: output-layer transplant and warm-up, then rounds of
//! probe, confidence gating, verification, weak-cluster sampling and
//! rehearsal fine-tuning with early stopping on validation loss, and
//! finally one pass that spends whatever budget is left.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotator::{map_output_layer, Annotator, ColumnModel, Example, FeatureVector, Featurizer, TrainConfig};
use crate::corpus::{ColumnId, DataLake, SplitKind};
use crate::error::{Error, Result};
use crate::gating::{build_query_set, ConfidenceThreshold, QueryCandidate};
use crate::rng::{self, derive_seed, tags};
use crate::selection::{
    embed_for_clustering, kmeans, mark_weak_clusters, sample_finetune_batch, ClusterDump, EmbeddingSpace,
    DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::verifier::{
    classify_difficult, verify_all, AuditRecord, ColumnRef, VerificationRequest, Verifier, DEFAULT_PARALLELISM,
};

pub const BEST_CHECKPOINT: &str = "best_annotator.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub max_iterations: usize,
    pub patience: usize,
    pub epochs: usize,
    pub budget: usize,
    pub delta: ConfidenceThreshold,
    pub warmup_size: usize,
    /// Defaults to four times `batch_size`.
    pub probe_size: Option<usize>,
    pub batch_size: usize,
    /// Defaults to the number of target types.
    pub k: Option<usize>,
    #[serde(skip)]
    pub seed: u64,
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub verifier_parallelism: usize,
    pub embedding: EmbeddingSpace,
    pub audit_raw: bool,
    pub cluster_dump: bool,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        AdaptConfig {
            max_iterations: 50,
            patience: 5,
            epochs: 5,
            budget: 250,
            delta: ConfidenceThreshold::default(),
            warmup_size: 50,
            probe_size: None,
            batch_size: 25,
            k: None,
            seed: 0,
            learning_rate: train.learning_rate,
            minibatch_size: train.batch_size,
            verifier_parallelism: DEFAULT_PARALLELISM,
            embedding: EmbeddingSpace::Logits,
            audit_raw: false,
            cluster_dump: false,
            checkpoint_dir: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.budget < self.warmup_size {
            return Err(Error::config(format!(
                "budget {} is smaller than warmup_size {}",
                self.budget, self.warmup_size
            )));
        }
        if self.warmup_size + self.batch_size > self.budget {
            return Err(Error::config(format!(
                "warmup_size {} + batch_size {} exceeds budget {}",
                self.warmup_size, self.batch_size, self.budget
            )));
        }
        if self.probe_size == Some(0) {
            return Err(Error::config("probe_size must be at least 1"));
        }
        if self.k == Some(0) {
            return Err(Error::config("k must be at least 1"));
        }
        self.train_config(0).validate()
    }

    pub fn probe_size(&self) -> usize {
        self.probe_size.unwrap_or(4 * self.batch_size)
    }

    /// Training settings for one fine-tuning round.
    pub fn train_config(&self, round: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.minibatch_size,
            epochs: self.epochs,
            seed: derive_seed(derive_seed(self.seed, tags::FINETUNE), round as u64),
        }
    }
}

fn round_rng(seed: u64, tag: u64, round: usize) -> rng::Rng {
    rng::stream(derive_seed(seed, tag), round as u64)
}

fn round_seed(seed: u64, tag: u64, round: usize) -> u64 {
    derive_seed(derive_seed(seed, tag), round as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spend {
    Warmup,
    Iteration,
    Residual,
}

/// Labeled columns consumed so far, by phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub residual: usize,
}

impl BudgetLedger {
    pub fn new(total: usize) -> Self {
        BudgetLedger {
            total,
            warmup: 0,
            iterations: 0,
            residual: 0,
        }
    }

    pub fn spent(&self) -> usize {
        self.warmup + self.iterations + self.residual
    }

    pub fn remaining(&self) -> usize {
        self.total - self.spent()
    }

    pub fn debit(&mut self, phase: Spend, n: usize) -> Result<()> {
        if n > self.remaining() {
            return Err(Error::Runtime(format!(
                "debit of {n} exceeds remaining budget {}",
                self.remaining()
            )));
        }
        match phase {
            Spend::Warmup => self.warmup += n,
            Spend::Iteration => self.iterations += n,
            Spend::Residual => self.residual += n,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub probed: usize,
    pub queried: usize,
    pub difficult: usize,
    pub weak_clusters: usize,
    pub weak_pool: usize,
    pub batch: usize,
    pub from_weak: usize,
    pub from_fallback: usize,
    pub validation_loss: f64,
    pub stall: usize,
    pub improved: bool,
    pub probe_recycled: bool,
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Column-level detail of one iteration, kept for inspection and tests.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    pub probe: Vec<ColumnId>,
    /// Gated columns with the predicted type id.
    pub queried: Vec<(ColumnId, usize)>,
    pub difficult: Vec<ColumnId>,
    pub batch: Vec<ColumnId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub columns: usize,
    pub validation_loss: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub warmup_ms: u64,
    pub iterations_ms: Vec<u64>,
    pub residual_ms: u64,
}

/// Target lake with features computed once for every column.
pub struct Target<'a> {
    pub lake: &'a DataLake,
    features: Vec<FeatureVector>,
    train: Vec<ColumnId>,
    validation: Vec<ColumnId>,
}

impl<'a> Target<'a> {
    pub fn new(lake: &'a DataLake, featurizer: &Featurizer) -> Result<Self> {
        let train = lake.split(SplitKind::Train)?.to_vec();
        let validation = lake.split(SplitKind::Validation)?.to_vec();
        if train.is_empty() {
            return Err(Error::data("target train split is empty"));
        }
        if validation.is_empty() {
            return Err(Error::data("target validation split is empty"));
        }
        let features = lake.columns().par_iter().map(|c| featurizer.featurize(c)).collect();
        Ok(Target {
            lake,
            features,
            train,
            validation,
        })
    }

    pub fn features(&self, id: ColumnId) -> &FeatureVector {
        &self.features[id.0]
    }

    pub fn train(&self) -> &[ColumnId] {
        &self.train
    }

    fn examples<'b>(&'b self, ids: impl IntoIterator<Item = &'b ColumnId>) -> Vec<Example<'b>> {
        ids.into_iter()
            .map(|&id| Example {
                features: &self.features[id.0],
                label: self.lake.label(id).expect("split columns are labeled"),
            })
            .collect()
    }

    pub fn validation_loss<M: ColumnModel>(&self, model: &M) -> Result<f64> {
        model.loss(&self.examples(&self.validation))
    }
}

/// How each iteration picks its fine-tuning batch.
#[derive(Clone, Copy)]
pub enum Strategy<'v> {
    /// Probe, gate, verify and sample from weak clusters.
    Guided(&'v dyn Verifier),
    /// Uniform sample of unconsumed train columns; no verifier, no clustering.
    Random,
}

#[derive(Debug, Clone)]
pub struct AdaptationState<M> {
    pub current: M,
    pub best: M,
    pub best_loss: f64,
    /// 0 means the warmed-up model.
    pub best_iteration: usize,
    pub stall: usize,
    pub ledger: BudgetLedger,
    pub records: Vec<IterationRecord>,
    pub traces: Vec<IterationTrace>,
    /// Fine-tuning batches, the warm-up sample first.
    pub rehearsal: Vec<Vec<ColumnId>>,
    pub probed: BTreeSet<ColumnId>,
    pub verifier_calls: usize,
    pub token_estimate: usize,
    pub audit: Vec<AuditRecord>,
    pub cluster_dumps: Vec<ClusterDump>,
    pub stopped_early: bool,
    pub residual: Option<ResidualRecord>,
    pub timings: Timings,
}

impl<M: ColumnModel> AdaptationState<M> {
    pub fn consumed(&self) -> BTreeSet<ColumnId> {
        self.rehearsal.iter().flatten().copied().collect()
    }

    /// Rehearsal set: every fine-tuning batch so far, in order.
    pub fn rehearsal_union(&self) -> Vec<ColumnId> {
        self.rehearsal.iter().flatten().copied().collect()
    }

    fn offer(&mut self, model: &M, loss: f64, iteration: usize, cfg: &AdaptConfig) -> Result<bool> {
        if loss < self.best_loss {
            self.best = model.clone();
            self.best_loss = loss;
            self.best_iteration = iteration;
            if let Some(dir) = &cfg.checkpoint_dir {
                write_atomic(&dir.join(BEST_CHECKPOINT), &model.checkpoint_json()?)?;
            }
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Transplants the source output layer onto the target type set, then
/// warms the model up on a uniform sample of target train columns.
pub fn warmup(source: &Annotator, target: &Target, cfg: &AdaptConfig) -> Result<AdaptationState<Annotator>> {
    cfg.validate()?;
    let model = map_output_layer(source, &target.lake.type_set, derive_seed(cfg.seed, tags::SURGERY))?;
    warmup_model(model, target, cfg)
}

/// Warm-up for a model already built over the target type set.
pub fn warmup_model<M: ColumnModel>(mut model: M, target: &Target, cfg: &AdaptConfig) -> Result<AdaptationState<M>> {
    cfg.validate()?;
    if model.type_set() != &target.lake.type_set {
        return Err(Error::config("model type set differs from the target lake's"));
    }
    if cfg.warmup_size > target.train.len() {
        return Err(Error::config(format!(
            "warmup_size {} exceeds the {} target train columns",
            cfg.warmup_size,
            target.train.len()
        )));
    }
    let start = Instant::now();
    let mut ledger = BudgetLedger::new(cfg.budget);
    let mut rng = rng::stream(cfg.seed, tags::WARMUP);
    let mut sample: Vec<ColumnId> = target.train.choose_multiple(&mut rng, cfg.warmup_size).copied().collect();
    sample.sort();
    ledger.debit(Spend::Warmup, sample.len())?;
    if !sample.is_empty() {
        model.fit(&target.examples(&sample), &cfg.train_config(0))?;
    }
    let loss = target.validation_loss(&model)?;
    log::info!("warm-up on {} columns: validation loss {loss:.5}", sample.len());

    let mut state = AdaptationState {
        best: model.clone(),
        current: model,
        best_loss: f64::INFINITY,
        best_iteration: 0,
        stall: 0,
        ledger,
        records: Vec::new(),
        traces: Vec::new(),
        rehearsal: vec![sample],
        probed: BTreeSet::new(),
        verifier_calls: 0,
        token_estimate: 0,
        audit: Vec::new(),
        cluster_dumps: Vec::new(),
        stopped_early: false,
        residual: None,
        timings: Timings::default(),
    };
    let current = state.current.clone();
    state.offer(&current, loss, 0, cfg)?;
    state.timings.warmup_ms = start.elapsed().as_millis() as u64;
    Ok(state)
}

/// One round of the loop. The caller stops when the budget is spent or
/// the stall counter reaches the patience.
pub fn run_iteration<M: ColumnModel>(
    state: &mut AdaptationState<M>,
    target: &Target,
    strategy: Strategy<'_>,
    cfg: &AdaptConfig,
) -> Result<IterationRecord> {
    let start = Instant::now();
    let l = state.records.len() + 1;
    let consumed = state.consumed();
    let batch_size = cfg.batch_size.min(state.ledger.remaining());
    let unconsumed: Vec<ColumnId> = target.train.iter().filter(|id| !consumed.contains(id)).copied().collect();
    let mut trace = IterationTrace::default();
    let mut record = IterationRecord {
        iteration: l,
        probed: 0,
        queried: 0,
        difficult: 0,
        weak_clusters: 0,
        weak_pool: 0,
        batch: 0,
        from_weak: 0,
        from_fallback: 0,
        validation_loss: 0.0,
        stall: 0,
        improved: false,
        probe_recycled: false,
        wall_ms: 0,
    };

    let batch = match strategy {
        Strategy::Random => {
            let mut rng = round_rng(cfg.seed, tags::BATCH, l);
            let mut b: Vec<ColumnId> = unconsumed.choose_multiple(&mut rng, batch_size).copied().collect();
            b.sort();
            record.from_fallback = b.len();
            b
        }
        Strategy::Guided(verifier) => {
            let mut pool: Vec<ColumnId> = unconsumed.iter().filter(|id| !state.probed.contains(id)).copied().collect();
            if pool.is_empty() {
                log::warn!("iteration {l}: every train column has been probed; probing reuses the train split");
                state.probed.clear();
                record.probe_recycled = true;
                pool = unconsumed.clone();
            }
            let mut rng = round_rng(cfg.seed, tags::PROBE, l);
            let mut probe: Vec<ColumnId> = pool.choose_multiple(&mut rng, cfg.probe_size()).copied().collect();
            probe.sort();
            state.probed.extend(&probe);
            record.probed = probe.len();

            let model = &state.current;
            let candidates = probe
                .par_iter()
                .map(|&id| QueryCandidate::from_logits(id, model.logits(target.features(id))?))
                .collect::<Result<Vec<_>>>()?;
            let queries = build_query_set(candidates, cfg.delta);
            record.queried = queries.len();

            let names: Vec<String> = target.lake.type_set.names().iter().map(|s| s.to_string()).collect();
            let requests = queries
                .iter()
                .map(|q| {
                    let col = target.lake.column(q.column);
                    VerificationRequest::new(
                        names.clone(),
                        col.cells.clone(),
                        names[q.predicted].clone(),
                        ColumnRef {
                            table_id: col.table_id.clone(),
                            col_index: col.col_index,
                        },
                        l,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let decisions = verify_all(verifier, &requests, cfg.verifier_parallelism);
            state.verifier_calls += decisions.len();
            let mut difficult = Vec::new();
            for ((q, req), d) in queries.iter().zip(&requests).zip(&decisions) {
                state.token_estimate += d.token_estimate;
                state.audit.push(AuditRecord::new(req, d, cfg.audit_raw));
                if classify_difficult(d) {
                    difficult.push(q.column);
                }
            }
            record.difficult = difficult.len();

            let train_features: Vec<&FeatureVector> = target.train.iter().map(|&id| target.features(id)).collect();
            let points = embed_for_clustering(model, &train_features, cfg.embedding)?;
            let k = cfg.k.unwrap_or(target.lake.type_set.len());
            let clusters = kmeans(&points, k, round_seed(cfg.seed, tags::KMEANS, l), DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
            let weak = mark_weak_clusters(&clusters, &target.train, &difficult, &consumed)?;
            record.weak_clusters = weak.clusters.len();
            record.weak_pool = weak.members.len();
            if cfg.cluster_dump {
                state.cluster_dumps.push(ClusterDump::new(l, &clusters, &weak));
            }
            let b = sample_finetune_batch(&weak, batch_size, round_seed(cfg.seed, tags::BATCH, l), &unconsumed);
            record.from_weak = b.from_weak;
            record.from_fallback = b.from_fallback;

            trace.probe = probe;
            trace.queried = queries.iter().map(|q| (q.column, q.predicted)).collect();
            trace.difficult = difficult;
            b.columns
        }
    };

    state.ledger.debit(Spend::Iteration, batch.len())?;
    record.batch = batch.len();
    trace.batch = batch.clone();
    state.rehearsal.push(batch);

    let union = state.rehearsal_union();
    state.current.fit(&target.examples(&union), &cfg.train_config(l))?;
    let loss = target.validation_loss(&state.current)?;
    let current = state.current.clone();
    record.improved = state.offer(&current, loss, l, cfg)?;
    state.stall = if record.improved { 0 } else { state.stall + 1 };
    record.validation_loss = loss;
    record.stall = state.stall;
    record.wall_ms = start.elapsed().as_millis() as u64;
    log::info!(
        "iteration {l}: queried {} difficult {} batch {} loss {loss:.5}{}",
        record.queried,
        record.difficult,
        record.batch,
        if record.improved { " (best)" } else { "" }
    );
    state.timings.iterations_ms.push(record.wall_ms);
    state.records.push(record.clone());
    state.traces.push(trace);
    Ok(record)
}

/// Spends the remaining budget on one uniform sample of unconsumed train
/// columns and fine-tunes the best model on the rehearsal set plus that
/// sample. The result replaces the best model only if it scores lower.
pub fn spend_residual<M: ColumnModel>(state: &mut AdaptationState<M>, target: &Target, cfg: &AdaptConfig) -> Result<()> {
    let start = Instant::now();
    let consumed = state.consumed();
    let unconsumed: Vec<ColumnId> = target.train.iter().filter(|id| !consumed.contains(id)).copied().collect();
    let mut rng = rng::stream(cfg.seed, tags::RESIDUAL);
    let mut sample: Vec<ColumnId> = unconsumed
        .choose_multiple(&mut rng, state.ledger.remaining())
        .copied()
        .collect();
    if sample.is_empty() {
        return Ok(());
    }
    sample.sort();
    state.ledger.debit(Spend::Residual, sample.len())?;
    let mut ids = state.rehearsal_union();
    ids.extend(&sample);
    let mut model = state.best.clone();
    model.fit(&target.examples(&ids), &cfg.train_config(state.records.len() + 1))?;
    let loss = target.validation_loss(&model)?;
    let iteration = state.records.len() + 1;
    let accepted = state.offer(&model, loss, iteration, cfg)?;
    log::info!(
        "residual phase on {} columns: validation loss {loss:.5}{}",
        sample.len(),
        if accepted { " (best)" } else { "" }
    );
    state.rehearsal.push(sample.clone());
    state.residual = Some(ResidualRecord {
        columns: sample.len(),
        validation_loss: loss,
        accepted,
    });
    state.timings.residual_ms = start.elapsed().as_millis() as u64;
    Ok(())
}

/// Iterates from a warmed-up state until the iteration cap, the budget or
/// the patience runs out, then spends the residual budget.
pub fn run_loop<M: ColumnModel>(
    state: &mut AdaptationState<M>,
    target: &Target,
    strategy: Strategy<'_>,
    cfg: &AdaptConfig,
) -> Result<()> {
    cfg.validate()?;
    while state.records.len() < cfg.max_iterations {
        if state.ledger.remaining() == 0 {
            log::info!("budget spent after {} iterations", state.records.len());
            break;
        }
        run_iteration(state, target, strategy, cfg)?;
        if state.stall >= cfg.patience {
            log::info!("early stop after {} iterations", state.records.len());
            state.stopped_early = true;
            break;
        }
    }
    spend_residual(state, target, cfg)?;
    assert!(state.ledger.spent() <= cfg.budget, "budget exceeded");
    Ok(())
}

/// Full adaptation with a verifier.
pub fn run_adaptation(
    source: &Annotator,
    target: &Target,
    verifier: &dyn Verifier,
    cfg: &AdaptConfig,
) -> Result<(Annotator, AdaptationState<Annotator>)> {
    let mut state = warmup(source, target, cfg)?;
    run_loop(&mut state, target, Strategy::Guided(verifier), cfg)?;
    Ok((state.best.clone(), state))
}

/// Same loop and budget with uniformly sampled fine-tuning batches.
pub fn run_random_baseline(
    source: &Annotator,
    target: &Target,
    cfg: &AdaptConfig,
) -> Result<(Annotator, AdaptationState<Annotator>)> {
    let mut state = warmup(source, target, cfg)?;
    run_loop(&mut state, target, Strategy::Random, cfg)?;
    Ok((state.best.clone(), state))
}
