//! Column annotator: featurizer, a one-hidden-layer softmax classifier
//! trained with mini-batch Adam on cross-entropy, output-layer transplant
//! between type sets, and JSON checkpoints.

mod features;

pub use features::{
    column_statistics, featurize_column, FeatureVector, Featurizer, ALPHA_RATIO,
    DEFAULT_FEATURE_DIM, DIGIT_RATIO, MAX_CELLS, STAT_FEATURES,
};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Column, TypeSet};
use crate::error::{Error, Result};
use crate::gating;
use crate::rng::{self, tags};

pub const DEFAULT_HIDDEN: usize = 64;
/// Standard deviation of freshly initialized output-layer columns.
pub const OUTPUT_INIT_STD: f64 = 0.02;

const CHECKPOINT_FORMAT: &str = "lakehopper-annotator";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    /// Width of the tanh hidden layer; `None` gives a purely linear model.
    pub hidden: Option<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            feature_dim: DEFAULT_FEATURE_DIM,
            hidden: Some(DEFAULT_HIDDEN),
        }
    }
}

impl Architecture {
    pub fn linear(feature_dim: usize) -> Self {
        Architecture {
            feature_dim,
            hidden: None,
        }
    }

    /// Width of the representation the output layer reads.
    pub fn core_dim(&self) -> usize {
        self.hidden.unwrap_or(self.feature_dim)
    }

    fn core_params(&self) -> usize {
        self.hidden.map_or(0, |h| h * self.feature_dim + h)
    }

    fn param_count(&self, n_types: usize) -> usize {
        self.core_params() + self.core_dim() * n_types + n_types
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(1e-5..=1e-1).contains(&self.learning_rate) {
            return Err(Error::config(format!(
                "learning_rate must lie in [1e-5, 1e-1], got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a FeatureVector,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training cross-entropy seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopLog {
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    /// 0 when no epoch beat the initial parameters.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub type_id: usize,
    pub confidence: f64,
    pub logits: Vec<f64>,
}

/// Softmax column classifier over a [`TypeSet`].
///
/// Parameters live in one flat vector laid out as
/// `[hidden weights (h x m), hidden bias (h), output weights (m' x n), output bias (n)]`
/// where output column `j` scores type `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotator {
    arch: Architecture,
    type_set: TypeSet,
    params: Vec<f64>,
    seed: u64,
}

impl Annotator {
    /// Randomly initialized annotator.
    pub fn new(type_set: TypeSet, arch: Architecture, seed: u64) -> Result<Self> {
        let mut a = Annotator::zeros(type_set, arch)?;
        a.seed = seed;
        let mut rng = rng::stream(seed, tags::INIT);
        if let Some(h) = arch.hidden {
            // unit-norm inputs, so unit variance keeps tanh out of saturation
            let normal = Normal::new(0.0, 1.0).unwrap();
            let m = arch.feature_dim;
            for w in &mut a.params[..h * m] {
                *w = normal.sample(&mut rng);
            }
        }
        let normal = Normal::new(0.0, OUTPUT_INIT_STD).unwrap();
        let start = arch.core_params();
        for w in &mut a.params[start..] {
            *w = normal.sample(&mut rng);
        }
        Ok(a)
    }

    pub fn zeros(type_set: TypeSet, arch: Architecture) -> Result<Self> {
        if type_set.is_empty() {
            return Err(Error::config("annotator needs a non-empty type set"));
        }
        if arch.feature_dim == 0 || arch.hidden == Some(0) {
            return Err(Error::config("annotator dimensions must be positive"));
        }
        let n = arch.param_count(type_set.len());
        Ok(Annotator {
            arch,
            type_set,
            params: vec![0.0; n],
            seed: 0,
        })
    }

    /// Linear annotator with explicit `m x n` row-major output weights.
    pub fn linear(type_set: TypeSet, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let n = type_set.len();
        if n == 0 || bias.len() != n || !weights.len().is_multiple_of(n) || weights.is_empty() {
            return Err(Error::Dimension {
                expected: n,
                actual: bias.len(),
            });
        }
        let arch = Architecture::linear(weights.len() / n);
        let mut params = weights;
        params.extend(bias);
        let a = Annotator {
            arch,
            type_set,
            params,
            seed: 0,
        };
        a.check_finite()?;
        Ok(a)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn type_set(&self) -> &TypeSet {
        &self.type_set
    }

    pub fn n_types(&self) -> usize {
        self.type_set.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn featurizer(&self) -> Featurizer {
        Featurizer::new(self.arch.feature_dim).unwrap_or_default()
    }

    pub fn featurize(&self, col: &Column) -> FeatureVector {
        self.featurizer().featurize(col)
    }

    fn output_offset(&self) -> usize {
        self.arch.core_params()
    }

    fn output_bias_offset(&self) -> usize {
        self.output_offset() + self.arch.core_dim() * self.n_types()
    }

    /// Weights and bias of output column `j`.
    pub fn output_column(&self, j: usize) -> (Vec<f64>, f64) {
        let n = self.n_types();
        let off = self.output_offset();
        let col = (0..self.arch.core_dim())
            .map(|i| self.params[off + i * n + j])
            .collect();
        (col, self.params[self.output_bias_offset() + j])
    }

    fn set_output_column(&mut self, j: usize, weights: &[f64], bias: f64) {
        let n = self.n_types();
        let off = self.output_offset();
        for (i, &w) in weights.iter().enumerate() {
            self.params[off + i * n + j] = w;
        }
        let b = self.output_bias_offset();
        self.params[b + j] = bias;
    }

    /// Hidden-layer weights followed by the hidden bias; empty for linear models.
    pub fn core_parameters(&self) -> &[f64] {
        &self.params[..self.arch.core_params()]
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::Runtime("annotator has non-finite weights".into()))
        }
    }

    /// Returns `(core output z, logits v)`.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_types();
        let z = match self.arch.hidden {
            Some(h) => {
                let m = self.arch.feature_dim;
                let (w, rest) = self.params.split_at(h * m);
                let b = &rest[..h];
                (0..h)
                    .map(|k| {
                        let row = &w[k * m..(k + 1) * m];
                        let a: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b[k];
                        a.tanh()
                    })
                    .collect()
            }
            None => x.to_vec(),
        };
        let off = self.output_offset();
        let mut v = self.params[self.output_bias_offset()..].to_vec();
        for (i, &zi) in z.iter().enumerate() {
            if zi == 0.0 {
                continue;
            }
            let row = &self.params[off + i * n..off + (i + 1) * n];
            for (vj, w) in v.iter_mut().zip(row) {
                *vj += zi * w;
            }
        }
        (z, v)
    }

    fn check_dim(&self, f: &FeatureVector) -> Result<()> {
        if f.len() != self.arch.feature_dim {
            return Err(Error::Dimension {
                expected: self.arch.feature_dim,
                actual: f.len(),
            });
        }
        Ok(())
    }

    pub fn forward_logits(&self, f: &FeatureVector) -> Result<Vec<f64>> {
        self.check_dim(f)?;
        Ok(self.forward(f.as_slice()).1)
    }

    /// Argmax type (lowest index on ties) and its softmax confidence.
    pub fn predict_features(&self, f: &FeatureVector) -> Result<Prediction> {
        let logits = self.forward_logits(f)?;
        Ok(Prediction {
            type_id: gating::argmax(&logits),
            confidence: gating::confidence(&logits)?,
            logits,
        })
    }

    pub fn predict(&self, col: &Column) -> Result<Prediction> {
        self.predict_features(&self.featurize(col))
    }

    fn check_examples(&self, examples: &[Example<'_>]) -> Result<()> {
        for ex in examples {
            self.check_dim(ex.features)?;
            if ex.label >= self.n_types() {
                return Err(Error::data(format!(
                    "label {} outside a type set of {}",
                    ex.label,
                    self.n_types()
                )));
            }
        }
        Ok(())
    }

    fn example_loss(&self, ex: &Example<'_>) -> f64 {
        let (_, v) = self.forward(ex.features.as_slice());
        log_sum_exp(&v) - v[ex.label]
    }

    /// Mean cross-entropy over `examples`; 0 when empty.
    pub fn mean_loss(&self, examples: &[Example<'_>]) -> Result<f64> {
        self.check_examples(examples)?;
        if examples.is_empty() {
            return Ok(0.0);
        }
        Ok(examples.iter().map(|e| self.example_loss(e)).sum::<f64>() / examples.len() as f64)
    }

    /// Mean cross-entropy and its gradient with respect to [`Self::parameters`].
    pub fn loss_and_gradient(&self, examples: &[Example<'_>]) -> Result<(f64, Vec<f64>)> {
        self.check_examples(examples)?;
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_gradient(examples.iter(), &mut grad);
        Ok((loss, grad))
    }

    fn accumulate_gradient<'e, 'a: 'e>(
        &self,
        batch: impl ExactSizeIterator<Item = &'e Example<'a>>,
        grad: &mut [f64],
    ) -> f64 {
        let n = self.n_types();
        let count = batch.len();
        if count == 0 {
            return 0.0;
        }
        let scale = 1.0 / count as f64;
        let out_off = self.output_offset();
        let bias_off = self.output_bias_offset();
        let mut loss = 0.0;
        for ex in batch {
            let x = ex.features.as_slice();
            let (z, v) = self.forward(x);
            let lse = log_sum_exp(&v);
            loss += lse - v[ex.label];
            let mut dv: Vec<f64> = v.iter().map(|vj| (vj - lse).exp() * scale).collect();
            dv[ex.label] -= scale;

            for (j, d) in dv.iter().enumerate() {
                grad[bias_off + j] += d;
            }
            for (i, &zi) in z.iter().enumerate() {
                if zi == 0.0 {
                    continue;
                }
                let g = &mut grad[out_off + i * n..out_off + (i + 1) * n];
                for (gj, d) in g.iter_mut().zip(&dv) {
                    *gj += zi * d;
                }
            }

            if let Some(h) = self.arch.hidden {
                let m = self.arch.feature_dim;
                for k in 0..h {
                    let w = &self.params[out_off + k * n..out_off + (k + 1) * n];
                    let dz: f64 = w.iter().zip(&dv).map(|(w, d)| w * d).sum();
                    let da = dz * (1.0 - z[k] * z[k]);
                    grad[h * m + k] += da;
                    let g = &mut grad[k * m..(k + 1) * m];
                    for (gi, &xi) in g.iter_mut().zip(x) {
                        *gi += da * xi;
                    }
                }
            }
        }
        loss * scale
    }

    /// Mini-batch Adam on cross-entropy. A fresh optimizer state is used for
    /// every call; the epoch shuffle order is a function of `cfg.seed`.
    pub fn train(&mut self, examples: &[Example<'_>], cfg: &TrainConfig) -> Result<TrainLog> {
        cfg.validate()?;
        if examples.is_empty() {
            return Err(Error::data("cannot train on an empty sample list"));
        }
        self.check_examples(examples)?;
        let mut trainer = Trainer::new(self, examples.len(), cfg);
        let mut log = TrainLog::default();
        for _ in 0..cfg.epochs {
            log.epoch_losses.push(trainer.epoch(self, examples, cfg.batch_size));
        }
        self.check_finite()?;
        Ok(log)
    }

    /// Trains for up to `cfg.epochs` epochs with one optimizer state,
    /// stopping once the validation loss has not improved for `patience`
    /// epochs. The parameters of the best validation epoch are restored.
    pub fn train_early_stopping(
        &mut self,
        train: &[Example<'_>],
        validation: &[Example<'_>],
        cfg: &TrainConfig,
        patience: usize,
    ) -> Result<EarlyStopLog> {
        cfg.validate()?;
        if train.is_empty() || validation.is_empty() {
            return Err(Error::data("early stopping needs train and validation examples"));
        }
        self.check_examples(train)?;
        self.check_examples(validation)?;
        let mut trainer = Trainer::new(self, train.len(), cfg);
        let mut log = EarlyStopLog::default();
        let mut best = (self.mean_loss(validation)?, self.params.clone());
        let mut stall = 0;
        for epoch in 1..=cfg.epochs {
            log.epoch_losses.push(trainer.epoch(self, train, cfg.batch_size));
            let v = self.mean_loss(validation)?;
            log.validation_losses.push(v);
            if v < best.0 {
                best = (v, self.params.clone());
                log.best_epoch = epoch;
                stall = 0;
            } else {
                stall += 1;
                if stall >= patience {
                    break;
                }
            }
        }
        self.params = best.1;
        self.check_finite()?;
        Ok(log)
    }

    /// Featurizes `samples` and trains on them.
    pub fn train_columns(&mut self, samples: &[(Column, usize)], cfg: &TrainConfig) -> Result<TrainLog> {
        let feats: Vec<FeatureVector> = samples.iter().map(|(c, _)| self.featurize(c)).collect();
        let examples: Vec<Example<'_>> = feats
            .iter()
            .zip(samples)
            .map(|(f, (_, label))| Example {
                features: f,
                label: *label,
            })
            .collect();
        self.train(&examples, cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            feature_dim: self.arch.feature_dim,
            hidden: self.arch.hidden,
            types: self.type_set.clone(),
            seed: self.seed,
            params: self.params.clone(),
        };
        let mut s = serde_json::to_string(&ckpt)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let arch = Architecture {
            feature_dim: ckpt.feature_dim,
            hidden: ckpt.hidden,
        };
        let mut a = Annotator::zeros(ckpt.types, arch)?;
        a.seed = ckpt.seed;
        a.set_parameters(&ckpt.params)?;
        Ok(a)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Annotator::from_json(&text)
    }
}

struct Trainer {
    adam: Adam,
    rng: rng::Rng,
    order: Vec<usize>,
    grad: Vec<f64>,
}

impl Trainer {
    fn new(model: &Annotator, n: usize, cfg: &TrainConfig) -> Self {
        Trainer {
            adam: Adam::new(model.params.len(), cfg.learning_rate),
            rng: rng::stream(cfg.seed, tags::SHUFFLE),
            order: (0..n).collect(),
            grad: vec![0.0; model.params.len()],
        }
    }

    /// One shuffled pass; returns the mean training loss seen.
    fn epoch(&mut self, model: &mut Annotator, examples: &[Example<'_>], batch_size: usize) -> f64 {
        self.order.shuffle(&mut self.rng);
        let mut epoch_loss = 0.0;
        for batch in self.order.chunks(batch_size) {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = model.accumulate_gradient(batch.iter().map(|&i| &examples[i]), &mut self.grad);
            epoch_loss += loss * batch.len() as f64;
            self.adam.step(&mut model.params, &self.grad);
        }
        epoch_loss / examples.len() as f64
    }
}

/// What the adaptation loop needs from an annotator. [`Annotator`] is the
/// production implementation; tests substitute scripted models.
pub trait ColumnModel: Clone + Send + Sync {
    fn type_set(&self) -> &TypeSet;
    fn logits(&self, features: &FeatureVector) -> Result<Vec<f64>>;
    fn fit(&mut self, examples: &[Example<'_>], cfg: &TrainConfig) -> Result<TrainLog>;
    fn loss(&self, examples: &[Example<'_>]) -> Result<f64>;
    fn checkpoint_json(&self) -> Result<String>;
}

impl ColumnModel for Annotator {
    fn type_set(&self) -> &TypeSet {
        &self.type_set
    }

    fn logits(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        self.forward_logits(features)
    }

    fn fit(&mut self, examples: &[Example<'_>], cfg: &TrainConfig) -> Result<TrainLog> {
        self.train(examples, cfg)
    }

    fn loss(&self, examples: &[Example<'_>]) -> Result<f64> {
        self.mean_loss(examples)
    }

    fn checkpoint_json(&self) -> Result<String> {
        self.to_json()
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    feature_dim: usize,
    hidden: Option<usize>,
    types: TypeSet,
    seed: u64,
    params: Vec<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// For each target type, the index of the source type with the same name.
pub fn shared_type_mapping(source: &TypeSet, target: &TypeSet) -> Vec<Option<usize>> {
    target.iter().map(|t| source.index_of(&t.name)).collect()
}

/// Moves `source` onto `target_types`: core weights are copied verbatim,
/// output columns of same-named types are transplanted, and every other
/// output column (weights and bias) is drawn from `N(0, 0.02)` under `seed`.
pub fn map_output_layer(source: &Annotator, target_types: &TypeSet, seed: u64) -> Result<Annotator> {
    let mut target = Annotator::zeros(target_types.clone(), source.arch)?;
    target.seed = seed;
    let core = source.arch.core_params();
    target.params[..core].copy_from_slice(&source.params[..core]);

    let normal = Normal::new(0.0, OUTPUT_INIT_STD).unwrap();
    let mut rng = rng::stream(seed, tags::SURGERY);
    let width = source.arch.core_dim();
    for (j, mapped) in shared_type_mapping(&source.type_set, target_types).into_iter().enumerate() {
        match mapped {
            Some(i) => {
                let (w, b) = source.output_column(i);
                target.set_output_column(j, &w, b);
            }
            None => {
                let w: Vec<f64> = (0..width).map(|_| normal.sample(&mut rng)).collect();
                let b = normal.sample(&mut rng);
                target.set_output_column(j, &w, b);
            }
        }
    }
    Ok(target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn types(names: &[&str]) -> TypeSet {
        TypeSet::from_names(names.iter().copied()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let a = Annotator::zeros(types(&["a", "b", "c"]), Architecture::default()).unwrap();
        let f = FeatureVector::new(vec![0.3; DEFAULT_FEATURE_DIM]).unwrap();
        assert_eq!(a.forward_logits(&f).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_type_softmax_is_one() {
        let a = Annotator::new(types(&["only"]), Architecture::default(), 3).unwrap();
        let f = featurize_column(&Column {
            table_id: "t".into(),
            col_index: 0,
            cells: vec!["x".into()],
            label: None,
        });
        let p = a.predict_features(&f).unwrap();
        assert_eq!(p.type_id, 0);
        assert_eq!(p.confidence, 1.0);
    }

    #[test]
    fn identity_output_layer() {
        let a = Annotator::linear(types(&["a", "b"]), vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let f = FeatureVector::new(vec![3.0, 1.0]).unwrap();
        assert_eq!(a.forward_logits(&f).unwrap(), vec![3.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Annotator::linear(types(&["a", "b"]), vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let f = FeatureVector::new(vec![3.0, 1.0, 2.0]).unwrap();
        assert!(matches!(a.forward_logits(&f), Err(Error::Dimension { .. })));
    }

    #[test]
    fn predict_tie_and_confidence() {
        let a = Annotator::linear(types(&["a", "b"]), vec![0.0; 4], vec![0.0, 0.0]).unwrap();
        let p = a.predict_features(&FeatureVector::new(vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!((p.type_id, p.confidence), (0, 0.5));

        let b = Annotator::linear(types(&["a", "b", "c"]), vec![10.0, 0.0, 0.0], vec![0.0; 3]).unwrap();
        let p = b.predict_features(&FeatureVector::new(vec![1.0]).unwrap()).unwrap();
        // 1 / (1 + 2 e^-10)
        let expected = 1.0 / (1.0 + 2.0 * (-10.0f64).exp());
        assert_eq!(p.type_id, 0);
        assert!((p.confidence - expected).abs() < 1e-15);
        assert!((p.confidence - 0.999_909_208_384_340_9).abs() < 1e-12);
        assert_eq!(p.confidence, gating::confidence(&p.logits).unwrap());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut a = Annotator::new(types(&["a", "b"]), Architecture::default(), 0).unwrap();
        assert!(a.train(&[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut a = Annotator::new(types(&["a", "b"]), Architecture::linear(2), 0).unwrap();
        let f = FeatureVector::new(vec![1.0, 0.0]).unwrap();
        let ex = [Example { features: &f, label: 5 }];
        assert!(a.train(&ex, &TrainConfig::default()).is_err());
    }

    fn separable_columns() -> Vec<(Column, usize)> {
        (0..100)
            .map(|i| {
                let label = i % 2;
                let cells = (0..6)
                    .map(|k| {
                        if label == 0 {
                            format!("{}", 1000 + i * 13 + k)
                        } else {
                            ["alpha", "beta", "gamma", "delta"][(i + k) % 4].to_string()
                        }
                    })
                    .collect();
                (
                    Column {
                        table_id: format!("t{i}"),
                        col_index: 0,
                        cells,
                        label: Some(label),
                    },
                    label,
                )
            })
            .collect()
    }

    #[test]
    fn learns_separable_types() {
        let samples = separable_columns();
        let mut a = Annotator::new(types(&["num", "word"]), Architecture::default(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        let log = a.train_columns(&samples, &cfg).unwrap();
        let correct = samples
            .iter()
            .filter(|(c, l)| a.predict(c).unwrap().type_id == *l)
            .count();
        assert!(correct as f64 / samples.len() as f64 >= 0.98);
        for w in log.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{:?}", log.epoch_losses);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let samples = separable_columns();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut a = Annotator::new(types(&["num", "word"]), Architecture::default(), 1).unwrap();
        let mut b = a.clone();
        a.train_columns(&samples, &cfg).unwrap();
        b.train_columns(&samples, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn surgery_follows_the_figure_example() {
        let src_types = types(&["company", "year", "team", "film"]);
        let source = Annotator::new(src_types.clone(), Architecture::default(), 5).unwrap();
        let tgt_types = types(&["company", "year", "team", "scientist"]);
        let target = map_output_layer(&source, &tgt_types, 77).unwrap();
        assert_eq!(target.core_parameters(), source.core_parameters());
        let mut copied = 0;
        for (j, t) in tgt_types.iter().enumerate() {
            match src_types.index_of(&t.name) {
                Some(i) => {
                    assert_eq!(target.output_column(j), source.output_column(i));
                    copied += 1;
                }
                None => assert_eq!(t.name, "scientist"),
            }
        }
        assert_eq!(copied, 3);
    }

    #[test]
    fn identical_type_sets_copy_everything() {
        let ts = types(&["a", "b", "c"]);
        let source = Annotator::new(ts.clone(), Architecture::default(), 5).unwrap();
        let target = map_output_layer(&source, &ts, 1).unwrap();
        assert_eq!(target.parameters(), source.parameters());
    }

    #[test]
    fn zero_overlap_reinitializes_output() {
        let src_names: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
        let tgt_names: Vec<String> = (0..20).map(|i| format!("t{i:02}")).collect();
        let mut source = Annotator::new(
            TypeSet::from_names(src_names).unwrap(),
            Architecture::linear(256),
            2,
        )
        .unwrap();
        // source columns trained away from the init distribution are fine too;
        // scale them up to make the comparison meaningful
        let scaled: Vec<f64> = source.parameters().iter().map(|p| p * 50.0).collect();
        source.set_parameters(&scaled).unwrap();
        let tgt = TypeSet::from_names(tgt_names).unwrap();
        let target = map_output_layer(&source, &tgt, 3).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut max_cos = 0.0f64;
        for j in 0..20 {
            for i in 0..20 {
                let c = cos(&target.output_column(j).0, &source.output_column(i).0);
                max_cos = max_cos.max(c.abs());
            }
        }
        assert!(max_cos < 0.5, "{max_cos}");
    }

    #[test]
    fn surgery_is_seed_reproducible() {
        let source = Annotator::new(types(&["a", "b"]), Architecture::default(), 5).unwrap();
        let tgt = types(&["a", "c", "d"]);
        let x = map_output_layer(&source, &tgt, 10).unwrap();
        let y = map_output_layer(&source, &tgt, 10).unwrap();
        let z = map_output_layer(&source, &tgt, 11).unwrap();
        assert_eq!(x, y);
        assert_ne!(x.output_column(1), z.output_column(1));
        assert_eq!(x.output_column(0), z.output_column(0));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut a = Annotator::new(types(&["num", "word"]), Architecture::default(), 4).unwrap();
        a.train_columns(&separable_columns()[..20], &TrainConfig::default()).unwrap();
        let text = a.to_json().unwrap();
        let b = Annotator::from_json(&text).unwrap();
        assert_eq!(a.parameters().len(), b.parameters().len());
        for (x, y) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(b.to_json().unwrap(), text);
        assert_eq!(a, b);
    }

    #[test]
    fn learning_rate_range_is_enforced() {
        let cfg = TrainConfig {
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
