//! Column featurizer: hashed character 3-grams, hashed tokens and a block of
//! 16 value statistics, computed only from cell values.
//!
//! All three blocks are order-free over cells. When a column has more than
//! [`MAX_CELLS`] cells the ones with the smallest content hash are kept, so
//! the chosen subset does not depend on cell order either.

use serde::{Deserialize, Serialize};

use crate::corpus::Column;
use crate::error::{Error, Result};
use crate::rng::stable_hash;

pub const DEFAULT_FEATURE_DIM: usize = 256;
pub const STAT_FEATURES: usize = 16;
pub const MAX_CELLS: usize = 64;

// Indices into the statistics block.
pub const MEAN_LENGTH: usize = 0;
pub const LENGTH_SPREAD: usize = 1;
pub const DIGIT_RATIO: usize = 2;
pub const ALPHA_RATIO: usize = 3;
pub const UPPER_RATIO: usize = 4;
pub const SPACE_RATIO: usize = 5;
pub const PUNCT_RATIO: usize = 6;
pub const DISTINCT_RATIO: usize = 7;
pub const NUMERIC_CELLS: usize = 8;
pub const TOKENS_PER_CELL: usize = 9;
pub const EMPTY_CELLS: usize = 10;
pub const NUMERIC_MAGNITUDE: usize = 11;
pub const CAPITALIZED_CELLS: usize = 12;
pub const HYPHEN_CELLS: usize = 13;
pub const DOT_CELLS: usize = 14;
pub const NON_ASCII_RATIO: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Runtime(format!("non-finite feature value {v}")));
        }
        Ok(FeatureVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    dim: usize,
}

impl Default for Featurizer {
    fn default() -> Self {
        Featurizer {
            dim: DEFAULT_FEATURE_DIM,
        }
    }
}

impl Featurizer {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < STAT_FEATURES + 2 {
            return Err(Error::config(format!(
                "feature dimension must be at least {}, got {dim}",
                STAT_FEATURES + 2
            )));
        }
        Ok(Featurizer { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn ngram_buckets(&self) -> usize {
        (self.dim - STAT_FEATURES) * 2 / 3
    }

    fn token_buckets(&self) -> usize {
        self.dim - STAT_FEATURES - self.ngram_buckets()
    }

    pub fn featurize(&self, col: &Column) -> FeatureVector {
        self.featurize_cells(&col.cells)
    }

    pub fn featurize_cells(&self, cells: &[String]) -> FeatureVector {
        let cells = select_cells(cells);
        let n_grams = self.ngram_buckets();
        let n_tokens = self.token_buckets();
        let mut out = vec![0.0; self.dim];

        {
            let (grams, rest) = out.split_at_mut(n_grams);
            let tokens = &mut rest[..n_tokens];
            for cell in &cells {
                let lowered = cell.to_lowercase();
                let padded: Vec<char> = std::iter::once('^')
                    .chain(lowered.chars())
                    .chain(std::iter::once('$'))
                    .collect();
                for w in padded.windows(3) {
                    let g: String = w.iter().collect();
                    grams[(stable_hash(&g) % n_grams as u64) as usize] += 1.0;
                }
                for tok in tokenize(&lowered) {
                    tokens[(stable_hash(&tok) % n_tokens as u64) as usize] += 1.0;
                }
            }
            normalize(grams);
            normalize(tokens);
        }

        let stats = statistics(&cells);
        let stats_block = &mut out[n_grams + n_tokens..];
        for (dst, s) in stats_block.iter_mut().zip(stats) {
            *dst = s / (STAT_FEATURES as f64).sqrt();
        }
        normalize(&mut out);
        FeatureVector(out)
    }
}

/// Featurizes with the default dimension.
pub fn featurize_column(col: &Column) -> FeatureVector {
    Featurizer::default().featurize(col)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// At most [`MAX_CELLS`] cells, sorted by (hash, text).
fn select_cells(cells: &[String]) -> Vec<&str> {
    let mut keyed: Vec<(u64, &str)> = cells.iter().map(|c| (stable_hash(c), c.as_str())).collect();
    keyed.sort_unstable();
    keyed.truncate(MAX_CELLS);
    keyed.into_iter().map(|(_, c)| c).collect()
}

/// Alphanumeric runs; all-digit runs collapse to a length shape.
fn tokenize(cell: &str) -> impl Iterator<Item = String> + '_ {
    cell.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            if t.chars().all(|c| c.is_ascii_digit()) {
                format!("#d{}", t.len())
            } else {
                t.to_string()
            }
        })
}

/// The 16-entry statistics block, before scaling. Every entry lies in `[0, 1]`.
pub fn column_statistics(cells: &[String]) -> [f64; STAT_FEATURES] {
    statistics(&select_cells(cells))
}

fn statistics(cells: &[&str]) -> [f64; STAT_FEATURES] {
    let mut s = [0.0; STAT_FEATURES];
    if cells.is_empty() {
        return s;
    }
    let n = cells.len() as f64;
    let lengths: Vec<f64> = cells.iter().map(|c| c.chars().count() as f64).collect();
    let total_chars: f64 = lengths.iter().sum();
    let mean_len = total_chars / n;
    let var = lengths.iter().map(|l| (l - mean_len).powi(2)).sum::<f64>() / n;

    let mut digits = 0usize;
    let mut alpha = 0usize;
    let mut upper = 0usize;
    let mut space = 0usize;
    let mut punct = 0usize;
    let mut non_ascii = 0usize;
    for c in cells.iter().flat_map(|c| c.chars()) {
        if c.is_ascii_digit() {
            digits += 1;
        }
        if c.is_alphabetic() {
            alpha += 1;
        }
        if c.is_uppercase() {
            upper += 1;
        }
        if c.is_whitespace() {
            space += 1;
        }
        if c.is_ascii_punctuation() {
            punct += 1;
        }
        if !c.is_ascii() {
            non_ascii += 1;
        }
    }
    let ratio = |k: usize| if total_chars > 0.0 { k as f64 / total_chars } else { 0.0 };
    let frac = |pred: &dyn Fn(&str) -> bool| cells.iter().filter(|c| pred(c)).count() as f64 / n;

    let mut distinct: Vec<&str> = cells.to_vec();
    distinct.sort_unstable();
    distinct.dedup();

    let numeric: Vec<f64> = cells
        .iter()
        .filter_map(|c| c.trim().parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .collect();
    let magnitude = if numeric.is_empty() {
        0.0
    } else {
        let mean_log = numeric.iter().map(|v| (v.abs() + 1.0).log10()).sum::<f64>() / numeric.len() as f64;
        (mean_log / 10.0).min(1.0)
    };
    let tokens = cells.iter().map(|c| tokenize(c).count()).sum::<usize>() as f64 / n;

    let squash = |x: f64, scale: f64| (x.ln_1p() / scale.ln_1p()).min(1.0);
    s[MEAN_LENGTH] = squash(mean_len, 64.0);
    s[LENGTH_SPREAD] = squash(var.sqrt(), 32.0);
    s[DIGIT_RATIO] = ratio(digits);
    s[ALPHA_RATIO] = ratio(alpha);
    s[UPPER_RATIO] = ratio(upper);
    s[SPACE_RATIO] = ratio(space);
    s[PUNCT_RATIO] = ratio(punct);
    s[DISTINCT_RATIO] = distinct.len() as f64 / n;
    s[NUMERIC_CELLS] = numeric.len() as f64 / n;
    s[TOKENS_PER_CELL] = squash(tokens, 16.0);
    s[EMPTY_CELLS] = frac(&|c| c.trim().is_empty());
    s[NUMERIC_MAGNITUDE] = magnitude;
    s[CAPITALIZED_CELLS] = frac(&|c| c.chars().next().is_some_and(char::is_uppercase));
    s[HYPHEN_CELLS] = frac(&|c| c.contains('-'));
    s[DOT_CELLS] = frac(&|c| c.contains('.'));
    s[NON_ASCII_RATIO] = ratio(non_ascii);
    s
}
