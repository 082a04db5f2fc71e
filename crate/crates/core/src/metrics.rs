//! Per-type, support-weighted and macro-averaged F1, OOD rate, and
//! budget-vs-score curves.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{ColumnId, DataLake, SplitKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        self.scaled_f1(1.0, 1.0)
    }

    /// `f1 * numerator / divisor` with a single rounding.
    fn scaled_f1(&self, numerator: f64, divisor: f64) -> f64 {
        let denom = (2 * self.tp + self.fp + self.fn_) as f64 * divisor;
        if denom == 0.0 {
            0.0
        } else {
            (2 * self.tp) as f64 * numerator / denom
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Counts per type id of the lake's type set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionTable {
    pub counts: BTreeMap<usize, Counts>,
    /// Predictions whose name is outside the type set.
    pub out_of_domain: usize,
    pub n_evaluated: usize,
}

impl ConfusionTable {
    fn record(&mut self, truth: usize, predicted: Option<usize>) {
        self.n_evaluated += 1;
        match predicted {
            Some(p) if p == truth => self.counts.entry(p).or_default().tp += 1,
            Some(p) => {
                self.counts.entry(p).or_default().fp += 1;
                self.counts.entry(truth).or_default().fn_ += 1;
            }
            None => {
                self.out_of_domain += 1;
                self.counts.entry(truth).or_default().fn_ += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub name: String,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Types present in the ground truth or predicted, by type id.
    pub per_type: Vec<TypeScore>,
    pub sw_f1: f64,
    pub ma_f1: f64,
    pub ood_rate: f64,
    pub n_evaluated: usize,
}

impl MetricsReport {
    pub fn from_table(table: &ConfusionTable, lake: &DataLake) -> MetricsReport {
        let per_type: Vec<TypeScore> = table
            .counts
            .iter()
            .map(|(&id, c)| TypeScore {
                name: lake.type_set.name(id).unwrap_or_default().to_string(),
                support: c.support(),
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
            })
            .collect();
        let total: usize = per_type.iter().map(|t| t.support).sum();
        let sw_f1 = if total == 0 {
            0.0
        } else {
            let total = total as f64;
            table.counts.values().map(|c| c.scaled_f1(c.support() as f64, total)).sum()
        };
        let ma_f1 = if per_type.is_empty() {
            0.0
        } else {
            let n = per_type.len() as f64;
            table.counts.values().map(|c| c.scaled_f1(1.0, n)).sum()
        };
        MetricsReport {
            per_type,
            sw_f1,
            ma_f1,
            ood_rate: ratio(table.out_of_domain, table.n_evaluated),
            n_evaluated: table.n_evaluated,
        }
    }

    /// One row per type followed by a summary row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Runtime(format!("csv export: {e}"));
        w.write_record(["type", "support", "tp", "fp", "fn", "precision", "recall", "f1"])
            .map_err(csv_err)?;
        for t in &self.per_type {
            w.write_record([
                t.name.clone(),
                t.support.to_string(),
                t.tp.to_string(),
                t.fp.to_string(),
                t.fn_.to_string(),
                t.precision.to_string(),
                t.recall.to_string(),
                t.f1.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.write_record([
            "summary".to_string(),
            self.n_evaluated.to_string(),
            String::new(),
            String::new(),
            String::new(),
            format!("sw_f1={}", self.sw_f1),
            format!("ood_rate={}", self.ood_rate),
            format!("ma_f1={}", self.ma_f1),
        ])
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Scores `(column, predicted type name)` pairs against the lake's labels.
/// Every column must belong to `split` and appear at most once.
pub fn evaluate(predictions: &[(ColumnId, String)], lake: &DataLake, split: SplitKind) -> Result<MetricsReport> {
    let members = lake.split(split)?;
    let mut seen = HashSet::new();
    let mut table = ConfusionTable::default();
    for (id, name) in predictions {
        if members.binary_search(id).is_err() {
            return Err(Error::data(format!("column {id} is not in the {split} split")));
        }
        if !seen.insert(*id) {
            return Err(Error::data(format!("column {id} predicted twice")));
        }
        let truth = lake
            .label(*id)
            .ok_or_else(|| Error::data(format!("column {id} has no label")))?;
        table.record(truth, lake.type_set.index_of(name));
    }
    Ok(MetricsReport::from_table(&table, lake))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: usize,
    pub sw_f1: f64,
    pub ma_f1: f64,
}

/// Budget-tagged reports as points sorted by budget.
pub fn curve(reports: &[(usize, &MetricsReport)]) -> Result<Vec<CurvePoint>> {
    if reports.is_empty() {
        return Err(Error::config("a curve needs at least one report"));
    }
    let mut points: Vec<CurvePoint> = reports
        .iter()
        .map(|(budget, r)| CurvePoint {
            budget: *budget,
            sw_f1: r.sw_f1,
            ma_f1: r.ma_f1,
        })
        .collect();
    points.sort_by_key(|p| p.budget);
    if let Some(w) = points.windows(2).find(|w| w[0].budget == w[1].budget) {
        return Err(Error::config(format!("duplicate budget {} in curve", w[0].budget)));
    }
    Ok(points)
}

pub fn curve_to_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["budget", "sw_f1", "ma_f1"])
        .map_err(|e| Error::Runtime(e.to_string()))?;
    for p in points {
        w.serialize((p.budget, p.sw_f1, p.ma_f1))
            .map_err(|e| Error::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Column, Splits, TypeSet};
    use proptest::prelude::*;

    fn lake(labels: &[usize], n_types: usize) -> DataLake {
        let names: Vec<String> = (0..n_types).map(|i| format!("type{i:02}")).collect();
        let columns = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Column {
                table_id: format!("t{i:05}"),
                col_index: 0,
                cells: vec!["x".into()],
                label: Some(l),
            })
            .collect();
        let lake = DataLake::new(TypeSet::from_names(names).unwrap(), columns).unwrap();
        let splits = Splits {
            train: vec![],
            validation: vec![],
            test: (0..labels.len()).map(ColumnId).collect(),
        };
        lake.with_splits(splits).unwrap()
    }

    fn preds(lake: &DataLake, names: &[&str]) -> Vec<(ColumnId, String)> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let name = lake.type_set.name(n.parse().unwrap_or(usize::MAX)).unwrap_or(n);
                (ColumnId(i), name.to_string())
            })
            .collect()
    }

    /// Scores each type by scanning every (truth, prediction) pair.
    fn brute_force(truth: &[usize], predicted: &[Option<usize>], n_types: usize) -> (f64, f64, f64) {
        let mut f1s = Vec::new();
        let mut supports = Vec::new();
        for t in 0..n_types {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fneg = 0.0;
            for (y, p) in truth.iter().zip(predicted) {
                let hit_truth = *y == t;
                let hit_pred = *p == Some(t);
                if hit_truth && hit_pred {
                    tp += 1.0;
                } else if hit_pred {
                    fp += 1.0;
                } else if hit_truth {
                    fneg += 1.0;
                }
            }
            let support = tp + fneg;
            if support == 0.0 && fp == 0.0 {
                continue;
            }
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if support > 0.0 { tp / support } else { 0.0 };
            f1s.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
            supports.push(support);
        }
        let total: f64 = supports.iter().sum();
        let sw = f1s.iter().zip(&supports).map(|(f, s)| f * s).sum::<f64>() / total;
        let ma = f1s.iter().sum::<f64>() / f1s.len() as f64;
        let ood = predicted.iter().filter(|p| p.is_none()).count() as f64 / truth.len() as f64;
        (sw, ma, ood)
    }

    #[test]
    fn hand_example() {
        let l = lake(&[0, 0, 0, 1], 2);
        let r = evaluate(&preds(&l, &["0", "0", "0", "0"]), &l, SplitKind::Test).unwrap();
        assert!((r.per_type[0].f1 - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(r.per_type[1].f1, 0.0);
        assert_eq!(r.sw_f1, 9.0 / 14.0);
        assert_eq!(r.ma_f1, 3.0 / 7.0);
        assert_eq!(r.ood_rate, 0.0);
    }

    #[test]
    fn perfect_predictions() {
        let l = lake(&[0, 1, 2, 1], 4);
        let r = evaluate(&preds(&l, &["0", "1", "2", "1"]), &l, SplitKind::Test).unwrap();
        assert_eq!((r.sw_f1, r.ma_f1, r.ood_rate), (1.0, 1.0, 0.0));
        assert_eq!(r.per_type.len(), 3);
    }

    #[test]
    fn predicted_absent_type_counts_in_macro() {
        let l = lake(&[0, 0], 3);
        let r = evaluate(&preds(&l, &["0", "2"]), &l, SplitKind::Test).unwrap();
        assert_eq!(r.per_type.len(), 2);
        assert!((r.ma_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_domain_names() {
        let l = lake(&[0, 1], 2);
        let r = evaluate(&preds(&l, &["0", "astronaut"]), &l, SplitKind::Test).unwrap();
        assert_eq!(r.ood_rate, 0.5);
        assert!(r.per_type.iter().all(|t| t.name != "astronaut"));
    }

    #[test]
    fn rejects_foreign_and_duplicate_columns() {
        let l = lake(&[0, 1], 2);
        let bad = vec![(ColumnId(7), "type00".to_string())];
        assert!(evaluate(&bad, &l, SplitKind::Test).is_err());
        let dup = vec![(ColumnId(0), "type00".to_string()), (ColumnId(0), "type00".to_string())];
        assert!(evaluate(&dup, &l, SplitKind::Test).is_err());
        assert!(evaluate(&[], &l, SplitKind::Train).unwrap().n_evaluated == 0);
    }

    #[test]
    fn curve_points() {
        let l = lake(&[0, 1], 2);
        let r = evaluate(&preds(&l, &["0", "1"]), &l, SplitKind::Test).unwrap();
        let pts = curve(&[(864, &r), (239, &r), (614, &r), (364, &r)]).unwrap();
        assert_eq!(pts.iter().map(|p| p.budget).collect::<Vec<_>>(), vec![239, 364, 614, 864]);
        assert_eq!(curve(&[(5, &r)]).unwrap().len(), 1);
        assert!(curve(&[(5, &r), (5, &r)]).is_err());
        assert!(curve(&[]).is_err());
        let csv = curve_to_csv(&pts).unwrap();
        assert!(csv.starts_with("budget,sw_f1,ma_f1\n239,1.0,1.0\n"));
    }

    #[test]
    fn report_csv_has_summary_row() {
        let l = lake(&[0, 0, 0, 1], 2);
        let r = evaluate(&preds(&l, &["0", "0", "0", "0"]), &l, SplitKind::Test).unwrap();
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("summary,4,"));
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<(usize, Option<usize>)>)> {
        (2usize..8).prop_flat_map(|n| {
            let pair = (0..n, prop::option::weighted(0.95, 0..n));
            (Just(n), prop::collection::vec(pair, 1..200))
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((n, pairs) in instance()) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let predicted: Vec<Option<usize>> = pairs.iter().map(|p| p.1).collect();
            let l = lake(&truth, n);
            let names: Vec<(ColumnId, String)> = predicted
                .iter()
                .enumerate()
                .map(|(i, p)| (ColumnId(i), p.map_or("ood".into(), |p| l.type_set.name(p).unwrap().to_string())))
                .collect();
            let r = evaluate(&names, &l, SplitKind::Test).unwrap();
            let (sw, ma, ood) = brute_force(&truth, &predicted, n);
            prop_assert!((r.sw_f1 - sw).abs() <= 1e-12);
            prop_assert!((r.ma_f1 - ma).abs() <= 1e-12);
            prop_assert!((r.ood_rate - ood).abs() <= 1e-12);

            let min = r.per_type.iter().filter(|t| t.support > 0).map(|t| t.f1).fold(f64::INFINITY, f64::min);
            let max = r.per_type.iter().map(|t| t.f1).fold(0.0, f64::max);
            prop_assert!(min - 1e-12 <= r.sw_f1 && r.sw_f1 <= max + 1e-12);

            let mut rev = names.clone();
            rev.reverse();
            prop_assert_eq!(evaluate(&rev, &l, SplitKind::Test).unwrap(), r);
        }
    }
}
