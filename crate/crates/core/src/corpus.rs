//! Data lakes: typed columns, on-disk storage, deterministic splits and a
//! synthetic source/target lake-pair generator.
//!
//! On-disk layout of a lake directory:
//!
//! ```text
//! <root>/<table_id>.csv   RFC-4180 CSV, UTF-8, cells only
//! <root>/labels.jsonl     {"table_id", "col_index", "type", "skip_header"} per labeled column
//! <root>/manifest.json    type-set order and split membership
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tags};

pub const LABELS_FILE: &str = "labels.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticType {
    pub id: usize,
    pub name: String,
}

/// Ordered set of semantic types. The order is lexicographic by name and
/// defines the column order of every output layer built over the set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TypeSet {
    types: Vec<SemanticType>,
}

impl TypeSet {
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        for pair in names.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::data(format!("duplicate type name {:?}", pair[0])));
            }
        }
        if let Some(empty) = names.iter().find(|n| n.trim().is_empty()) {
            return Err(Error::data(format!("invalid type name {empty:?}")));
        }
        let types = names
            .into_iter()
            .enumerate()
            .map(|(id, name)| SemanticType { id, name })
            .collect();
        Ok(TypeSet { types })
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SemanticType> {
        self.types.iter()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.types.get(id).map(|t| t.name.as_str())
    }

    pub fn names(&self) -> Vec<&str> {
        self.types.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.types
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}

impl Serialize for TypeSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.types.iter().map(|t| &t.name))
    }
}

impl<'de> Deserialize<'de> for TypeSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        TypeSet::from_names(names).map_err(serde::de::Error::custom)
    }
}

/// Index of a column within its lake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColumnId(pub usize);

impl fmt::Display for ColumnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub table_id: String,
    pub col_index: usize,
    pub cells: Vec<String>,
    /// Ground-truth type id in the owning lake's type set.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitKind::Train),
            "validation" | "valid" | "val" => Ok(SplitKind::Validation),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        })
    }
}

/// Partition of the labeled columns. Each list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<ColumnId>,
    pub validation: Vec<ColumnId>,
    pub test: Vec<ColumnId>,
}

impl Splits {
    pub fn get(&self, kind: SplitKind) -> &[ColumnId] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }

    pub fn kind_of(&self, id: ColumnId) -> Option<SplitKind> {
        [SplitKind::Train, SplitKind::Validation, SplitKind::Test]
            .into_iter()
            .find(|&k| self.get(k).binary_search(&id).is_ok())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataLake {
    pub type_set: TypeSet,
    columns: Vec<Column>,
    splits: Option<Splits>,
}

impl DataLake {
    /// Columns are stored in canonical `(table_id, col_index)` order.
    pub fn new(type_set: TypeSet, mut columns: Vec<Column>) -> Result<Self> {
        columns.sort_by(|a, b| (&a.table_id, a.col_index).cmp(&(&b.table_id, b.col_index)));
        for pair in columns.windows(2) {
            if pair[0].table_id == pair[1].table_id && pair[0].col_index == pair[1].col_index {
                return Err(Error::data(format!(
                    "duplicate column {}:{}",
                    pair[0].table_id, pair[0].col_index
                )));
            }
        }
        for c in &columns {
            if let Some(label) = c.label {
                if label >= type_set.len() {
                    return Err(Error::data(format!(
                        "column {}:{} has label {label} outside a type set of {}",
                        c.table_id,
                        c.col_index,
                        type_set.len()
                    )));
                }
                if c.cells.is_empty() {
                    return Err(Error::data(format!(
                        "labeled column {}:{} has no cells",
                        c.table_id, c.col_index
                    )));
                }
            }
        }
        Ok(DataLake {
            type_set,
            columns,
            splits: None,
        })
    }

    pub fn with_splits(mut self, mut splits: Splits) -> Result<Self> {
        splits.train.sort();
        splits.validation.sort();
        splits.test.sort();
        let mut seen = BTreeSet::new();
        for id in splits
            .train
            .iter()
            .chain(&splits.validation)
            .chain(&splits.test)
        {
            let col = self
                .columns
                .get(id.0)
                .ok_or_else(|| Error::data(format!("split references unknown column {id}")))?;
            if col.label.is_none() {
                return Err(Error::data(format!("split contains unlabeled column {id}")));
            }
            if !seen.insert(*id) {
                return Err(Error::data(format!("column {id} appears in two splits")));
            }
        }
        let labeled = self.labeled_ids().len();
        if seen.len() != labeled {
            return Err(Error::data(format!(
                "splits cover {} of {labeled} labeled columns",
                seen.len()
            )));
        }
        self.splits = Some(splits);
        Ok(self)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, id: ColumnId) -> &Column {
        &self.columns[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ColumnId> {
        (0..self.columns.len()).map(ColumnId)
    }

    pub fn labeled_ids(&self) -> Vec<ColumnId> {
        self.ids().filter(|&id| self.column(id).label.is_some()).collect()
    }

    pub fn splits(&self) -> Result<&Splits> {
        self.splits
            .as_ref()
            .ok_or_else(|| Error::data("lake has no train/validation/test splits"))
    }

    pub fn has_splits(&self) -> bool {
        self.splits.is_some()
    }

    pub fn split(&self, kind: SplitKind) -> Result<&[ColumnId]> {
        Ok(self.splits()?.get(kind))
    }

    pub fn label(&self, id: ColumnId) -> Option<usize> {
        self.column(id).label
    }

    pub fn label_name(&self, id: ColumnId) -> Option<&str> {
        self.label(id).and_then(|l| self.type_set.name(l))
    }

    pub fn find(&self, table_id: &str, col_index: usize) -> Option<ColumnId> {
        self.columns
            .binary_search_by(|c| (c.table_id.as_str(), c.col_index).cmp(&(table_id, col_index)))
            .ok()
            .map(ColumnId)
    }

    /// Labeled-column count per type id.
    pub fn type_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.type_set.len()];
        for c in &self.columns {
            if let Some(l) = c.label {
                counts[l] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub table_id: String,
    pub col_index: usize,
    #[serde(rename = "type")]
    pub type_name: String,
    #[serde(default)]
    pub skip_header: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ColumnKey {
    table_id: String,
    col_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestSplits {
    train: Vec<ColumnKey>,
    validation: Vec<ColumnKey>,
    test: Vec<ColumnKey>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    type_set: Vec<String>,
    splits: Option<ManifestSplits>,
}

fn read_table(path: &Path, skip_header: bool) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let mut columns: Vec<Vec<String>> = Vec::new();
    for (row_index, record) in reader.records().enumerate() {
        let record = record.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        if skip_header && row_index == 0 {
            continue;
        }
        if columns.is_empty() {
            columns = vec![Vec::new(); record.len()];
        }
        for (col, cell) in columns.iter_mut().zip(record.iter()) {
            col.push(cell.to_string());
        }
    }
    Ok(columns)
}

fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(line).map_err(|e| {
            Error::data(format!("{}:{}: {e}", path.display(), line_no + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads every `*.csv` table under `root` plus the labels file. Split
/// membership and the declared type set come from `manifest.json` when it
/// exists; otherwise the lake is returned without splits.
pub fn load_data_lake(root: &Path, labels_path: &Path) -> Result<DataLake> {
    let labels = read_labels(labels_path)?;

    let mut skip_header: HashMap<&str, bool> = HashMap::new();
    let mut label_map: BTreeMap<(&str, usize), &str> = BTreeMap::new();
    for rec in &labels {
        if let Some(prev) = skip_header.insert(&rec.table_id, rec.skip_header) {
            if prev != rec.skip_header {
                return Err(Error::data(format!(
                    "conflicting skip_header flags for table {}",
                    rec.table_id
                )));
            }
        }
        if label_map
            .insert((&rec.table_id, rec.col_index), &rec.type_name)
            .is_some()
        {
            return Err(Error::data(format!(
                "duplicate label row for {}:{}",
                rec.table_id, rec.col_index
            )));
        }
    }

    let mut table_paths = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            table_paths.push(path);
        }
    }
    table_paths.sort();

    let mut tables: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for path in &table_paths {
        let table_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data(format!("non UTF-8 table file name {}", path.display())))?
            .to_string();
        let skip = skip_header.get(table_id.as_str()).copied().unwrap_or(false);
        let cols = read_table(path, skip)?;
        tables.insert(table_id, cols);
    }

    for &(table_id, col_index) in label_map.keys() {
        let table = tables
            .get(table_id)
            .ok_or_else(|| Error::data(format!("labels reference unknown table {table_id:?}")))?;
        if col_index >= table.len() {
            return Err(Error::data(format!(
                "labels reference unknown column {col_index} of table {table_id:?} ({} columns)",
                table.len()
            )));
        }
    }

    let manifest_path = root.join(MANIFEST_FILE);
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::data(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        Some(m)
    } else {
        None
    };

    let type_set = match &manifest {
        Some(m) => TypeSet::from_names(m.type_set.iter().cloned())?,
        None => TypeSet::from_names(label_map.values().map(|s| s.to_string()).collect::<BTreeSet<_>>())?,
    };

    let mut columns = Vec::new();
    for (table_id, cols) in tables {
        for (col_index, cells) in cols.into_iter().enumerate() {
            let label = match label_map.get(&(table_id.as_str(), col_index)) {
                Some(name) => Some(type_set.index_of(name).ok_or_else(|| {
                    Error::data(format!("label {name:?} is not in the manifest type set"))
                })?),
                None => None,
            };
            columns.push(Column {
                table_id: table_id.clone(),
                col_index,
                cells,
                label,
            });
        }
    }

    let lake = DataLake::new(type_set, columns)?;
    let counts = lake.type_counts();
    for (t, &n) in lake.type_set.iter().zip(&counts) {
        if n == 0 {
            log::warn!("type {:?} has no labeled column in {}", t.name, root.display());
        }
    }

    match manifest.and_then(|m| m.splits) {
        Some(ms) => {
            let resolve = |keys: &[ColumnKey]| -> Result<Vec<ColumnId>> {
                keys.iter()
                    .map(|k| {
                        lake.find(&k.table_id, k.col_index).ok_or_else(|| {
                            Error::data(format!(
                                "manifest references unknown column {}:{}",
                                k.table_id, k.col_index
                            ))
                        })
                    })
                    .collect()
            };
            let splits = Splits {
                train: resolve(&ms.train)?,
                validation: resolve(&ms.validation)?,
                test: resolve(&ms.test)?,
            };
            lake.with_splits(splits)
        }
        None => Ok(lake),
    }
}

fn valid_table_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Writes the lake under `root` in the layout documented at module level.
/// Output bytes are a deterministic function of the lake.
pub fn save_data_lake(lake: &DataLake, root: &Path) -> Result<()> {
    let mut tables: BTreeMap<&str, Vec<&Column>> = BTreeMap::new();
    for c in lake.columns() {
        if c.cells.is_empty() {
            return Err(Error::data(format!(
                "column {}:{} has no cells",
                c.table_id, c.col_index
            )));
        }
        if !valid_table_id(&c.table_id) {
            return Err(Error::data(format!(
                "table id {:?} is not usable as a file name",
                c.table_id
            )));
        }
        tables.entry(&c.table_id).or_default().push(c);
    }
    for (table_id, cols) in &tables {
        for (i, c) in cols.iter().enumerate() {
            if c.col_index != i {
                return Err(Error::data(format!(
                    "table {table_id} has a gap before column {}",
                    c.col_index
                )));
            }
            if c.cells.len() != cols[0].cells.len() {
                return Err(Error::data(format!(
                    "table {table_id} is ragged: column {} has {} cells, column 0 has {}",
                    c.col_index,
                    c.cells.len(),
                    cols[0].cells.len()
                )));
            }
        }
    }

    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            if !tables.contains_key(stem) {
                return Err(Error::data(format!(
                    "{} already holds a table {} that is not part of this lake",
                    root.display(),
                    path.display()
                )));
            }
        }
    }

    for (table_id, cols) in &tables {
        let path = root.join(format!("{table_id}.csv"));
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|source| Error::Csv {
                path: path.clone(),
                source,
            })?;
        for row in 0..cols[0].cells.len() {
            writer
                .write_record(cols.iter().map(|c| c.cells[row].as_str()))
                .map_err(|source| Error::Csv {
                    path: path.clone(),
                    source,
                })?;
        }
        writer.flush().map_err(|e| Error::io(&path, e))?;
    }

    let mut labels = String::new();
    for c in lake.columns() {
        if let Some(l) = c.label {
            let rec = LabelRecord {
                table_id: c.table_id.clone(),
                col_index: c.col_index,
                type_name: lake.type_set.name(l).unwrap_or_default().to_string(),
                skip_header: false,
            };
            labels.push_str(&serde_json::to_string(&rec)?);
            labels.push('\n');
        }
    }
    let labels_path = root.join(LABELS_FILE);
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;

    let key = |id: &ColumnId| {
        let c = lake.column(*id);
        ColumnKey {
            table_id: c.table_id.clone(),
            col_index: c.col_index,
        }
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        type_set: lake.type_set.names().into_iter().map(String::from).collect(),
        splits: lake.splits.as_ref().map(|s| ManifestSplits {
            train: s.train.iter().map(key).collect(),
            validation: s.validation.iter().map(key).collect(),
            test: s.test.iter().map(key).collect(),
        }),
    };
    let manifest_path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Randomly partitions the labeled columns into train/validation/test.
/// Split sizes are the rounded requested fractions; the remainder is test.
pub fn split_data_lake(
    lake: &DataLake,
    train_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> Result<DataLake> {
    if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
        return Err(Error::config(format!(
            "split fractions must be positive with sum < 1, got {train_frac} + {valid_frac}"
        )));
    }
    let mut ids = lake.labeled_ids();
    let n = ids.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_valid = (n as f64 * valid_frac).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::data(format!(
            "{n} labeled columns are too few to populate train, validation and test"
        )));
    }
    let mut rng = rng::stream(seed, tags::SPLIT);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train + n_valid);
    let validation = ids.split_off(n_train);
    let splits = Splits {
        train: ids,
        validation,
        test,
    };
    let mut out = lake.clone();
    out.splits = None;
    out.with_splits(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

fn default_train_frac() -> f64 {
    0.8
}

fn default_valid_frac() -> f64 {
    0.1
}

fn default_max_table_width() -> usize {
    4
}

/// Parameters of a synthetic source/target lake pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LakePairSpec {
    pub n_source_types: usize,
    pub n_target_types: usize,
    pub n_shared_types: usize,
    /// Head-type column count (`max`) and the floor every type gets (`min`).
    pub columns_per_type: CountRange,
    pub cells_per_column: CountRange,
    /// Zipf exponent over per-type column counts.
    pub long_tail_skew: f64,
    pub noise_rate: f64,
    pub seed: u64,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_valid_frac")]
    pub valid_frac: f64,
    #[serde(default = "default_max_table_width")]
    pub max_table_width: usize,
}

impl LakePairSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_source_types == 0 || self.n_target_types == 0 {
            return fail("n_source_types and n_target_types must be at least 1".into());
        }
        if self.n_shared_types > self.n_source_types.min(self.n_target_types) {
            return fail(format!(
                "n_shared_types ({}) must be <= min(n_source_types, n_target_types) ({})",
                self.n_shared_types,
                self.n_source_types.min(self.n_target_types)
            ));
        }
        if !(self.long_tail_skew >= 0.0 && self.long_tail_skew.is_finite()) {
            return fail(format!("long_tail_skew must be >= 0, got {}", self.long_tail_skew));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return fail(format!("noise_rate must be in [0, 1), got {}", self.noise_rate));
        }
        for (name, r) in [
            ("columns_per_type", self.columns_per_type),
            ("cells_per_column", self.cells_per_column),
        ] {
            if r.min == 0 || r.min > r.max {
                return fail(format!("{name} needs 1 <= min <= max, got {}..{}", r.min, r.max));
            }
        }
        if self.max_table_width == 0 {
            return fail("max_table_width must be at least 1".into());
        }
        Ok(())
    }
}

const NAME_POOL: &[&str] = &[
    "company", "year", "team", "film", "scientist", "city", "country", "state", "person",
    "album", "artist", "language", "currency", "genre", "species", "club", "position",
    "religion", "rank", "sex", "weight", "age", "duration", "publisher", "product", "brand",
    "region", "address", "code", "category", "status", "owner", "credit", "notes", "order",
    "result", "origin", "plays", "family", "format", "collection", "component", "depth",
    "elevation", "industry", "jockey", "manufacturer", "nationality", "operator", "organisation",
    "affiliation", "capacity", "command", "county", "creator", "education", "grades", "isbn",
    "location", "range",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "ten", "zu", "bel", "dor", "fa", "gri", "ho", "jin", "ku", "lem",
    "mar", "nos", "pa", "qui", "ros", "sa", "tor", "ul", "vex", "wa", "yo", "zen", "an", "bri",
    "cal", "del", "eo", "fin", "gal", "hem", "ix", "jor", "kel", "lin", "mon", "nor",
];

#[derive(Debug, Clone)]
enum CellPattern {
    Words { min: usize, max: usize },
    Integer { lo: i64, hi: i64 },
    Decimal { lo: f64, hi: f64, places: usize },
    Code { digits: usize },
    Date,
}

/// Generative profile of one semantic type. It depends only on the pair
/// seed and the type name, so shared types emit identical distributions in
/// both lakes.
#[derive(Debug, Clone)]
struct TypeProfile {
    vocabulary: Vec<String>,
    pattern: CellPattern,
    capitalize: bool,
}

impl TypeProfile {
    fn new(seed: u64, name: &str) -> Self {
        let mut rng = rng::stream(seed ^ rng::stable_hash(name), tags::PROFILE);
        let syllables: Vec<&str> = SYLLABLES.choose_multiple(&mut rng, 5).copied().collect();
        let vocabulary = (0..24)
            .map(|_| {
                let len = rng.random_range(2..=3);
                (0..len)
                    .map(|_| *syllables.choose(&mut rng).unwrap())
                    .collect::<String>()
            })
            .collect();
        let pattern = match rng.random_range(0..20) {
            0..=8 => CellPattern::Words { min: 1, max: 1 },
            9..=11 => CellPattern::Words { min: 2, max: 3 },
            12..=13 => {
                let lo = 10i64.pow(rng.random_range(0..4));
                CellPattern::Integer {
                    lo,
                    hi: lo * rng.random_range(3..50),
                }
            }
            14..=15 => {
                let lo: f64 = rng.random_range(0.0..100.0);
                CellPattern::Decimal {
                    lo,
                    hi: lo + rng.random_range(1.0..500.0),
                    places: rng.random_range(1..=3),
                }
            }
            16..=18 => CellPattern::Code {
                digits: rng.random_range(2..=6),
            },
            _ => CellPattern::Date,
        };
        TypeProfile {
            vocabulary,
            pattern,
            capitalize: rng.random_bool(0.5),
        }
    }

    fn word(&self, rng: &mut rng::Rng) -> String {
        let w = self.vocabulary.choose(rng).unwrap();
        if self.capitalize {
            let mut chars = w.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().chain(chars).collect(),
                None => String::new(),
            }
        } else {
            w.clone()
        }
    }

    fn cell(&self, rng: &mut rng::Rng) -> String {
        match &self.pattern {
            CellPattern::Words { min, max } => {
                let n = rng.random_range(*min..=*max);
                (0..n).map(|_| self.word(rng)).collect::<Vec<_>>().join(" ")
            }
            CellPattern::Integer { lo, hi } => rng.random_range(*lo..=*hi).to_string(),
            CellPattern::Decimal { lo, hi, places } => {
                format!("{:.*}", places, rng.random_range(*lo..*hi))
            }
            CellPattern::Code { digits } => {
                let prefix: String = self.vocabulary[0].chars().take(3).collect();
                let n = rng.random_range(0..10u64.pow(*digits as u32));
                format!("{}-{:0width$}", prefix.to_uppercase(), n, width = *digits)
            }
            CellPattern::Date => format!(
                "{}-{:02}-{:02}",
                rng.random_range(1950..=2023),
                rng.random_range(1..=12),
                rng.random_range(1..=28)
            ),
        }
    }
}

fn type_names(spec: &LakePairSpec) -> (Vec<String>, Vec<String>) {
    let total = spec.n_source_types + spec.n_target_types - spec.n_shared_types;
    let mut pool: Vec<String> = NAME_POOL.iter().map(|s| s.to_string()).collect();
    let mut i = 0;
    while pool.len() < total {
        pool.push(format!("type_{i:03}"));
        i += 1;
    }
    let mut rng = rng::stream(spec.seed, tags::LAKE_NAMES);
    pool.shuffle(&mut rng);
    pool.truncate(total);
    let shared = &pool[..spec.n_shared_types];
    let source_only = &pool[spec.n_shared_types..spec.n_source_types];
    let target_only = &pool[spec.n_source_types..];
    let source = shared.iter().chain(source_only).cloned().collect();
    let target = shared.iter().chain(target_only).cloned().collect();
    (source, target)
}

/// Column count per rank (1-based) under the Zipf skew.
fn zipf_count(range: CountRange, skew: f64, rank: usize) -> usize {
    let c = (range.max as f64 / (rank as f64).powf(skew)).round() as usize;
    c.clamp(range.min, range.max)
}

fn gen_lake(
    spec: &LakePairSpec,
    names: &[String],
    tag: u64,
    profiles: &HashMap<String, TypeProfile>,
) -> Result<DataLake> {
    let type_set = TypeSet::from_names(names.iter().cloned())?;
    let mut rng = rng::stream(spec.seed, tag);

    let mut ranks: Vec<usize> = (0..type_set.len()).collect();
    ranks.shuffle(&mut rng);
    let mut slots: Vec<usize> = Vec::new();
    for (type_id, &rank) in ranks.iter().enumerate() {
        let n = zipf_count(spec.columns_per_type, spec.long_tail_skew, rank + 1);
        slots.extend(std::iter::repeat_n(type_id, n));
    }
    slots.shuffle(&mut rng);

    let lake_profiles: Vec<&TypeProfile> = type_set.iter().map(|t| &profiles[&t.name]).collect();
    let mut columns = Vec::with_capacity(slots.len());
    let mut table = 0usize;
    let mut rest = &slots[..];
    while !rest.is_empty() {
        let width = rng.random_range(1..=spec.max_table_width).min(rest.len());
        let rows = rng.random_range(spec.cells_per_column.min..=spec.cells_per_column.max);
        let table_id = format!("t{table:05}");
        for (col_index, &type_id) in rest[..width].iter().enumerate() {
            let cells = (0..rows)
                .map(|_| {
                    if spec.noise_rate > 0.0 && lake_profiles.len() > 1 && rng.random_bool(spec.noise_rate) {
                        let mut other = rng.random_range(0..lake_profiles.len() - 1);
                        if other >= type_id {
                            other += 1;
                        }
                        lake_profiles[other].cell(&mut rng)
                    } else {
                        lake_profiles[type_id].cell(&mut rng)
                    }
                })
                .collect();
            columns.push(Column {
                table_id: table_id.clone(),
                col_index,
                cells,
                label: Some(type_id),
            });
        }
        rest = &rest[width..];
        table += 1;
    }
    DataLake::new(type_set, columns)
}

/// Generates a (source, target) lake pair whose type sets share exactly
/// `n_shared_types` names. Both lakes come back already split.
pub fn gen_lake_pair(spec: &LakePairSpec) -> Result<(DataLake, DataLake)> {
    spec.validate()?;
    let (source_names, target_names) = type_names(spec);
    let profiles: HashMap<String, TypeProfile> = source_names
        .iter()
        .chain(&target_names)
        .map(|n| (n.clone(), TypeProfile::new(spec.seed, n)))
        .collect();
    let source = gen_lake(spec, &source_names, tags::LAKE_SOURCE, &profiles)?;
    let target = gen_lake(spec, &target_names, tags::LAKE_TARGET, &profiles)?;
    let source = split_data_lake(
        &source,
        spec.train_frac,
        spec.valid_frac,
        rng::derive_seed(spec.seed, tags::SOURCE_SPLIT),
    )?;
    let target = split_data_lake(
        &target,
        spec.train_frac,
        spec.valid_frac,
        rng::derive_seed(spec.seed, tags::TARGET_SPLIT),
    )?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> LakePairSpec {
        LakePairSpec {
            n_source_types: 5,
            n_target_types: 6,
            n_shared_types: 3,
            columns_per_type: CountRange { min: 4, max: 20 },
            cells_per_column: CountRange { min: 3, max: 8 },
            long_tail_skew: 1.0,
            noise_rate: 0.05,
            seed,
            train_frac: 0.8,
            valid_frac: 0.1,
            max_table_width: 4,
        }
    }

    #[test]
    fn type_set_is_sorted_and_rejects_duplicates() {
        let ts = TypeSet::from_names(["year", "company", "team"]).unwrap();
        assert_eq!(ts.names(), vec!["company", "team", "year"]);
        assert_eq!(ts.index_of("team"), Some(1));
        assert!(TypeSet::from_names(["a", "b", "a"]).is_err());
    }

    #[test]
    fn load_small_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t1.csv"), "Ohio,1,x\nTexas,2,y\n").unwrap();
        let labels = dir.path().join("labels.jsonl");
        fs::write(
            &labels,
            "{\"table_id\":\"t1\",\"col_index\":0,\"type\":\"state\",\"skip_header\":false}\n\
             {\"table_id\":\"t1\",\"col_index\":1,\"type\":\"rank\",\"skip_header\":false}\n",
        )
        .unwrap();
        let lake = load_data_lake(dir.path(), &labels).unwrap();
        assert_eq!(lake.columns().len(), 3);
        assert_eq!(lake.labeled_ids().len(), 2);
        assert_eq!(lake.type_set.names(), vec!["rank", "state"]);
        assert_eq!(lake.label_name(ColumnId(0)), Some("state"));
        assert_eq!(lake.column(ColumnId(2)).label, None);
        assert!(!lake.has_splits());
    }

    #[test]
    fn header_rows_are_skipped_when_flagged() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t1.csv"), "State\nOhio\nTexas\n").unwrap();
        let labels = dir.path().join("labels.jsonl");
        fs::write(
            &labels,
            "{\"table_id\":\"t1\",\"col_index\":0,\"type\":\"state\",\"skip_header\":true}\n",
        )
        .unwrap();
        let lake = load_data_lake(dir.path(), &labels).unwrap();
        assert_eq!(lake.column(ColumnId(0)).cells, vec!["Ohio", "Texas"]);
    }

    #[test]
    fn unknown_column_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t1.csv"), "a,b,c\n").unwrap();
        let labels = dir.path().join("labels.jsonl");
        fs::write(
            &labels,
            "{\"table_id\":\"t1\",\"col_index\":9,\"type\":\"state\",\"skip_header\":false}\n",
        )
        .unwrap();
        let err = load_data_lake(dir.path(), &labels).unwrap_err();
        assert!(err.to_string().contains("unknown column"), "{err}");
    }

    #[test]
    fn unknown_table_and_duplicate_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t1.csv"), "a,b\n").unwrap();
        let labels = dir.path().join("labels.jsonl");
        fs::write(&labels, "{\"table_id\":\"t9\",\"col_index\":0,\"type\":\"x\"}\n").unwrap();
        let err = load_data_lake(dir.path(), &labels).unwrap_err();
        assert!(err.to_string().contains("unknown table"), "{err}");

        fs::write(
            &labels,
            "{\"table_id\":\"t1\",\"col_index\":0,\"type\":\"x\"}\n{\"table_id\":\"t1\",\"col_index\":0,\"type\":\"y\"}\n",
        )
        .unwrap();
        let err = load_data_lake(dir.path(), &labels).unwrap_err();
        assert!(err.to_string().contains("duplicate label"), "{err}");
    }

    #[test]
    fn missing_labels_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_data_lake(dir.path(), &dir.path().join("nope.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn ragged_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t1.csv"), "a,b\nc\n").unwrap();
        let labels = dir.path().join("labels.jsonl");
        fs::write(&labels, "").unwrap();
        assert!(load_data_lake(dir.path(), &labels).is_err());
    }

    fn labeled_lake(n: usize) -> DataLake {
        let ts = TypeSet::from_names(["a", "b"]).unwrap();
        let cols = (0..n)
            .map(|i| Column {
                table_id: format!("t{i:04}"),
                col_index: 0,
                cells: vec![format!("v{i}")],
                label: Some(i % 2),
            })
            .collect();
        DataLake::new(ts, cols).unwrap()
    }

    #[test]
    fn split_exact_fractions() {
        let lake = split_data_lake(&labeled_lake(100), 0.8, 0.1, 3).unwrap();
        let s = lake.splits().unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let lake = labeled_lake(1000);
        let a = split_data_lake(&lake, 0.8, 0.1, 1).unwrap();
        let b = split_data_lake(&lake, 0.8, 0.1, 1).unwrap();
        let c = split_data_lake(&lake, 0.8, 0.1, 2).unwrap();
        assert_eq!(a.splits().unwrap(), b.splits().unwrap());
        let (sa, sc) = (a.splits().unwrap(), c.splits().unwrap());
        assert_ne!(sa.train, sc.train);
        assert_eq!(sa.train.len(), sc.train.len());
        assert_eq!(sa.test.len(), sc.test.len());
    }

    #[test]
    fn split_rejects_tiny_lakes_and_bad_fractions() {
        assert!(split_data_lake(&labeled_lake(3), 0.8, 0.1, 0).is_err());
        assert!(split_data_lake(&labeled_lake(100), 0.9, 0.1, 0).is_err());
        assert!(split_data_lake(&labeled_lake(100), 0.0, 0.1, 0).is_err());
    }

    #[test]
    fn empty_cells_column_fails_to_save() {
        let ts = TypeSet::from_names(["a"]).unwrap();
        let lake = DataLake::new(
            ts,
            vec![Column {
                table_id: "t".into(),
                col_index: 0,
                cells: vec![],
                label: None,
            }],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_data_lake(&lake, dir.path()).is_err());
    }

    #[test]
    fn saved_labels_cover_all_columns_when_fully_labeled() {
        let lake = labeled_lake(12);
        let dir = tempfile::tempdir().unwrap();
        save_data_lake(&lake, dir.path()).unwrap();
        let labels = read_labels(&dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(labels.len(), 12);
    }

    #[test]
    fn save_then_load_round_trips_generated_lake() {
        let (source, target) = gen_lake_pair(&small_spec(11)).unwrap();
        for lake in [source, target] {
            let dir = tempfile::tempdir().unwrap();
            save_data_lake(&lake, dir.path()).unwrap();
            let back = load_data_lake(dir.path(), &dir.path().join(LABELS_FILE)).unwrap();
            assert_eq!(back, lake);
        }
    }

    #[test]
    fn superset_regime_shares_every_type() {
        let mut spec = small_spec(5);
        spec.n_source_types = 4;
        spec.n_target_types = 4;
        spec.n_shared_types = 4;
        let (s, t) = gen_lake_pair(&spec).unwrap();
        assert_eq!(s.type_set, t.type_set);
    }

    #[test]
    fn zero_overlap_lakes_are_disjoint() {
        let mut spec = small_spec(6);
        spec.n_shared_types = 0;
        let (s, t) = gen_lake_pair(&spec).unwrap();
        assert!(s.type_set.iter().all(|ty| !t.type_set.contains(&ty.name)));
    }

    #[test]
    fn shared_count_is_exact() {
        for shared in 0..=5 {
            let mut spec = small_spec(shared as u64);
            spec.n_shared_types = shared;
            let (s, t) = gen_lake_pair(&spec).unwrap();
            let common = s.type_set.iter().filter(|ty| t.type_set.contains(&ty.name)).count();
            assert_eq!(common, shared);
        }
    }

    #[test]
    fn long_tail_exists_under_skew() {
        let spec = LakePairSpec {
            n_source_types: 20,
            n_target_types: 20,
            n_shared_types: 8,
            columns_per_type: CountRange { min: 1, max: 200 },
            cells_per_column: CountRange { min: 2, max: 4 },
            long_tail_skew: 1.2,
            noise_rate: 0.0,
            seed: 9,
            train_frac: 0.8,
            valid_frac: 0.1,
            max_table_width: 4,
        };
        let (_, target) = gen_lake_pair(&spec).unwrap();
        let counts = target.type_counts();
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        let least = *counts.iter().min().unwrap();
        assert!(least >= 1);
        assert!((least as f64) < mean / 2.0, "least {least}, mean {mean}");
    }

    #[test]
    fn infeasible_spec_names_the_invariant() {
        let mut spec = small_spec(0);
        spec.n_shared_types = 9;
        let err = gen_lake_pair(&spec).unwrap_err();
        assert!(err.to_string().contains("n_shared_types"), "{err}");
        let mut spec = small_spec(0);
        spec.noise_rate = 1.0;
        assert!(gen_lake_pair(&spec).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_lake_pair(&small_spec(42)).unwrap();
        let b = gen_lake_pair(&small_spec(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shared_types_use_one_vocabulary() {
        let spec = small_spec(3);
        let (s, t) = gen_lake_pair(&spec).unwrap();
        let shared: Vec<&str> = s
            .type_set
            .iter()
            .filter(|ty| t.type_set.contains(&ty.name))
            .map(|ty| ty.name.as_str())
            .collect();
        for name in shared {
            let a = TypeProfile::new(spec.seed, name);
            let b = TypeProfile::new(spec.seed, name);
            assert_eq!(a.vocabulary, b.vocabulary);
        }
    }

    #[test]
    fn generated_splits_partition_labeled_columns() {
        let (s, _) = gen_lake_pair(&small_spec(8)).unwrap();
        let sp = s.splits().unwrap();
        let mut all: Vec<ColumnId> = sp
            .train
            .iter()
            .chain(&sp.validation)
            .chain(&sp.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, s.labeled_ids());
    }
}
