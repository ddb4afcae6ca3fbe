//! Delimited-text ingestion: schema, vocabulary with frequency threshold,
//! numerical normalization, encoding, train/validation split and batching.
//!
//! Categorical index 0 is reserved for the unknown bucket in every field.
//! Missing cells, values seen fewer than `T` times in training and values
//! never seen in training all map there. Numerical fields are z-scored with
//! training-split statistics; missing numerical cells encode to 0.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NonError, Result};

pub const UNKNOWN_INDEX: usize = 0;
pub const DEFAULT_THRESHOLD: usize = 5;
pub const DEFAULT_VALID_FRACTION: f64 = 0.2;
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Numerical,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

fn default_delimiter() -> String {
    ",".into()
}

/// Ordered field list plus the label column and delimiter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub label: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    pub fields: Vec<FieldSpec>,
}

impl DatasetSchema {
    pub fn new(label: impl Into<String>, delimiter: char, fields: Vec<FieldSpec>) -> Result<Self> {
        let schema = DatasetSchema {
            label: label.into(),
            delimiter: delimiter.to_string(),
            fields,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: DatasetSchema = toml::from_str(text).map_err(|e| NonError::parse("schema", e))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NonError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            NonError::Parse { message, .. } => NonError::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(NonError::Config("schema declares no feature fields".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.fields {
            if f.name == self.label {
                return Err(NonError::Config(format!(
                    "label column `{}` is also declared as a feature",
                    f.name
                )));
            }
            if !seen.insert(&f.name) {
                return Err(NonError::Config(format!("duplicate field `{}`", f.name)));
            }
        }
        self.delimiter_byte()?;
        Ok(())
    }

    pub fn delimiter_byte(&self) -> Result<u8> {
        match self.delimiter.as_bytes() {
            [b] => Ok(*b),
            _ if self.delimiter == "\\t" => Ok(b'\t'),
            _ => Err(NonError::Config(format!(
                "delimiter must be a single ASCII character, got {:?}",
                self.delimiter
            ))),
        }
    }

    /// Number of feature fields, `m`.
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn categorical(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields.iter().filter(|f| f.kind == FieldKind::Categorical)
    }

    pub fn numerical(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields.iter().filter(|f| f.kind == FieldKind::Numerical)
    }

    pub fn num_categorical(&self) -> usize {
        self.categorical().count()
    }

    pub fn num_numerical(&self) -> usize {
        self.numerical().count()
    }

    /// For each field in schema order, its kind and its position among
    /// fields of the same kind.
    pub fn slots(&self) -> Vec<(FieldKind, usize)> {
        let (mut c, mut n) = (0, 0);
        self.fields
            .iter()
            .map(|f| match f.kind {
                FieldKind::Categorical => {
                    c += 1;
                    (f.kind, c - 1)
                }
                FieldKind::Numerical => {
                    n += 1;
                    (f.kind, n - 1)
                }
            })
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One data row: per-field raw cells (None = missing) and the raw label.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    pub line: usize,
    pub cells: Vec<Option<String>>,
    pub label: String,
}

pub fn read_rows<R: Read>(reader: R, schema: &DatasetSchema) -> Result<Vec<RawRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| NonError::parse("header", e))?.clone();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| NonError::Data(format!("column `{name}` missing from header")))
    };
    let label_col = position(&schema.label)?;
    let cols = schema
        .fields
        .iter()
        .map(|f| position(&f.name))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| NonError::parse("row", e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let cells = cols
            .iter()
            .map(|&c| match record.get(c) {
                Some("") | None => None,
                Some(v) => Some(v.to_string()),
            })
            .collect();
        rows.push(RawRow {
            line,
            cells,
            label: record.get(label_col).unwrap_or("").to_string(),
        });
    }
    Ok(rows)
}

pub fn read_file(path: &Path, schema: &DatasetSchema) -> Result<Vec<RawRow>> {
    let file = std::fs::File::open(path).map_err(|e| NonError::io(path, e))?;
    read_rows(std::io::BufReader::new(file), schema).map_err(|e| match e {
        NonError::Data(msg) => NonError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldVocabulary {
    pub name: String,
    /// `values[k]` is the raw value with index `k + 1`.
    values: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl FieldVocabulary {
    fn new(name: String, values: Vec<String>) -> Self {
        let mut v = FieldVocabulary {
            name,
            values,
            lookup: HashMap::new(),
        };
        v.rebuild();
        v
    }

    fn rebuild(&mut self) {
        self.lookup = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i + 1))
            .collect();
    }

    /// `n_i`, including the unknown bucket.
    pub fn size(&self) -> usize {
        self.values.len() + 1
    }

    pub fn index(&self, value: Option<&str>) -> usize {
        value
            .and_then(|v| self.lookup.get(v).copied())
            .unwrap_or(UNKNOWN_INDEX)
    }

    pub fn value(&self, index: usize) -> Option<&str> {
        match index {
            UNKNOWN_INDEX => None,
            i => self.values.get(i - 1).map(String::as_str),
        }
    }
}

/// Per categorical field value → index maps, in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub threshold: usize,
    pub fields: Vec<FieldVocabulary>,
}

impl Vocabulary {
    pub fn sizes(&self) -> Vec<usize> {
        self.fields.iter().map(FieldVocabulary::size).collect()
    }

    pub fn field(&self, name: &str) -> Option<&FieldVocabulary> {
        self.fields.iter().find(|f| f.name == name)
    }

    fn rebuild(&mut self) {
        self.fields.iter_mut().for_each(FieldVocabulary::rebuild);
    }
}

/// Retains categorical values seen at least `threshold` times in `rows`.
/// Indices are assigned by descending count, ties broken by value.
pub fn build_vocabulary(rows: &[RawRow], schema: &DatasetSchema, threshold: usize) -> Result<Vocabulary> {
    if threshold == 0 {
        return Err(NonError::Config("frequency threshold must be at least 1".into()));
    }
    if rows.is_empty() {
        return Err(NonError::Data("cannot build a vocabulary from zero rows".into()));
    }
    let mut fields = Vec::new();
    for (col, spec) in schema.fields.iter().enumerate() {
        if spec.kind != FieldKind::Categorical {
            continue;
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for row in rows {
            if let Some(v) = &row.cells[col] {
                *counts.entry(v.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= threshold).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        fields.push(FieldVocabulary::new(
            spec.name.clone(),
            kept.into_iter().map(|(v, _)| v.to_string()).collect(),
        ));
    }
    Ok(Vocabulary { threshold, fields })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl FieldStats {
    pub fn encode(&self, raw: Option<f64>) -> f64 {
        match raw {
            Some(x) if self.std > 0.0 => (x - self.mean) / self.std,
            _ => 0.0,
        }
    }
}

/// Z-score parameters per numerical field, in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub fields: Vec<FieldStats>,
}

fn parse_number(cell: &Option<String>, line: usize, field: &str) -> Result<Option<f64>> {
    match cell {
        None => Ok(None),
        Some(s) => s.trim().parse::<f64>().map(Some).map_err(|_| NonError::Row {
            line,
            message: format!("field `{field}`: `{s}` is not a number"),
        }),
    }
}

/// Population mean and standard deviation over non-missing training cells.
pub fn compute_normalization(rows: &[RawRow], schema: &DatasetSchema) -> Result<NormalizationStats> {
    if rows.is_empty() {
        return Err(NonError::Data("cannot compute normalization from zero rows".into()));
    }
    let mut fields = Vec::new();
    for (col, spec) in schema.fields.iter().enumerate() {
        if spec.kind != FieldKind::Numerical {
            continue;
        }
        let mut xs = Vec::with_capacity(rows.len());
        for row in rows {
            if let Some(x) = parse_number(&row.cells[col], row.line, &spec.name)? {
                xs.push(x);
            }
        }
        let (mean, std) = if xs.is_empty() {
            (0.0, 0.0)
        } else {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        fields.push(FieldStats {
            name: spec.name.clone(),
            mean,
            std,
        });
    }
    Ok(NormalizationStats { fields })
}

/// Encoded rows: categorical indices `[n × c]`, normalized numerical
/// values `[n × u]` and labels in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTable {
    pub num_categorical: usize,
    pub num_numerical: usize,
    pub categorical: Vec<usize>,
    pub numerical: Vec<f64>,
    pub labels: Vec<f64>,
}

impl EncodedTable {
    pub fn empty(num_categorical: usize, num_numerical: usize) -> Self {
        EncodedTable {
            num_categorical,
            num_numerical,
            categorical: Vec::new(),
            numerical: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push_row(&mut self, categorical: &[usize], numerical: &[f64], label: f64) {
        debug_assert_eq!(categorical.len(), self.num_categorical);
        debug_assert_eq!(numerical.len(), self.num_numerical);
        self.categorical.extend_from_slice(categorical);
        self.numerical.extend_from_slice(numerical);
        self.labels.push(label);
    }

    pub fn categorical_row(&self, r: usize) -> &[usize] {
        &self.categorical[r * self.num_categorical..(r + 1) * self.num_categorical]
    }

    pub fn numerical_row(&self, r: usize) -> &[f64] {
        &self.numerical[r * self.num_numerical..(r + 1) * self.num_numerical]
    }

    /// Rows at `indices`, in that order, as a batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut t = EncodedTable::empty(self.num_categorical, self.num_numerical);
        for &r in indices {
            t.push_row(self.categorical_row(r), self.numerical_row(r), self.labels[r]);
        }
        Batch(t)
    }

    pub fn select(&self, indices: &[usize]) -> EncodedTable {
        self.gather(indices).0
    }

    pub fn as_batch(&self) -> Batch {
        Batch(self.clone())
    }
}

/// Encoded mini-batch. Row layout is identical to [`EncodedTable`].
#[derive(Clone, Debug, PartialEq)]
pub struct Batch(pub EncodedTable);

impl std::ops::Deref for Batch {
    type Target = EncodedTable;
    fn deref(&self) -> &EncodedTable {
        &self.0
    }
}

impl Batch {
    pub fn size(&self) -> usize {
        self.0.len()
    }
}

pub fn parse_label(raw: &str, line: usize) -> Result<f64> {
    match raw.trim() {
        "0" => Ok(0.0),
        "1" => Ok(1.0),
        other => Err(NonError::Row {
            line,
            message: format!("label must be 0 or 1, got `{other}`"),
        }),
    }
}

pub fn encode_dataset(
    rows: &[RawRow],
    schema: &DatasetSchema,
    vocab: &Vocabulary,
    stats: &NormalizationStats,
) -> Result<EncodedTable> {
    let slots = schema.slots();
    let (nc, nn) = (vocab.fields.len(), stats.fields.len());
    if nc != schema.num_categorical() || nn != schema.num_numerical() {
        return Err(NonError::Config(
            "vocabulary/stats do not match the schema field kinds".into(),
        ));
    }
    let mut table = EncodedTable::empty(nc, nn);
    let mut cat = vec![0; nc];
    let mut num = vec![0.0; nn];
    for row in rows {
        for (col, (kind, slot)) in slots.iter().enumerate() {
            match kind {
                FieldKind::Categorical => cat[*slot] = vocab.fields[*slot].index(row.cells[col].as_deref()),
                FieldKind::Numerical => {
                    let spec = &stats.fields[*slot];
                    num[*slot] = spec.encode(parse_number(&row.cells[col], row.line, &spec.name)?);
                }
            }
        }
        table.push_row(&cat, &num, parse_label(&row.label, row.line)?);
    }
    Ok(table)
}

/// Seeded disjoint split of `0..n`; returns (train, valid) index lists in
/// ascending order with `round(fraction * n)` validation rows, clamped so
/// that both sides are non-empty.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(NonError::Config(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if n < 2 {
        return Err(NonError::Data(format!("cannot split {n} rows")));
    }
    let n_valid = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid = order[..n_valid].to_vec();
    let mut train = order[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    Ok((train, valid))
}

pub fn split_train_valid(table: &EncodedTable, fraction: f64, seed: u64) -> Result<(EncodedTable, EncodedTable)> {
    let (train, valid) = split_indices(table.len(), fraction, seed)?;
    Ok((table.select(&train), table.select(&valid)))
}

/// One epoch of mini-batches; the final batch may be short.
pub struct BatchIter<'a> {
    table: &'a EncodedTable,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.table.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

pub fn batch_iterator(table: &EncodedTable, batch_size: usize, shuffle: bool, seed: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(NonError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..table.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        table,
        order,
        pos: 0,
        batch_size,
    })
}

/// Vocabulary and statistics persisted together so that preparation and
/// training can run as separate invocations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub schema: DatasetSchema,
    pub vocabulary: Vocabulary,
    pub stats: NormalizationStats,
}

impl Preprocessor {
    /// Fits vocabulary and statistics on `train_rows` only.
    pub fn fit(schema: DatasetSchema, train_rows: &[RawRow], threshold: usize) -> Result<Self> {
        let vocabulary = build_vocabulary(train_rows, &schema, threshold)?;
        let stats = compute_normalization(train_rows, &schema)?;
        Ok(Preprocessor {
            schema,
            vocabulary,
            stats,
        })
    }

    pub fn encode(&self, rows: &[RawRow]) -> Result<EncodedTable> {
        encode_dataset(rows, &self.schema, &self.vocabulary, &self.stats)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("preprocessor serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut p: Preprocessor = serde_json::from_str(text).map_err(|e| NonError::parse("preprocessor", e))?;
        p.vocabulary.rebuild();
        p.schema.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| NonError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NonError::io(path, e))?;
        Self::from_json(&text)
    }
}
