//! Mixed-type tabular records to and from chains of discrete indices.
//!
//! Categorical features occupy one chain position with a physical
//! dimension equal to their cardinality. Numeric features are quantized
//! to a fixed resolution and spelled out as base-B digits, one chain
//! position per digit, most-significant digit first.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MISSING_CATEGORY: &str = "__missing__";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("table has no rows")]
    EmptyTable,
    #[error("column {0} has no non-missing values")]
    AllMissingColumn(String),
    #[error("column {0} not found")]
    UnknownColumn(String),
    #[error("unknown category {value:?} for feature {feature}")]
    UnknownCategory { feature: String, value: String },
    #[error("value {value} out of range [{min}, {max}] for feature {feature}")]
    OutOfRange {
        feature: String,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("cell {column} cannot be parsed as a number: {value:?}")]
    NotNumeric { column: String, value: String },
    #[error("missing cell in column {0}; run handle_missing first")]
    MissingCell(String),
    #[error("index {index} out of range for chain position {position} (dim {dim})")]
    IndexOutOfRange {
        position: usize,
        index: usize,
        dim: usize,
    },
    #[error("record has {actual} indices, schema layout has {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("row has {actual} cells, table has {expected} columns")]
    RaggedRow { expected: usize, actual: usize },
    #[error("unsupported schema_version {0}")]
    UnsupportedVersion(u32),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical,
    Integer,
    Continuous,
}

/// Per-feature encoding contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_digits: Option<u32>,
}

impl FeatureSpec {
    pub fn is_numeric(&self) -> bool {
        !matches!(self.kind, FeatureKind::Categorical)
    }

    /// Chain positions this feature occupies.
    pub fn core_count(&self) -> usize {
        match self.kind {
            FeatureKind::Categorical => 1,
            _ => self.num_digits.unwrap_or(1) as usize,
        }
    }

    /// Physical dimension of each of this feature's chain positions.
    pub fn phys_dim(&self) -> usize {
        match self.kind {
            FeatureKind::Categorical => self.categories.len(),
            _ => self.base.unwrap_or(10) as usize,
        }
    }

}

/// Dataset-level encoding contract: features in column order plus the
/// chain layout mapping each MPS position to (feature, digit).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub schema_version: u32,
    pub features: Vec<FeatureSpec>,
    /// (feature_index, digit_position) per chain position. Digit position
    /// 0 is the most significant digit; categoricals always use 0.
    pub layout: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_feature: Option<String>,
}

impl Schema {
    pub fn num_positions(&self) -> usize {
        self.layout.len()
    }

    pub fn phys_dims(&self) -> Vec<usize> {
        self.layout
            .iter()
            .map(|&(fi, _)| self.features[fi].phys_dim())
            .collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Schema, EncodingError> {
        let schema: Schema = serde_json::from_str(text)?;
        if schema.schema_version != SCHEMA_VERSION {
            return Err(EncodingError::UnsupportedVersion(schema.schema_version));
        }
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncodingError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Schema, EncodingError> {
        Schema::from_json(&fs::read_to_string(path)?)
    }
}

/// One record as chain indices, one per MPS position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRecord {
    pub indices: Vec<usize>,
}

/// In-memory table; `None` cells are missing values.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

impl Table {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Option<String>>>) -> Result<Table, EncodingError> {
        for row in &rows {
            if row.len() != columns.len() {
                return Err(EncodingError::RaggedRow {
                    expected: columns.len(),
                    actual: row.len(),
                });
            }
        }
        Ok(Table { columns, rows })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, idx: usize) -> impl Iterator<Item = Option<&str>> + '_ {
        self.rows.iter().map(move |r| r[idx].as_deref())
    }

    pub fn read_csv(path: &Path, missing_marker: &str) -> Result<Table, EncodingError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(false)
            .from_path(path)?;
        let columns: Vec<String> = reader
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row: Vec<Option<String>> = record
                .iter()
                .map(|cell| {
                    let cell = cell.trim();
                    if cell.is_empty() || cell == missing_marker {
                        None
                    } else {
                        Some(cell.to_string())
                    }
                })
                .collect();
            rows.push(row);
        }
        Table::new(columns, rows)
    }

    pub fn write_csv(&self, path: &Path, missing_marker: &str) -> Result<(), EncodingError> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(&self.columns)?;
        for row in &self.rows {
            writer.write_record(row.iter().map(|c| c.as_deref().unwrap_or(missing_marker)))?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Per-column overrides for schema inference.
#[derive(Debug, Clone, Default)]
pub struct SchemaHints {
    pub kinds: BTreeMap<String, FeatureKind>,
    /// Columns quantized at 1/100 resolution instead of 1.
    pub monetary: BTreeSet<String>,
    pub target_feature: Option<String>,
}

fn parse_numeric(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn infer_kind(cells: &[&str]) -> FeatureKind {
    let mut all_int = true;
    for cell in cells {
        match parse_numeric(cell) {
            Some(v) => {
                if v.fract() != 0.0 {
                    all_int = false;
                }
            }
            None => return FeatureKind::Categorical,
        }
    }
    if all_int {
        FeatureKind::Integer
    } else {
        FeatureKind::Continuous
    }
}

fn digits_needed(base: u32, span: u64) -> u32 {
    // Smallest n >= 1 with base^n > span.
    let mut n = 1;
    let mut cap = base as u64;
    while cap <= span {
        cap = cap.saturating_mul(base as u64);
        n += 1;
    }
    n
}

/// Derive a schema from observed data. Categories are enumerated in
/// lexicographic order; numeric features record observed min/max and the
/// smallest digit count that covers the quantized span.
pub fn infer_schema(table: &Table, hints: &SchemaHints) -> Result<Schema, EncodingError> {
    if table.rows.is_empty() {
        return Err(EncodingError::EmptyTable);
    }
    let mut features = Vec::with_capacity(table.columns.len());
    for (ci, name) in table.columns.iter().enumerate() {
        let cells: Vec<&str> = table.column(ci).flatten().collect();
        if cells.is_empty() {
            return Err(EncodingError::AllMissingColumn(name.clone()));
        }
        let kind = hints
            .kinds
            .get(name)
            .copied()
            .unwrap_or_else(|| infer_kind(&cells));
        let spec = match kind {
            FeatureKind::Categorical => {
                let mut categories: Vec<String> =
                    cells.iter().map(|c| c.to_string()).collect::<BTreeSet<_>>().into_iter().collect();
                categories.sort();
                FeatureSpec {
                    name: name.clone(),
                    kind,
                    categories,
                    min_value: None,
                    max_value: None,
                    scale: None,
                    base: None,
                    num_digits: None,
                }
            }
            _ => {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for cell in &cells {
                    let v = parse_numeric(cell).ok_or_else(|| EncodingError::NotNumeric {
                        column: name.clone(),
                        value: cell.to_string(),
                    })?;
                    min = min.min(v);
                    max = max.max(v);
                }
                let scale = if hints.monetary.contains(name) { 100 } else { 1 };
                let base = 10u32;
                let span = ((max - min) * scale as f64).round() as u64;
                FeatureSpec {
                    name: name.clone(),
                    kind,
                    categories: Vec::new(),
                    min_value: Some(min),
                    max_value: Some(max),
                    scale: Some(scale),
                    base: Some(base),
                    num_digits: Some(digits_needed(base, span)),
                }
            }
        };
        features.push(spec);
    }
    let layout = natural_layout(&features);
    Ok(Schema {
        schema_version: SCHEMA_VERSION,
        features,
        layout,
        target_feature: hints.target_feature.clone(),
    })
}

fn natural_layout(features: &[FeatureSpec]) -> Vec<(usize, usize)> {
    let mut layout = Vec::new();
    for (fi, spec) in features.iter().enumerate() {
        for d in 0..spec.core_count() {
            layout.push((fi, d));
        }
    }
    layout
}

/// Deterministic chain ordering: features sorted ascending by core count
/// (ties by physical dimension, then name), then interleaved outside-in
/// so the costliest features sit at the center of the chain. Digit blocks
/// stay contiguous, most-significant digit first.
pub fn order_features(schema: &Schema) -> Schema {
    let mut order: Vec<usize> = (0..schema.features.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = &schema.features[a];
        let fb = &schema.features[b];
        (fa.core_count(), fa.phys_dim(), &fa.name).cmp(&(fb.core_count(), fb.phys_dim(), &fb.name))
    });
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (i, fi) in order.into_iter().enumerate() {
        if i % 2 == 0 {
            left.push(fi);
        } else {
            right.push(fi);
        }
    }
    right.reverse();
    left.extend(right);

    let mut layout = Vec::with_capacity(schema.layout.len());
    for fi in left {
        for d in 0..schema.features[fi].core_count() {
            layout.push((fi, d));
        }
    }
    Schema {
        schema_version: schema.schema_version,
        features: schema.features.clone(),
        layout,
        target_feature: schema.target_feature.clone(),
    }
}

fn quantize(spec: &FeatureSpec, cell: &str) -> Result<u64, EncodingError> {
    let v = parse_numeric(cell).ok_or_else(|| EncodingError::NotNumeric {
        column: spec.name.clone(),
        value: cell.to_string(),
    })?;
    let min = spec.min_value.unwrap();
    let max = spec.max_value.unwrap();
    if v < min || v > max {
        return Err(EncodingError::OutOfRange {
            feature: spec.name.clone(),
            value: v,
            min,
            max,
        });
    }
    Ok(((v - min) * spec.scale.unwrap() as f64).round() as u64)
}

/// Encode one row (in table column order) into chain indices.
pub fn encode_record(row: &[Option<String>], schema: &Schema) -> Result<EncodedRecord, EncodingError> {
    if row.len() != schema.features.len() {
        return Err(EncodingError::RaggedRow {
            expected: schema.features.len(),
            actual: row.len(),
        });
    }
    // Pre-compute digits per feature so layout order is independent of
    // digit extraction order.
    let mut per_feature: Vec<Vec<usize>> = Vec::with_capacity(schema.features.len());
    for (spec, cell) in schema.features.iter().zip(row) {
        let cell = cell
            .as_deref()
            .ok_or_else(|| EncodingError::MissingCell(spec.name.clone()))?;
        match spec.kind {
            FeatureKind::Categorical => {
                let idx = spec
                    .categories
                    .iter()
                    .position(|c| c == cell)
                    .ok_or_else(|| EncodingError::UnknownCategory {
                        feature: spec.name.clone(),
                        value: cell.to_string(),
                    })?;
                per_feature.push(vec![idx]);
            }
            _ => {
                let mut q = quantize(spec, cell)?;
                let base = spec.base.unwrap() as u64;
                let n = spec.num_digits.unwrap() as usize;
                let mut digits = vec![0usize; n];
                for d in (0..n).rev() {
                    digits[d] = (q % base) as usize;
                    q /= base;
                }
                per_feature.push(digits);
            }
        }
    }
    let indices = schema
        .layout
        .iter()
        .map(|&(fi, dp)| per_feature[fi][dp])
        .collect();
    Ok(EncodedRecord { indices })
}

/// Decode chain indices back to a row in table column order.
pub fn decode_record(enc: &EncodedRecord, schema: &Schema) -> Result<Vec<String>, EncodingError> {
    if enc.indices.len() != schema.layout.len() {
        return Err(EncodingError::LengthMismatch {
            expected: schema.layout.len(),
            actual: enc.indices.len(),
        });
    }
    let dims = schema.phys_dims();
    for (pos, (&idx, &dim)) in enc.indices.iter().zip(&dims).enumerate() {
        if idx >= dim {
            return Err(EncodingError::IndexOutOfRange {
                position: pos,
                index: idx,
                dim,
            });
        }
    }
    let mut digits: Vec<Vec<usize>> = schema
        .features
        .iter()
        .map(|f| vec![0usize; f.core_count()])
        .collect();
    for (&(fi, dp), &idx) in schema.layout.iter().zip(&enc.indices) {
        digits[fi][dp] = idx;
    }
    let mut row = Vec::with_capacity(schema.features.len());
    for (spec, ds) in schema.features.iter().zip(&digits) {
        match spec.kind {
            FeatureKind::Categorical => row.push(spec.categories[ds[0]].clone()),
            _ => {
                let base = spec.base.unwrap() as u64;
                let mut q = 0u64;
                for &d in ds {
                    q = q * base + d as u64;
                }
                let scale = spec.scale.unwrap();
                let v = spec.min_value.unwrap() + q as f64 / scale as f64;
                if scale == 1 && spec.min_value.unwrap().fract() == 0.0 {
                    row.push(format!("{}", v as i64));
                } else {
                    let prec = (scale as f64).log10().ceil() as usize;
                    row.push(format!("{v:.prec$}"));
                }
            }
        }
    }
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Missing categorical cells become a literal category; numeric cells
    /// fall back to the column median.
    OwnCategory,
    DropRow,
    /// Column mode for categorical cells, median for numeric cells.
    ImputeMode,
}

/// Resolve missing cells; the output table has none.
pub fn handle_missing(table: &Table, policy: MissingPolicy) -> Result<Table, EncodingError> {
    match policy {
        MissingPolicy::DropRow => {
            let rows = table
                .rows
                .iter()
                .filter(|r| r.iter().all(|c| c.is_some()))
                .cloned()
                .collect();
            Table::new(table.columns.clone(), rows)
        }
        MissingPolicy::OwnCategory | MissingPolicy::ImputeMode => {
            let mut fills: Vec<Option<String>> = Vec::with_capacity(table.columns.len());
            for (ci, name) in table.columns.iter().enumerate() {
                let present: Vec<&str> = table.column(ci).flatten().collect();
                let has_missing = present.len() < table.rows.len();
                if !has_missing {
                    fills.push(None);
                    continue;
                }
                let numeric = !present.is_empty()
                    && present.iter().all(|c| parse_numeric(c).is_some());
                let fill = if numeric {
                    column_median(&present)
                } else if policy == MissingPolicy::OwnCategory {
                    MISSING_CATEGORY.to_string()
                } else {
                    column_mode(&present).ok_or_else(|| EncodingError::AllMissingColumn(name.clone()))?
                };
                fills.push(Some(fill));
            }
            let rows = table
                .rows
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(ci, cell)| {
                            cell.clone().or_else(|| fills[ci].clone())
                        })
                        .collect()
                })
                .collect();
            Table::new(table.columns.clone(), rows)
        }
    }
}

fn column_median(present: &[&str]) -> String {
    let mut idx: Vec<usize> = (0..present.len()).collect();
    idx.sort_by(|&a, &b| {
        parse_numeric(present[a])
            .partial_cmp(&parse_numeric(present[b]))
            .unwrap()
    });
    present[idx[idx.len() / 2]].to_string()
}

fn column_mode(present: &[&str]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in present {
        *counts.entry(c).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(v, n)| (n, std::cmp::Reverse(v)))
        .map(|(v, _)| v.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cols: &[&str], rows: &[&[&str]]) -> Table {
        Table::new(
            cols.iter().map(|c| c.to_string()).collect(),
            rows.iter()
                .map(|r| {
                    r.iter()
                        .map(|c| {
                            if *c == "?" {
                                None
                            } else {
                                Some(c.to_string())
                            }
                        })
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn infer_schema_age_digits() {
        let t = table(&["age"], &[&["17"], &["90"]]);
        let s = infer_schema(&t, &SchemaHints::default()).unwrap();
        let f = &s.features[0];
        assert_eq!(f.kind, FeatureKind::Integer);
        assert_eq!(f.min_value, Some(17.0));
        assert_eq!(f.max_value, Some(90.0));
        assert_eq!(f.num_digits, Some(2));
    }

    #[test]
    fn infer_schema_monetary_scaled_digits() {
        let t = table(&["capital-gain"], &[&["0"], &["99999"]]);
        let mut hints = SchemaHints::default();
        hints.monetary.insert("capital-gain".to_string());
        let s = infer_schema(&t, &hints).unwrap();
        let f = &s.features[0];
        assert_eq!(f.scale, Some(100));
        assert_eq!(f.num_digits, Some(7)); // 10^7 > 9_999_900
    }

    #[test]
    fn infer_schema_single_categorical() {
        let t = table(&["c"], &[&["b"], &["a"], &["b"]]);
        let s = infer_schema(&t, &SchemaHints::default()).unwrap();
        assert_eq!(s.features[0].categories, vec!["a", "b"]);
        assert_eq!(s.layout, vec![(0, 0)]);
    }

    #[test]
    fn infer_schema_rejects_empty_and_all_missing() {
        let empty = Table::new(vec!["a".into()], vec![]).unwrap();
        assert!(matches!(
            infer_schema(&empty, &SchemaHints::default()),
            Err(EncodingError::EmptyTable)
        ));
        let missing = table(&["a"], &[&["?"], &["?"]]);
        assert!(matches!(
            infer_schema(&missing, &SchemaHints::default()),
            Err(EncodingError::AllMissingColumn(_))
        ));
    }

    #[test]
    fn order_features_centers_high_cardinality() {
        let specs: Vec<FeatureSpec> = [2usize, 5, 41]
            .iter()
            .enumerate()
            .map(|(i, &n)| FeatureSpec {
                name: format!("f{i}"),
                kind: FeatureKind::Categorical,
                categories: (0..n).map(|j| format!("v{j}")).collect(),
                min_value: None,
                max_value: None,
                scale: None,
                base: None,
                num_digits: None,
            })
            .collect();
        let layout = natural_layout(&specs);
        let schema = Schema {
            schema_version: SCHEMA_VERSION,
            features: specs,
            layout,
            target_feature: None,
        };
        let ordered = order_features(&schema);
        // 41-category feature (index 2) in the middle of three positions.
        assert_eq!(ordered.layout[1].0, 2);
    }

    #[test]
    fn order_features_single_feature_noop() {
        let t = table(&["c"], &[&["a"], &["b"]]);
        let s = infer_schema(&t, &SchemaHints::default()).unwrap();
        assert_eq!(order_features(&s).layout, s.layout);
    }

    #[test]
    fn order_features_is_deterministic_permutation() {
        let t = table(
            &["x", "y"],
            &[&["a", "p"], &["b", "q"]], // identical cardinality, tie by name
        );
        let s = infer_schema(&t, &SchemaHints::default()).unwrap();
        let o1 = order_features(&s);
        let o2 = order_features(&s);
        assert_eq!(o1.layout, o2.layout);
        let mut sorted = o1.layout.clone();
        sorted.sort();
        let mut natural = s.layout.clone();
        natural.sort();
        assert_eq!(sorted, natural);
    }

    #[test]
    fn encode_categorical_ordinal() {
        let t = table(&["c"], &[&["blue"], &["green"], &["red"]]);
        let s = infer_schema(&t, &SchemaHints::default()).unwrap();
        let enc = encode_record(&[Some("green".into())], &s).unwrap();
        assert_eq!(enc.indices, vec![1]);
    }

    #[test]
    fn encode_positional_digits() {
        let t = table(&["v"], &[&["0"], &["999"]]);
        let s = infer_schema(&t, &SchemaHints::default()).unwrap();
        assert_eq!(s.features[0].num_digits, Some(3));
        let enc = encode_record(&[Some("42".into())], &s).unwrap();
        assert_eq!(enc.indices, vec![0, 4, 2]);
        let dec = decode_record(&enc, &s).unwrap();
        assert_eq!(dec, vec!["42"]);
    }

    #[test]
    fn encode_scaled_monetary_digits() {
        let t = table(&["v"], &[&["0"], &["99999"]]);
        let mut hints = SchemaHints::default();
        hints.monetary.insert("v".to_string());
        let s = infer_schema(&t, &hints).unwrap();
        let enc = encode_record(&[Some("99999".into())], &s).unwrap();
        assert_eq!(enc.indices, vec![9, 9, 9, 9, 9, 0, 0]);
        let dec = decode_record(&enc, &s).unwrap();
        assert_eq!(dec, vec!["99999.00"]);
    }

    #[test]
    fn encode_rejects_unknown_and_out_of_range() {
        let t = table(&["c", "v"], &[&["a", "1"], &["b", "9"]]);
        let s = infer_schema(&t, &SchemaHints::default()).unwrap();
        assert!(matches!(
            encode_record(&[Some("z".into()), Some("5".into())], &s),
            Err(EncodingError::UnknownCategory { .. })
        ));
        assert!(matches!(
            encode_record(&[Some("a".into()), Some("11".into())], &s),
            Err(EncodingError::OutOfRange { .. })
        ));
        assert!(matches!(
            encode_record(&[None, Some("5".into())], &s),
            Err(EncodingError::MissingCell(_))
        ));
    }

    #[test]
    fn decode_rejects_out_of_range_index() {
        let t = table(&["c"], &[&["a"], &["b"]]);
        let s = infer_schema(&t, &SchemaHints::default()).unwrap();
        let enc = EncodedRecord { indices: vec![5] };
        assert!(matches!(
            decode_record(&enc, &s),
            Err(EncodingError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn handle_missing_drop_row() {
        let t = table(&["a", "b"], &[&["1", "x"], &["?", "y"], &["3", "z"]]);
        let out = handle_missing(&t, MissingPolicy::DropRow).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows.iter().all(|r| r.iter().all(|c| c.is_some())));
    }

    #[test]
    fn handle_missing_own_category() {
        let t = table(&["c"], &[&["?"], &["?"]]);
        let out = handle_missing(&t, MissingPolicy::OwnCategory).unwrap();
        assert!(out
            .rows
            .iter()
            .all(|r| r[0].as_deref() == Some(MISSING_CATEGORY)));
    }

    #[test]
    fn handle_missing_impute_mode_and_median() {
        let t = table(
            &["c", "v"],
            &[&["x", "1"], &["x", "?"], &["y", "3"], &["?", "7"]],
        );
        let out = handle_missing(&t, MissingPolicy::ImputeMode).unwrap();
        assert_eq!(out.rows[3][0].as_deref(), Some("x")); // mode
        assert_eq!(out.rows[1][1].as_deref(), Some("3")); // median of 1,3,7
    }

    #[test]
    fn handle_missing_noop_when_clean() {
        let t = table(&["a"], &[&["1"], &["2"]]);
        for policy in [
            MissingPolicy::OwnCategory,
            MissingPolicy::DropRow,
            MissingPolicy::ImputeMode,
        ] {
            assert_eq!(handle_missing(&t, policy).unwrap(), t);
        }
    }

    #[test]
    fn schema_json_round_trip() {
        let t = table(&["c", "v"], &[&["a", "1"], &["b", "9"]]);
        let s = infer_schema(&t, &SchemaHints::default()).unwrap();
        let json = s.to_json().unwrap();
        assert!(json.contains("\"schema_version\": 1"));
        let back = Schema::from_json(&json).unwrap();
        assert_eq!(back.layout, s.layout);
        let mut bad: serde_json::Value = serde_json::from_str(&json).unwrap();
        bad["schema_version"] = serde_json::json!(99);
        assert!(matches!(
            Schema::from_json(&bad.to_string()),
            Err(EncodingError::UnsupportedVersion(99))
        ));
    }
}
