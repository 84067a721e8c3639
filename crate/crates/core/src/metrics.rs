//! Fidelity scoring between real and synthetic tables, plus downstream
//! utility via classifiers trained on synthetic data and tested on held
//! out real data.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

use crate::encoding::{FeatureKind, Schema, Table};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("column {0} is empty")]
    EmptyColumn(String),
    #[error("chi-square needs at least 2 usable categories in column {0}")]
    NotEnoughCategories(String),
    #[error("cell {value:?} in column {column} is not numeric")]
    NonNumeric { column: String, value: String },
    #[error("table is missing column {0}")]
    MissingColumn(String),
    #[error("missing cell in column {0}")]
    MissingCell(String),
    #[error("no synthetic sample sets supplied")]
    NoSynthSets,
    #[error("synthetic set has {actual} rows; {required} needed to match the real train split")]
    SynthTooSmall { required: usize, actual: usize },
    #[error("schema has no target_feature for downstream evaluation")]
    NoTarget,
    #[error("target feature {0} must be binary categorical")]
    NonBinaryTarget(String),
    #[error("k={k} exceeds train size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("train set contains a single class; downstream fit is degenerate")]
    DegenerateTrainSet,
}

pub const FIDELITY_METRICS: [&str; 7] = [
    "category_coverage",
    "tv_complement",
    "chi_square",
    "contingency_similarity",
    "boundary_adherence",
    "range_coverage",
    "ks_complement",
];

/// Fraction of real categories that appear in the synthetic column.
pub fn category_coverage(real: &[&str], synth: &[&str]) -> Result<f64, MetricsError> {
    if real.is_empty() {
        return Err(MetricsError::EmptyColumn("real".into()));
    }
    let real_set: BTreeSet<&str> = real.iter().copied().collect();
    let synth_set: BTreeSet<&str> = synth.iter().copied().collect();
    Ok(real_set.intersection(&synth_set).count() as f64 / real_set.len() as f64)
}

fn frequencies<'a>(col: &[&'a str]) -> BTreeMap<&'a str, f64> {
    let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
    for &c in col {
        *counts.entry(c).or_default() += 1.0;
    }
    let n = col.len() as f64;
    for v in counts.values_mut() {
        *v /= n;
    }
    counts
}

/// 1 - total variation distance between empirical category frequencies.
pub fn tv_complement(real: &[&str], synth: &[&str]) -> Result<f64, MetricsError> {
    if real.is_empty() || synth.is_empty() {
        return Err(MetricsError::EmptyColumn("real/synth".into()));
    }
    let p = frequencies(real);
    let q = frequencies(synth);
    let keys: BTreeSet<&str> = p.keys().chain(q.keys()).copied().collect();
    let tvd: f64 = keys
        .iter()
        .map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
        / 2.0;
    Ok(1.0 - tvd)
}

/// P-value of Pearson's chi-square with real frequencies as the expected
/// distribution, scaled to the synthetic sample size. Categories with
/// zero expected count are excluded and reduce the degrees of freedom.
pub fn chi_square_score(real: &[&str], synth: &[&str]) -> Result<f64, MetricsError> {
    if real.is_empty() || synth.is_empty() {
        return Err(MetricsError::EmptyColumn("real/synth".into()));
    }
    let expected_freq = frequencies(real);
    let mut observed: BTreeMap<&str, f64> = BTreeMap::new();
    for &c in synth {
        *observed.entry(c).or_default() += 1.0;
    }
    let n = synth.len() as f64;
    let usable: Vec<&str> = expected_freq.keys().copied().collect();
    if usable.len() < 2 {
        return Err(MetricsError::NotEnoughCategories("real".into()));
    }
    let mut stat = 0.0;
    for k in &usable {
        let e = expected_freq[k] * n;
        let o = observed.get(k).copied().unwrap_or(0.0);
        stat += (o - e) * (o - e) / e;
    }
    let df = (usable.len() - 1) as f64;
    if stat <= 0.0 {
        return Ok(1.0);
    }
    // Upper regularized incomplete gamma Q(df/2, stat/2) is the p-value.
    Ok(gamma_ur(df / 2.0, stat / 2.0).clamp(0.0, 1.0))
}

/// 1 - total variation distance between the joint distributions of one
/// categorical column pair.
fn pair_similarity(
    real_a: &[&str],
    real_b: &[&str],
    synth_a: &[&str],
    synth_b: &[&str],
) -> f64 {
    let joint = |a: &[&str], b: &[&str]| -> BTreeMap<(String, String), f64> {
        let mut counts: BTreeMap<(String, String), f64> = BTreeMap::new();
        for (x, y) in a.iter().zip(b) {
            *counts.entry((x.to_string(), y.to_string())).or_default() += 1.0;
        }
        let n = a.len() as f64;
        for v in counts.values_mut() {
            *v /= n;
        }
        counts
    };
    let p = joint(real_a, real_b);
    let q = joint(synth_a, synth_b);
    let keys: BTreeSet<&(String, String)> = p.keys().chain(q.keys()).collect();
    let tvd: f64 = keys
        .iter()
        .map(|k| (p.get(*k).unwrap_or(&0.0) - q.get(*k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
        / 2.0;
    1.0 - tvd
}

/// Joint-distribution similarity for every unordered categorical pair.
pub fn contingency_similarity(
    real: &Table,
    synth: &Table,
    schema: &Schema,
) -> Result<Vec<(String, String, f64)>, MetricsError> {
    let cats: Vec<&str> = schema
        .features
        .iter()
        .filter(|f| f.kind == FeatureKind::Categorical)
        .map(|f| f.name.as_str())
        .collect();
    let mut out = Vec::new();
    for i in 0..cats.len() {
        for j in i + 1..cats.len() {
            let ra = string_column(real, cats[i])?;
            let rb = string_column(real, cats[j])?;
            let sa = string_column(synth, cats[i])?;
            let sb = string_column(synth, cats[j])?;
            let score = pair_similarity(
                &ra.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
                &rb.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
                &sa.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
                &sb.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            );
            out.push((cats[i].to_string(), cats[j].to_string(), score));
        }
    }
    Ok(out)
}

/// Fraction of synthetic values inside the real [min, max] range.
pub fn boundary_adherence(real: &[f64], synth: &[f64]) -> Result<f64, MetricsError> {
    if real.is_empty() || synth.is_empty() {
        return Err(MetricsError::EmptyColumn("real/synth".into()));
    }
    let (min, max) = min_max(real);
    let inside = synth.iter().filter(|&&v| v >= min && v <= max).count();
    Ok(inside as f64 / synth.len() as f64)
}

/// How much of the real value range the synthetic column spans.
pub fn range_coverage(real: &[f64], synth: &[f64]) -> Result<f64, MetricsError> {
    if real.is_empty() || synth.is_empty() {
        return Err(MetricsError::EmptyColumn("real/synth".into()));
    }
    let (min_r, max_r) = min_max(real);
    let (min_s, max_s) = min_max(synth);
    if max_r == min_r {
        return Ok(if min_s == min_r && max_s == max_r { 1.0 } else { 0.0 });
    }
    let missing = (min_s - min_r).max(0.0) + (max_r - max_s).max(0.0);
    Ok((1.0 - missing / (max_r - min_r)).max(0.0))
}

/// 1 - Kolmogorov-Smirnov statistic between the empirical CDFs.
pub fn ks_complement(real: &[f64], synth: &[f64]) -> Result<f64, MetricsError> {
    if real.is_empty() || synth.is_empty() {
        return Err(MetricsError::EmptyColumn("real/synth".into()));
    }
    let mut a = real.to_vec();
    let mut b = synth.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(1.0 - sup)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// True when the F1 denominator is zero and the score is defined as 0.
    pub fn f1_degenerate(&self) -> bool {
        2 * self.tp + self.fp + self.fn_ == 0
    }
}

/// F1 = 2 TP / (2 TP + FP + FN); zero denominator scores 0.
pub fn f1_score(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 0.0;
    }
    2.0 * c.tp as f64 / denom as f64
}

fn string_column(table: &Table, name: &str) -> Result<Vec<String>, MetricsError> {
    let idx = table
        .column_index(name)
        .ok_or_else(|| MetricsError::MissingColumn(name.to_string()))?;
    table
        .column(idx)
        .map(|c| {
            c.map(|s| s.to_string())
                .ok_or_else(|| MetricsError::MissingCell(name.to_string()))
        })
        .collect()
}

fn numeric_column(table: &Table, name: &str) -> Result<Vec<f64>, MetricsError> {
    let cells = string_column(table, name)?;
    cells
        .into_iter()
        .map(|c| {
            c.parse::<f64>().map_err(|_| MetricsError::NonNumeric {
                column: name.to_string(),
                value: c.clone(),
            })
        })
        .collect()
}

/// Feature embedding for the downstream classifiers: one-hot categorical
/// columns plus numeric columns min-max scaled with bounds from `bounds_of`.
struct Embedding {
    columns: Vec<EmbeddedColumn>,
    dim: usize,
}

enum EmbeddedColumn {
    OneHot { name: String, categories: Vec<String> },
    Scaled { name: String, min: f64, max: f64 },
}

impl Embedding {
    fn build(schema: &Schema, bounds_of: &Table) -> Result<Embedding, MetricsError> {
        let target = schema.target_feature.as_deref();
        let mut columns = Vec::new();
        let mut dim = 0;
        for spec in &schema.features {
            if Some(spec.name.as_str()) == target {
                continue;
            }
            match spec.kind {
                FeatureKind::Categorical => {
                    dim += spec.categories.len();
                    columns.push(EmbeddedColumn::OneHot {
                        name: spec.name.clone(),
                        categories: spec.categories.clone(),
                    });
                }
                _ => {
                    let vals = numeric_column(bounds_of, &spec.name)?;
                    let (min, max) = min_max(&vals);
                    dim += 1;
                    columns.push(EmbeddedColumn::Scaled {
                        name: spec.name.clone(),
                        min,
                        max,
                    });
                }
            }
        }
        Ok(Embedding { columns, dim })
    }

    fn embed(&self, table: &Table) -> Result<Vec<Vec<f64>>, MetricsError> {
        let mut rows = vec![Vec::with_capacity(self.dim); table.rows.len()];
        for col in &self.columns {
            match col {
                EmbeddedColumn::OneHot { name, categories } => {
                    let vals = string_column(table, name)?;
                    for (row, v) in rows.iter_mut().zip(&vals) {
                        for c in categories {
                            row.push(if c == v { 1.0 } else { 0.0 });
                        }
                    }
                }
                EmbeddedColumn::Scaled { name, min, max } => {
                    let vals = numeric_column(table, name)?;
                    let span = max - min;
                    for (row, &v) in rows.iter_mut().zip(&vals) {
                        row.push(if span > 0.0 { (v - min) / span } else { 0.0 });
                    }
                }
            }
        }
        Ok(rows)
    }
}

/// Binary labels: 1 for the positive class (second category of the
/// target feature in lexicographic order), 0 otherwise.
fn labels(table: &Table, schema: &Schema) -> Result<Vec<bool>, MetricsError> {
    let target = schema.target_feature.as_deref().ok_or(MetricsError::NoTarget)?;
    let spec = schema
        .features
        .iter()
        .find(|f| f.name == target)
        .ok_or_else(|| MetricsError::MissingColumn(target.to_string()))?;
    if spec.kind != FeatureKind::Categorical || spec.categories.len() != 2 {
        return Err(MetricsError::NonBinaryTarget(target.to_string()));
    }
    let positive = &spec.categories[1];
    let vals = string_column(table, target)?;
    Ok(vals.into_iter().map(|v| v == *positive).collect())
}

fn confusion(predicted: &[bool], actual: &[bool]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// K-nearest-neighbor classification of `test` against `train`.
/// Euclidean distance on the shared embedding; ties broken by distance
/// then train row order; vote ties fall to the nearest tied neighbor.
pub fn knn_classify(
    train: &Table,
    test: &Table,
    schema: &Schema,
    k: usize,
) -> Result<ConfusionCounts, MetricsError> {
    if k == 0 || k > train.rows.len() {
        return Err(MetricsError::KTooLarge {
            k,
            n: train.rows.len(),
        });
    }
    let embedding = Embedding::build(schema, train)?;
    let train_x = embedding.embed(train)?;
    let test_x = embedding.embed(test)?;
    let train_y = labels(train, schema)?;
    let test_y = labels(test, schema)?;

    let predicted: Vec<bool> = test_x
        .par_iter()
        .map(|point| {
            let mut dists: Vec<(f64, usize)> = train_x
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let d: f64 = point
                        .iter()
                        .zip(t)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, i)
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let neighbors = &dists[..k];
            let positives = neighbors.iter().filter(|&&(_, i)| train_y[i]).count();
            let negatives = k - positives;
            if positives != negatives {
                positives > negatives
            } else {
                // Vote tie: the nearest neighbor decides.
                train_y[neighbors[0].1]
            }
        })
        .collect();
    Ok(confusion(&predicted, &test_y))
}

pub struct LinearFit {
    pub counts: ConfusionCounts,
    /// Set when the train set held a single class.
    pub degenerate: bool,
}

/// Logistic regression on the shared embedding, trained by full-batch
/// gradient descent. Deterministic: weights start at zero.
pub fn linear_classify(
    train: &Table,
    test: &Table,
    schema: &Schema,
    epochs: usize,
    rate: f64,
) -> Result<LinearFit, MetricsError> {
    let embedding = Embedding::build(schema, train)?;
    let train_x = embedding.embed(train)?;
    let test_x = embedding.embed(test)?;
    let train_y = labels(train, schema)?;
    let test_y = labels(test, schema)?;
    let degenerate = train_y.iter().all(|&y| y) || train_y.iter().all(|&y| !y);

    let dim = embedding.dim;
    let mut w = vec![0.0; dim];
    let mut bias = 0.0;
    let n = train_x.len() as f64;
    for _ in 0..epochs {
        let mut grad_w = vec![0.0; dim];
        let mut grad_b = 0.0;
        for (x, &y) in train_x.iter().zip(&train_y) {
            let z: f64 = bias + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if y { 1.0 } else { 0.0 };
            for (g, xi) in grad_w.iter_mut().zip(x) {
                *g += err * xi;
            }
            grad_b += err;
        }
        for (wi, g) in w.iter_mut().zip(&grad_w) {
            *wi -= rate * g / n;
        }
        bias -= rate * grad_b / n;
    }
    let predicted: Vec<bool> = test_x
        .iter()
        .map(|x| {
            let z: f64 = bias + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
            z > 0.0
        })
        .collect();
    Ok(LinearFit {
        counts: confusion(&predicted, &test_y),
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamScores {
    pub knn_f1: f64,
    pub linear_f1: f64,
    pub linear_degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// column name -> metric name -> score statistics over sample sets.
    pub column_scores: BTreeMap<String, BTreeMap<String, MeanStd>>,
    /// (column a, column b) -> contingency similarity statistics.
    pub pair_scores: Vec<(String, String, MeanStd)>,
    /// metric name -> statistics of the per-set aggregate score.
    pub aggregates: BTreeMap<String, MeanStd>,
    pub num_sample_sets: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream_real: Option<DownstreamScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream_synth: Option<DownstreamScores>,
}

impl MetricReport {
    /// Mean over all fidelity aggregate means; the single-number summary
    /// used for privacy-utility trend comparisons.
    pub fn overall_fidelity(&self) -> f64 {
        if self.aggregates.is_empty() {
            return 0.0;
        }
        self.aggregates.values().map(|m| m.mean).sum::<f64>() / self.aggregates.len() as f64
    }

    /// Flat CSV rendering: scope,name,metric,mean,std.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,name,metric,mean,std\n");
        for (col, metrics) in &self.column_scores {
            for (metric, ms) in metrics {
                out.push_str(&format!("column,{col},{metric},{},{}\n", ms.mean, ms.std));
            }
        }
        for (a, b, ms) in &self.pair_scores {
            out.push_str(&format!(
                "pair,{a}|{b},contingency_similarity,{},{}\n",
                ms.mean, ms.std
            ));
        }
        for (metric, ms) in &self.aggregates {
            out.push_str(&format!("aggregate,,{metric},{},{}\n", ms.mean, ms.std));
        }
        let mut downstream = |scope: &str, d: &Option<DownstreamScores>| {
            if let Some(d) = d {
                out.push_str(&format!("downstream,{scope},knn_f1,{},0\n", d.knn_f1));
                out.push_str(&format!("downstream,{scope},linear_f1,{},0\n", d.linear_f1));
            }
        };
        downstream("real_trained", &self.downstream_real);
        downstream("synth_trained", &self.downstream_synth);
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub knn_k: usize,
    pub linear_epochs: usize,
    pub linear_rate: f64,
    /// Run the downstream classifiers (requires a target feature).
    pub downstream: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            knn_k: 5,
            linear_epochs: 300,
            linear_rate: 1.0,
            downstream: true,
        }
    }
}

fn shuffled_rows(table: &Table, seed: u64) -> Table {
    let mut indices: Vec<usize> = (0..table.rows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    Table {
        columns: table.columns.clone(),
        rows: indices.into_iter().map(|i| table.rows[i].clone()).collect(),
    }
}

fn subset(table: &Table, range: std::ops::Range<usize>) -> Table {
    Table {
        columns: table.columns.clone(),
        rows: table.rows[range].to_vec(),
    }
}

/// Fidelity scores for one synthetic sample set, keyed by column.
fn fidelity_for_set(
    real: &Table,
    synth: &Table,
    schema: &Schema,
) -> Result<(BTreeMap<String, BTreeMap<String, f64>>, Vec<(String, String, f64)>), MetricsError> {
    let mut per_column: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for spec in &schema.features {
        let mut scores = BTreeMap::new();
        match spec.kind {
            FeatureKind::Categorical => {
                let r = string_column(real, &spec.name)?;
                let s = string_column(synth, &spec.name)?;
                let r: Vec<&str> = r.iter().map(|x| x.as_str()).collect();
                let s: Vec<&str> = s.iter().map(|x| x.as_str()).collect();
                scores.insert("category_coverage".into(), category_coverage(&r, &s)?);
                scores.insert("tv_complement".into(), tv_complement(&r, &s)?);
                if let Ok(p) = chi_square_score(&r, &s) {
                    scores.insert("chi_square".into(), p);
                }
            }
            _ => {
                let r = numeric_column(real, &spec.name)?;
                let s = numeric_column(synth, &spec.name)?;
                scores.insert("boundary_adherence".into(), boundary_adherence(&r, &s)?);
                scores.insert("range_coverage".into(), range_coverage(&r, &s)?);
                scores.insert("ks_complement".into(), ks_complement(&r, &s)?);
            }
        }
        per_column.insert(spec.name.clone(), scores);
    }
    let pairs = contingency_similarity(real, synth, schema)?;
    Ok((per_column, pairs))
}

/// Full evaluation: fidelity over every synthetic sample set plus the
/// downstream protocol (real split 60/20/20, synthetic train matched to
/// the real train size, both classifiers tested on the real test split).
pub fn evaluate(
    real: &Table,
    synth_sets: &[Table],
    schema: &Schema,
    cfg: &EvalConfig,
) -> Result<MetricReport, MetricsError> {
    if synth_sets.is_empty() || synth_sets.iter().any(|s| s.rows.is_empty()) {
        return Err(MetricsError::NoSynthSets);
    }
    for set in synth_sets {
        for spec in &schema.features {
            if set.column_index(&spec.name).is_none() {
                return Err(MetricsError::MissingColumn(spec.name.clone()));
            }
        }
    }

    let per_set: Vec<_> = synth_sets
        .par_iter()
        .map(|synth| fidelity_for_set(real, synth, schema))
        .collect::<Result<_, _>>()?;

    // Collect per-column statistics over sample sets.
    let mut column_scores: BTreeMap<String, BTreeMap<String, MeanStd>> = BTreeMap::new();
    for spec in &schema.features {
        let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (cols, _) in &per_set {
            if let Some(scores) = cols.get(&spec.name) {
                for (m, &v) in scores {
                    metrics.entry(m.clone()).or_default().push(v);
                }
            }
        }
        let stats = metrics
            .into_iter()
            .map(|(m, vs)| (m, mean_std(&vs)))
            .collect();
        column_scores.insert(spec.name.clone(), stats);
    }

    let mut pair_scores = Vec::new();
    if let Some((_, first_pairs)) = per_set.first() {
        for (pi, (a, b, _)) in first_pairs.iter().enumerate() {
            let vs: Vec<f64> = per_set.iter().map(|(_, pairs)| pairs[pi].2).collect();
            pair_scores.push((a.clone(), b.clone(), mean_std(&vs)));
        }
    }

    // Aggregate = mean of contributing column/pair scores, per set.
    let mut aggregates = BTreeMap::new();
    for metric in FIDELITY_METRICS {
        let per_set_means: Vec<f64> = per_set
            .iter()
            .filter_map(|(cols, pairs)| {
                let vals: Vec<f64> = if metric == "contingency_similarity" {
                    pairs.iter().map(|(_, _, v)| *v).collect()
                } else {
                    cols.values().filter_map(|m| m.get(metric)).copied().collect()
                };
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect();
        if !per_set_means.is_empty() {
            aggregates.insert(metric.to_string(), mean_std(&per_set_means));
        }
    }

    let mut report = MetricReport {
        column_scores,
        pair_scores,
        aggregates,
        num_sample_sets: synth_sets.len(),
        downstream_real: None,
        downstream_synth: None,
    };

    if cfg.downstream && schema.target_feature.is_some() {
        let shuffled = shuffled_rows(real, cfg.seed);
        let n = shuffled.rows.len();
        let n_train = n * 60 / 100;
        let n_val = n * 20 / 100;
        let real_train = subset(&shuffled, 0..n_train);
        let _real_val = subset(&shuffled, n_train..n_train + n_val);
        let real_test = subset(&shuffled, n_train + n_val..n);

        // Synthetic 80/20 split with the train portion matched in size to
        // the real train split.
        let synth = shuffled_rows(&synth_sets[0], cfg.seed);
        if synth.rows.len() < n_train {
            return Err(MetricsError::SynthTooSmall {
                required: n_train,
                actual: synth.rows.len(),
            });
        }
        let synth_train = subset(&synth, 0..n_train);

        let run = |train: &Table| -> Result<DownstreamScores, MetricsError> {
            let knn = knn_classify(train, &real_test, schema, cfg.knn_k)?;
            let linear = linear_classify(train, &real_test, schema, cfg.linear_epochs, cfg.linear_rate)?;
            Ok(DownstreamScores {
                knn_f1: f1_score(&knn),
                linear_f1: f1_score(&linear.counts),
                linear_degenerate: linear.degenerate,
            })
        };
        report.downstream_real = Some(run(&real_train)?);
        report.downstream_synth = Some(run(&synth_train)?);
    }

    Ok(report)
}
