//! Observed data: outcomes, binary treatments, typed covariates and
//! propensities, plus loading from delimited text and standardization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound δ: propensities must lie in `[δ, 1 − δ]`.
pub const DEFAULT_PROPENSITY_BOUND: f64 = 1e-3;

/// Categorical columns are limited to this many levels so a level subset fits
/// in a `u64` mask.
pub const MAX_LEVELS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical { levels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: ColumnKind,
    /// Labels for categorical level codes `0..levels`; empty for continuous.
    #[serde(default)]
    pub labels: Vec<String>,
}

impl Covariate {
    pub fn continuous(name: impl Into<String>) -> Self {
        Covariate {
            name: name.into(),
            kind: ColumnKind::Continuous,
            labels: Vec::new(),
        }
    }

    pub fn categorical(name: impl Into<String>, levels: usize) -> Self {
        Covariate {
            name: name.into(),
            kind: ColumnKind::Categorical { levels },
            labels: (0..levels).map(|l| l.to_string()).collect(),
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, ColumnKind::Continuous)
    }

    pub fn levels(&self) -> Option<usize> {
        match self.kind {
            ColumnKind::Categorical { levels } => Some(levels),
            ColumnKind::Continuous => None,
        }
    }

    /// Label for a categorical level code (falls back to the code itself).
    pub fn label(&self, level: usize) -> String {
        self.labels
            .get(level)
            .cloned()
            .unwrap_or_else(|| level.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propensity {
    Constant(f64),
    PerUnit(Vec<f64>),
}

/// A validated data set `{Y_i, A_i, X_i, e(X_i)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<u8>,
    x: DMatrix<f64>,
    columns: Vec<Covariate>,
    propensity: Propensity,
    ids: Option<Vec<String>>,
}

impl Dataset {
    /// Build and validate a data set using the default propensity bound.
    pub fn new(
        y: Vec<f64>,
        a: Vec<u8>,
        x: DMatrix<f64>,
        columns: Vec<Covariate>,
        propensity: Propensity,
    ) -> Result<Self> {
        Self::with_bound(y, a, x, columns, propensity, DEFAULT_PROPENSITY_BOUND)
    }

    pub fn with_bound(
        y: Vec<f64>,
        a: Vec<u8>,
        x: DMatrix<f64>,
        columns: Vec<Covariate>,
        propensity: Propensity,
        bound: f64,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::invalid("data set has no rows"));
        }
        if a.len() != n || x.nrows() != n {
            return Err(Error::invalid(format!(
                "length mismatch: y has {n} rows, a has {}, x has {}",
                a.len(),
                x.nrows()
            )));
        }
        if x.ncols() != columns.len() {
            return Err(Error::invalid(format!(
                "x has {} columns but {} covariates were described",
                x.ncols(),
                columns.len()
            )));
        }
        if !(bound > 0.0 && bound < 0.5) {
            return Err(Error::invalid(format!("propensity bound {bound} not in (0, 0.5)")));
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::MissingValue {
                column: "outcome".into(),
                row,
            });
        }
        if let Some(row) = a.iter().position(|&v| v > 1) {
            return Err(Error::InvalidTreatment {
                row,
                value: a[row].to_string(),
            });
        }
        let (lo, hi) = (bound, 1.0 - bound);
        let check = |row: usize, e: f64| {
            if e.is_finite() && e >= lo && e <= hi {
                Ok(())
            } else {
                Err(Error::InvalidPropensity { row, value: e, lo, hi })
            }
        };
        match &propensity {
            Propensity::Constant(e) => check(0, *e)?,
            Propensity::PerUnit(es) => {
                if es.len() != n {
                    return Err(Error::invalid("propensity vector length mismatch"));
                }
                for (i, &e) in es.iter().enumerate() {
                    check(i, e)?;
                }
            }
        }
        for (j, col) in columns.iter().enumerate() {
            for i in 0..n {
                let v = x[(i, j)];
                if !v.is_finite() {
                    return Err(Error::MissingValue {
                        column: col.name.clone(),
                        row: i,
                    });
                }
                if let Some(levels) = col.levels() {
                    if levels == 0 || levels > MAX_LEVELS {
                        return Err(Error::invalid(format!(
                            "categorical column {:?} must have 1..={MAX_LEVELS} levels",
                            col.name
                        )));
                    }
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= levels {
                        return Err(Error::invalid(format!(
                            "column {:?} row {i}: level code {v} not below {levels}",
                            col.name
                        )));
                    }
                }
            }
        }
        Ok(Dataset {
            y,
            a,
            x,
            columns,
            propensity,
            ids: None,
        })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n() {
            return Err(Error::invalid("id vector length mismatch"));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn treatment(&self) -> &[u8] {
        &self.a
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn columns(&self) -> &[Covariate] {
        &self.columns
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn propensity_spec(&self) -> &Propensity {
        &self.propensity
    }

    pub fn propensity(&self, i: usize) -> f64 {
        match &self.propensity {
            Propensity::Constant(e) => *e,
            Propensity::PerUnit(es) => es[i],
        }
    }

    pub fn propensities(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.propensity(i)).collect()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn n_treated(&self) -> usize {
        self.a.iter().filter(|&&a| a == 1).count()
    }

    /// Fail unless both treatment arms are represented.
    pub fn require_both_arms(&self) -> Result<()> {
        let t = self.n_treated();
        if t == 0 || t == self.n() {
            Err(Error::OneArmed)
        } else {
            Ok(())
        }
    }

    /// Same covariates, treatments and propensities with new outcomes.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::invalid("outcome vector length mismatch"));
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::MissingValue {
                column: "outcome".into(),
                row,
            });
        }
        Ok(Dataset { y, ..self.clone() })
    }

    /// Rows `rows` (in the given order) as a new data set.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let x = DMatrix::from_fn(rows.len(), self.p(), |r, j| self.x[(rows[r], j)]);
        Dataset {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            x,
            columns: self.columns.clone(),
            propensity: match &self.propensity {
                Propensity::Constant(e) => Propensity::Constant(*e),
                Propensity::PerUnit(es) => Propensity::PerUnit(rows.iter().map(|&i| es[i]).collect()),
            },
            ids: self
                .ids
                .as_ref()
                .map(|ids| rows.iter().map(|&i| ids[i].clone()).collect()),
        }
    }
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindSpec {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: KindSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropensitySpec {
    Column(String),
    Constant(f64),
}

/// Column roles for [`load_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSchema {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub propensity: Option<PropensitySpec>,
    #[serde(default)]
    pub id: Option<String>,
    /// Field delimiter; sniffed from the header when absent.
    #[serde(default)]
    pub delimiter: Option<char>,
    #[serde(default = "default_bound")]
    pub propensity_bound: f64,
}

fn default_bound() -> f64 {
    DEFAULT_PROPENSITY_BOUND
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn parse_number(s: &str, column: &str, row: usize) -> Result<f64> {
    if is_missing(s) {
        return Err(Error::MissingValue {
            column: column.to_string(),
            row,
        });
    }
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Malformed(format!("column {column:?} row {row}: {s:?} is not a number")))
}

fn sort_levels(labels: BTreeSet<String>) -> Vec<String> {
    let mut labels: Vec<String> = labels.into_iter().collect();
    if labels.iter().all(|l| l.parse::<f64>().is_ok()) {
        labels.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    labels
}

/// Read a comma- or tab-separated file with a header row.
pub fn load_dataset(path: impl AsRef<Path>, schema: &DataSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, schema)
}

/// Parse delimited text according to `schema`.
fn delimiter(text: &str, given: Option<char>) -> Result<u8> {
    match given {
        Some(c) if c.is_ascii() => Ok(c as u8),
        Some(c) => Err(Error::invalid(format!("delimiter {c:?} is not ASCII"))),
        None => {
            let header = text.lines().next().unwrap_or("");
            Ok(if header.contains('\t') && !header.contains(',') { b'\t' } else { b',' })
        }
    }
}

/// Schema with the named outcome and treatment columns, a `propensity` column
/// when present, an `id` column when present, and every other column as a
/// covariate: continuous when all its values are numbers, else categorical.
pub fn infer_schema(text: &str, outcome: &str, treatment: &str) -> Result<DataSchema> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter(text, None)?)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Malformed(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    for name in [outcome, treatment] {
        if !headers.iter().any(|h| h == name) {
            return Err(Error::UnknownColumn(name.to_string()));
        }
    }
    let mut numeric = vec![true; headers.len()];
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Malformed(e.to_string()))?;
        for (j, v) in rec.iter().enumerate().take(headers.len()) {
            if !is_missing(v) && v.parse::<f64>().is_err() {
                numeric[j] = false;
            }
        }
    }
    let has = |name: &str| headers.iter().any(|h| h == name);
    let covariates = headers
        .iter()
        .zip(&numeric)
        .filter(|(h, _)| ![outcome, treatment, "propensity", "id"].contains(&h.as_str()))
        .map(|(h, &num)| CovariateSpec {
            name: h.clone(),
            kind: if num { KindSpec::Continuous } else { KindSpec::Categorical },
        })
        .collect();
    Ok(DataSchema {
        outcome: outcome.to_string(),
        treatment: treatment.to_string(),
        covariates,
        propensity: has("propensity").then(|| PropensitySpec::Column("propensity".into())),
        id: has("id").then(|| "id".to_string()),
        delimiter: None,
        propensity_bound: DEFAULT_PROPENSITY_BOUND,
    })
}

pub fn parse_dataset(text: &str, schema: &DataSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter(text, schema.delimiter)?)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Malformed(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let y_idx = find(&schema.outcome)?;
    let a_idx = find(&schema.treatment)?;
    let x_idx = schema
        .covariates
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>>>()?;
    let e_idx = match &schema.propensity {
        Some(PropensitySpec::Column(name)) => Some(find(name)?),
        _ => None,
    };
    let id_idx = schema.id.as_deref().map(find).transpose()?;

    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Malformed(e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(Error::Malformed(format!(
                "row {row} has {} fields, header has {}",
                rec.len(),
                headers.len()
            )));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Malformed("no data rows".into()));
    }
    let n = records.len();

    let mut y = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for (row, rec) in records.iter().enumerate() {
        y.push(parse_number(&rec[y_idx], &schema.outcome, row)?);
        let raw = &rec[a_idx];
        if is_missing(raw) {
            return Err(Error::MissingValue {
                column: schema.treatment.clone(),
                row,
            });
        }
        match raw.trim().parse::<f64>() {
            Ok(v) if v == 0.0 => a.push(0),
            Ok(v) if v == 1.0 => a.push(1),
            _ => {
                return Err(Error::InvalidTreatment {
                    row,
                    value: raw.to_string(),
                })
            }
        }
    }

    let p = schema.covariates.len();
    let mut x = DMatrix::zeros(n, p);
    let mut columns = Vec::with_capacity(p);
    for (j, (spec, &idx)) in schema.covariates.iter().zip(&x_idx).enumerate() {
        match spec.kind {
            KindSpec::Continuous => {
                for (row, rec) in records.iter().enumerate() {
                    x[(row, j)] = parse_number(&rec[idx], &spec.name, row)?;
                }
                columns.push(Covariate::continuous(spec.name.clone()));
            }
            KindSpec::Categorical => {
                let mut seen = BTreeSet::new();
                for (row, rec) in records.iter().enumerate() {
                    if is_missing(&rec[idx]) {
                        return Err(Error::MissingValue {
                            column: spec.name.clone(),
                            row,
                        });
                    }
                    seen.insert(rec[idx].to_string());
                }
                let labels = sort_levels(seen);
                if labels.len() > MAX_LEVELS {
                    return Err(Error::invalid(format!(
                        "column {:?} has {} levels (limit {MAX_LEVELS})",
                        spec.name,
                        labels.len()
                    )));
                }
                let code: BTreeMap<&str, usize> =
                    labels.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
                for (row, rec) in records.iter().enumerate() {
                    x[(row, j)] = code[&rec[idx]] as f64;
                }
                columns.push(Covariate {
                    name: spec.name.clone(),
                    kind: ColumnKind::Categorical {
                        levels: labels.len(),
                    },
                    labels,
                });
            }
        }
    }

    let propensity = match (&schema.propensity, e_idx) {
        (Some(PropensitySpec::Constant(e)), _) => Propensity::Constant(*e),
        (_, Some(idx)) => {
            let name = &headers[idx];
            Propensity::PerUnit(
                records
                    .iter()
                    .enumerate()
                    .map(|(row, rec)| parse_number(&rec[idx], name, row))
                    .collect::<Result<_>>()?,
            )
        }
        (None, None) => {
            // Randomized design with unknown e: use the observed treated fraction.
            let frac = a.iter().filter(|&&t| t == 1).count() as f64 / n as f64;
            Propensity::Constant(frac)
        }
        (Some(PropensitySpec::Column(_)), None) => unreachable!(),
    };

    let ds = Dataset::with_bound(y, a, x, columns, propensity, schema.propensity_bound)?;
    match id_idx {
        Some(idx) => ds.with_ids(records.iter().map(|r| r[idx].to_string()).collect()),
        None => Ok(ds),
    }
}

// ---------------------------------------------------------------------------
// Standardization

/// Centering and scaling applied by [`standardize`]. Categorical columns get
/// center 0 and scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecipe {
    pub y_center: f64,
    pub y_scale: f64,
    pub x_centers: Vec<f64>,
    pub x_scales: Vec<f64>,
}

fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (n, sum) = v.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    let mean = sum / n as f64;
    let ss: f64 = v.map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n as f64 - 1.0)).sqrt(), n)
}

fn has_two_values(v: impl Iterator<Item = f64>) -> bool {
    let mut first = None;
    for x in v {
        match first {
            None => first = Some(x),
            Some(f) if f != x => return true,
            _ => {}
        }
    }
    false
}

/// Center and scale `y` and the continuous covariates to sample mean 0 and
/// sample variance 1 (denominator `N − 1`).
pub fn standardize(d: &Dataset) -> Result<(Dataset, StandardizationRecipe)> {
    if d.n() < 2 {
        return Err(Error::invalid("standardization needs at least 2 rows"));
    }
    if !has_two_values(d.y.iter().copied()) {
        return Err(Error::ZeroVariance("outcome".into()));
    }
    let (y_center, y_scale, _) = mean_sd(d.y.iter().copied());
    let mut x_centers = vec![0.0; d.p()];
    let mut x_scales = vec![1.0; d.p()];
    for (j, col) in d.columns.iter().enumerate() {
        if !col.is_continuous() {
            continue;
        }
        let column = d.x.column(j);
        if !has_two_values(column.iter().copied()) {
            return Err(Error::ZeroVariance(col.name.clone()));
        }
        let (m, s, _) = mean_sd(column.iter().copied());
        x_centers[j] = m;
        x_scales[j] = s;
    }
    let recipe = StandardizationRecipe {
        y_center,
        y_scale,
        x_centers,
        x_scales,
    };
    let out = recipe.apply(d)?;
    Ok((out, recipe))
}

impl StandardizationRecipe {
    /// Standardize another data set with this recipe (e.g. a holdout sample).
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        if d.p() != self.x_centers.len() {
            return Err(Error::invalid("recipe and data set disagree on column count"));
        }
        let y = d.y.iter().map(|v| (v - self.y_center) / self.y_scale).collect();
        let x = DMatrix::from_fn(d.n(), d.p(), |i, j| {
            (d.x[(i, j)] - self.x_centers[j]) / self.x_scales[j]
        });
        Ok(Dataset {
            y,
            x,
            ..d.clone()
        })
    }

    /// Undo [`StandardizationRecipe::apply`].
    pub fn invert(&self, d: &Dataset) -> Dataset {
        let y = d.y.iter().map(|v| self.invert_y(*v)).collect();
        let x = DMatrix::from_fn(d.n(), d.p(), |i, j| {
            d.x[(i, j)] * self.x_scales[j] + self.x_centers[j]
        });
        Dataset {
            y,
            x,
            ..d.clone()
        }
    }

    pub fn invert_y(&self, v: f64) -> f64 {
        v * self.y_scale + self.y_center
    }

    /// Treatment effects are differences of outcomes, so they only rescale.
    pub fn effect_to_outcome_units(&self, tau: f64) -> f64 {
        tau * self.y_scale
    }
}
