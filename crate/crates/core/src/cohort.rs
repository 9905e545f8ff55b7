//! Cohort data model, analysis-sample selection and outcome monetization.
//!
//! A [`CohortTable`] is column-major. Every cell is an `f64`: continuous
//! values as-is, binary cells as 0/1 and categorical cells as the index of
//! their label in the column's declared category list. Missing cells hold
//! `NaN` and are flagged in the missing mask.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default physiological ceiling on informal care: 16 hours a day, every day.
pub const DEFAULT_HOURS_CAP: f64 = 5840.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnRole {
    Covariate,
    Outcome,
    Treatment,
    Cluster,
    Stratum,
    WeightFree,
}

/// Latent-space transform applied to a continuous column before diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    Arcsinh,
    Log1p,
}

impl Transform {
    pub fn forward(self, value: f64) -> Result<f64> {
        match self {
            Transform::None => Ok(value),
            Transform::Arcsinh => Ok(value.asinh()),
            Transform::Log1p => {
                if value < 0.0 {
                    invalid(format!("log1p transform of negative value {value}"))
                } else {
                    Ok(value.ln_1p())
                }
            }
        }
    }

    pub fn inverse(self, latent: f64) -> Result<f64> {
        if !latent.is_finite() {
            return invalid(format!("non-finite latent value {latent}"));
        }
        Ok(match self {
            Transform::None => latent,
            Transform::Arcsinh => latent.sinh(),
            Transform::Log1p => latent.exp_m1(),
        })
    }
}

/// Forward monetary transform.
pub fn transform_monetary(value: f64, kind: Transform) -> Result<f64> {
    kind.forward(value)
}

/// Inverse monetary transform.
pub fn inverse_transform(latent: f64, kind: Transform) -> Result<f64> {
    kind.inverse(latent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
    /// Ordered labels. Required for categorical columns; optional labels for
    /// the 0/1 levels of a binary column.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub unit: String,
    #[serde(default)]
    pub transform: Transform,
    /// Column-specific missing codes, in addition to the manifest-wide list.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_codes: Vec<String>,
}

impl ColumnSpec {
    pub fn continuous(name: &str, role: ColumnRole) -> Self {
        Self {
            name: name.to_string(),
            kind: ColumnKind::Continuous,
            role,
            categories: Vec::new(),
            unit: String::new(),
            transform: Transform::None,
            missing_codes: Vec::new(),
        }
    }

    pub fn categorical(name: &str, role: ColumnRole, categories: &[&str]) -> Self {
        Self {
            kind: ColumnKind::Categorical,
            categories: categories.iter().map(|s| s.to_string()).collect(),
            ..Self::continuous(name, role)
        }
    }

    pub fn binary(name: &str, role: ColumnRole) -> Self {
        Self {
            kind: ColumnKind::Binary,
            ..Self::continuous(name, role)
        }
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }

    pub fn with_unit(mut self, unit: &str) -> Self {
        self.unit = unit.to_string();
        self
    }

    pub fn with_categories(mut self, categories: &[&str]) -> Self {
        self.categories = categories.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Number of levels for discrete columns, `None` for continuous ones.
    pub fn levels(&self) -> Option<usize> {
        match self.kind {
            ColumnKind::Continuous => None,
            ColumnKind::Binary => Some(2),
            ColumnKind::Categorical => Some(self.categories.len()),
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.kind != ColumnKind::Continuous
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            ColumnKind::Categorical if self.categories.len() < 2 => Err(Error::Schema(format!(
                "categorical column `{}` needs at least 2 categories",
                self.name
            ))),
            ColumnKind::Binary if !self.categories.is_empty() && self.categories.len() != 2 => {
                Err(Error::Schema(format!(
                    "binary column `{}` declares {} labels, expected 2",
                    self.name,
                    self.categories.len()
                )))
            }
            ColumnKind::Categorical | ColumnKind::Binary if self.transform != Transform::None => Err(Error::Schema(
                format!("transform declared on discrete column `{}`", self.name),
            )),
            _ => Ok(()),
        }
    }

    /// Parses a raw cell. Returns `None` for a missing code.
    fn parse_cell(&self, raw: &str, missing: &[String], row: usize) -> Result<Option<f64>> {
        let raw = raw.trim();
        if missing.iter().any(|m| m == raw) || self.missing_codes.iter().any(|m| m == raw) {
            return Ok(None);
        }
        let bad = || Error::BadCell {
            row,
            column: self.name.clone(),
            value: raw.to_string(),
        };
        match self.kind {
            ColumnKind::Continuous => {
                let v: f64 = raw.parse().map_err(|_| bad())?;
                if v.is_finite() {
                    Ok(Some(v))
                } else {
                    Err(bad())
                }
            }
            ColumnKind::Categorical => match self.category_index(raw) {
                Some(i) => Ok(Some(i as f64)),
                None => Err(Error::UndeclaredCategory {
                    row,
                    column: self.name.clone(),
                    value: raw.to_string(),
                }),
            },
            ColumnKind::Binary => {
                if let Some(i) = self.category_index(raw) {
                    return Ok(Some(i as f64));
                }
                match raw.to_ascii_lowercase().as_str() {
                    "0" | "false" | "no" => Ok(Some(0.0)),
                    "1" | "true" | "yes" => Ok(Some(1.0)),
                    _ if !self.categories.is_empty() => Err(Error::UndeclaredCategory {
                        row,
                        column: self.name.clone(),
                        value: raw.to_string(),
                    }),
                    _ => Err(bad()),
                }
            }
        }
    }

    /// Renders a cell value back to its textual form.
    pub fn format_cell(&self, value: f64) -> String {
        match self.kind {
            ColumnKind::Continuous => format!("{value}"),
            ColumnKind::Categorical => self.categories[value as usize].clone(),
            ColumnKind::Binary => {
                if self.categories.len() == 2 {
                    self.categories[value as usize].clone()
                } else {
                    format!("{}", value as u8)
                }
            }
        }
    }
}

/// Ordered column declarations with the treatment/cluster invariants checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let schema = Self { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.columns.iter().enumerate() {
            c.validate()?;
            if self.columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Schema(format!("duplicate column `{}`", c.name)));
            }
        }
        for role in [ColumnRole::Treatment, ColumnRole::Cluster] {
            let count = self.columns.iter().filter(|c| c.role == role).count();
            if count != 1 {
                return Err(Error::Schema(format!(
                    "exactly one {role:?} column required, found {count}"
                )));
            }
        }
        let t = &self.columns[self.treatment_index()];
        if t.kind != ColumnKind::Binary {
            return Err(Error::Schema(format!("treatment column `{}` must be binary", t.name)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::UnknownColumn {
            column: name.to_string(),
            row: None,
        })
    }

    pub fn treatment_index(&self) -> usize {
        self.columns
            .iter()
            .position(|c| c.role == ColumnRole::Treatment)
            .expect("validated schema has a treatment column")
    }

    pub fn cluster_index(&self) -> usize {
        self.columns
            .iter()
            .position(|c| c.role == ColumnRole::Cluster)
            .expect("validated schema has a cluster column")
    }

    pub fn column(&self, i: usize) -> &ColumnSpec {
        &self.columns[i]
    }
}

/// Treated/control retention rule: treated rows are kept, control rows only
/// when their non-uptake reason is in `retain_reasons`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRules {
    pub treatment: String,
    pub reason: String,
    pub retain_reasons: Vec<String>,
}

/// Versioned schema document accompanying a cohort CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_manifest_version")]
    pub version: u32,
    #[serde(default)]
    pub missing_codes: Vec<String>,
    pub columns: Vec<ColumnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleRules>,
}

fn default_manifest_version() -> u32 {
    1
}

impl Manifest {
    pub fn new(schema: &Schema, missing_codes: &[&str]) -> Self {
        Self {
            version: 1,
            missing_codes: missing_codes.iter().map(|s| s.to_string()).collect(),
            columns: schema.columns.clone(),
            sample: None,
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::new(self.columns.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Empirical,
    Imputed,
    Synthetic,
    Simulated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    schema: Schema,
    columns: Vec<Vec<f64>>,
    missing: Vec<Vec<bool>>,
    provenance: Provenance,
}

impl CohortTable {
    /// Builds a table from column vectors; `NaN` cells are treated as missing.
    pub fn new(schema: Schema, columns: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        let missing = columns.iter().map(|c| c.iter().map(|v| v.is_nan()).collect()).collect();
        Self::with_mask(schema, columns, missing, provenance)
    }

    pub fn with_mask(
        schema: Schema,
        columns: Vec<Vec<f64>>,
        missing: Vec<Vec<bool>>,
        provenance: Provenance,
    ) -> Result<Self> {
        if columns.len() != schema.len() || missing.len() != schema.len() {
            return Err(Error::Schema(format!(
                "{} columns supplied for a schema of {}",
                columns.len(),
                schema.len()
            )));
        }
        let n = columns.first().map_or(0, Vec::len);
        for (j, (col, mask)) in columns.iter().zip(&missing).enumerate() {
            let spec = schema.column(j);
            if col.len() != n || mask.len() != n {
                return Err(Error::Schema(format!("column `{}` has wrong length", spec.name)));
            }
            for (i, (&v, &m)) in col.iter().zip(mask).enumerate() {
                if m != v.is_nan() {
                    return Err(Error::Schema(format!(
                        "missing mask disagrees with cell ({i}, `{}`)",
                        spec.name
                    )));
                }
                if m {
                    continue;
                }
                if let Some(k) = spec.levels() {
                    if v.fract() != 0.0 || v < 0.0 || v as usize >= k {
                        return Err(Error::UndeclaredCategory {
                            row: i,
                            column: spec.name.clone(),
                            value: format!("{v}"),
                        });
                    }
                } else if !v.is_finite() {
                    return Err(Error::BadCell {
                        row: i,
                        column: spec.name.clone(),
                        value: format!("{v}"),
                    });
                }
            }
        }
        Ok(Self {
            schema,
            columns,
            missing,
            provenance,
        })
    }

    pub fn empty(schema: Schema, provenance: Provenance) -> Self {
        let k = schema.len();
        Self {
            schema,
            columns: vec![Vec::new(); k],
            missing: vec![Vec::new(); k],
            provenance,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = provenance;
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn column_by_name(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.columns[self.schema.require(name)?])
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn missing_mask(&self, j: usize) -> &[bool] {
        &self.missing[j]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[col][row]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    pub fn missing_count(&self, col: usize) -> usize {
        self.missing[col].iter().filter(|&&m| m).count()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().flatten().any(|&m| m)
    }

    /// Label of a discrete cell, or `None` when missing or continuous.
    pub fn label(&self, row: usize, col: usize) -> Option<&str> {
        let spec = self.schema.column(col);
        if self.missing[col][row] || spec.categories.is_empty() {
            return None;
        }
        Some(spec.categories[self.columns[col][row] as usize].as_str())
    }

    pub fn treatment(&self) -> &[f64] {
        &self.columns[self.schema.treatment_index()]
    }

    pub fn clusters(&self) -> &[f64] {
        &self.columns[self.schema.cluster_index()]
    }

    /// Cluster label per row (categorical label or formatted value).
    pub fn cluster_labels(&self) -> Vec<String> {
        let j = self.schema.cluster_index();
        let spec = self.schema.column(j);
        self.columns[j].iter().map(|&v| spec.format_cell(v)).collect()
    }

    /// Rows at the given indices, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            missing: self
                .missing
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            provenance: self.provenance,
        }
    }

    /// Row-wise concatenation of tables sharing a schema.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.schema != other.schema {
            return Err(Error::Schema("cannot concatenate tables with different schemas".into()));
        }
        let mut out = self.clone();
        for j in 0..out.columns.len() {
            out.columns[j].extend_from_slice(&other.columns[j]);
            out.missing[j].extend_from_slice(&other.missing[j]);
        }
        Ok(out)
    }

    /// Returns a copy with one column appended.
    pub fn with_column(&self, spec: ColumnSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.n_rows() {
            return Err(Error::Schema(format!(
                "column `{}` has {} values for {} rows",
                spec.name,
                values.len(),
                self.n_rows()
            )));
        }
        let mut cols = self.schema.columns.clone();
        cols.push(spec);
        let schema = Schema::new(cols)?;
        let mut columns = self.columns.clone();
        columns.push(values);
        Self::new(schema, columns, self.provenance)
    }

    /// Replaces the value of a cell, clearing its missing flag.
    pub(crate) fn set(&mut self, row: usize, col: usize, value: f64) {
        self.columns[col][row] = value;
        self.missing[col][row] = value.is_nan();
    }

    /// Writes the table as CSV. Missing cells are written as `missing_code`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W, missing_code: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.schema.columns.iter().map(|c| c.name.as_str()))?;
        for i in 0..self.n_rows() {
            let record: Vec<String> = (0..self.n_cols())
                .map(|j| {
                    if self.missing[j][i] {
                        missing_code.to_string()
                    } else {
                        self.schema.column(j).format_cell(self.columns[j][i])
                    }
                })
                .collect();
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, missing_code: &str) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), missing_code)
    }
}

/// Reads a cohort CSV, validating every cell against the manifest.
pub fn read_cohort<R: Read>(reader: R, manifest: &Manifest) -> Result<CohortTable> {
    let schema = manifest.schema()?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut positions = Vec::with_capacity(header.len());
    for name in &header {
        positions.push(schema.index_of(name).ok_or_else(|| Error::UnknownColumn {
            column: name.clone(),
            row: None,
        })?);
    }
    for spec in &schema.columns {
        if !header.contains(&spec.name) {
            return Err(Error::Schema(format!("column `{}` absent from file", spec.name)));
        }
    }
    let k = schema.len();
    let mut columns = vec![Vec::new(); k];
    let mut missing = vec![Vec::new(); k];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row,
                found: record.len(),
                expected: header.len(),
            });
        }
        for (field, &j) in record.iter().zip(&positions) {
            let cell = schema.column(j).parse_cell(field, &manifest.missing_codes, row)?;
            columns[j].push(cell.unwrap_or(f64::NAN));
            missing[j].push(cell.is_none());
        }
    }
    CohortTable::with_mask(schema, columns, missing, Provenance::Empirical)
}

pub fn load_cohort(csv_path: impl AsRef<Path>, manifest: &Manifest) -> Result<CohortTable> {
    let file = std::fs::File::open(csv_path)?;
    read_cohort(std::io::BufReader::new(file), manifest)
}

/// Keeps treated rows, and control rows whose reason is retained. Rows with
/// a missing treatment (or a missing reason on a control row) are dropped.
pub fn select_analysis_sample(table: &CohortTable, rules: &SampleRules) -> Result<CohortTable> {
    let schema = table.schema();
    let t = schema.require(&rules.treatment)?;
    let r = schema.require(&rules.reason)?;
    let reason_spec = schema.column(r);
    let retained: Vec<Option<usize>> = rules
        .retain_reasons
        .iter()
        .map(|label| reason_spec.category_index(label))
        .collect();
    let rows: Vec<usize> = (0..table.n_rows())
        .filter(|&i| {
            if table.is_missing(i, t) {
                return false;
            }
            if table.value(i, t) == 1.0 {
                return true;
            }
            if table.is_missing(i, r) {
                return false;
            }
            let v = table.value(i, r);
            match reason_spec.kind {
                ColumnKind::Continuous => rules.retain_reasons.iter().any(|s| s.parse::<f64>().ok() == Some(v)),
                _ => retained.contains(&Some(v as usize)),
            }
        })
        .collect();
    Ok(table.select_rows(&rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterEconomics {
    /// Hourly labor cost (currency/hour).
    pub wage: f64,
    /// Purchasing-power-parity deflator.
    pub ppp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomicParams {
    pub clusters: BTreeMap<String, ClusterEconomics>,
    #[serde(default = "default_hours_cap")]
    pub hours_cap: f64,
}

fn default_hours_cap() -> f64 {
    DEFAULT_HOURS_CAP
}

impl EconomicParams {
    pub fn new(clusters: BTreeMap<String, ClusterEconomics>, hours_cap: f64) -> Result<Self> {
        let p = Self { clusters, hours_cap };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hours_cap > 0.0) {
            return invalid(format!("hours_cap must be positive, got {}", self.hours_cap));
        }
        for (label, c) in &self.clusters {
            if !(c.wage > 0.0) || !(c.ppp > 0.0) {
                return invalid(format!(
                    "cluster `{label}`: wage and ppp must be positive (wage {}, ppp {})",
                    c.wage, c.ppp
                ));
            }
        }
        Ok(())
    }

    /// Parses either `{"clusters": {...}, "hours_cap": h}` or a bare map
    /// keyed by cluster label.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let params = if value.get("clusters").is_some() {
            serde_json::from_value(value)?
        } else {
            Self {
                clusters: serde_json::from_value(value)?,
                hours_cap: DEFAULT_HOURS_CAP,
            }
        };
        params.validate()?;
        Ok(params)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, cluster: &str) -> Result<&ClusterEconomics> {
        self.clusters
            .get(cluster)
            .ok_or_else(|| Error::InvalidArgument(format!("no economic parameters for cluster `{cluster}`")))
    }
}

/// Annual-hours band per care-frequency category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HoursBands(pub BTreeMap<String, (f64, f64)>);

impl Default for HoursBands {
    fn default() -> Self {
        let bands = [
            ("none", (0.0, 0.0)),
            ("about every day", (4.0 * 365.0, 16.0 * 365.0)),
            ("about every week", (4.0 * 52.0, 16.0 * 52.0)),
            ("about every month", (4.0 * 12.0, 16.0 * 12.0)),
            ("less often", (1.0, 4.0 * 12.0)),
        ];
        Self(bands.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }
}

/// Draws annual care hours uniformly within the category's band, clamped to
/// `[0, hours_cap]`.
pub fn smooth_care_hours(
    freq_category: &str,
    rng: &mut crate::rng::Rng,
    bands: &HoursBands,
    params: &EconomicParams,
) -> Result<f64> {
    let &(lo, hi) = bands
        .0
        .get(freq_category)
        .ok_or_else(|| Error::InvalidArgument(format!("unmapped care category `{freq_category}`")))?;
    if !(lo <= hi) {
        return invalid(format!("band for `{freq_category}` is inverted"));
    }
    let draw = if hi > lo { rng.random_range(lo..hi) } else { lo };
    Ok(draw.clamp(0.0, params.hours_cap))
}

/// Net burden in purchasing-power-standard units:
/// `oop / ppp + hours * wage / ppp`.
pub fn monetize_burden(oop: f64, hours: f64, wage: f64, ppp: f64) -> Result<f64> {
    if !(ppp > 0.0) {
        return invalid(format!("ppp must be positive, got {ppp}"));
    }
    if hours < 0.0 {
        return invalid(format!("hours must be nonnegative, got {hours}"));
    }
    Ok(oop / ppp + hours * wage / ppp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTriple {
    pub oop: f64,
    pub hours: f64,
    pub net_burden: f64,
}

impl OutcomeTriple {
    pub fn new(oop: f64, hours: f64, econ: &ClusterEconomics, hours_cap: f64) -> Result<Self> {
        if !(0.0..=hours_cap).contains(&hours) {
            return invalid(format!("hours {hours} outside [0, {hours_cap}]"));
        }
        Ok(Self {
            oop,
            hours,
            net_burden: monetize_burden(oop, hours, econ.wage, econ.ppp)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn manifest() -> Manifest {
        let schema = Schema::new(vec![
            ColumnSpec::binary("pc", ColumnRole::Treatment),
            ColumnSpec::categorical("country", ColumnRole::Cluster, &["AT", "IT"]),
            ColumnSpec::categorical("grade", ColumnRole::Covariate, &["A", "B"]),
            ColumnSpec::continuous("oop", ColumnRole::Outcome),
        ])
        .unwrap();
        Manifest::new(&schema, &["-9"])
    }

    #[test]
    fn loads_valid_file() {
        let csv = "pc,country,grade,oop\n1,AT,A,10\n0,IT,B,2.5\n1,IT,A,0\n";
        let t = read_cohort(csv.as_bytes(), &manifest()).unwrap();
        assert_eq!(t.n_rows(), 3);
        assert!(!t.has_missing());
        assert_eq!(t.label(1, 2), Some("B"));
        assert_eq!(t.value(1, 3), 2.5);
    }

    #[test]
    fn missing_code_sets_mask() {
        let csv = "pc,country,grade,oop\n1,AT,A,-9\n";
        let t = read_cohort(csv.as_bytes(), &manifest()).unwrap();
        assert!(t.is_missing(0, 3));
        assert!(t.value(0, 3).is_nan());
        assert!(!t.is_missing(0, 2));
    }

    #[test]
    fn undeclared_category_names_row_and_column() {
        let csv = "pc,country,grade,oop\n1,AT,A,1\n0,AT,Z,1\n";
        let err = read_cohort(csv.as_bytes(), &manifest()).unwrap_err();
        match err {
            Error::UndeclaredCategory { row, column, value } => {
                assert_eq!((row, column.as_str(), value.as_str()), (1, "grade", "Z"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_and_ragged_rejected() {
        let csv = "pc,country,grade,oop,extra\n1,AT,A,1,3\n";
        assert!(matches!(
            read_cohort(csv.as_bytes(), &manifest()),
            Err(Error::UnknownColumn { .. })
        ));
        let csv = "pc,country,grade,oop\n1,AT,A\n";
        assert!(matches!(
            read_cohort(csv.as_bytes(), &manifest()),
            Err(Error::RaggedRow { row: 0, .. })
        ));
    }

    #[test]
    fn schema_requires_single_treatment_and_cluster() {
        let err = Schema::new(vec![ColumnSpec::continuous("x", ColumnRole::Covariate)]);
        assert!(err.is_err());
        let err = Schema::new(vec![
            ColumnSpec::binary("t", ColumnRole::Treatment),
            ColumnSpec::categorical("c", ColumnRole::Cluster, &["only"]),
        ]);
        assert!(err.is_err());
    }

    fn sample_table() -> (CohortTable, SampleRules) {
        let schema = Schema::new(vec![
            ColumnSpec::binary("pc", ColumnRole::Treatment),
            ColumnSpec::categorical("country", ColumnRole::Cluster, &["AT", "IT"]),
            ColumnSpec::categorical(
                "reason",
                ColumnRole::WeightFree,
                &["availability", "expensiveness", "personal-choice"],
            ),
        ])
        .unwrap();
        let t = CohortTable::new(
            schema,
            vec![
                vec![1.0, 0.0, 0.0, 0.0, 1.0],
                vec![0.0, 1.0, 0.0, 1.0, 0.0],
                vec![2.0, 1.0, 2.0, 0.0, f64::NAN],
            ],
            Provenance::Empirical,
        )
        .unwrap();
        let rules = SampleRules {
            treatment: "pc".into(),
            reason: "reason".into(),
            retain_reasons: vec!["availability".into(), "expensiveness".into()],
        };
        (t, rules)
    }

    #[test]
    fn sample_selection_rule() {
        let (t, rules) = sample_table();
        let s = select_analysis_sample(&t, &rules).unwrap();
        // treated rows 0 and 4 kept, control "expensiveness" (1) and
        // "availability" (3) kept, "personal-choice" (2) dropped
        assert_eq!(s.n_rows(), 4);
        assert_eq!(s.treatment(), &[1.0, 0.0, 0.0, 1.0]);
        // missing cells hold NaN, so compare the rendered tables
        let again = select_analysis_sample(&s, &rules).unwrap();
        assert_eq!(format!("{again:?}"), format!("{s:?}"));
    }

    #[test]
    fn sample_selection_requires_columns() {
        let (t, mut rules) = sample_table();
        rules.reason = "xt754".into();
        assert!(matches!(
            select_analysis_sample(&t, &rules),
            Err(Error::UnknownColumn { .. })
        ));
    }

    fn params() -> EconomicParams {
        let mut m = BTreeMap::new();
        m.insert("AT".to_string(), ClusterEconomics { wage: 20.0, ppp: 1.0 });
        EconomicParams::new(m, DEFAULT_HOURS_CAP).unwrap()
    }

    #[test]
    fn care_hours_bands() {
        let p = params();
        let mut r = rng::stream(1);
        assert_eq!(
            smooth_care_hours("none", &mut r, &HoursBands::default(), &p).unwrap(),
            0.0
        );
        let mut bands = HoursBands::default();
        bands.0.insert("round the clock".into(), (6000.0, 8760.0));
        let h = smooth_care_hours("round the clock", &mut r, &bands, &p).unwrap();
        assert_eq!(h, 5840.0);
        let a = smooth_care_hours("about every week", &mut rng::stream(9), &bands, &p).unwrap();
        let b = smooth_care_hours("about every week", &mut rng::stream(9), &bands, &p).unwrap();
        assert_eq!(a, b);
        assert!(smooth_care_hours("hourly", &mut r, &bands, &p).is_err());
    }

    #[test]
    fn care_hours_stay_in_range() {
        let p = params();
        let mut bands = HoursBands::default();
        bands.0.insert("over".into(), (5000.0, 9000.0));
        let mut r = rng::stream(2);
        for cat in bands.0.keys().cloned().collect::<Vec<_>>() {
            for _ in 0..100_000 {
                let h = smooth_care_hours(&cat, &mut r, &bands, &p).unwrap();
                assert!((0.0..=p.hours_cap).contains(&h));
            }
        }
    }

    #[test]
    fn monetization_examples() {
        assert_eq!(monetize_burden(0.0, 0.0, 20.0, 1.0).unwrap(), 0.0);
        assert!((monetize_burden(1200.0, 100.0, 24.0, 1.2).unwrap() - 3000.0).abs() < 1e-9);
        assert_eq!(monetize_burden(500.0, 0.0, 33.0, 1.0).unwrap(), 500.0);
        assert!(monetize_burden(1.0, 1.0, 1.0, 0.0).is_err());
        let base = monetize_burden(700.0, 40.0, 18.0, 0.8).unwrap();
        assert_eq!(monetize_burden(700.0, 40.0, 18.0, 1.6).unwrap(), base / 2.0);
    }

    #[test]
    fn outcome_triple_invariants() {
        let econ = ClusterEconomics { wage: 24.0, ppp: 1.2 };
        let t = OutcomeTriple::new(1200.0, 100.0, &econ, DEFAULT_HOURS_CAP).unwrap();
        assert!((t.net_burden - 3000.0).abs() < 1e-9);
        assert!(OutcomeTriple::new(1.0, 6000.0, &econ, DEFAULT_HOURS_CAP).is_err());
    }

    #[test]
    fn economic_params_json() {
        let p = EconomicParams::from_json(r#"{"AT": {"wage": 30.5, "ppp": 1.1}}"#).unwrap();
        assert_eq!(p.hours_cap, DEFAULT_HOURS_CAP);
        assert_eq!(p.get("AT").unwrap().wage, 30.5);
        let p =
            EconomicParams::from_json(r#"{"hours_cap": 4000, "clusters": {"IT": {"wage": 20, "ppp": 0.9}}}"#).unwrap();
        assert_eq!(p.hours_cap, 4000.0);
        assert!(EconomicParams::from_json(r#"{"AT": {"wage": 30.5, "ppp": 0}}"#).is_err());
    }

    #[test]
    fn transform_examples() {
        assert_eq!(transform_monetary(0.0, Transform::Arcsinh).unwrap(), 0.0);
        let v = transform_monetary(-1.0, Transform::Arcsinh).unwrap();
        assert!((v - (2f64.sqrt() - 1.0).ln()).abs() < 1e-12);
        assert!((v + 0.881374).abs() < 1e-6);
        assert_eq!(transform_monetary(0.0, Transform::Log1p).unwrap(), 0.0);
        assert!(transform_monetary(-0.5, Transform::Log1p).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let csv = "pc,country,grade,oop\n1,AT,A,-9\n0,IT,B,2.5\n";
        let m = manifest();
        let t = read_cohort(csv.as_bytes(), &m).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, "-9").unwrap();
        let back = read_cohort(buf.as_slice(), &m).unwrap();
        assert_eq!(back.n_rows(), 2);
        assert!(back.is_missing(0, 3));
        assert_eq!(back.value(1, 3), 2.5);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn arcsinh_round_trip(v in -1e7f64..1e7) {
                let back = inverse_transform(transform_monetary(v, Transform::Arcsinh).unwrap(), Transform::Arcsinh).unwrap();
                prop_assert!((back - v).abs() <= 1e-9 * v.abs().max(1e-300) || (back - v).abs() < 1e-12);
            }

            #[test]
            fn log1p_round_trip(v in 0f64..1e7) {
                let back = inverse_transform(transform_monetary(v, Transform::Log1p).unwrap(), Transform::Log1p).unwrap();
                prop_assert!((back - v).abs() <= 1e-9 * v.abs() || (back - v).abs() < 1e-12);
            }

            #[test]
            fn monetization_is_linear(oop in 0f64..1e5, h in 0f64..5840.0, w in 1f64..60.0, ppp in 0.2f64..2.0, s in 0.1f64..10.0) {
                let base = monetize_burden(oop, h, w, ppp).unwrap();
                let scaled = monetize_burden(oop * s, h, w, ppp).unwrap() - monetize_burden(0.0, h, w, ppp).unwrap();
                prop_assert!((scaled - s * oop / ppp).abs() <= 1e-9 * (1.0 + scaled.abs()));
                let halved = monetize_burden(oop, h, w, 2.0 * ppp).unwrap();
                prop_assert!((halved - base / 2.0).abs() <= 1e-12 * (1.0 + base.abs()));
            }
        }
    }
}
