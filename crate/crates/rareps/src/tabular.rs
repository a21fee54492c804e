//! Typed covariate data: schema, dataset storage, complete-case filtering and
//! reference-level dummy encoding into design matrices.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("duplicate variable name `{0}`")]
    DuplicateName(String),
    #[error("invalid schema: {0}")]
    BadSchema(String),
    #[error("column `{column}` has non-binary value `{value}`")]
    NonBinary { column: String, value: String },
    #[error("variable `{variable}`: `{value}` is not a declared level")]
    InvalidLevel { variable: String, value: String },
    #[error("cell ({row}, {column}) is not parseable: `{value}`")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("header does not match schema: {0}")]
    HeaderMismatch(String),
    #[error("no rows remain after complete-case filtering")]
    EmptyAfterFiltering,
    #[error("missing values present in encoded variables; run complete_case first")]
    MissingInEncode,
    #[error("column length mismatch for `{0}`")]
    LengthMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("schema file: {0}")]
    SchemaParse(#[from] serde_json::Error),
}

/// Statistical type of one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VariableKind {
    Continuous,
    Binary,
    /// Labels double as the level count; at least three, unique.
    Categorical { labels: Vec<String> },
}

impl VariableKind {
    pub fn level_count(&self) -> Option<usize> {
        match self {
            VariableKind::Categorical { labels } => Some(labels.len()),
            _ => None,
        }
    }
}

/// One schema entry. `reference_level` is only meaningful for categoricals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub reference_level: usize,
}

/// Ordered, name-unique covariate schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    entries: Vec<SchemaEntry>,
}

impl CovariateSchema {
    pub fn new(entries: Vec<SchemaEntry>) -> Result<Self, DataError> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|p| p.name == e.name) {
                return Err(DataError::DuplicateName(e.name.clone()));
            }
            if let VariableKind::Categorical { labels } = &e.kind {
                if labels.len() < 3 {
                    return Err(DataError::BadSchema(format!(
                        "categorical `{}` needs at least 3 levels",
                        e.name
                    )));
                }
                for (j, l) in labels.iter().enumerate() {
                    if labels[..j].contains(l) {
                        return Err(DataError::BadSchema(format!(
                            "categorical `{}` has duplicate level `{l}`",
                            e.name
                        )));
                    }
                }
                if e.reference_level >= labels.len() {
                    return Err(DataError::BadSchema(format!(
                        "reference level {} out of range for `{}`",
                        e.reference_level, e.name
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SchemaEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn entry(&self, name: &str) -> Result<&SchemaEntry, DataError> {
        self.index_of(name)
            .map(|i| &self.entries[i])
            .ok_or_else(|| DataError::UnknownVariable(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }
}

/// One covariate column. Categorical cells store the level index as f64.
/// `missing` is empty when the column is complete.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl Column {
    pub fn complete(values: Vec<f64>) -> Self {
        Column {
            values,
            missing: Vec::new(),
        }
    }

    pub fn is_missing(&self, row: usize) -> bool {
        !self.missing.is_empty() && self.missing[row]
    }
}

/// Exposure, outcome and covariates sharing one row count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: CovariateSchema,
    pub exposure: Vec<u8>,
    pub outcome: Vec<u8>,
    columns: Vec<Column>,
    exposure_missing: Vec<bool>,
    outcome_missing: Vec<bool>,
}

impl Dataset {
    /// Build a dataset with no missing cells (the simulation path).
    pub fn complete(
        schema: CovariateSchema,
        exposure: Vec<u8>,
        outcome: Vec<u8>,
        columns: Vec<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let n = exposure.len();
        if outcome.len() != n {
            return Err(DataError::LengthMismatch("outcome".into()));
        }
        if columns.len() != schema.len() {
            return Err(DataError::LengthMismatch("covariates".into()));
        }
        for (e, c) in schema.entries().iter().zip(&columns) {
            if c.len() != n {
                return Err(DataError::LengthMismatch(e.name.clone()));
            }
        }
        let ds = Dataset {
            schema,
            exposure,
            outcome,
            columns: columns.into_iter().map(Column::complete).collect(),
            exposure_missing: Vec::new(),
            outcome_missing: Vec::new(),
        };
        ds.validate_cells()?;
        Ok(ds)
    }

    fn validate_cells(&self) -> Result<(), DataError> {
        for (e, col) in self.schema.entries().iter().zip(&self.columns) {
            match &e.kind {
                VariableKind::Binary => {
                    for (i, &v) in col.values.iter().enumerate() {
                        if !col.is_missing(i) && v != 0.0 && v != 1.0 {
                            return Err(DataError::NonBinary {
                                column: e.name.clone(),
                                value: v.to_string(),
                            });
                        }
                    }
                }
                VariableKind::Categorical { labels } => {
                    for (i, &v) in col.values.iter().enumerate() {
                        if !col.is_missing(i) && (v.fract() != 0.0 || v < 0.0 || v >= labels.len() as f64)
                        {
                            return Err(DataError::InvalidLevel {
                                variable: e.name.clone(),
                                value: v.to_string(),
                            });
                        }
                    }
                }
                VariableKind::Continuous => {}
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.exposure.len()
    }

    pub fn column(&self, name: &str) -> Result<&Column, DataError> {
        let idx = self
            .schema
            .index_of(name)
            .ok_or_else(|| DataError::UnknownVariable(name.to_string()))?;
        Ok(&self.columns[idx])
    }

    fn row_is_complete(&self, row: usize, column_indices: &[usize]) -> bool {
        if !self.exposure_missing.is_empty() && self.exposure_missing[row] {
            return false;
        }
        if !self.outcome_missing.is_empty() && self.outcome_missing[row] {
            return false;
        }
        column_indices.iter().all(|&c| !self.columns[c].is_missing(row))
    }

    /// Rows with no missing value among `variables`, exposure and outcome.
    /// Errors when nothing remains.
    pub fn complete_case(&self, variables: &[String]) -> Result<Dataset, DataError> {
        let mut idxs = Vec::with_capacity(variables.len());
        for v in variables {
            idxs.push(
                self.schema
                    .index_of(v)
                    .ok_or_else(|| DataError::UnknownVariable(v.clone()))?,
            );
        }
        let keep: Vec<usize> = (0..self.n())
            .filter(|&r| self.row_is_complete(r, &idxs))
            .collect();
        if keep.is_empty() {
            return Err(DataError::EmptyAfterFiltering);
        }
        if keep.len() == self.n() {
            return Ok(self.clone());
        }
        let take_mask = |m: &Vec<bool>| -> Vec<bool> {
            if m.is_empty() {
                Vec::new()
            } else {
                keep.iter().map(|&r| m[r]).collect()
            }
        };
        Ok(Dataset {
            schema: self.schema.clone(),
            exposure: keep.iter().map(|&r| self.exposure[r]).collect(),
            outcome: keep.iter().map(|&r| self.outcome[r]).collect(),
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    values: keep.iter().map(|&r| c.values[r]).collect(),
                    missing: take_mask(&c.missing),
                })
                .collect(),
            exposure_missing: take_mask(&self.exposure_missing),
            outcome_missing: take_mask(&self.outcome_missing),
        })
    }

    /// Dummy-encode `variables` into a design matrix: intercept first, then
    /// the exposure column when requested, then each variable's block in the
    /// order given. Categorical variables contribute one 0/1 column per
    /// non-reference level. Columns that are constant on these rows are
    /// dropped and reported in `DesignMatrix::dropped`.
    pub fn encode(
        &self,
        variables: &[String],
        include_exposure: bool,
    ) -> Result<DesignMatrix, DataError> {
        let n = self.n();
        let mut names: Vec<String> = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut owners: Vec<String> = Vec::new(); // group name per column

        names.push("(intercept)".into());
        cols.push(vec![1.0; n]);
        owners.push("(intercept)".into());
        if include_exposure {
            names.push("exposure".into());
            cols.push(self.exposure.iter().map(|&a| a as f64).collect());
            owners.push("exposure".into());
        }

        let mut dropped: Vec<String> = Vec::new();
        for v in variables {
            let entry = self.schema.entry(v)?;
            let col = self.column(v)?;
            if !col.missing.is_empty() && col.missing.iter().any(|&m| m) {
                return Err(DataError::MissingInEncode);
            }
            match &entry.kind {
                VariableKind::Continuous | VariableKind::Binary => {
                    if is_constant(&col.values) {
                        dropped.push(v.clone());
                        continue;
                    }
                    names.push(v.clone());
                    cols.push(col.values.clone());
                    owners.push(v.clone());
                }
                VariableKind::Categorical { labels } => {
                    let mut emitted = 0usize;
                    for level in 0..labels.len() {
                        if level == entry.reference_level {
                            continue;
                        }
                        let dummy: Vec<f64> = col
                            .values
                            .iter()
                            .map(|&x| if x as usize == level { 1.0 } else { 0.0 })
                            .collect();
                        if is_constant(&dummy) {
                            dropped.push(format!("{v}:{}", labels[level]));
                            continue;
                        }
                        names.push(format!("{v}:{}", labels[level]));
                        cols.push(dummy);
                        owners.push(v.clone());
                        emitted += 1;
                    }
                    if emitted == 0 {
                        // Whole variable degenerate on these rows.
                        dropped.push(v.clone());
                    }
                }
            }
        }

        Ok(DesignMatrix::from_columns(names, owners, cols, dropped, true))
    }
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

/// Named block of design columns; a categorical's dummies form one group.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl ColumnGroup {
    pub fn columns(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Row-major dense design matrix with the group map used by grouped tests
/// and grouped variable selection.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    pub column_names: Vec<String>,
    pub groups: Vec<ColumnGroup>,
    pub includes_intercept: bool,
    pub dropped: Vec<String>,
}

impl DesignMatrix {
    fn from_columns(
        names: Vec<String>,
        owners: Vec<String>,
        cols: Vec<Vec<f64>>,
        dropped: Vec<String>,
        includes_intercept: bool,
    ) -> Self {
        let n_cols = cols.len();
        let n_rows = cols.first().map_or(0, Vec::len);
        let mut data = vec![0.0; n_rows * n_cols];
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                data[i * n_cols + j] = v;
            }
        }
        let mut groups: Vec<ColumnGroup> = Vec::new();
        for (j, owner) in owners.iter().enumerate() {
            match groups.last_mut() {
                Some(g) if g.name == *owner => g.len += 1,
                _ => groups.push(ColumnGroup {
                    name: owner.clone(),
                    start: j,
                    len: 1,
                }),
            }
        }
        DesignMatrix {
            data,
            n_rows,
            n_cols,
            column_names: names,
            groups,
            includes_intercept,
            dropped,
        }
    }

    /// Assemble a design from raw columns, one group per column. Used for
    /// hand-built designs such as outcome-on-(intercept, exposure, score).
    pub fn from_raw(names: Vec<String>, cols: Vec<Vec<f64>>, includes_intercept: bool) -> Self {
        let owners = names.clone();
        Self::from_columns(names, owners, cols, Vec::new(), includes_intercept)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols + col]
    }

    pub fn group(&self, name: &str) -> Option<&ColumnGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Linear predictor X·beta.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.n_cols);
        (0..self.n_rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(beta)
                    .map(|(x, b)| x * b)
                    .sum::<f64>()
            })
            .collect()
    }
}

impl fmt::Display for DesignMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} x {} design [", self.n_rows, self.n_cols)?;
        write!(f, "{}]", self.column_names.join(", "))
    }
}

// ---------------------------------------------------------------------------
// File ingestion
// ---------------------------------------------------------------------------

/// Schema spec document: declares delimiter, missing token, the exposure and
/// outcome columns, and each analysis variable's kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSpec {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_missing_token")]
    pub missing_token: String,
    pub exposure: String,
    pub outcome: String,
    pub variables: Vec<VariableSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub levels: Option<Vec<String>>,
    #[serde(default)]
    pub reference: Option<String>,
}

fn default_delimiter() -> char {
    ','
}

fn default_missing_token() -> String {
    "NA".to_string()
}

impl SchemaSpec {
    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_schema(&self) -> Result<CovariateSchema, DataError> {
        let mut entries = Vec::with_capacity(self.variables.len());
        for v in &self.variables {
            let kind = match v.kind.as_str() {
                "continuous" => VariableKind::Continuous,
                "binary" => VariableKind::Binary,
                "categorical" => {
                    let labels = v.levels.clone().ok_or_else(|| {
                        DataError::BadSchema(format!("categorical `{}` needs levels", v.name))
                    })?;
                    VariableKind::Categorical { labels }
                }
                other => {
                    return Err(DataError::BadSchema(format!(
                        "unknown kind `{other}` for `{}`",
                        v.name
                    )))
                }
            };
            let reference_level = match (&kind, &v.reference) {
                (VariableKind::Categorical { labels }, Some(r)) => labels
                    .iter()
                    .position(|l| l == r)
                    .ok_or_else(|| DataError::InvalidLevel {
                        variable: v.name.clone(),
                        value: r.clone(),
                    })?,
                // First declared level is the reference by default.
                _ => 0,
            };
            entries.push(SchemaEntry {
                name: v.name.clone(),
                kind,
                reference_level,
            });
        }
        CovariateSchema::new(entries)
    }
}

/// Read a delimiter-separated data file with a header row against a schema
/// spec. Cells equal to the missing token become missing.
pub fn read_dataset(data_path: &Path, schema_path: &Path) -> Result<Dataset, DataError> {
    let spec = SchemaSpec::from_path(schema_path)?;
    let schema = spec.to_schema()?;
    let text = std::fs::read_to_string(data_path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| DataError::HeaderMismatch("empty file".into()))?
        .split(spec.delimiter)
        .map(|s| s.trim().to_string())
        .collect();

    let col_pos = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::HeaderMismatch(format!("column `{name}` not in header")))
    };
    let exp_pos = col_pos(&spec.exposure)?;
    let out_pos = col_pos(&spec.outcome)?;
    let var_pos: Vec<usize> = schema
        .entries()
        .iter()
        .map(|e| col_pos(&e.name))
        .collect::<Result<_, _>>()?;

    let mut exposure = Vec::new();
    let mut outcome = Vec::new();
    let mut exposure_missing = Vec::new();
    let mut outcome_missing = Vec::new();
    let mut columns: Vec<Column> = schema
        .entries()
        .iter()
        .map(|_| Column {
            values: Vec::new(),
            missing: Vec::new(),
        })
        .collect();

    for (row_idx, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(spec.delimiter).map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(DataError::HeaderMismatch(format!(
                "row {} has {} cells, header has {}",
                row_idx + 1,
                cells.len(),
                header.len()
            )));
        }
        let parse_binary = |pos: usize, name: &str| -> Result<(u8, bool), DataError> {
            let cell = cells[pos];
            if cell == spec.missing_token {
                return Ok((0, true));
            }
            match cell {
                "0" => Ok((0, false)),
                "1" => Ok((1, false)),
                other => Err(DataError::NonBinary {
                    column: name.to_string(),
                    value: other.to_string(),
                }),
            }
        };
        let (a, am) = parse_binary(exp_pos, &spec.exposure)?;
        let (y, ym) = parse_binary(out_pos, &spec.outcome)?;
        exposure.push(a);
        exposure_missing.push(am);
        outcome.push(y);
        outcome_missing.push(ym);

        for (entry, (&pos, col)) in schema
            .entries()
            .iter()
            .zip(var_pos.iter().zip(columns.iter_mut()))
        {
            let cell = cells[pos];
            if cell == spec.missing_token {
                col.values.push(f64::NAN);
                col.missing.push(true);
                continue;
            }
            let value = match &entry.kind {
                VariableKind::Continuous => {
                    cell.parse::<f64>().map_err(|_| DataError::BadCell {
                        row: row_idx + 1,
                        column: entry.name.clone(),
                        value: cell.to_string(),
                    })?
                }
                VariableKind::Binary => match cell {
                    "0" => 0.0,
                    "1" => 1.0,
                    other => {
                        return Err(DataError::NonBinary {
                            column: entry.name.clone(),
                            value: other.to_string(),
                        })
                    }
                },
                VariableKind::Categorical { labels } => labels
                    .iter()
                    .position(|l| l == cell)
                    .ok_or_else(|| DataError::InvalidLevel {
                        variable: entry.name.clone(),
                        value: cell.to_string(),
                    })? as f64,
            };
            col.values.push(value);
            col.missing.push(false);
        }
    }

    let ds = Dataset {
        schema,
        exposure,
        outcome,
        columns,
        exposure_missing,
        outcome_missing,
    };
    ds.validate_cells()?;
    Ok(ds)
}
