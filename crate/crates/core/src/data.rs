//! Tabular data, regression specifications and subsample masks.
//!
//! A [`Dataset`] is a set of equally long named columns whose cells may be
//! missing. Each [`Specification`] picks an outcome, a treatment, a list of
//! controls, optional weights and an optional row filter; [`build_mask`]
//! turns it into the set of rows the regression actually uses.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Filter;

/// Default floor for the share of rows a specification keeps before a
/// warning is raised.
pub const DEFAULT_SHARE_FLOOR: f64 = 0.05;

/// Maximum number of levels a categorical control may have.
pub const MAX_CATEGORICAL_LEVELS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match self {
            Column::Numeric(v) => v[row].is_none(),
            Column::Categorical(v) => v[row].is_none(),
        }
    }

    fn take(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical(v) => {
                Column::Categorical(rows.iter().map(|&r| v[r].clone()).collect())
            }
        }
    }
}

/// A cell value as seen by filters and cluster keys.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell<'a> {
    Number(f64),
    Text(&'a str),
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
    index: HashMap<String, usize>,
    row_count: usize,
    cluster_column: Option<String>,
}

fn is_missing_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

impl Dataset {
    pub fn new(named: Vec<(String, Column)>) -> Result<Self> {
        let row_count = named.first().map(|(_, c)| c.len()).unwrap_or(0);
        let mut names = Vec::with_capacity(named.len());
        let mut columns = Vec::with_capacity(named.len());
        let mut index = HashMap::new();
        for (name, col) in named {
            if col.len() != row_count {
                return Err(Error::InvalidData(format!(
                    "column \"{name}\" has {} rows, expected {row_count}",
                    col.len()
                )));
            }
            if index.insert(name.clone(), columns.len()).is_some() {
                return Err(Error::InvalidData(format!("duplicate column \"{name}\"")));
            }
            names.push(name);
            columns.push(col);
        }
        Ok(Dataset {
            names,
            columns,
            index,
            row_count,
            cluster_column: None,
        })
    }

    /// Builds a dataset of purely numeric, fully observed columns.
    pub fn from_numeric(named: Vec<(&str, Vec<f64>)>) -> Result<Self> {
        Self::new(
            named
                .into_iter()
                .map(|(n, v)| (n.to_string(), Column::Numeric(v.into_iter().map(Some).collect())))
                .collect(),
        )
    }

    /// Parses comma-delimited UTF-8 CSV with a header row. Empty cells and
    /// the literal `NA` are missing. A column whose observed cells all parse
    /// as numbers is numeric, otherwise categorical.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for record in rdr.records() {
            let record = record?;
            for (j, cell) in record.iter().enumerate() {
                raw[j].push(cell.to_string());
            }
        }
        let named = headers
            .into_iter()
            .zip(raw)
            .map(|(name, cells)| {
                let numeric: Option<Vec<Option<f64>>> = cells
                    .iter()
                    .map(|c| {
                        if is_missing_token(c) {
                            Some(None)
                        } else {
                            c.trim().parse::<f64>().ok().map(Some)
                        }
                    })
                    .collect();
                let col = match numeric {
                    Some(v) => Column::Numeric(v),
                    None => Column::Categorical(
                        cells
                            .into_iter()
                            .map(|c| (!is_missing_token(&c)).then(|| c.trim().to_string()))
                            .collect(),
                    ),
                };
                (name, col)
            })
            .collect();
        Self::new(named)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    /// Designates the cluster column. It must exist and have no missing cells.
    pub fn with_cluster_column(mut self, name: Option<&str>) -> Result<Self> {
        if let Some(name) = name {
            let col = self.column(name)?;
            if (0..self.row_count).any(|i| col.is_missing(i)) {
                return Err(Error::InvalidData(format!(
                    "cluster column \"{name}\" has missing cells"
                )));
            }
            self.cluster_column = Some(name.to_string());
        } else {
            self.cluster_column = None;
        }
        Ok(self)
    }

    pub fn row_count(&self) -> usize {
        self.row_count
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cluster_column(&self) -> Option<&str> {
        self.cluster_column.as_deref()
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.index
            .get(name)
            .map(|&i| &self.columns[i])
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[Option<f64>]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical(_) => Err(Error::NonNumericColumn(name.to_string())),
        }
    }

    pub fn cell(&self, name: &str, row: usize) -> Result<Cell<'_>> {
        Ok(match self.column(name)? {
            Column::Numeric(v) => v[row].map_or(Cell::Missing, Cell::Number),
            Column::Categorical(v) => v[row].as_deref().map_or(Cell::Missing, Cell::Text),
        })
    }

    /// New dataset made of the given rows, in order, repeats allowed.
    pub fn take_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.take(rows)).collect(),
            index: self.index.clone(),
            row_count: rows.len(),
            cluster_column: self.cluster_column.clone(),
        }
    }

    /// Row indices grouped by cluster key, clusters in order of first appearance.
    pub fn cluster_groups(&self) -> Result<Vec<Vec<usize>>> {
        let name = self
            .cluster_column
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("no cluster column set".into()))?;
        let col = self.column(name)?;
        let mut order: Vec<Vec<usize>> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for row in 0..self.row_count {
            let key = match col {
                Column::Numeric(v) => format!("{:?}", v[row]),
                Column::Categorical(v) => format!("{:?}", v[row]),
            };
            let slot = *seen.entry(key).or_insert_with(|| {
                order.push(Vec::new());
                order.len() - 1
            });
            order[slot].push(row);
        }
        Ok(order)
    }
}

/// One regression's recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Specification {
    pub label: String,
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub controls: Vec<String>,
    #[serde(default)]
    pub weights: Option<String>,
    #[serde(default, alias = "filter")]
    pub row_filter: Option<String>,
    #[serde(default)]
    pub is_main: bool,
    #[serde(default)]
    pub must_equal_main: bool,
}

impl Specification {
    pub fn new(label: &str, outcome: &str, treatment: &str, controls: &[&str]) -> Self {
        Specification {
            label: label.to_string(),
            outcome: outcome.to_string(),
            treatment: treatment.to_string(),
            controls: controls.iter().map(|s| s.to_string()).collect(),
            weights: None,
            row_filter: None,
            is_main: false,
            must_equal_main: false,
        }
    }

    pub fn main(mut self) -> Self {
        self.is_main = true;
        self
    }

    pub fn with_weights(mut self, column: &str) -> Self {
        self.weights = Some(column.to_string());
        self
    }

    pub fn with_filter(mut self, expr: &str) -> Self {
        self.row_filter = Some(expr.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidSpecification {
            label: self.label.clone(),
            reason: reason.to_string(),
        };
        if self.controls.contains(&self.outcome) {
            return Err(bad("outcome appears among the controls"));
        }
        if self.controls.contains(&self.treatment) {
            return Err(bad("treatment appears among the controls"));
        }
        if self.is_main && self.must_equal_main {
            return Err(bad("must_equal_main cannot be set on the main specification"));
        }
        Ok(())
    }

    /// Intercept, treatment and the listed controls (before categorical expansion).
    pub fn regressor_count(&self) -> usize {
        2 + self.controls.len()
    }
}

/// Checks the study-level invariants and returns the specifications with
/// the main one moved to index 0 (relative order of the checks is kept).
pub fn order_main_first(specs: &[Specification]) -> Result<Vec<Specification>> {
    let mains = specs.iter().filter(|s| s.is_main).count();
    if mains != 1 {
        return Err(Error::InvalidInput(format!(
            "exactly one main specification is required, found {mains}"
        )));
    }
    if specs.len() < 2 {
        return Err(Error::InvalidInput(
            "at least one robustness check is required".into(),
        ));
    }
    for s in specs {
        s.validate()?;
    }
    let mut out: Vec<Specification> = specs.iter().filter(|s| s.is_main).cloned().collect();
    out.extend(specs.iter().filter(|s| !s.is_main).cloned());
    Ok(out)
}

/// Rows used by one specification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsampleMask {
    pub included: Vec<bool>,
    pub n_j: usize,
    pub index_set: Vec<usize>,
}

impl SubsampleMask {
    pub fn from_flags(included: Vec<bool>) -> Self {
        let index_set: Vec<usize> = included
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect();
        SubsampleMask {
            n_j: index_set.len(),
            included,
            index_set,
        }
    }

    /// Errors unless the subsample has at least `regressors + 2` rows.
    pub fn require_rows(&self, label: &str, regressors: usize) -> Result<()> {
        let required = regressors + 2;
        if self.n_j < required {
            return Err(Error::InsufficientRows {
                label: label.to_string(),
                n_j: self.n_j,
                required,
            });
        }
        Ok(())
    }
}

/// Marks the rows where outcome, treatment, every control and the weight
/// are observed and the row filter passes.
///
/// The row-count floor is not enforced here; estimation calls
/// [`SubsampleMask::require_rows`].
pub fn build_mask(dataset: &Dataset, spec: &Specification) -> Result<SubsampleMask> {
    spec.validate()?;
    let mut referenced: Vec<&Column> = Vec::with_capacity(spec.controls.len() + 3);
    referenced.push(dataset.column(&spec.outcome)?);
    referenced.push(dataset.column(&spec.treatment)?);
    for c in &spec.controls {
        referenced.push(dataset.column(c)?);
    }
    if let Some(w) = &spec.weights {
        referenced.push(dataset.column(w)?);
    }
    dataset.numeric(&spec.outcome)?;
    dataset.numeric(&spec.treatment)?;
    if let Some(w) = &spec.weights {
        let weights = dataset.numeric(w)?;
        if weights.iter().flatten().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidData(format!(
                "weight column \"{w}\" has negative or non-finite values"
            )));
        }
    }
    let filter = spec
        .row_filter
        .as_deref()
        .map(Filter::parse)
        .transpose()?;
    if let Some(f) = &filter {
        for col in f.columns() {
            dataset.column(col)?;
        }
    }

    let mut flags = Vec::with_capacity(dataset.row_count());
    for row in 0..dataset.row_count() {
        let observed = referenced.iter().all(|c| !c.is_missing(row));
        let keep = observed
            && match &filter {
                Some(f) => f.evaluate(dataset, row)?,
                None => true,
            };
        flags.push(keep);
    }
    Ok(SubsampleMask::from_flags(flags))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubsampleShare {
    pub share: f64,
    pub below_floor: bool,
}

/// Fraction of all rows kept by the mask; flags shares below `floor`.
pub fn subsample_share(mask: &SubsampleMask, n: usize, floor: f64) -> SubsampleShare {
    assert!(n > 0, "subsample_share requires n > 0");
    let share = mask.n_j as f64 / n as f64;
    let below_floor = share < floor;
    if below_floor {
        log::warn!("subsample keeps {:.4} of the rows, below the floor {floor}", share);
    }
    SubsampleShare { share, below_floor }
}
