//! Building a [`Dataset`] from delimited text and a JSON column spec.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Equation, EquationColumns, ObservationRecord};

/// A CSV file held in memory as strings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    Log,
}

impl Transform {
    fn apply(self, x: f64) -> Option<f64> {
        match self {
            Transform::None => Some(x),
            Transform::Log if x > 0.0 => Some(x.ln()),
            Transform::Log => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RegressorSpec {
    Numeric {
        column: String,
        /// Name of the generated regressor; defaults to the column name.
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        transform: Transform,
        equations: Vec<String>,
    },
    /// One-hot expansion, one dummy per non-base level.
    Categorical {
        column: String,
        levels: Vec<String>,
        base: String,
        equations: Vec<String>,
    },
    /// Product of each non-base dummy of `categorical` with `numeric`.
    Interaction {
        categorical: String,
        numeric: String,
        equations: Vec<String>,
    },
}

impl RegressorSpec {
    fn equations(&self) -> Result<Vec<Equation>> {
        let tags = match self {
            RegressorSpec::Numeric { equations, .. }
            | RegressorSpec::Categorical { equations, .. }
            | RegressorSpec::Interaction { equations, .. } => equations,
        };
        tags.iter()
            .map(|t| {
                Equation::from_tag(t).ok_or_else(|| Error::Schema(format!("unknown equation `{t}`")))
            })
            .collect()
    }
}

/// Mapping from survey columns to model roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    #[serde(default)]
    pub id: Option<String>,
    pub access: String,
    #[serde(rename = "use")]
    pub use_: String,
    pub quantity: String,
    #[serde(default)]
    pub quantity_transform: Transform,
    #[serde(default)]
    pub weight: Option<String>,
    #[serde(default)]
    pub market: Option<String>,
    #[serde(default = "yes")]
    pub intercept: bool,
    pub regressors: Vec<RegressorSpec>,
}

fn yes() -> bool {
    true
}

impl ColumnSpec {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }
}

pub const INTERCEPT: &str = "intercept";

/// Builds the per-equation regressor generators once, then applies them row
/// by row.
enum Generator {
    Intercept,
    Numeric { col: usize, transform: Transform },
    Dummy { col: usize, level: String },
    Interaction { cat_col: usize, level: String, num_col: usize, transform: Transform },
}

struct Plan {
    generators: [Vec<Generator>; 3],
    columns: EquationColumns,
    categorical_levels: HashMap<usize, (String, Vec<String>)>,
}

fn plan(table: &Table, spec: &ColumnSpec) -> Result<Plan> {
    let mut generators: [Vec<Generator>; 3] = Default::default();
    let mut names: [Vec<String>; 3] = Default::default();
    if spec.intercept {
        for eq in Equation::ALL {
            generators[eq.index()].push(Generator::Intercept);
            names[eq.index()].push(INTERCEPT.to_string());
        }
    }
    let mut numerics: HashMap<String, (usize, Transform)> = HashMap::new();
    let mut categoricals: HashMap<String, (usize, String, Vec<String>)> = HashMap::new();
    let mut categorical_levels = HashMap::new();

    for reg in &spec.regressors {
        let eqs = reg.equations()?;
        match reg {
            RegressorSpec::Numeric { column, name, transform, .. } => {
                let col = table.column(column)?;
                let name = name.clone().unwrap_or_else(|| column.clone());
                numerics.insert(name.clone(), (col, *transform));
                for eq in eqs {
                    generators[eq.index()].push(Generator::Numeric { col, transform: *transform });
                    names[eq.index()].push(name.clone());
                }
            }
            RegressorSpec::Categorical { column, levels, base, .. } => {
                let col = table.column(column)?;
                if !levels.contains(base) {
                    return Err(Error::Schema(format!(
                        "base level `{base}` is not among the levels of `{column}`"
                    )));
                }
                categoricals.insert(column.clone(), (col, base.clone(), levels.clone()));
                categorical_levels.insert(col, (column.clone(), levels.clone()));
                for eq in eqs {
                    for level in levels.iter().filter(|l| *l != base) {
                        generators[eq.index()].push(Generator::Dummy { col, level: level.clone() });
                        names[eq.index()].push(format!("{column}_{level}"));
                    }
                }
            }
            RegressorSpec::Interaction { categorical, numeric, .. } => {
                let (cat_col, base, levels) = categoricals.get(categorical).cloned().ok_or_else(|| {
                    Error::Schema(format!(
                        "interaction refers to categorical `{categorical}` declared later or not at all"
                    ))
                })?;
                let (num_col, transform) = *numerics.get(numeric).ok_or_else(|| {
                    Error::Schema(format!(
                        "interaction refers to numeric `{numeric}` declared later or not at all"
                    ))
                })?;
                for eq in eqs {
                    for level in levels.iter().filter(|l| **l != base) {
                        generators[eq.index()].push(Generator::Interaction {
                            cat_col,
                            level: level.clone(),
                            num_col,
                            transform,
                        });
                        names[eq.index()].push(format!("{categorical}_{level}:{numeric}"));
                    }
                }
            }
        }
    }
    let [access, use_, quantity] = names;
    Ok(Plan {
        generators,
        columns: EquationColumns { access, use_, quantity },
        categorical_levels,
    })
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|x| x.is_finite())
}

fn parse_flag(cell: &str) -> std::result::Result<Option<bool>, ()> {
    match cell {
        "" | "NA" | "-" => Ok(None),
        _ => match cell.parse::<f64>() {
            Ok(x) if x == 0.0 => Ok(Some(false)),
            Ok(x) if x == 1.0 => Ok(Some(true)),
            _ => Err(()),
        },
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "-")
}

/// Diagnostics collected while building a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    /// Rows reporting use without access, whose access flag was set to 1.
    pub forced_access: Vec<u64>,
    /// Quantities reported by non-users, ignored.
    pub dropped_quantities: usize,
}

/// Builds observations from a table: one-hot expansion, intercepts and the
/// access/use/quantity consistency rules.
pub fn build_dataset(table: &Table, spec: &ColumnSpec) -> Result<(Dataset, BuildReport)> {
    let plan = plan(table, spec)?;
    let id_col = spec.id.as_deref().map(|c| table.column(c)).transpose()?;
    let a_col = table.column(&spec.access)?;
    let c_col = table.column(&spec.use_)?;
    let y_col = table.column(&spec.quantity)?;
    let w_col = spec.weight.as_deref().map(|c| table.column(c)).transpose()?;
    let m_col = spec.market.as_deref().map(|c| table.column(c)).transpose()?;

    // unknown categories are a schema problem, checked before anything else
    for (&col, (name, levels)) in &plan.categorical_levels {
        if let Some(bad) = table.rows.iter().map(|r| &r[col]).find(|v| !levels.contains(v)) {
            return Err(Error::Schema(format!("unknown category `{bad}` in column `{name}`")));
        }
    }

    let mut report = BuildReport::default();
    let mut records = Vec::with_capacity(table.rows.len());
    let mut missing_y = Vec::new();
    let mut bad_rows = Vec::new();

    for (row_no, row) in table.rows.iter().enumerate() {
        let id = match id_col {
            Some(c) => row[c].parse::<u64>().map_err(|_| Error::DataIntegrity {
                message: format!("non-integer id `{}`", row[c]),
                rows: vec![row_no as u64 + 1],
            })?,
            None => row_no as u64 + 1,
        };
        let flag = |col: usize| {
            parse_flag(&row[col]).map_err(|_| Error::DataIntegrity {
                message: format!("`{}` is not a 0/1 flag", row[col]),
                rows: vec![id],
            })
        };
        let mut access = flag(a_col)?.ok_or_else(|| Error::DataIntegrity {
            message: "missing access flag".into(),
            rows: vec![id],
        })?;
        let mut uses = flag(c_col)?;
        if uses == Some(true) && !access {
            access = true;
            report.forced_access.push(id);
        }
        if !access {
            uses = None;
        } else if uses.is_none() {
            bad_rows.push(id);
            continue;
        }
        let log_quantity = if uses == Some(true) {
            match parse_number(&row[y_col]).and_then(|y| spec.quantity_transform.apply(y)) {
                Some(y) => Some(y),
                None => {
                    missing_y.push(id);
                    continue;
                }
            }
        } else {
            if !is_missing(&row[y_col]) {
                report.dropped_quantities += 1;
            }
            None
        };

        let mut x: [Vec<f64>; 3] = Default::default();
        let mut ok = true;
        for eq in Equation::ALL {
            for g in &plan.generators[eq.index()] {
                let v = match g {
                    Generator::Intercept => Some(1.0),
                    Generator::Numeric { col, transform } => {
                        parse_number(&row[*col]).and_then(|v| transform.apply(v))
                    }
                    Generator::Dummy { col, level } => Some(f64::from(u8::from(row[*col] == *level))),
                    Generator::Interaction { cat_col, level, num_col, transform } => {
                        if row[*cat_col] == *level {
                            parse_number(&row[*num_col]).and_then(|v| transform.apply(v))
                        } else {
                            Some(0.0)
                        }
                    }
                };
                match v {
                    Some(v) => x[eq.index()].push(v),
                    None => ok = false,
                }
            }
        }
        if !ok {
            bad_rows.push(id);
            continue;
        }
        let weight = match w_col {
            Some(c) => match parse_number(&row[c]) {
                Some(w) if w > 0.0 => w,
                _ => {
                    bad_rows.push(id);
                    continue;
                }
            },
            None => 1.0,
        };
        let market = m_col.map(|c| row[c].clone()).unwrap_or_default();
        let [xa, xc, xy] = x;
        records.push(ObservationRecord::new(
            id, access, uses, log_quantity, xa, xc, xy, weight, market,
        )?);
    }

    if !missing_y.is_empty() {
        return Err(Error::DataIntegrity {
            message: "users without a valid quantity".into(),
            rows: missing_y,
        });
    }
    if !bad_rows.is_empty() {
        return Err(Error::DataIntegrity {
            message: "missing or invalid use flag, regressor or weight".into(),
            rows: bad_rows,
        });
    }
    let forced = report.forced_access.len();
    let dataset = Dataset::new(records, plan.columns)?.with_forced_access(forced);
    Ok((dataset, report))
}
