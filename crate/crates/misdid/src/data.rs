//! Datasets, column roles, and the demeaning conventions.
//!
//! Both layouts share one long CSV format (one row per unit x time). A panel
//! is recognized by the presence of a unit-id role and must contain exactly
//! two rows per unit, one for each time value. Covariates, instruments, and
//! treatment must be constant within a unit; covariates are pre-treatment by
//! assumption, so time variation is rejected rather than averaged.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling layout of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Panel,
    RepeatedCrossSection,
}

/// Column roles mapping names in the CSV header onto model variables.
///
/// Serialized as a flat TOML file of keys and lists:
///
/// ```toml
/// outcome = "y"
/// time = "t"
/// id = "unit"              # optional; presence selects the panel layout
/// treatment = "d"
/// covariates = ["x1"]
/// instruments = ["z1"]     # excluded instruments (may be empty for naive runs)
/// true_treatment = "dstar" # optional; enables the infeasible benchmark
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub outcome: String,
    pub time: String,
    #[serde(default)]
    pub id: Option<String>,
    pub treatment: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub instruments: Vec<String>,
    #[serde(default)]
    pub true_treatment: Option<String>,
}

impl Roles {
    /// Parse a roles file (TOML).
    pub fn from_path(path: &Path) -> Result<Roles> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("cannot read roles file {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Ingestion(format!("roles file {}: {e}", path.display())))
    }

    fn all_names(&self) -> Vec<&String> {
        let mut v = vec![&self.outcome, &self.time, &self.treatment];
        if let Some(id) = &self.id {
            v.push(id);
        }
        v.extend(self.covariates.iter());
        v.extend(self.instruments.iter());
        if let Some(t) = &self.true_treatment {
            v.push(t);
        }
        v
    }
}

/// An immutable column table plus its role map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
    pub roles: Roles,
    pub layout: Layout,
    n_rows: usize,
}

impl Dataset {
    /// Build a dataset from named columns, validating every invariant.
    pub fn new(columns: Vec<(String, Vec<f64>)>, roles: Roles) -> Result<Dataset> {
        if columns.is_empty() {
            return Err(Error::Ingestion("no columns".into()));
        }
        let n_rows = columns[0].1.len();
        if n_rows == 0 {
            return Err(Error::Ingestion("dataset has no rows".into()));
        }
        let mut index = HashMap::new();
        for (i, (name, vals)) in columns.iter().enumerate() {
            if vals.len() != n_rows {
                return Err(Error::Ingestion(format!(
                    "column '{name}' has {} rows, expected {n_rows}",
                    vals.len()
                )));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Ingestion(format!("duplicate column '{name}'")));
            }
        }
        for name in roles.all_names() {
            if !index.contains_key(name) {
                return Err(Error::Ingestion(format!("missing role column '{name}'")));
            }
        }
        for inst in &roles.instruments {
            if roles.covariates.contains(inst) {
                return Err(Error::Ingestion(format!(
                    "instrument '{inst}' is also listed as a covariate; excluded instruments must be distinct"
                )));
            }
        }
        // No missing values anywhere after ingestion.
        for (name, vals) in &columns {
            if let Some(row) = vals.iter().position(|v| !v.is_finite()) {
                return Err(Error::Ingestion(format!(
                    "non-finite value at row {row}, column '{name}'"
                )));
            }
        }
        let layout = if roles.id.is_some() { Layout::Panel } else { Layout::RepeatedCrossSection };
        let ds = Dataset { columns, index, roles, layout, n_rows };
        ds.check_binary(&ds.roles.treatment.clone(), "treatment")?;
        ds.check_binary(&ds.roles.time.clone(), "time")?;
        if let Some(tt) = ds.roles.true_treatment.clone() {
            ds.check_binary(&tt, "true treatment")?;
        }
        if ds.layout == Layout::Panel {
            ds.check_balanced_panel()?;
        }
        Ok(ds)
    }

    fn check_binary(&self, name: &str, what: &str) -> Result<()> {
        let col = self.column(name)?;
        if let Some(row) = col.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Ingestion(format!(
                "non-binary {what} at row {row}, column '{name}' (value {})",
                col[row]
            )));
        }
        Ok(())
    }

    fn check_balanced_panel(&self) -> Result<()> {
        let groups = self.unit_groups()?;
        for (unit, rows) in groups {
            if rows.len() != 2 {
                return Err(Error::Ingestion(format!(
                    "unbalanced panel: unit {} has {} rows, expected 2",
                    f64::from_bits(unit),
                    rows.len()
                )));
            }
        }
        Ok(())
    }

    /// Row indices per unit, each sorted so the t=0 row comes first.
    /// Grouping keys on the exact bit pattern of the id value.
    fn unit_groups(&self) -> Result<Vec<(u64, Vec<usize>)>> {
        let id_name = self
            .roles
            .id
            .clone()
            .ok_or_else(|| Error::Ingestion("panel operation on a dataset without unit ids".into()))?;
        let ids = self.column(&id_name)?;
        let time = self.column(&self.roles.time.clone())?;
        let mut order: HashMap<u64, usize> = HashMap::new();
        let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
        for (row, &id) in ids.iter().enumerate() {
            let key = id.to_bits();
            let slot = *order.entry(key).or_insert_with(|| {
                groups.push((key, Vec::new()));
                groups.len() - 1
            });
            groups[slot].1.push(row);
        }
        for (key, rows) in groups.iter_mut() {
            rows.sort_by(|&a, &b| time[a].partial_cmp(&time[b]).unwrap());
            if rows.len() == 2 && (time[rows[0]] != 0.0 || time[rows[1]] != 1.0) {
                return Err(Error::Ingestion(format!(
                    "unit {} does not have one row at t=0 and one at t=1",
                    f64::from_bits(*key)
                )));
            }
        }
        Ok(groups)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Number of sampling units: panels count units, cross-sections count rows.
    pub fn n_units(&self) -> usize {
        match self.layout {
            Layout::Panel => self.n_rows / 2,
            Layout::RepeatedCrossSection => self.n_rows,
        }
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.index
            .get(name)
            .map(|&i| self.columns[i].1.as_slice())
            .ok_or_else(|| Error::Ingestion(format!("no column named '{name}'")))
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    /// Matrix of the named columns in order, `rows x names.len()`.
    pub fn matrix_of(&self, names: &[String], rows: Option<&[usize]>) -> Result<DMatrix<f64>> {
        let cols: Vec<&[f64]> = names.iter().map(|n| self.column(n)).collect::<Result<_>>()?;
        let nr = rows.map_or(self.n_rows, <[usize]>::len);
        Ok(DMatrix::from_fn(nr, cols.len(), |i, j| {
            let r = rows.map_or(i, |rs| rs[i]);
            cols[j][r]
        }))
    }

    /// Read a dataset from the canonical long CSV plus a role map.
    pub fn ingest_csv(path: &Path, roles: Roles) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Ingestion(format!("cannot open {}: {e}", path.display())))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Ingestion(format!("bad CSV header: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut columns: Vec<(String, Vec<f64>)> =
            headers.iter().map(|h| (h.clone(), Vec::new())).collect();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Ingestion(format!("row {row}: {e}")))?;
            if record.len() != headers.len() {
                return Err(Error::Ingestion(format!(
                    "row {row} has {} fields, expected {}",
                    record.len(),
                    headers.len()
                )));
            }
            for (col, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Ingestion(format!(
                        "row {row}, column '{}': cannot parse '{field}' as a number",
                        headers[col]
                    ))
                })?;
                columns[col].1.push(v);
            }
        }
        Dataset::new(columns, roles)
    }

    /// Write the canonical CSV. Floats use the shortest representation that
    /// round-trips, so `ingest(emit(ds)) == ds` bit-exactly.
    pub fn emit_csv(&self, out: &mut dyn Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        w.write_record(self.columns.iter().map(|(n, _)| n.as_str()))
            .map_err(|e| Error::Ingestion(format!("csv write: {e}")))?;
        let mut record = Vec::with_capacity(self.columns.len());
        for row in 0..self.n_rows {
            record.clear();
            for (_, vals) in &self.columns {
                record.push(format!("{}", vals[row]));
            }
            w.write_record(&record)
                .map_err(|e| Error::Ingestion(format!("csv write: {e}")))?;
        }
        w.flush().map_err(|e| Error::Ingestion(format!("csv write: {e}")))?;
        Ok(())
    }

    /// Rebuild with the same roles from externally assembled columns
    /// (used by resampling); re-validates everything.
    pub fn with_columns(&self, columns: Vec<(String, Vec<f64>)>) -> Result<Dataset> {
        Dataset::new(columns, self.roles.clone())
    }
}

/// Per-unit data after first-differencing a two-period panel.
///
/// Outcome differences are post minus baseline; covariates, instruments and
/// treatment are taken from the baseline row.
#[derive(Debug, Clone)]
pub struct FirstDifferenced {
    pub dy: DVector<f64>,
    /// Covariates, one row per unit (no intercept).
    pub x: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Excluded instruments, one row per unit.
    pub z: DMatrix<f64>,
    pub dstar: Option<DVector<f64>>,
}

/// First-difference a balanced two-period panel.
pub fn first_difference(panel: &Dataset) -> Result<FirstDifferenced> {
    if panel.layout != Layout::Panel {
        return Err(Error::Ingestion("first_difference requires a panel dataset".into()));
    }
    let groups = panel.unit_groups()?;
    let y = panel.column(&panel.roles.outcome)?;
    let d = panel.column(&panel.roles.treatment)?;
    let n = groups.len();
    let k = panel.roles.covariates.len();
    let m = panel.roles.instruments.len();

    let mut dy = DVector::zeros(n);
    let mut dvec = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, k);
    let mut z = DMatrix::zeros(n, m);
    let mut dstar = panel.roles.true_treatment.as_ref().map(|_| DVector::zeros(n));

    let xcols: Vec<&[f64]> = panel
        .roles
        .covariates
        .iter()
        .map(|c| panel.column(c))
        .collect::<Result<_>>()?;
    let zcols: Vec<&[f64]> = panel
        .roles
        .instruments
        .iter()
        .map(|c| panel.column(c))
        .collect::<Result<_>>()?;
    let dstar_col = match &panel.roles.true_treatment {
        Some(c) => Some(panel.column(c)?),
        None => None,
    };

    for (i, (key, rows)) in groups.iter().enumerate() {
        let (r0, r1) = (rows[0], rows[1]);
        let unit = f64::from_bits(*key);
        if d[r0] != d[r1] {
            return Err(Error::Ingestion(format!("treatment not time-constant at unit {unit}")));
        }
        for (j, col) in xcols.iter().enumerate() {
            if col[r0] != col[r1] {
                return Err(Error::Ingestion(format!(
                    "covariate '{}' varies over time at unit {unit}; pre-treatment covariates must be constant",
                    panel.roles.covariates[j]
                )));
            }
            x[(i, j)] = col[r0];
        }
        for (j, col) in zcols.iter().enumerate() {
            if col[r0] != col[r1] {
                return Err(Error::Ingestion(format!(
                    "instrument '{}' varies over time at unit {unit}",
                    panel.roles.instruments[j]
                )));
            }
            z[(i, j)] = col[r0];
        }
        if let (Some(ds), Some(col)) = (dstar.as_mut(), dstar_col) {
            if col[r0] != col[r1] {
                return Err(Error::Ingestion(format!(
                    "true treatment varies over time at unit {unit}"
                )));
            }
            ds[i] = col[r0];
        }
        dy[i] = y[r1] - y[r0];
        dvec[i] = d[r0];
    }
    Ok(FirstDifferenced { dy, x, d: dvec, z, dstar })
}

/// A covariate block centered at a weighted mean.
#[derive(Debug, Clone)]
pub struct DemeanedDesign {
    pub x_centered: DMatrix<f64>,
    /// The weighted column means that were subtracted.
    pub centering_vector: DVector<f64>,
    pub weights_used: DVector<f64>,
}

/// Center the columns of `x` at their `weights`-weighted means.
///
/// With indicator weights this is the observed- or true-treated convention;
/// with predicted probabilities it is the first-stage convention where the
/// weight total plays the role of the group size.
pub fn demean(x: &DMatrix<f64>, weights: &DVector<f64>) -> Result<DemeanedDesign> {
    if x.nrows() != weights.len() {
        return Err(Error::Domain(format!(
            "{} rows but {} weights",
            x.nrows(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Domain("weights must be nonnegative and finite".into()));
    }
    let total: f64 = weights.sum();
    if total <= 0.0 {
        return Err(Error::Domain("weights sum to zero".into()));
    }
    let k = x.ncols();
    let mut centering = DVector::zeros(k);
    for j in 0..k {
        let mut acc = 0.0;
        for i in 0..x.nrows() {
            acc += weights[i] * x[(i, j)];
        }
        centering[j] = acc / total;
    }
    let mut xc = x.clone();
    for j in 0..k {
        let c = centering[j];
        for i in 0..xc.nrows() {
            xc[(i, j)] -= c;
        }
    }
    Ok(DemeanedDesign { x_centered: xc, centering_vector: centering, weights_used: weights.clone() })
}
