//! Observed-data representation, CSV ingestion and sample diagnostics.
//!
//! A [`Dataset`] holds the outcome `y`, binary treatment `d`, binary
//! instrument `z` and a covariate matrix `x` whose first column is always
//! the intercept. Everything downstream assumes these invariants, so they are
//! checked once at construction and the value is immutable afterwards.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{LateError, Result};

/// Name given to the auto-prepended constant column.
pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    d: DVector<f64>,
    z: DVector<f64>,
    x: DMatrix<f64>,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from raw columns, prepending the intercept to
    /// `covariates` (an `n x k` matrix, `k` may be zero).
    pub fn new(
        y: Vec<f64>,
        d: Vec<f64>,
        z: Vec<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if covariates.nrows() != n {
            return Err(LateError::LengthMismatch {
                expected: n,
                got: covariates.nrows(),
            });
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(LateError::InvalidData(format!(
                "{} covariate names for {} covariate columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        if let Some(name) = covariate_names
            .iter()
            .find(|s| s.eq_ignore_ascii_case(INTERCEPT))
        {
            return Err(LateError::ReservedName(name.clone()));
        }
        let k = covariates.ncols() + 1;
        let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { covariates[(i, j - 1)] });
        let mut names = Vec::with_capacity(k);
        names.push(INTERCEPT.to_string());
        names.extend(covariate_names);
        Self::from_design(y, d, z, x, names)
    }

    /// Builds a dataset from a full design matrix whose first column must
    /// already be the intercept.
    pub fn from_design(
        y: Vec<f64>,
        d: Vec<f64>,
        z: Vec<f64>,
        x: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(LateError::EmptyData);
        }
        if n < 2 {
            return Err(LateError::InvalidData("at least two rows are required".into()));
        }
        for len in [d.len(), z.len(), x.nrows()] {
            if len != n {
                return Err(LateError::LengthMismatch { expected: n, got: len });
            }
        }
        if x.ncols() == 0 || covariate_names.len() != x.ncols() {
            return Err(LateError::InvalidData(
                "covariate names must match the columns of x".into(),
            ));
        }
        check_binary("d", &d)?;
        check_binary("z", &z)?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(LateError::InvalidData(format!("non-finite outcome at row {i}")));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(LateError::InvalidData(format!(
                "non-finite covariate at row {}",
                i % n
            )));
        }
        if x.column(0).iter().any(|&v| v != 1.0) {
            return Err(LateError::InvalidData(
                "first covariate column must be the intercept".into(),
            ));
        }
        Ok(Self {
            y: DVector::from_vec(y),
            d: DVector::from_vec(d),
            z: DVector::from_vec(z),
            x,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of columns of `x`, intercept included.
    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Same sample with the outcome replaced.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(LateError::LengthMismatch {
                expected: self.n(),
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(LateError::InvalidData("non-finite outcome".into()));
        }
        Ok(Self {
            y: DVector::from_vec(y),
            ..self.clone()
        })
    }

    /// Same sample with rows reordered so that new row `i` is old row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = self.n();
        assert_eq!(order.len(), n, "permutation length");
        Self {
            y: DVector::from_fn(n, |i, _| self.y[order[i]]),
            d: DVector::from_fn(n, |i, _| self.d[order[i]]),
            z: DVector::from_fn(n, |i, _| self.z[order[i]]),
            x: DMatrix::from_fn(n, self.k(), |i, j| self.x[(order[i], j)]),
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Writes the sample as CSV with columns `y,d,z,<covariates>` (intercept
    /// omitted). Values use the shortest representation that parses back to
    /// the identical `f64` (at most 17 significant digits).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string(), "d".to_string(), "z".to_string()];
        header.extend(self.covariate_names.iter().skip(1).cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string(), self.d[i].to_string(), self.z[i].to_string()];
            rec.extend((1..self.k()).map(|j| self.x[(i, j)].to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| LateError::io("<csv writer>", e))?;
        Ok(())
    }
}

fn check_binary(column: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(row) => Err(LateError::NonBinary {
            column: column.to_string(),
            row,
            value: values[row],
        }),
        None => Ok(()),
    }
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ColumnMap {
    pub y: String,
    pub d: String,
    pub z: String,
    pub covariates: Vec<String>,
}

impl ColumnMap {
    pub fn new(y: &str, d: &str, z: &str, covariates: &[&str]) -> Self {
        Self {
            y: y.into(),
            d: d.into(),
            z: z.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, map: &ColumnMap) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| LateError::io(path, e))?;
    read_csv(file, map)
}

/// Parses a comma-delimited file with a header row. Rows with empty cells
/// are rejected rather than dropped; row numbers in errors are 1-based data
/// rows (the header is row 0).
pub fn read_csv<R: Read>(reader: R, map: &ColumnMap) -> Result<Dataset> {
    if let Some(name) = map
        .covariates
        .iter()
        .find(|s| s.eq_ignore_ascii_case(INTERCEPT))
    {
        return Err(LateError::ReservedName(name.clone()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LateError::MissingColumn(name.to_string()))
    };
    let iy = find(&map.y)?;
    let id = find(&map.d)?;
    let iz = find(&map.z)?;
    let ix = map
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let (mut y, mut d, mut z) = (Vec::new(), Vec::new(), Vec::new());
    let mut xs: Vec<f64> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            if raw.is_empty() {
                return Err(LateError::MissingValue {
                    row,
                    column: name.to_string(),
                });
            }
            f64::from_str(raw)
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| LateError::NonNumericCell {
                    row,
                    column: name.to_string(),
                    value: raw.to_string(),
                })
        };
        y.push(cell(iy, &map.y)?);
        let dv = cell(id, &map.d)?;
        if dv != 0.0 && dv != 1.0 {
            return Err(LateError::NonBinary {
                column: map.d.clone(),
                row,
                value: dv,
            });
        }
        d.push(dv);
        let zv = cell(iz, &map.z)?;
        if zv != 0.0 && zv != 1.0 {
            return Err(LateError::NonBinary {
                column: map.z.clone(),
                row,
                value: zv,
            });
        }
        z.push(zv);
        for (c, &idx) in ix.iter().enumerate() {
            xs.push(cell(idx, &map.covariates[c])?);
        }
    }
    if y.is_empty() {
        return Err(LateError::EmptyData);
    }
    let n = y.len();
    let k = map.covariates.len();
    let cov = DMatrix::from_row_slice(n, k, &xs);
    Dataset::new(y, d, z, cov, map.covariates.clone())
}

/// Reads one numeric column by name (used for user-supplied propensity scores).
pub fn read_column(path: impl AsRef<Path>, name: &str) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| LateError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let idx = rdr
        .headers()?
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| LateError::MissingColumn(name.to_string()))?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(idx).unwrap_or("");
        let v = f64::from_str(raw).map_err(|_| LateError::NonNumericCell {
            row: r + 1,
            column: name.to_string(),
            value: raw.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// The seven estimators. `A1` is also the unnormalized IPW ratio `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EstimatorKind {
    /// Abadie estimator with the `kappa` denominator.
    A,
    /// `kappa_1` denominator; numerically the unnormalized IPW ratio.
    A1,
    /// `kappa_0` denominator.
    A0,
    /// Separately normalized `kappa_1` and `kappa_0` means.
    A10,
    /// Ratio of Hajek-normalized IPW differences with a logit score.
    TNorm,
    /// Same ratio with a covariate-balancing score.
    Cb,
    /// Two-stage least squares controlling linearly for `x`.
    LinearIv,
}

impl EstimatorKind {
    /// Table order: benchmark first, then normalized, then unnormalized.
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::LinearIv,
        EstimatorKind::Cb,
        EstimatorKind::TNorm,
        EstimatorKind::A10,
        EstimatorKind::A,
        EstimatorKind::A1,
        EstimatorKind::A0,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::A => "a",
            EstimatorKind::A1 => "t",
            EstimatorKind::A0 => "a0",
            EstimatorKind::A10 => "a10",
            EstimatorKind::TNorm => "tnorm",
            EstimatorKind::Cb => "cb",
            EstimatorKind::LinearIv => "iv",
        }
    }

    pub fn is_normalized(self) -> bool {
        matches!(self, EstimatorKind::A10 | EstimatorKind::TNorm | EstimatorKind::Cb)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EstimatorKind {
    type Err = LateError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(EstimatorKind::A),
            "a1" | "t" | "t_unnorm" | "tunnorm" => Ok(EstimatorKind::A1),
            "a0" => Ok(EstimatorKind::A0),
            "a10" => Ok(EstimatorKind::A10),
            "tnorm" | "t_norm" => Ok(EstimatorKind::TNorm),
            "cb" => Ok(EstimatorKind::Cb),
            "iv" | "linear_iv" | "2sls" => Ok(EstimatorKind::LinearIv),
            other => Err(LateError::InvalidArgument(format!(
                "unknown estimator `{other}` (expected one of cb,tnorm,a10,a,t,a1,a0,iv)"
            ))),
        }
    }
}

/// Counts of the four (Z, D) cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CellCounts {
    pub z1_d1: usize,
    pub z1_d0: usize,
    pub z0_d1: usize,
    pub z0_d0: usize,
}

impl CellCounts {
    pub fn of(ds: &Dataset) -> Self {
        let mut c = CellCounts::default();
        for (&z, &d) in ds.z().iter().zip(ds.d().iter()) {
            match (z == 1.0, d == 1.0) {
                (true, true) => c.z1_d1 += 1,
                (true, false) => c.z1_d0 += 1,
                (false, true) => c.z0_d1 += 1,
                (false, false) => c.z0_d0 += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DataWarning {
    /// Every unit with Z=1 is treated: no never-takers observed.
    AllTreatedAmongZ1,
    /// No unit with Z=0 is treated: no always-takers observed.
    NoTreatedAmongZ0,
    /// Covariate column is constant and duplicates the intercept.
    ConstantCovariate(String),
}

impl fmt::Display for DataWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataWarning::AllTreatedAmongZ1 => f.write_str("no never-takers observed (all Z=1 units treated)"),
            DataWarning::NoTreatedAmongZ0 => f.write_str("no always-takers observed (no Z=0 unit treated)"),
            DataWarning::ConstantCovariate(c) => write!(f, "covariate `{c}` is constant (collinear with intercept)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub cells: CellCounts,
    pub warnings: Vec<DataWarning>,
}

pub fn validate(ds: &Dataset) -> Diagnostics {
    let cells = CellCounts::of(ds);
    let mut warnings = Vec::new();
    if cells.z1_d0 == 0 {
        warnings.push(DataWarning::AllTreatedAmongZ1);
    }
    if cells.z0_d1 == 0 {
        warnings.push(DataWarning::NoTreatedAmongZ0);
    }
    let x = ds.x();
    for j in 1..ds.k() {
        let col = x.column(j);
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            warnings.push(DataWarning::ConstantCovariate(ds.covariate_names()[j].clone()));
        }
    }
    Diagnostics { cells, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> ColumnMap {
        ColumnMap::new("wage", "vet", "elig", &["educ"])
    }

    #[test]
    fn loads_and_prepends_intercept() {
        let src = "wage,vet,elig,educ\n10.5,1,1,12\n8,0,1,10\n9,0,0,16\n7.25,1,0,9\n";
        let ds = read_csv(src.as_bytes(), &map()).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.x()[(0, 0)], 1.0);
        assert_eq!(ds.x()[(2, 1)], 16.0);
        assert_eq!(ds.y()[3], 7.25);
        assert_eq!(ds.covariate_names(), &["intercept", "educ"]);
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let src = "wage,vet,elig,educ\n10,2,1,12\n8,0,1,10\n";
        match read_csv(src.as_bytes(), &map()) {
            Err(LateError::NonBinary { column, row, .. }) => {
                assert_eq!(column, "vet");
                assert_eq!(row, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_only_is_empty() {
        let src = "wage,vet,elig,educ\n";
        assert!(matches!(read_csv(src.as_bytes(), &map()), Err(LateError::EmptyData)));
    }

    #[test]
    fn missing_column_and_cells() {
        let src = "wage,vet,elig\n1,1,1\n";
        assert!(matches!(read_csv(src.as_bytes(), &map()), Err(LateError::MissingColumn(c)) if c == "educ"));
        let src = "wage,vet,elig,educ\n1,1,1,\n2,0,0,3\n";
        assert!(matches!(read_csv(src.as_bytes(), &map()), Err(LateError::MissingValue { row: 1, .. })));
        let src = "wage,vet,elig,educ\n1,1,1,abc\n2,0,0,3\n";
        assert!(matches!(read_csv(src.as_bytes(), &map()), Err(LateError::NonNumericCell { row: 1, .. })));
    }

    #[test]
    fn intercept_name_is_reserved() {
        let src = "y,d,z,intercept\n1,1,1,1\n2,0,0,1\n";
        let m = ColumnMap::new("y", "d", "z", &["intercept"]);
        assert!(matches!(read_csv(src.as_bytes(), &m), Err(LateError::ReservedName(_))));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let cov = DMatrix::from_column_slice(3, 1, &[0.1 + 0.2, 1.0 / 3.0, -1e-300]);
        let ds = Dataset::new(
            vec![std::f64::consts::PI, 1e17 + 1.0, -0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            cov,
            vec!["w".into()],
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &ColumnMap::new("y", "d", "z", &["w"])).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn validate_flags_one_sided_samples() {
        let cov = DMatrix::zeros(4, 0);
        let ds = Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            cov,
            vec![],
        )
        .unwrap();
        let diag = validate(&ds);
        assert_eq!(diag.warnings, vec![DataWarning::NoTreatedAmongZ0]);
        assert_eq!(
            diag.cells,
            CellCounts {
                z1_d1: 1,
                z1_d0: 1,
                z0_d1: 0,
                z0_d0: 2
            }
        );
    }

    #[test]
    fn validate_quiet_when_all_cells_populated_and_flags_constant_column() {
        let cov = DMatrix::from_column_slice(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]);
        let ds = Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            cov,
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let before = ds.clone();
        let diag = validate(&ds);
        assert_eq!(diag.warnings, vec![DataWarning::ConstantCovariate("b".into())]);
        assert_eq!(ds, before);

        let ds2 = ds.with_outcome(vec![0.0; 4]).unwrap();
        let cov = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let ds3 = Dataset::new(vec![0.0; 4], ds2.d().as_slice().to_vec(), ds2.z().as_slice().to_vec(), cov, vec!["a".into()]).unwrap();
        assert!(validate(&ds3).warnings.is_empty());
    }

    #[test]
    fn estimator_aliases() {
        assert_eq!("t".parse::<EstimatorKind>().unwrap(), EstimatorKind::A1);
        assert_eq!("T_UNNORM".parse::<EstimatorKind>().unwrap(), EstimatorKind::A1);
        assert_eq!("a1".parse::<EstimatorKind>().unwrap(), EstimatorKind::A1);
        assert!("b".parse::<EstimatorKind>().is_err());
    }
}
