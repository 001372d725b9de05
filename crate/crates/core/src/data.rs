//! Longitudinal datasets: CSV ingestion, pooled standardization, the cosine
//! and B-spline design builders, model specifications and the power-spectrum
//! preprocessing transform.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::PriorSpec;

/// Observations of one subject, sorted by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    /// One row of extra fixed-effect covariates per observation; empty rows
    /// when the dataset has no covariates.
    pub covariates: Vec<Vec<f64>>,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, times: Vec<f64>, y: Vec<f64>) -> Self {
        let covariates = vec![Vec::new(); times.len()];
        Self {
            id: id.into(),
            times,
            y,
            covariates,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub subjects: Vec<SubjectRecord>,
    /// Names of the covariate columns (`x1`, `x2`, ... when read from CSV).
    pub covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(subjects: Vec<SubjectRecord>, covariate_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            subjects,
            covariate_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::validation("dataset has no subjects"));
        }
        let m = self.n_covariates();
        let mut seen = HashMap::new();
        for s in &self.subjects {
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(Error::validation(format!("duplicate subject id {:?}", s.id)));
            }
            if s.is_empty() {
                return Err(Error::validation(format!("subject {:?} has no observations", s.id)));
            }
            if s.y.len() != s.times.len() || s.covariates.len() != s.times.len() {
                return Err(Error::validation(format!(
                    "subject {:?}: times, y and covariate rows differ in length",
                    s.id
                )));
            }
            for w in s.times.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::validation(format!(
                        "subject {:?}: times must be strictly increasing",
                        s.id
                    )));
                }
            }
            if s.covariates.iter().any(|row| row.len() != m) {
                return Err(Error::validation(format!(
                    "subject {:?}: expected {m} covariate columns",
                    s.id
                )));
            }
            let finite = s.times.iter().chain(&s.y).chain(s.covariates.iter().flatten());
            if finite.into_iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("subject {:?}: non-finite value", s.id)));
            }
        }
        Ok(())
    }

    /// Sorted union of all observation times.
    pub fn union_times(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.subjects.iter().flat_map(|s| s.times.iter().copied()).collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }
}

/// Reads the long-format CSV `subject,time,y[,x1,...,xm]`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LongitudinalDataset> {
    read_csv(File::open(path)?)
}

pub fn read_csv<R: Read>(reader: R) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3
        || &headers[0] != "subject"
        || &headers[1] != "time"
        || &headers[2] != "y"
    {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with subject,time,y".into(),
        });
    }
    let covariate_names: Vec<String> = headers.iter().skip(3).map(str::to_owned).collect();
    let m = covariate_names.len();

    // (time, y, covariates, line) grouped by subject in first-appearance order
    type Row = (f64, f64, Vec<f64>, u64);
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 + m {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", 3 + m, record.len()),
            });
        }
        let parse = |idx: usize| -> Result<f64> {
            let field = &record[idx];
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line,
                    message: format!("column {:?}: not a finite number: {field:?}", &headers[idx]),
                }),
            }
        };
        let id = record[0].to_owned();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty subject id".into(),
            });
        }
        let t = parse(1)?;
        let y = parse(2)?;
        let x = (3..3 + m).map(parse).collect::<Result<Vec<_>>>()?;
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((t, y, x, line));
    }
    if order.is_empty() {
        return Err(Error::validation("CSV file contains no observations"));
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::validation(format!(
                "duplicate observation for subject {id:?} at time {} (line {})",
                w[1].0, w[1].3
            )));
        }
        subjects.push(SubjectRecord {
            id,
            times: rows.iter().map(|r| r.0).collect(),
            y: rows.iter().map(|r| r.1).collect(),
            covariates: rows.into_iter().map(|r| r.2).collect(),
        });
    }
    LongitudinalDataset::new(subjects, covariate_names)
}

pub fn write_csv(ds: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    write_csv_to(ds, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Writes the dataset in long format; floats use shortest round-trip form.
pub fn write_csv_to<W: Write>(ds: &LongitudinalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject".to_owned(), "time".to_owned(), "y".to_owned()];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for s in &ds.subjects {
        for (j, (&t, &y)) in s.times.iter().zip(&s.y).enumerate() {
            let mut row = vec![s.id.clone(), t.to_string(), y.to_string()];
            row.extend(s.covariates[j].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Affine maps applied by [`standardize`]: `t' = (t - time_min) / time_range`
/// and `y' = (y - y_mean) / y_sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleTransform {
    pub time_min: f64,
    pub time_range: f64,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl ScaleTransform {
    pub fn time_to_original(&self, t: f64) -> f64 {
        self.time_min + t * self.time_range
    }

    pub fn y_to_original(&self, y: f64) -> f64 {
        self.y_mean + y * self.y_sd
    }
}

/// Maps pooled times onto `[0, 1]` and pooled responses to mean 0, variance 1.
pub fn standardize(ds: &LongitudinalDataset) -> Result<(LongitudinalDataset, ScaleTransform)> {
    let times = ds.subjects.iter().flat_map(|s| s.times.iter().copied());
    let (tmin, tmax) = times.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
    let range = tmax - tmin;
    if !(range > 0.0) {
        return Err(Error::validation("degenerate scale: all observation times are equal"));
    }
    let n = ds.n_observations();
    if n < 2 {
        return Err(Error::validation("degenerate scale: fewer than two responses"));
    }
    let mean = ds.subjects.iter().flat_map(|s| s.y.iter()).sum::<f64>() / n as f64;
    let ss: f64 = ds.subjects.iter().flat_map(|s| s.y.iter()).map(|y| (y - mean).powi(2)).sum();
    let sd = (ss / (n as f64 - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::validation("degenerate scale: responses have zero variance"));
    }
    let tr = ScaleTransform {
        time_min: tmin,
        time_range: range,
        y_mean: mean,
        y_sd: sd,
    };
    let subjects = ds
        .subjects
        .iter()
        .map(|s| SubjectRecord {
            id: s.id.clone(),
            times: s.times.iter().map(|t| (t - tmin) / range).collect(),
            y: s.y.iter().map(|y| (y - mean) / sd).collect(),
            covariates: s.covariates.clone(),
        })
        .collect();
    Ok((
        LongitudinalDataset {
            subjects,
            covariate_names: ds.covariate_names.clone(),
        },
        tr,
    ))
}

/// Cosine design: entry `(r, j) = cos(π j t_r)` for `j = 0..=order`.
pub fn fourier_design(times: &[f64], order: usize) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), order + 1, |r, j| {
        if j == 0 {
            1.0
        } else {
            (std::f64::consts::PI * j as f64 * times[r]).cos()
        }
    })
}

/// Clamped uniform knot vector on `[0, 1]` with `num_basis + degree + 1` knots.
pub fn clamped_uniform_knots(num_basis: usize, degree: usize) -> Vec<f64> {
    let interior = num_basis - degree - 1;
    let mut knots = vec![0.0; degree + 1];
    knots.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
    knots.extend(std::iter::repeat_n(1.0, degree + 1));
    knots
}

/// B-spline design matrix on a clamped uniform knot vector.
///
/// Columns are ordered by knot position, so low column indices are supported
/// near 0. Each row sums to one.
pub fn bspline_design(points: &[f64], num_basis: usize, degree: usize) -> Result<DMatrix<f64>> {
    if num_basis < degree + 1 {
        return Err(Error::validation(format!(
            "B-spline basis needs at least degree + 1 = {} functions, got {num_basis}",
            degree + 1
        )));
    }
    let knots = clamped_uniform_knots(num_basis, degree);
    let mut out = DMatrix::zeros(points.len(), num_basis);
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    let mut n = vec![0.0; degree + 1];
    for (r, &x) in points.iter().enumerate() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::validation(format!("B-spline point {x} outside [0, 1]")));
        }
        // knot span with knots[span] <= x < knots[span + 1]; x = 1 uses the last span
        let span = if x >= 1.0 {
            num_basis - 1
        } else {
            let mut s = degree;
            while s < num_basis - 1 && knots[s + 1] <= x {
                s += 1;
            }
            s
        };
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - knots[span + 1 - j];
            right[j] = knots[span + j] - x;
            let mut saved = 0.0;
            for k in 0..j {
                let temp = n[k] / (right[k + 1] + left[j - k]);
                n[k] = saved + right[k + 1] * temp;
                saved = left[j - k] * temp;
            }
            n[j] = saved;
        }
        for k in 0..=degree {
            out[(r, span - degree + k)] = n[k];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    FourierCosine,
    CubicBSpline,
}

/// A column family for a design matrix.
///
/// For `FourierCosine`, `order` is the highest frequency `J` and the basis
/// has `J + 1` columns starting with the constant. For `CubicBSpline`,
/// `order` is the number of basis functions. `intercept` prepends a column of
/// ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub order: usize,
    #[serde(default)]
    pub intercept: bool,
}

impl BasisSpec {
    pub fn fourier(order: usize) -> Self {
        Self {
            kind: BasisKind::FourierCosine,
            order,
            intercept: false,
        }
    }

    pub fn bspline(num_basis: usize) -> Self {
        Self {
            kind: BasisKind::CubicBSpline,
            order: num_basis,
            intercept: false,
        }
    }

    pub fn with_intercept(mut self) -> Self {
        self.intercept = true;
        self
    }

    pub fn ncols(&self) -> usize {
        let base = match self.kind {
            BasisKind::FourierCosine => self.order + 1,
            BasisKind::CubicBSpline => self.order,
        };
        base + usize::from(self.intercept)
    }

    pub fn design(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let base = match self.kind {
            BasisKind::FourierCosine => fourier_design(times, self.order),
            BasisKind::CubicBSpline => bspline_design(times, self.order, 3)?,
        };
        if !self.intercept {
            return Ok(base);
        }
        Ok(DMatrix::from_fn(times.len(), base.ncols() + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                base[(r, c - 1)]
            }
        }))
    }
}

/// Fixed-effect columns before any covariates are appended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FixedDesign {
    #[default]
    Intercept,
    Basis(BasisSpec),
}

impl FixedDesign {
    pub fn ncols(&self) -> usize {
        match self {
            FixedDesign::Intercept => 1,
            FixedDesign::Basis(b) => b.ncols(),
        }
    }
}

/// Sorted, nonempty set of random-effect column indices (0-based) shared
/// between an observation and its predictive replicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SharedSet(Vec<usize>);

impl SharedSet {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::validation("shared set must be nonempty"));
        }
        Ok(Self(indices))
    }

    /// All of `0..q`.
    pub fn all(q: usize) -> Result<Self> {
        Self::new((0..q).collect())
    }

    pub fn range(first: usize, last: usize) -> Result<Self> {
        if last < first {
            return Err(Error::validation(format!("empty index range {first}..{last}")));
        }
        Self::new((first..=last).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, q: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last >= q => Err(Error::validation(format!(
                "shared index {last} out of range for {q} random-effect columns"
            ))),
            _ => Ok(()),
        }
    }

    /// Indices of `0..q` not in the set, in increasing order.
    pub fn complement(&self, q: usize) -> Vec<usize> {
        (0..q).filter(|j| self.0.binary_search(j).is_err()).collect()
    }
}

impl TryFrom<Vec<usize>> for SharedSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SharedSet> for Vec<usize> {
    fn from(s: SharedSet) -> Self {
        s.0
    }
}

/// Fixed and random design matrices of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDesign {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub fixed: FixedDesign,
    pub random: BasisSpec,
    pub shared: SharedSet,
    #[serde(default)]
    pub priors: PriorSpec,
}

impl ModelSpec {
    pub fn new(fixed: FixedDesign, random: BasisSpec, shared: SharedSet) -> Result<Self> {
        let spec = Self {
            fixed,
            random,
            shared,
            priors: PriorSpec::default(),
        };
        spec.shared.check(spec.q())?;
        Ok(spec)
    }

    /// Number of random-effect columns.
    pub fn q(&self) -> usize {
        self.random.ncols()
    }

    /// Number of fixed-effect columns for a dataset with `n_covariates` extras.
    pub fn p(&self, n_covariates: usize) -> usize {
        self.fixed.ncols() + n_covariates
    }

    /// Design matrices at arbitrary times. Missing covariates are taken as zero.
    pub fn design_at(&self, times: &[f64], covariates: Option<&[Vec<f64>]>, n_covariates: usize) -> Result<SubjectDesign> {
        let base = match &self.fixed {
            FixedDesign::Intercept => DMatrix::from_element(times.len(), 1, 1.0),
            FixedDesign::Basis(b) => b.design(times)?,
        };
        let k = base.ncols();
        let x = DMatrix::from_fn(times.len(), k + n_covariates, |r, c| {
            if c < k {
                base[(r, c)]
            } else {
                covariates.map_or(0.0, |rows| rows[r][c - k])
            }
        });
        let z = self.random.design(times)?;
        Ok(SubjectDesign { x, z })
    }

    pub fn subject_design(&self, s: &SubjectRecord, n_covariates: usize) -> Result<SubjectDesign> {
        self.design_at(&s.times, Some(&s.covariates), n_covariates)
    }

    /// Designs for every subject, after checking the shared set.
    pub fn designs(&self, ds: &LongitudinalDataset) -> Result<Vec<SubjectDesign>> {
        self.shared.check(self.q())?;
        ds.subjects
            .iter()
            .map(|s| self.subject_design(s, ds.n_covariates()))
            .collect()
    }
}

/// Power spectrum at the first `n_freq` DFT bins.
///
/// `DFT(k) = Σ_j Y(j) exp(-2πi (j-1)(k-1) / J)`; each output is the squared
/// modulus of the mean DFT over the integer bins within `±h` of bin `k`.
/// With `h = 0.5` this is the periodogram `|DFT(k)|²`.
pub fn power_spectrum(signal: &[f64], n_freq: usize, h: f64) -> Result<Vec<f64>> {
    let len = signal.len();
    if len == 0 {
        return Err(Error::validation("power spectrum of an empty signal"));
    }
    if n_freq > len {
        return Err(Error::validation(format!(
            "requested {n_freq} frequencies from a signal of length {len}"
        )));
    }
    if !(h >= 0.0) || !h.is_finite() {
        return Err(Error::validation(format!("window half-width must be nonnegative, got {h}")));
    }
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);

    let out = (0..n_freq)
        .map(|k| {
            let lo = (k as f64 - h).ceil() as i64;
            let hi = (k as f64 + h).floor() as i64;
            let mut acc = Complex::new(0.0, 0.0);
            for m in lo..=hi {
                acc += buf[m.rem_euclid(len as i64) as usize];
            }
            let count = (hi - lo + 1) as f64;
            (acc / count).norm_sqr()
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_csv() -> &'static str {
        "subject,time,y\na,2,1.5\na,0,0.5\nb,1,2\na,1,1\nb,0,3\n"
    }

    #[test]
    fn groups_rows_by_subject() {
        let ds = read_csv(small_csv().as_bytes()).unwrap();
        assert_eq!(ds.n_subjects(), 2);
        assert_eq!(ds.subjects[0].id, "a");
        assert_eq!(ds.subjects[0].times, vec![0.0, 1.0, 2.0]);
        assert_eq!(ds.subjects[0].y, vec![0.5, 1.0, 1.5]);
        assert_eq!(ds.subjects[1].len(), 2);
    }

    #[test]
    fn nan_row_is_a_parse_error_with_line() {
        let err = read_csv("subject,time,y\na,0.1,1\na,0.5,NaN\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_time_is_rejected() {
        let err = read_csv("subject,time,y\na,0.5,1\na,0.5,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(read_csv("subject,time,y\n".as_bytes()), Err(Error::Validation(_))));
        assert!(read_csv("".as_bytes()).is_err());
    }

    #[test]
    fn covariates_are_read() {
        let ds = read_csv("subject,time,y,x1,x2\na,0,1,2,3\na,1,1,4,5\n".as_bytes()).unwrap();
        assert_eq!(ds.covariate_names, vec!["x1", "x2"]);
        assert_eq!(ds.subjects[0].covariates[1], vec![4.0, 5.0]);
    }

    #[test]
    fn standardize_by_hand() {
        let ds = LongitudinalDataset::new(
            vec![SubjectRecord::new("a", vec![0.0, 20.0, 40.0], vec![1.0, 2.0, 3.0])],
            vec![],
        )
        .unwrap();
        let (out, tr) = standardize(&ds).unwrap();
        assert_eq!(out.subjects[0].times, vec![0.0, 0.5, 1.0]);
        for (a, b) in out.subjects[0].y.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(tr.time_range, 40.0);
        assert!((tr.y_to_original(1.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let ds = LongitudinalDataset::new(
            vec![SubjectRecord::new("a", vec![0.0, 1.0], vec![2.0, 2.0])],
            vec![],
        )
        .unwrap();
        assert!(matches!(standardize(&ds), Err(Error::Validation(_))));
        let ds = LongitudinalDataset::new(
            vec![
                SubjectRecord::new("a", vec![3.0], vec![1.0]),
                SubjectRecord::new("b", vec![3.0], vec![2.0]),
            ],
            vec![],
        )
        .unwrap();
        assert!(matches!(standardize(&ds), Err(Error::Validation(_))));
    }

    #[test]
    fn fourier_rows() {
        let m = fourier_design(&[0.0, 1.0], 1);
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        assert!((m[(1, 1)] + 1.0).abs() < 1e-15);
        let m = fourier_design(&[0.5], 2);
        assert_eq!(m[(0, 0)], 1.0);
        assert!(m[(0, 1)].abs() < 1e-15);
        assert!((m[(0, 2)] + 1.0).abs() < 1e-15);
        let m = fourier_design(&[0.1, 0.7, 0.3], 0);
        assert!(m.iter().all(|&v| v == 1.0));
        assert_eq!(m.ncols(), 1);
    }

    #[test]
    fn bspline_boundaries() {
        let m = bspline_design(&[0.0, 1.0], 8, 3).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert!(m.row(0).iter().skip(1).all(|&v| v == 0.0));
        assert_eq!(m[(1, 7)], 1.0);
        assert!(bspline_design(&[1.2], 8, 3).is_err());
        assert!(bspline_design(&[0.5], 3, 3).is_err());
    }

    #[test]
    fn bspline_lower_columns_fit_lower_points() {
        let m = bspline_design(&[0.05, 0.95], 30, 3).unwrap();
        let argmax = |r: usize| (0..30).max_by(|&a, &b| m[(r, a)].total_cmp(&m[(r, b)])).unwrap();
        assert!(argmax(0) < 5);
        assert!(argmax(1) > 25);
    }

    #[test]
    fn constant_signal_spectrum() {
        let ps = power_spectrum(&[2.0; 16], 5, 0.5).unwrap();
        assert!((ps[0] - 32.0f64.powi(2)).abs() < 1e-9);
        assert!(ps[1..].iter().all(|&v| v.abs() < 1e-18));
    }

    #[test]
    fn single_tone_peaks_at_its_bin() {
        let len = 64;
        let sig: Vec<f64> = (0..len)
            .map(|j| (2.0 * std::f64::consts::PI * 3.0 * j as f64 / len as f64).cos())
            .collect();
        let ps = power_spectrum(&sig, 20, 0.5).unwrap();
        let peak = (0..20).max_by(|&a, &b| ps[a].total_cmp(&ps[b])).unwrap();
        // bin k = 4 in one-based numbering
        assert_eq!(peak, 3);
        assert!((ps[3] - (len as f64 / 2.0).powi(2)).abs() < 1e-8);
    }

    // Textbook recursion with 0/0 := 0; half-open support except at the right end.
    fn cox_de_boor(knots: &[f64], i: usize, d: usize, x: f64) -> f64 {
        if d == 0 {
            let last = *knots.last().unwrap();
            let inside = knots[i] <= x && x < knots[i + 1];
            let right_end = x == last && knots[i] < knots[i + 1] && knots[i + 1] == last;
            return if inside || right_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let l = knots[i + d] - knots[i];
        if l > 0.0 {
            v += (x - knots[i]) / l * cox_de_boor(knots, i, d - 1, x);
        }
        let r = knots[i + d + 1] - knots[i + 1];
        if r > 0.0 {
            v += (knots[i + d + 1] - x) / r * cox_de_boor(knots, i + 1, d - 1, x);
        }
        v
    }

    #[test]
    fn bspline_matches_naive_recursion() {
        // clamped uniform: num_basis + degree + 1 knots, two interior at 1/3, 2/3
        let knots = [0.0, 0.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(clamped_uniform_knots(6, 3), knots.to_vec());
        let pts = [0.37, 0.0, 0.1, 0.5, 0.999, 1.0];
        let m = bspline_design(&pts, 6, 3).unwrap();
        for (r, &x) in pts.iter().enumerate() {
            for j in 0..6 {
                let want = cox_de_boor(&knots, j, 3, x);
                assert!((m[(r, j)] - want).abs() < 1e-14, "x={x} j={j}: {} vs {want}", m[(r, j)]);
            }
        }
    }

    #[test]
    fn spectrum_matches_naive_dft() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(64);
        let len = 64;
        let sig: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ps = power_spectrum(&sig, 32, 0.5).unwrap();
        for (k, &got) in ps.iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &y) in sig.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (j * k) as f64 / len as f64;
                re += y * ang.cos();
                im += y * ang.sin();
            }
            let want = re * re + im * im;
            assert!((got - want).abs() <= 1e-8 * want.max(1e-300), "bin {k}: {got} vs {want}");
        }
    }

    #[test]
    fn spectrum_rejects_bad_input() {
        assert!(power_spectrum(&[], 1, 0.5).is_err());
        assert!(power_spectrum(&[1.0, 2.0], 3, 0.5).is_err());
    }

    #[test]
    fn shared_set_complement() {
        let a = SharedSet::new(vec![3, 1, 1]).unwrap();
        assert_eq!(a.indices(), &[1, 3]);
        assert_eq!(a.complement(5), vec![0, 2, 4]);
        assert!(a.check(4).is_ok());
        assert!(a.check(3).is_err());
        assert!(SharedSet::new(vec![]).is_err());
    }

    #[test]
    fn bspline_with_intercept_has_leading_ones() {
        let b = BasisSpec::bspline(6).with_intercept();
        assert_eq!(b.ncols(), 7);
        let m = b.design(&[0.2, 0.8]).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(1, 0)], 1.0);
    }

    proptest! {
        #[test]
        fn bspline_partition_of_unity(x in 0.0f64..=1.0, nb in 4usize..35) {
            let m = bspline_design(&[x], nb, 3).unwrap();
            let sum: f64 = m.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(m.iter().all(|&v| (0.0..=1.0 + 1e-15).contains(&v)));
        }

        #[test]
        fn standardize_is_idempotent(ys in proptest::collection::vec(-50.0f64..50.0, 4..30)) {
            let times: Vec<f64> = (0..ys.len()).map(|i| i as f64 * 3.0 + 1.0).collect();
            let ds = LongitudinalDataset::new(vec![SubjectRecord::new("s", times, ys)], vec![]).unwrap();
            prop_assume!(standardize(&ds).is_ok());
            let (once, _) = standardize(&ds).unwrap();
            let (twice, _) = standardize(&once).unwrap();
            for (a, b) in once.subjects[0].y.iter().zip(&twice.subjects[0].y) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(&once.subjects[0].times, &twice.subjects[0].times);
        }

        #[test]
        fn spectrum_is_shift_invariant(sig in proptest::collection::vec(-5.0f64..5.0, 16..48), shift in 0usize..16) {
            let mut shifted = sig.clone();
            shifted.rotate_left(shift % sig.len());
            let a = power_spectrum(&sig, 8, 0.5).unwrap();
            let b = power_spectrum(&shifted, 8, 0.5).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn csv_round_trip(
            ys in proptest::collection::vec(proptest::num::f64::NORMAL, 1..12),
            xs in proptest::collection::vec(-1e6f64..1e6, 12),
        ) {
            let n = ys.len();
            let times: Vec<f64> = (0..n).map(|i| i as f64 / 7.0).collect();
            let subjects = vec![
                SubjectRecord {
                    id: "s 1".into(),
                    times: times.clone(),
                    y: ys.clone(),
                    covariates: (0..n).map(|i| vec![xs[i]]).collect(),
                },
                SubjectRecord {
                    id: "t".into(),
                    times: vec![0.25],
                    y: vec![ys[0]],
                    covariates: vec![vec![xs[0]]],
                },
            ];
            let ds = LongitudinalDataset::new(subjects, vec!["x1".into()]).unwrap();
            let mut buf = Vec::new();
            write_csv_to(&ds, &mut buf).unwrap();
            let back = read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
