//! Sparse spatial weight matrices.
//!
//! A [`WeightMatrix`] is stored in compressed-row form. It is immutable once
//! built; constructors validate entries (finite, non-negative, in range) while
//! structural properties such as the absence of self-loops are reported by
//! [`validate`] so that malformed input files can be diagnosed rather than
//! silently rejected.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums of a row-normalized matrix must equal one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    row_normalized: bool,
}

impl WeightMatrix {
    /// Builds a matrix from `(row, col, weight)` triplets. Duplicate positions
    /// are summed and explicit zeros dropped.
    pub fn from_triplets<I>(n: usize, triplets: I, row_normalized: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        if n == 0 {
            return Err(Error::InvalidTopology("matrix has no locations".into()));
        }
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, w) in triplets {
            if i >= n || j >= n {
                return Err(Error::InvalidTopology(format!(
                    "entry ({i}, {j}) outside {n}x{n} matrix"
                )));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("weight matrix entries"));
            }
            if w < 0.0 {
                return Err(Error::InvalidTopology(format!(
                    "negative weight {w} at ({i}, {j})"
                )));
            }
            entries.push((i, j, w));
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, w) in entries {
            if last == Some((i, j)) {
                *vals.last_mut().expect("duplicate follows an entry") += w;
                continue;
            }
            cols.push(j);
            vals.push(w);
            row_ptr[i + 1] += 1;
            last = Some((i, j));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }

        let mut out = WeightMatrix { n, row_ptr, cols, vals, row_normalized };
        out.drop_zeros();
        Ok(out)
    }

    fn drop_zeros(&mut self) {
        if self.vals.iter().all(|&v| v != 0.0) {
            return;
        }
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut cols = Vec::with_capacity(self.cols.len());
        let mut vals = Vec::with_capacity(self.vals.len());
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &w) in c.iter().zip(v) {
                if w != 0.0 {
                    cols.push(j);
                    vals.push(w);
                }
            }
            row_ptr[i + 1] = cols.len();
        }
        self.row_ptr = row_ptr;
        self.cols = cols;
        self.vals = vals;
    }

    /// Number of locations.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_row_normalized(&self) -> bool {
        self.row_normalized
    }

    /// Column indices and weights of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[range.clone()], &self.vals[range])
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        match c.binary_search(&j) {
            Ok(k) => v[k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &w)| (i, j, w))
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).1.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (_, j, w) in self.triplets() {
            out[j] += w;
        }
        out
    }

    /// `tr(WᵀW)`, the sum of squared weights.
    pub fn trace_wtw(&self) -> f64 {
        self.vals.iter().map(|w| w * w).sum()
    }

    /// `out = W x`.
    pub fn lag_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        for (i, o) in out.iter_mut().enumerate() {
            let (c, v) = self.row(i);
            *o = c.iter().zip(v).map(|(&j, &w)| w * x[j]).sum();
        }
    }

    /// `out = Wᵀ x`.
    pub fn lag_transpose_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.n {
            let (c, v) = self.row(i);
            let xi = x[i];
            for (&j, &w) in c.iter().zip(v) {
                out[j] += w * xi;
            }
        }
    }

    /// Spatial lag `W x` of a single vector.
    pub fn lag(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "spatial lag",
                expected: self.n,
                found: x.len(),
            });
        }
        let mut out = vec![0.0; self.n];
        self.lag_into(x, &mut out);
        Ok(out)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, w) in self.triplets() {
            m[(i, j)] = w;
        }
        m
    }

    /// Writes the matrix as `i,j,w` triplets with a header line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["i", "j", "w"])?;
        for (i, j, w) in self.triplets() {
            wtr.write_record([i.to_string(), j.to_string(), format_float(w)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads `i,j,w` triplets. The number of locations is one more than the
    /// largest index present; the row-normalized flag is set when every
    /// non-empty row sums to one.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let header: Vec<&str> = headers.iter().map(str::trim).collect();
        if header != ["i", "j", "w"] {
            return Err(Error::Schema(format!(
                "weight file header must be 'i,j,w', found '{}'",
                header.join(",")
            )));
        }
        let mut triplets = Vec::new();
        let mut max_index = 0usize;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_idx = |k: usize| -> Result<usize> {
                rec.get(k).and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                    Error::Schema(format!("bad index on data line {}", line + 1))
                })
            };
            let i = parse_idx(0)?;
            let j = parse_idx(1)?;
            let w: f64 = rec
                .get(2)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Schema(format!("bad weight on data line {}", line + 1)))?;
            max_index = max_index.max(i).max(j);
            triplets.push((i, j, w));
        }
        if triplets.is_empty() {
            return Err(Error::Schema("weight file has no entries".into()));
        }
        let mut w = WeightMatrix::from_triplets(max_index + 1, triplets, false)?;
        w.row_normalized = w
            .row_sums()
            .iter()
            .enumerate()
            .all(|(i, s)| w.degree(i) == 0 || (s - 1.0).abs() <= ROW_SUM_TOL);
        Ok(w)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_float(x: f64) -> String {
    format!("{x:?}")
}

/// Planar point locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coordinates {
    ids: Vec<String>,
    points: Vec<(f64, f64)>,
}

impl Coordinates {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        let ids = (0..points.len()).map(|i| i.to_string()).collect();
        Self::with_ids(ids, points)
    }

    pub fn with_ids(ids: Vec<String>, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidTopology("need at least two locations".into()));
        }
        if ids.len() != points.len() {
            return Err(Error::DimensionMismatch {
                context: "coordinate ids",
                expected: points.len(),
                found: ids.len(),
            });
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite("coordinates"));
        }
        Ok(Coordinates { ids, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Reads `id,x,y` rows; location indices follow file order.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let header: Vec<&str> = headers.iter().map(str::trim).collect();
        if header != ["id", "x", "y"] {
            return Err(Error::Schema(format!(
                "coordinate file header must be 'id,x,y', found '{}'",
                header.join(",")
            )));
        }
        let mut ids = Vec::new();
        let mut points = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k).and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                    Error::Schema(format!("bad coordinate on data line {}", line + 1))
                })
            };
            ids.push(rec.get(0).unwrap_or_default().trim().to_string());
            points.push((num(1)?, num(2)?));
        }
        Coordinates::with_ids(ids, points)
    }
}

/// Ring of `n` locations, each linked with weight 1 to its `k` predecessors
/// and `k` successors.
pub fn build_circular(n: usize, k: usize) -> Result<WeightMatrix> {
    if k == 0 {
        return Err(Error::InvalidTopology("K must be at least 1".into()));
    }
    if n < 2 * k + 1 {
        return Err(Error::InvalidTopology(format!(
            "circular world with n = {n} cannot hold 2K = {} distinct neighbors",
            2 * k
        )));
    }
    let triplets = (0..n).flat_map(|i| {
        (1..=k).flat_map(move |d| [(i, (i + n - d) % n, 1.0), (i, (i + d) % n, 1.0)])
    });
    WeightMatrix::from_triplets(n, triplets, false)
}

/// Directed k-nearest-neighbor weights by Euclidean distance. Distance ties
/// go to the lower location index.
pub fn build_knn(coords: &Coordinates, k: usize) -> Result<WeightMatrix> {
    let n = coords.len();
    if k == 0 {
        return Err(Error::InvalidTopology("K must be at least 1".into()));
    }
    if k >= n {
        return Err(Error::InvalidTopology(format!(
            "K = {k} neighbors requested but only {n} locations"
        )));
    }
    let pts = coords.points();
    let mut triplets = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, &(xi, yi)) in pts.iter().enumerate() {
        cand.clear();
        cand.extend(
            pts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &(xj, yj))| ((xi - xj).powi(2) + (yi - yj).powi(2), j)),
        );
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        triplets.extend(cand[..k].iter().map(|&(_, j)| (i, j, 1.0)));
    }
    WeightMatrix::from_triplets(n, triplets, false)
}

/// Divides every row by its sum. Locations without neighbors are an error.
pub fn row_normalize(w: &WeightMatrix) -> Result<WeightMatrix> {
    let mut out = w.clone();
    for i in 0..w.n {
        let range = w.row_ptr[i]..w.row_ptr[i + 1];
        let sum: f64 = w.vals[range.clone()].iter().sum();
        if range.is_empty() || sum <= 0.0 {
            return Err(Error::IsolatedLocation { index: i });
        }
        for v in &mut out.vals[range] {
            *v /= sum;
        }
    }
    out.row_normalized = true;
    Ok(out)
}

/// `W · M` for a dense `n × k` matrix.
pub fn spatial_lag(w: &WeightMatrix, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != w.n {
        return Err(Error::DimensionMismatch {
            context: "spatial lag",
            expected: w.n,
            found: m.nrows(),
        });
    }
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for c in 0..m.ncols() {
        let src = m.column(c);
        let mut dst = out.column_mut(c);
        w.lag_into(
            src.as_slice(),
            dst.as_mut_slice(),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    SelfLoop { index: usize, weight: f64 },
    RowSum { index: usize, sum: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Validation {
    pub violations: Vec<Violation>,
    pub max_abs_row_sum: f64,
    pub max_abs_col_sum: f64,
    pub min_degree: usize,
    pub max_degree: usize,
    pub isolated: Vec<usize>,
}

impl Validation {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Reports self-loops, row-sum deviations (when flagged normalized) and the
/// row/column sum bounds and degree range.
pub fn validate(w: &WeightMatrix) -> Validation {
    let mut violations = Vec::new();
    for i in 0..w.n {
        let d = w.get(i, i);
        if d != 0.0 {
            violations.push(Violation::SelfLoop { index: i, weight: d });
        }
    }
    let row_sums = w.row_sums();
    if w.row_normalized {
        for (i, &s) in row_sums.iter().enumerate() {
            if w.degree(i) > 0 && (s - 1.0).abs() > ROW_SUM_TOL {
                violations.push(Violation::RowSum { index: i, sum: s });
            }
        }
    }
    let degrees: Vec<usize> = (0..w.n).map(|i| w.degree(i)).collect();
    Validation {
        violations,
        max_abs_row_sum: row_sums.iter().fold(0.0, |a, s| a.max(s.abs())),
        max_abs_col_sum: w.col_sums().iter().fold(0.0, |a, s| a.max(s.abs())),
        min_degree: degrees.iter().copied().min().unwrap_or(0),
        max_degree: degrees.iter().copied().max().unwrap_or(0),
        isolated: degrees
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| i)
            .collect(),
    }
}
