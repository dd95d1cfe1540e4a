//! Deterministic stopping.
//!
//! The emulator keeps a small vector of event counters. Offline, the final
//! counters of `m` sample runs (`C`, m x n) and their measured run times
//! (`T`, length m) are fitted with least squares, `T ~ C w`. The weight
//! vector turns any counter vector into a scalar metric `c . w`, which is
//! independent of host speed. A run stops once its metric reaches a
//! threshold; dividing the threshold by the platform speed (metrics per
//! second) gives the implied wall-clock budget.

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum Counter {
    BlocksTranslated,
    BlocksExecuted,
    InstrsInterpreted,
    MemLoads,
    MemStores,
    Syscalls,
    ApiCalls,
    PagesMapped,
}

pub const COUNTER_NAMES: [&str; 8] = [
    "blocks_translated",
    "blocks_executed",
    "instrs_interpreted",
    "mem_loads",
    "mem_stores",
    "syscalls",
    "api_calls",
    "pages_mapped",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CounterSet {
    pub values: [u64; 8],
}

impl CounterSet {
    pub const LEN: usize = 8;

    #[inline(always)]
    pub fn bump(&mut self, c: Counter, n: u64) {
        self.values[c as usize] += n;
    }

    pub fn get(&self, c: Counter) -> u64 {
        self.values[c as usize]
    }

    pub fn reset(&mut self) {
        self.values = [0; 8];
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

impl std::ops::Add for CounterSet {
    type Output = CounterSet;
    fn add(mut self, rhs: CounterSet) -> CounterSet {
        for (a, b) in self.values.iter_mut().zip(rhs.values) {
            *a += b;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("counter matrix is rank deficient (condition estimate {0:.3e})")]
    RankDeficient(f64),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("csv: {0}")]
    Csv(String),
}

/// Condition estimates above this are treated as rank deficiency.
pub const MAX_CONDITION: f64 = 1e12;

/// Dense row-major matrix of calibration counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, MetricsError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MetricsError::DimensionMismatch("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Matrix {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Matrix {
            rows: n,
            cols: n,
            data,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, w: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            for &c in cols {
                data.push(self.at(r, c));
            }
        }
        Matrix {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub weights: Vec<f64>,
    pub residual_norm: f64,
    /// `||Cw - T|| / ||T||`, zero when `T` is zero.
    pub relative_residual: f64,
    /// 1-norm condition estimate of the column-equilibrated system.
    pub condition: f64,
    /// Indices of weights that came out negative.
    pub negative: Vec<usize>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `min ||C w - T||_2` with Householder QR on the column-scaled
/// matrix.
pub fn calibrate(c: &Matrix, t: &[f64]) -> Result<Calibration, MetricsError> {
    let (m, n) = (c.rows, c.cols);
    if t.len() != m {
        return Err(MetricsError::DimensionMismatch(format!(
            "C has {m} rows, T has {}",
            t.len()
        )));
    }
    if n == 0 || m < n {
        return Err(MetricsError::DimensionMismatch(format!(
            "need m >= n >= 1, got m={m} n={n}"
        )));
    }
    // column-major working copy, equilibrated to unit column norms
    let mut a = vec![0.0; m * n];
    let mut scale = vec![1.0; n];
    for j in 0..n {
        let col: Vec<f64> = (0..m).map(|i| c.at(i, j)).collect();
        let s = norm(&col);
        if s == 0.0 {
            return Err(MetricsError::RankDeficient(f64::INFINITY));
        }
        scale[j] = s;
        for i in 0..m {
            a[j * m + i] = col[i] / s;
        }
    }
    let mut b = t.to_vec();
    for k in 0..n {
        let x = &a[k * m + k..(k + 1) * m];
        let alpha = norm(x);
        if alpha == 0.0 {
            return Err(MetricsError::RankDeficient(f64::INFINITY));
        }
        let alpha = if x[0] > 0.0 { -alpha } else { alpha };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|e| e * e).sum();
        if vnorm2 > 0.0 {
            let reflect = |col: &mut [f64]| {
                let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                let f = 2.0 * dot / vnorm2;
                for (c, vi) in col.iter_mut().zip(&v) {
                    *c -= f * vi;
                }
            };
            for j in k..n {
                reflect(&mut a[j * m + k..(j + 1) * m]);
            }
            reflect(&mut b[k..]);
        }
    }
    let r = |i: usize, j: usize| a[j * m + i];
    let condition = triangular_condition(n, &r);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(MetricsError::RankDeficient(condition));
    }
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| r(i, j) * y[j]).sum();
        y[i] = (b[i] - s) / r(i, i);
    }
    let weights: Vec<f64> = y.iter().zip(&scale).map(|(yi, s)| yi / s).collect();
    let fitted = c.mul_vec(&weights);
    let resid: Vec<f64> = fitted.iter().zip(t).map(|(f, t)| f - t).collect();
    let residual_norm = norm(&resid);
    let tn = norm(t);
    let negative = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w < 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(Calibration {
        weights,
        residual_norm,
        relative_residual: if tn == 0.0 { 0.0 } else { residual_norm / tn },
        condition,
        negative,
    })
}

/// `||R||_1 * ||R^-1||_1` for upper-triangular `R`.
fn triangular_condition(n: usize, r: &dyn Fn(usize, usize) -> f64) -> f64 {
    if (0..n).any(|i| r(i, i) == 0.0) {
        return f64::INFINITY;
    }
    let norm_r = (0..n)
        .map(|j| (0..=j).map(|i| r(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut norm_inv: f64 = 0.0;
    for col in 0..n {
        // solve R x = e_col
        let mut x = vec![0.0; n];
        for i in (0..=col).rev() {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (i + 1..=col).map(|j| r(i, j) * x[j]).sum();
            x[i] = (rhs - s) / r(i, i);
        }
        norm_inv = norm_inv.max(x.iter().map(|v| v.abs()).sum());
    }
    norm_r * norm_inv
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    pub weights: Vec<f64>,
    /// Metrics per second on this platform.
    pub platform_speed: f64,
    /// Stop threshold in metrics; zero disables stopping.
    pub threshold: f64,
}

impl Default for MetricModel {
    fn default() -> Self {
        MetricModel {
            weights: vec![0.0; CounterSet::LEN],
            platform_speed: 0.0,
            threshold: 0.0,
        }
    }
}

/// Per-counter contributions `c_i * w_i`.
pub fn contributions(c: &[f64], w: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if c.len() != w.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} counters, {} weights",
            c.len(),
            w.len()
        )));
    }
    Ok(c.iter().zip(w).map(|(c, w)| c * w).collect())
}

/// `c . w`, summed in counter order so it equals the sum of
/// [`contributions`] exactly.
pub fn metric(c: &[f64], w: &[f64]) -> Result<f64, MetricsError> {
    Ok(contributions(c, w)?.into_iter().sum())
}

impl MetricModel {
    pub fn new(weights: Vec<f64>) -> Self {
        MetricModel {
            weights,
            ..Default::default()
        }
    }

    pub fn metric(&self, c: &CounterSet) -> f64 {
        let mut total = 0.0;
        for (v, w) in c.values.iter().zip(&self.weights) {
            total += *v as f64 * w;
        }
        total
    }

    pub fn should_stop(&self, c: &CounterSet) -> bool {
        self.threshold > 0.0 && self.metric(c) >= self.threshold
    }

    /// Wall-clock budget implied by the threshold.
    pub fn expected_time(&self) -> f64 {
        self.threshold / self.platform_speed
    }
}

/// Metrics per second over a corpus of `(metric, wall seconds)` runs.
pub fn platform_speed(runs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let metrics: f64 = runs.iter().map(|r| r.0).sum();
    let secs: f64 = runs.iter().map(|r| r.1).sum();
    Ok(metrics / secs)
}

pub const TIME_COLUMN: &str = "time_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationData {
    pub names: Vec<String>,
    pub counters: Matrix,
    pub times: Vec<f64>,
}

/// Reads a CSV whose header names the counters followed by a final
/// `time_seconds` column.
pub fn read_calibration_csv(r: impl Read) -> Result<CalibrationData, MetricsError> {
    let csv_err = |e: csv::Error| MetricsError::Csv(e.to_string());
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let cols = header.len();
    if cols < 2 || &header[cols - 1] != TIME_COLUMN {
        return Err(MetricsError::Csv(format!(
            "last column must be {TIME_COLUMN}"
        )));
    }
    let names: Vec<String> = header.iter().take(cols - 1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| MetricsError::Csv(format!("row {}: {e}", line + 2)))?;
        times.push(vals[cols - 1]);
        rows.push(vals[..cols - 1].to_vec());
    }
    let counters = if rows.is_empty() {
        Matrix {
            rows: 0,
            cols: names.len(),
            data: Vec::new(),
        }
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(CalibrationData {
        names,
        counters,
        times,
    })
}

/// Writes `counter,weight` rows.
pub fn write_weights_csv(
    w: impl Write,
    names: &[String],
    weights: &[f64],
) -> Result<(), MetricsError> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| MetricsError::Csv(e.to_string());
    wtr.write_record(["counter", "weight"]).map_err(err)?;
    for (n, v) in names.iter().zip(weights) {
        wtr.write_record([n.as_str(), &format!("{v:e}")])
            .map_err(err)?;
    }
    wtr.flush().map_err(|e| MetricsError::Csv(e.to_string()))
}
