//! Toy system, CSV ingestion, split protocols and evaluation metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ode1_feature;
use crate::numerics::{Matrix, RngStream};
use crate::training::TrainingSet;

/// Role of one target entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    ImputeTest,
    ExtrapTest,
    /// Random hold-out test entry.
    Test,
}

impl SplitLabel {
    pub const ALL: [SplitLabel; 4] = [SplitLabel::Train, SplitLabel::ImputeTest, SplitLabel::ExtrapTest, SplitLabel::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitLabel::Train => "train",
            SplitLabel::ImputeTest => "impute_test",
            SplitLabel::ExtrapTest => "extrap_test",
            SplitLabel::Test => "test",
        }
    }
}

/// Inputs, targets, an observation mask and a label per target entry
/// (row-major, `N x D`).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub x: Matrix,
    pub y: Matrix,
    pub observed: Vec<bool>,
    pub labels: Vec<SplitLabel>,
}

impl DatasetSplit {
    /// Every observed entry labelled as training.
    pub fn all_train(x: Matrix, y: Matrix, observed: Vec<bool>) -> Result<Self> {
        if x.rows() != y.rows() || observed.len() != y.rows() * y.cols() {
            return Err(Error::Shape(format!("{} input rows, {}x{} targets, {} mask entries", x.rows(), y.rows(), y.cols(), observed.len())));
        }
        let labels = vec![SplitLabel::Train; observed.len()];
        Ok(Self { x, y, observed, labels })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn outputs(&self) -> usize {
        self.y.cols()
    }

    /// Observed entries carrying `label`.
    pub fn entry_mask(&self, label: SplitLabel) -> Vec<bool> {
        self.observed.iter().zip(&self.labels).map(|(&o, &l)| o && l == label).collect()
    }

    pub fn count(&self, label: SplitLabel) -> usize {
        self.entry_mask(label).iter().filter(|&&b| b).count()
    }

    /// Rows with at least one entry in `mask`.
    fn rows_with(&self, mask: &[bool]) -> Vec<usize> {
        let d = self.outputs();
        (0..self.rows()).filter(|&i| mask[i * d..(i + 1) * d].iter().any(|&b| b)).collect()
    }

    /// Rows holding training entries, masked to those entries.
    pub fn training_set(&self) -> Result<TrainingSet> {
        let mask = self.entry_mask(SplitLabel::Train);
        let rows = self.rows_with(&mask);
        if rows.is_empty() {
            return Err(Error::Degenerate("no training entries".into()));
        }
        let d = self.outputs();
        let sub: Vec<bool> = rows.iter().flat_map(|&i| mask[i * d..(i + 1) * d].iter().copied()).collect();
        let full = sub.iter().all(|&b| b);
        TrainingSet::new(self.x.select_rows(&rows), self.y.select_rows(&rows), if full { None } else { Some(sub) })
    }

    /// Rows and per-entry mask of the entries carrying `label`.
    pub fn subset(&self, label: SplitLabel) -> (Vec<usize>, Vec<bool>) {
        let mask = self.entry_mask(label);
        let rows = self.rows_with(&mask);
        let d = self.outputs();
        let sub = rows.iter().flat_map(|&i| mask[i * d..(i + 1) * d].iter().copied()).collect();
        (rows, sub)
    }

    pub fn manifest(&self) -> SplitManifest {
        let mut partitions: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for label in SplitLabel::ALL {
            let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect();
            if !idx.is_empty() {
                partitions.insert(label.name().to_string(), idx);
            }
        }
        SplitManifest {
            rows: self.rows(),
            outputs: self.outputs(),
            partitions,
        }
    }

    /// Replace labels from a manifest.
    pub fn apply_manifest(&mut self, manifest: &SplitManifest) -> Result<()> {
        if manifest.rows != self.rows() || manifest.outputs != self.outputs() {
            return Err(Error::Shape(format!(
                "manifest is for {}x{} targets, data has {}x{}",
                manifest.rows,
                manifest.outputs,
                self.rows(),
                self.outputs()
            )));
        }
        let mut labels = vec![None; self.labels.len()];
        for (name, idx) in &manifest.partitions {
            let label = SplitLabel::ALL
                .into_iter()
                .find(|l| l.name() == name)
                .ok_or_else(|| Error::Config(format!("unknown partition {name:?}")))?;
            for &i in idx {
                match labels.get_mut(i) {
                    Some(slot @ None) => *slot = Some(label),
                    Some(Some(_)) => return Err(Error::Config(format!("entry {i} appears in two partitions"))),
                    None => return Err(Error::Config(format!("entry {i} out of range"))),
                }
            }
        }
        self.labels = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Config(format!("entry {i} has no partition"))))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

/// Flat entry indices (`row * outputs + output`) per partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub rows: usize,
    pub outputs: usize,
    pub partitions: BTreeMap<String, Vec<usize>>,
}

/// Two-stage toy system driven by `u(t) = cos(t/2) + 6 sin(3t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub noise_variance: f64,
    pub n_points: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub impute_window: (f64, f64),
    pub extrap_from: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.01,
            gamma2: 0.02,
            noise_variance: 0.04,
            n_points: 1000,
            t_min: 0.0,
            t_max: 1.25,
            impute_window: (0.208, 0.375),
            extrap_from: 1.0,
        }
    }
}

pub fn toy_force(t: f64) -> f64 {
    (0.5 * t).cos() + 6.0 * (3.0 * t).sin()
}

/// `int_0^s e^{-gamma (s - tau)} u(tau) dtau` for either sign of `s`.
pub fn toy_response(s: f64, gamma: f64) -> f64 {
    ode1_feature(s, gamma, 0.5).re + 6.0 * ode1_feature(s, gamma, 3.0).im
}

/// Generated toy data with the noiseless stages kept for reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyData {
    pub split: DatasetSplit,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    /// Noisy first-stage observations; not used as a target.
    pub y1: Vec<f64>,
}

pub fn gen_toy(config: &ToyConfig, rng: &mut RngStream) -> Result<ToyData> {
    if config.n_points < 2 {
        return Err(Error::Config(format!("need at least 2 points, got {}", config.n_points)));
    }
    if !(config.gamma1 > 0.0 && config.gamma2 > 0.0 && config.noise_variance >= 0.0 && config.t_max > config.t_min) {
        return Err(Error::Config("toy decays must be positive, noise nonnegative and the domain nonempty".into()));
    }
    let n = config.n_points;
    let t: Vec<f64> = (0..n)
        .map(|i| config.t_min + (config.t_max - config.t_min) * i as f64 / (n - 1) as f64)
        .collect();
    let f1: Vec<f64> = t.iter().map(|&s| toy_response(s, config.gamma1)).collect();
    let f2: Vec<f64> = f1.iter().map(|&s| toy_response(s, config.gamma2)).collect();
    let sd = config.noise_variance.sqrt();
    let y1: Vec<f64> = f1.iter().map(|v| v + sd * rng.normal()).collect();
    let y2: Vec<f64> = f2.iter().map(|v| v + sd * rng.normal()).collect();
    let (lo, hi) = config.impute_window;
    let labels = t
        .iter()
        .map(|&s| {
            if s >= config.extrap_from {
                SplitLabel::ExtrapTest
            } else if s >= lo && s <= hi {
                SplitLabel::ImputeTest
            } else {
                SplitLabel::Train
            }
        })
        .collect();
    Ok(ToyData {
        split: DatasetSplit {
            x: Matrix::column(&t),
            y: Matrix::column(&y2),
            observed: vec![true; n],
            labels,
        },
        f1,
        f2,
        y1,
    })
}

/// Column names for `p` inputs and `d` outputs: `x_0.., y_0..`.
pub fn default_header(p: usize, d: usize) -> Vec<String> {
    (0..p).map(|i| format!("x_{i}")).chain((0..d).map(|i| format!("y_{i}"))).collect()
}

/// Which columns hold inputs and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl CsvSchema {
    pub fn default_for(p: usize, d: usize) -> Self {
        let h = default_header(p, d);
        Self {
            inputs: h[..p].to_vec(),
            outputs: h[p..].to_vec(),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row: 0,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

/// Read a CSV whose header names every schema column. Empty cells and
/// `NaN` become masked targets; inputs must be finite numbers.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<DatasetSplit> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let find = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            column: name.to_string(),
            message: "column missing from header".into(),
        })
    };
    let xi: Vec<usize> = schema.inputs.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let yi: Vec<usize> = schema.outputs.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let (p, d) = (xi.len(), yi.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut observed = Vec::new();
    let mut n = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = r + 1;
        n = row;
        for (&c, name) in xi.iter().zip(&schema.inputs) {
            let cell = rec.get(c).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("invalid number {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: name.clone(),
                    message: "inputs must be finite".into(),
                });
            }
            xs.push(v);
        }
        for (&c, name) in yi.iter().zip(&schema.outputs) {
            let cell = rec.get(c).unwrap_or("");
            let v: f64 = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse().map_err(|_| Error::Parse {
                    row,
                    column: name.clone(),
                    message: format!("invalid number {cell:?}"),
                })?
            };
            observed.push(v.is_finite());
            ys.push(if v.is_finite() { v } else { 0.0 });
        }
    }
    if n == 0 {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            message: "no data rows".into(),
        });
    }
    DatasetSplit::all_train(Matrix::from_vec(n, p, xs)?, Matrix::from_vec(n, d, ys)?, observed)
}

/// Write `x_*` and `y_*` columns; masked targets are written as `NaN`.
pub fn write_csv(path: &Path, data: &DatasetSplit) -> Result<()> {
    let (p, d) = (data.x.cols(), data.outputs());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(default_header(p, d)).map_err(|e| csv_err(path, e))?;
    for i in 0..data.rows() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        for k in 0..d {
            rec.push(if data.observed[i * d + k] { data.y[(i, k)].to_string() } else { "NaN".into() });
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// How test entries are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitProtocol {
    RandomHoldout { fraction: f64, seed: u64 },
    /// Inclusive row ranges `(output, first, last)` masked per output.
    Imputation { windows: Vec<(usize, usize, usize)> },
    /// The last `tail` rows in file order.
    Extrapolation { tail: usize },
}

/// Relabel `data` by `protocol`; every entry not selected becomes training.
pub fn make_split(data: &DatasetSplit, protocol: &SplitProtocol) -> Result<DatasetSplit> {
    let (n, d) = (data.rows(), data.outputs());
    let mut labels = vec![SplitLabel::Train; n * d];
    match protocol {
        SplitProtocol::RandomHoldout { fraction, seed } => {
            if !(0.0..1.0).contains(fraction) {
                return Err(Error::Config(format!("hold-out fraction {fraction} outside [0, 1)")));
            }
            let k = (fraction * n as f64).round() as usize;
            let mut rows: Vec<usize> = (0..n).collect();
            RngStream::new(*seed, 0).shuffle(&mut rows);
            for &r in &rows[..k] {
                labels[r * d..(r + 1) * d].fill(SplitLabel::Test);
            }
        }
        SplitProtocol::Imputation { windows } => {
            for (i, &(out, a, b)) in windows.iter().enumerate() {
                if out >= d || a > b || b >= n {
                    return Err(Error::Config(format!("window ({out}, {a}, {b}) outside {n} rows x {d} outputs")));
                }
                for &(o2, a2, b2) in &windows[..i] {
                    if o2 == out && a <= b2 && a2 <= b {
                        return Err(Error::Config(format!("windows ({a}, {b}) and ({a2}, {b2}) overlap on output {out}")));
                    }
                }
                for r in a..=b {
                    labels[r * d + out] = SplitLabel::ImputeTest;
                }
            }
        }
        SplitProtocol::Extrapolation { tail } => {
            if *tail >= n {
                return Err(Error::Config(format!("tail {tail} leaves no training rows out of {n}")));
            }
            for l in &mut labels[(n - tail) * d..] {
                *l = SplitLabel::ExtrapTest;
            }
        }
    }
    Ok(DatasetSplit {
        labels,
        ..data.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub nmse: f64,
    pub mnll: f64,
    pub count: usize,
}

/// Per-output metrics (`None` where an output has no entries) and their
/// average over scored outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_output: Vec<Option<Metrics>>,
    pub aggregate: Metrics,
}

/// Score predictive moments against `truth` on the entries in `include`
/// (all entries when `None`). NMSE normalises by the squared deviation of
/// the scored targets from their own mean.
pub fn metrics(mean: &Matrix, var: &Matrix, truth: &Matrix, include: Option<&[bool]>) -> Result<MetricsReport> {
    let (n, d) = (truth.rows(), truth.cols());
    if mean.rows() != n || mean.cols() != d || var.rows() != n || var.cols() != d || include.is_some_and(|m| m.len() != n * d) {
        return Err(Error::Shape("predictions, variances, truths and mask must conform".into()));
    }
    let mut per_output = Vec::with_capacity(d);
    for k in 0..d {
        let rows: Vec<usize> = (0..n).filter(|&i| include.is_none_or(|m| m[i * d + k])).collect();
        if rows.is_empty() {
            per_output.push(None);
            continue;
        }
        let c = rows.len() as f64;
        let ybar = rows.iter().map(|&i| truth[(i, k)]).sum::<f64>() / c;
        let mut sse = 0.0;
        let mut sst = 0.0;
        let mut nll = 0.0;
        for &i in &rows {
            let (y, mu, s2) = (truth[(i, k)], mean[(i, k)], var[(i, k)]);
            if !(s2 > 0.0) {
                return Err(Error::Domain(format!("predictive variance {s2} at row {i}, output {k}")));
            }
            sse += (y - mu) * (y - mu);
            sst += (y - ybar) * (y - ybar);
            nll += 0.5 * (2.0 * std::f64::consts::PI * s2).ln() + (y - mu) * (y - mu) / (2.0 * s2);
        }
        if sst == 0.0 {
            return Err(Error::Degenerate(format!("test targets of output {k} have zero variance")));
        }
        per_output.push(Some(Metrics {
            rmse: (sse / c).sqrt(),
            nmse: sse / sst,
            mnll: nll / c,
            count: rows.len(),
        }));
    }
    let scored: Vec<&Metrics> = per_output.iter().flatten().collect();
    if scored.is_empty() {
        return Err(Error::Degenerate("no entries to score".into()));
    }
    let k = scored.len() as f64;
    let aggregate = Metrics {
        rmse: scored.iter().map(|m| m.rmse).sum::<f64>() / k,
        nmse: scored.iter().map(|m| m.nmse).sum::<f64>() / k,
        mnll: scored.iter().map(|m| m.mnll).sum::<f64>() / k,
        count: scored.iter().map(|m| m.count).sum(),
    };
    Ok(MetricsReport { per_output, aggregate })
}

/// Per-column affine standardisation fitted on training entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_stats(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
    (m, if s > 0.0 { s } else { 1.0 })
}

impl Standardizer {
    pub fn fit(data: &DatasetSplit) -> Self {
        let (n, p, d) = (data.rows(), data.x.cols(), data.outputs());
        let train = data.entry_mask(SplitLabel::Train);
        let rows: Vec<usize> = (0..n).filter(|&i| train[i * d..(i + 1) * d].iter().any(|&b| b)).collect();
        let (x_mean, x_std) = (0..p).map(|k| column_stats(rows.iter().map(|&i| data.x[(i, k)]))).unzip();
        let (y_mean, y_std) = (0..d)
            .map(|k| column_stats((0..n).filter(|&i| train[i * d + k]).map(|i| data.y[(i, k)])))
            .unzip();
        Self { x_mean, x_std, y_mean, y_std }
    }

    /// No-op transform for `p` inputs and `d` outputs.
    pub fn identity(p: usize, d: usize) -> Self {
        Self {
            x_mean: vec![0.0; p],
            x_std: vec![1.0; p],
            y_mean: vec![0.0; d],
            y_std: vec![1.0; d],
        }
    }

    pub fn transform_x(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, k| (x[(i, k)] - self.x_mean[k]) / self.x_std[k])
    }

    pub fn transform_y(&self, y: &Matrix) -> Matrix {
        Matrix::from_fn(y.rows(), y.cols(), |i, k| (y[(i, k)] - self.y_mean[k]) / self.y_std[k])
    }

    pub fn transform(&self, data: &DatasetSplit) -> DatasetSplit {
        DatasetSplit {
            x: self.transform_x(&data.x),
            y: self.transform_y(&data.y),
            ..data.clone()
        }
    }

    /// Map standardised predictive moments back to original units.
    pub fn inverse_moments(&self, mean: &Matrix, var: &Matrix) -> (Matrix, Matrix) {
        (
            Matrix::from_fn(mean.rows(), mean.cols(), |i, k| mean[(i, k)] * self.y_std[k] + self.y_mean[k]),
            Matrix::from_fn(var.rows(), var.cols(), |i, k| var[(i, k)] * self.y_std[k] * self.y_std[k]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{integrate, QuadOptions};
    use proptest::prelude::*;

    #[test]
    fn toy_examples() {
        assert_eq!(toy_force(0.0), 1.0);
        assert_eq!(toy_response(0.0, 0.01), 0.0);
        let q = integrate(|s| (-0.01 * (1.0 - s)).exp() * toy_force(s), 0.0, 1.0, QuadOptions::default()).unwrap();
        assert!((toy_response(1.0, 0.01) - q).abs() < 1e-9);
    }

    #[test]
    fn toy_closed_form_matches_quadrature_on_grid() {
        let cfg = ToyConfig {
            n_points: 200,
            noise_variance: 0.0,
            ..ToyConfig::default()
        };
        let toy = gen_toy(&cfg, &mut RngStream::new(0, 0)).unwrap();
        for (i, &t) in toy.split.x.col_to_vec(0).iter().enumerate() {
            let f1 = integrate(|s| (-cfg.gamma1 * (t - s)).exp() * toy_force(s), 0.0, t, QuadOptions::default()).unwrap();
            assert!((toy.f1[i] - f1).abs() < 1e-9, "f1 at {t}");
            let f2 = if f1 >= 0.0 {
                integrate(|s| (-cfg.gamma2 * (f1 - s)).exp() * toy_force(s), 0.0, f1, QuadOptions::default()).unwrap()
            } else {
                -integrate(|s| (-cfg.gamma2 * (f1 - s)).exp() * toy_force(s), f1, 0.0, QuadOptions::default()).unwrap()
            };
            assert!((toy.f2[i] - f2).abs() < 1e-9, "f2 at {t}");
            assert_eq!(toy.split.y[(i, 0)], toy.f2[i]);
        }
    }

    #[test]
    fn negative_upper_limit_is_signed() {
        let s = -0.7;
        let q = -integrate(|u| (-0.02 * (s - u)).exp() * toy_force(u), s, 0.0, QuadOptions::default()).unwrap();
        assert!((toy_response(s, 0.02) - q).abs() < 1e-10);
    }

    #[test]
    fn toy_splits() {
        let toy = gen_toy(&ToyConfig::default(), &mut RngStream::new(1, 0)).unwrap();
        let s = &toy.split;
        assert_eq!(s.rows(), 1000);
        let train_max = (0..1000)
            .filter(|&i| s.labels[i] == SplitLabel::Train)
            .map(|i| s.x[(i, 0)])
            .fold(f64::NEG_INFINITY, f64::max);
        for i in 0..1000 {
            let t = s.x[(i, 0)];
            match s.labels[i] {
                SplitLabel::ExtrapTest => assert!(t > train_max),
                SplitLabel::ImputeTest => assert!((0.208..=0.375).contains(&t)),
                _ => {}
            }
        }
        assert_eq!(s.count(SplitLabel::ExtrapTest), 200);
        assert!(s.count(SplitLabel::ImputeTest) > 100);
    }

    #[test]
    fn csv_round_trip_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x_0,y_0\n0.1,1.5\n0.2,NaN\n0.3,\n").unwrap();
        let d = load_csv(&path, &CsvSchema::default_for(1, 1)).unwrap();
        assert_eq!((d.rows(), d.x.cols(), d.outputs()), (3, 1, 1));
        assert_eq!(d.observed, vec![true, false, false]);

        let mut r = RngStream::new(3, 3);
        let x = Matrix::from_fn(7, 2, |_, _| r.normal() * 1e3);
        let y = Matrix::from_fn(7, 2, |_, _| r.normal() / 7.0);
        let mut obs = vec![true; 14];
        obs[5] = false;
        let orig = DatasetSplit::all_train(x, y, obs).unwrap();
        write_csv(&path, &orig).unwrap();
        let back = load_csv(&path, &CsvSchema::default_for(2, 2)).unwrap();
        for i in 0..14 {
            assert_eq!(orig.x.as_slice()[i].to_bits(), back.x.as_slice()[i].to_bits());
            if orig.observed[i] {
                assert_eq!(orig.y.as_slice()[i].to_bits(), back.y.as_slice()[i].to_bits());
            }
        }
        assert_eq!(orig.observed, back.observed);
    }

    #[test]
    fn csv_errors_name_the_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x_0,y_0\n0.1,1.5\n0.2,abc\n").unwrap();
        match load_csv(&path, &CsvSchema::default_for(1, 1)).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (2, "y_0")),
            e => panic!("{e}"),
        }
        std::fs::write(&path, "x_0,y_0\n").unwrap();
        assert!(load_csv(&path, &CsvSchema::default_for(1, 1)).is_err());
        std::fs::write(&path, "").unwrap();
        assert!(load_csv(&path, &CsvSchema::default_for(1, 1)).is_err());
        assert!(matches!(load_csv(&dir.path().join("missing.csv"), &CsvSchema::default_for(1, 1)), Err(Error::Io { .. })));
    }

    fn ordered(n: usize, d: usize) -> DatasetSplit {
        DatasetSplit::all_train(
            Matrix::from_fn(n, 1, |i, _| i as f64),
            Matrix::from_fn(n, d, |i, k| (i + k) as f64),
            vec![true; n * d],
        )
        .unwrap()
    }

    #[test]
    fn split_protocols() {
        let data = ordered(1000, 2);
        let s = make_split(&data, &SplitProtocol::Extrapolation { tail: 25 }).unwrap();
        let (rows, _) = s.subset(SplitLabel::Train);
        assert_eq!(rows, (0..975).collect::<Vec<_>>());

        let s = make_split(&data, &SplitProtocol::Imputation { windows: vec![(0, 200, 349)] }).unwrap();
        let m = s.entry_mask(SplitLabel::ImputeTest);
        assert_eq!(m.iter().filter(|&&b| b).count(), 150);
        assert!((0..1000).all(|i| !m[i * 2 + 1]));

        let bad = SplitProtocol::Imputation {
            windows: vec![(0, 10, 20), (0, 20, 30)],
        };
        assert!(make_split(&data, &bad).is_err());
        assert!(make_split(&data, &SplitProtocol::Imputation { windows: vec![(0, 990, 1000)] }).is_err());
        assert!(make_split(&data, &SplitProtocol::Imputation { windows: vec![(0, 10, 20), (1, 15, 25)] }).is_ok());
    }

    #[test]
    fn manifest_round_trip() {
        let data = ordered(50, 1);
        let s = make_split(&data, &SplitProtocol::RandomHoldout { fraction: 0.2, seed: 4 }).unwrap();
        let json = serde_json::to_string(&s.manifest()).unwrap();
        let mut back = data.clone();
        back.apply_manifest(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn holdout_is_disjoint_and_sized(n in 1usize..300, frac in 0.0f64..0.99, seed in any::<u64>()) {
            let data = ordered(n, 1);
            let p = SplitProtocol::RandomHoldout { fraction: frac, seed };
            let s = make_split(&data, &p).unwrap();
            let test = s.entry_mask(SplitLabel::Test);
            let train = s.entry_mask(SplitLabel::Train);
            prop_assert_eq!(test.iter().filter(|&&b| b).count(), (frac * n as f64).round() as usize);
            prop_assert!(test.iter().zip(&train).all(|(a, b)| !(a & b)));
            prop_assert!(test.iter().zip(&train).all(|(a, b)| a | b));
            prop_assert_eq!(make_split(&data, &p).unwrap(), s);
        }

        #[test]
        fn nmse_shift_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 3..30), shift in -100.0f64..100.0) {
            let n = vals.len();
            let truth = Matrix::column(&vals);
            prop_assume!(vals.iter().any(|v| (v - vals[0]).abs() > 1e-3));
            let pred = Matrix::from_fn(n, 1, |i, _| vals[i] * 0.8 + 0.3);
            let var = Matrix::from_fn(n, 1, |_, _| 0.5);
            let a = metrics(&pred, &var, &truth, None).unwrap().aggregate.nmse;
            let t2 = Matrix::from_fn(n, 1, |i, _| truth[(i, 0)] + shift);
            let p2 = Matrix::from_fn(n, 1, |i, _| pred[(i, 0)] + shift);
            let b = metrics(&p2, &var, &t2, None).unwrap().aggregate.nmse;
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn metric_examples() {
        let truth = Matrix::column(&[1.0, 2.0, 4.0]);
        let var = Matrix::from_fn(3, 1, |_, _| 1.0);
        let m = metrics(&truth, &var, &truth, None).unwrap().aggregate;
        assert_eq!((m.rmse, m.nmse), (0.0, 0.0));
        let mean = Matrix::from_fn(3, 1, |_, _| 7.0 / 3.0);
        let m = metrics(&mean, &var, &truth, None).unwrap().aggregate;
        assert!((m.nmse - 1.0).abs() < 1e-15);
        let z = Matrix::column(&[0.0, 1.0]);
        let m = metrics(&Matrix::column(&[0.0, 1.0]), &Matrix::column(&[1.0, 1.0]), &z, Some(&[true, false]));
        assert!(m.is_err());
        let r = metrics(&Matrix::column(&[0.0, 0.0]), &Matrix::column(&[1.0, 1.0]), &Matrix::column(&[0.0, 1.0]), None).unwrap();
        assert!(((r.aggregate.mnll - (0.918_938_533_204_672_7 + 0.25)).abs()) < 1e-12);
        let single = metrics(&Matrix::column(&[0.0, 5.0]), &Matrix::column(&[1.0, 1.0]), &Matrix::column(&[0.0, 3.0]), None).unwrap();
        assert!((single.aggregate.rmse - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn standardizer_inverts() {
        let data = ordered(20, 2);
        let s = Standardizer::fit(&data);
        let t = s.transform(&data);
        let col: Vec<f64> = t.y.col_to_vec(1);
        assert!(col.iter().sum::<f64>().abs() < 1e-12);
        let (m, v) = s.inverse_moments(&t.y, &Matrix::from_fn(20, 2, |_, _| 1.0));
        assert!(m.max_abs_diff(&data.y) < 1e-12);
        assert!((v[(0, 0)] - s.y_std[0].powi(2)).abs() < 1e-12);
    }
}
