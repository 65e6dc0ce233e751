//! CSV ingestion, seeded train/test splits, and standardization.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DkpError, Result};
use crate::linalg::Matrix;
use crate::model::Targets;
use crate::seeding::rng_for;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

/// A numeric table with one target column separated out.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Vec<f64>,
    pub source: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvOptions {
    /// Target column; negative values count from the end (`-1` is the last column).
    pub target_col: i64,
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            target_col: -1,
            delimiter: b',',
            has_header: false,
        }
    }
}

/// Reads a numeric CSV file.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| DkpError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut ds = read_csv(file, opts)?;
    ds.source = Some(path.to_path_buf());
    Ok(ds)
}

/// Parses numeric CSV text from any reader.
pub fn read_csv<R: std::io::Read>(reader: R, opts: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DkpError::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            detail: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(DkpError::Parse {
                line,
                detail: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        let mut row = Vec::with_capacity(w);
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| DkpError::Parse {
                line,
                detail: format!("non-numeric cell '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(DkpError::Parse {
                    line,
                    detail: format!("non-finite cell '{field}'"),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    let w = width.ok_or_else(|| DkpError::Parse {
        line: 0,
        detail: "no data rows".into(),
    })?;
    if w < 2 {
        return Err(DkpError::Parse {
            line: 0,
            detail: "need at least one feature and one target column".into(),
        });
    }
    let tc = if opts.target_col < 0 {
        w as i64 + opts.target_col
    } else {
        opts.target_col
    };
    if tc < 0 || tc >= w as i64 {
        return Err(DkpError::Config(format!(
            "target column {} out of range for {w} columns",
            opts.target_col
        )));
    }
    let tc = tc as usize;
    let targets: Vec<f64> = rows.iter().map(|r| r[tc]).collect();
    let features = Matrix::from_fn(rows.len(), w - 1, |i, j| rows[i][if j < tc { j } else { j + 1 }]);
    Ok(Dataset {
        features,
        targets,
        source: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub index: usize,
    pub count: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(index: usize, count: usize, seed: u64) -> Self {
        Self {
            index,
            count,
            test_fraction: 0.1,
            seed,
        }
    }
}

/// Statistics fitted on the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardization {
    pub fn apply_features(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x[(i, j)] - self.feature_mean[j]) / self.feature_std[j]
        })
    }

    /// Converts a per-point log-likelihood of standardized targets to original units.
    pub fn destandardize_log_lik(&self, ll: f64) -> f64 {
        ll - self.target_std.ln()
    }
}

/// Row indices and statistics that pin down a split exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub task: Task,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub standardization: Standardization,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train_x: Matrix,
    pub train_y: Targets,
    pub test_x: Matrix,
    pub test_y: Targets,
    pub manifest: SplitManifest,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let m = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let s = var.sqrt();
    (m, if s > 0.0 { s } else { 1.0 })
}

/// Deterministic train/test split from `(seed, index)` with statistics fitted on train.
pub fn make_split(ds: &Dataset, spec: &SplitSpec, task: Task) -> Result<Split> {
    if spec.index >= spec.count {
        return Err(DkpError::Config(format!(
            "split index {} must be below split count {}",
            spec.index, spec.count
        )));
    }
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(DkpError::Config("test fraction must lie in (0, 1)".into()));
    }
    let n = ds.features.rows();
    let n_test = ((spec.test_fraction * n as f64).round() as usize).max(1);
    if n_test >= n {
        return Err(DkpError::Config(format!("{n} rows leave an empty training split")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(&[spec.seed, 0x5B11, spec.index as u64]));
    let test_indices = perm[..n_test].to_vec();
    let train_indices = perm[n_test..].to_vec();
    let manifest = fit_manifest(ds, *spec, task, train_indices, test_indices);
    apply_manifest(ds, &manifest)
}

fn fit_manifest(ds: &Dataset, spec: SplitSpec, task: Task, train: Vec<usize>, test: Vec<usize>) -> SplitManifest {
    let x = &ds.features;
    let mut feature_mean = Vec::with_capacity(x.cols());
    let mut feature_std = Vec::with_capacity(x.cols());
    for j in 0..x.cols() {
        let (m, s) = mean_std(train.iter().map(|&i| x[(i, j)]));
        feature_mean.push(m);
        feature_std.push(s);
    }
    let (target_mean, target_std) = match task {
        Task::Regression => mean_std(train.iter().map(|&i| ds.targets[i])),
        Task::Classification => (0.0, 1.0),
    };
    SplitManifest {
        spec,
        task,
        train_indices: train,
        test_indices: test,
        standardization: Standardization {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        },
    }
}

/// Rebuilds a split exactly from its manifest.
pub fn apply_manifest(ds: &Dataset, m: &SplitManifest) -> Result<Split> {
    let n = ds.features.rows();
    if m.train_indices.iter().chain(&m.test_indices).any(|&i| i >= n) {
        return Err(DkpError::Config("manifest indices exceed the dataset".into()));
    }
    if m.standardization.feature_mean.len() != ds.features.cols() {
        return Err(DkpError::Config("manifest feature count differs from the dataset".into()));
    }
    let cols: Vec<usize> = (0..ds.features.cols()).collect();
    let st = &m.standardization;
    let pick = |idx: &[usize]| -> Result<(Matrix, Targets)> {
        let x = st.apply_features(&ds.features.select(idx, &cols));
        let y = match m.task {
            Task::Regression => Targets::Regression(Matrix::from_fn(idx.len(), 1, |r, _| {
                (ds.targets[idx[r]] - st.target_mean) / st.target_std
            })),
            Task::Classification => {
                let mut labels = Vec::with_capacity(idx.len());
                for &i in idx {
                    let v = ds.targets[i];
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(DkpError::Config(format!("class label {v} is not a non-negative integer")));
                    }
                    labels.push(v as usize);
                }
                Targets::Classes(labels)
            }
        };
        Ok((x, y))
    };
    let (train_x, train_y) = pick(&m.train_indices)?;
    let (test_x, test_y) = pick(&m.test_indices)?;
    Ok(Split {
        train_x,
        train_y,
        test_x,
        test_y,
        manifest: m.clone(),
    })
}

/// Number of classes implied by integer labels.
pub fn class_count(targets: &[f64]) -> usize {
    targets.iter().fold(0.0_f64, |a, &b| a.max(b)) as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "1.5,2,10\n-3,4.25,20\n0,0,30\n";

    #[test]
    fn round_trips_known_values() {
        let ds = read_csv(TEXT.as_bytes(), &CsvOptions::default()).unwrap();
        assert_eq!(ds.features.as_slice(), &[1.5, 2.0, -3.0, 4.25, 0.0, 0.0]);
        assert_eq!(ds.targets, vec![10.0, 20.0, 30.0]);
    }

    #[test]
    fn semicolon_matches_comma() {
        let a = read_csv(TEXT.as_bytes(), &CsvOptions::default()).unwrap();
        let semi = TEXT.replace(',', ";");
        let b = read_csv(
            semi.as_bytes(),
            &CsvOptions {
                delimiter: b';',
                ..CsvOptions::default()
            },
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn header_and_target_column() {
        let text = "a,b,c\n1,2,3\n4,5,6\n";
        let ds = read_csv(
            text.as_bytes(),
            &CsvOptions {
                target_col: 0,
                has_header: true,
                ..CsvOptions::default()
            },
        )
        .unwrap();
        assert_eq!(ds.targets, vec![1.0, 4.0]);
        assert_eq!(ds.features.as_slice(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let ragged = "1,2,3\n4,5\n";
        match read_csv(ragged.as_bytes(), &CsvOptions::default()) {
            Err(DkpError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = "1,2,3\n4,x,6\n";
        match read_csv(text.as_bytes(), &CsvOptions::default()) {
            Err(DkpError::Parse { line, detail }) => {
                assert_eq!(line, 2);
                assert!(detail.contains('x'));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_csv(Path::new("/no/such/file.csv"), &CsvOptions::default()).unwrap_err();
        assert!(err.to_string().contains("/no/such/file.csv"));
    }

    fn table(n: usize) -> Dataset {
        Dataset {
            features: Matrix::from_fn(n, 2, |i, j| (i * (j + 2)) as f64 + 0.5 * j as f64),
            targets: (0..n).map(|i| 3.0 * i as f64 + 1.0).collect(),
            source: None,
        }
    }

    #[test]
    fn splits_are_deterministic_and_partition_rows() {
        let ds = table(25);
        let spec = SplitSpec::new(3, 20, 11);
        let a = make_split(&ds, &spec, Task::Regression).unwrap();
        let b = make_split(&ds, &spec, Task::Regression).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let mut all: Vec<usize> = a.manifest.train_indices.iter().chain(&a.manifest.test_indices).cloned().collect();
        all.sort();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
        assert_eq!(a.manifest.test_indices.len(), 3);
        let c = make_split(&ds, &SplitSpec::new(4, 20, 11), Task::Regression).unwrap();
        assert_ne!(a.manifest.test_indices, c.manifest.test_indices);
        assert!(make_split(&ds, &SplitSpec::new(20, 20, 11), Task::Regression).is_err());
    }

    #[test]
    fn training_features_are_standardized() {
        let s = make_split(&table(40), &SplitSpec::new(0, 5, 1), Task::Regression).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..s.train_x.rows()).map(|i| s.train_x[(i, j)]).collect();
            let n = col.len() as f64;
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            assert!(m.abs() < 1e-10 && (v.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn manifest_reproduces_split() {
        let ds = table(30);
        let s = make_split(&ds, &SplitSpec::new(1, 5, 2), Task::Regression).unwrap();
        let text = serde_json::to_string(&s.manifest).unwrap();
        let m: SplitManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(apply_manifest(&ds, &m).unwrap(), s);
    }

    #[test]
    fn log_lik_change_of_variables() {
        // y = 2 + 3 z: a unit normal density in z is a N(2, 9) density in y
        let st = Standardization {
            feature_mean: vec![],
            feature_std: vec![],
            target_mean: 2.0,
            target_std: 3.0,
        };
        let z = 0.4;
        let ll_z = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z;
        let y = 2.0 + 3.0 * z;
        let ll_y = -0.5 * (2.0 * std::f64::consts::PI * 9.0).ln() - 0.5 * (y - 2.0_f64).powi(2) / 9.0;
        assert!((st.destandardize_log_lik(ll_z) - ll_y).abs() < 1e-14);
    }
}
