//! Multi-view datasets: aligned observation matrices that share one sample index.
//!
//! Views may overlap in the features they select and need not have equal width.
//! Index sets are 1-based, matching how feature indices are written in configs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MvkError, Result};

/// One observation channel: an `n × m_l` matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMatrix {
    data: DMatrix<f64>,
}

impl ViewMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % data.nrows(), pos / data.nrows());
            return Err(MvkError::InvalidData(format!(
                "non-finite entry at row {r}, column {c}"
            )));
        }
        if data.ncols() == 0 {
            return Err(MvkError::InvalidData("view has no columns".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    /// Row-major copy of the observations, one `ncols`-long chunk per sample.
    pub fn rows_flat(&self) -> Vec<f64> {
        let (n, m) = self.data.shape();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for k in 0..m {
                out.push(self.data[(i, k)]);
            }
        }
        out
    }
}

/// `ζ ≥ 1` views of the same `n` samples, optionally with intrinsic ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<ViewMatrix>,
    n: usize,
    ground_truth: Option<DMatrix<f64>>,
    view_index_sets: Option<Vec<Vec<usize>>>,
}

impl MultiViewDataset {
    pub fn new(views: Vec<ViewMatrix>) -> Result<Self> {
        let first = views
            .first()
            .ok_or(MvkError::EmptyInput("dataset needs at least one view"))?;
        let n = first.nrows();
        for (l, v) in views.iter().enumerate() {
            if v.nrows() != n {
                return Err(MvkError::InvalidData(format!(
                    "view {} has {} rows, expected {n}",
                    l + 1,
                    v.nrows()
                )));
            }
        }
        Ok(Self {
            views,
            n,
            ground_truth: None,
            view_index_sets: None,
        })
    }

    /// Attaches the intrinsic parameters, one row per sample.
    pub fn with_ground_truth(mut self, theta: DMatrix<f64>) -> Result<Self> {
        if theta.nrows() != self.n {
            return Err(MvkError::ShapeMismatch {
                expected: (self.n, theta.ncols()),
                found: theta.shape(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(MvkError::InvalidData("non-finite ground truth".into()));
        }
        self.ground_truth = Some(theta);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn views(&self) -> &[ViewMatrix] {
        &self.views
    }

    pub fn view(&self, l: usize) -> &ViewMatrix {
        &self.views[l]
    }

    pub fn ground_truth(&self) -> Option<&DMatrix<f64>> {
        self.ground_truth.as_ref()
    }

    pub fn require_ground_truth(&self) -> Result<&DMatrix<f64>> {
        self.ground_truth.as_ref().ok_or(MvkError::MissingGroundTruth)
    }

    pub fn view_index_sets(&self) -> Option<&[Vec<usize>]> {
        self.view_index_sets.as_deref()
    }

    /// Dataset holding only the first `count` views (ground truth kept).
    pub fn prefix(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.views.len() {
            return Err(MvkError::InvalidParameter(format!(
                "view prefix {count} outside 1..={}",
                self.views.len()
            )));
        }
        Ok(Self {
            views: self.views[..count].to_vec(),
            n: self.n,
            ground_truth: self.ground_truth.clone(),
            view_index_sets: self
                .view_index_sets
                .as_ref()
                .map(|s| s[..count].to_vec()),
        })
    }
}

/// Selects the columns of `data` named by each 1-based index set, in the order given.
pub fn split_views(data: &DMatrix<f64>, index_sets: &[Vec<usize>]) -> Result<MultiViewDataset> {
    if index_sets.is_empty() {
        return Err(MvkError::InvalidIndexSet("no index sets given".into()));
    }
    let m = data.ncols();
    let mut views = Vec::with_capacity(index_sets.len());
    for (l, set) in index_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(MvkError::InvalidIndexSet(format!("index set {} is empty", l + 1)));
        }
        if let Some(&bad) = set.iter().find(|&&k| k == 0 || k > m) {
            return Err(MvkError::InvalidIndexSet(format!(
                "index {bad} in set {} is outside 1..={m}",
                l + 1
            )));
        }
        let cols: Vec<usize> = set.iter().map(|k| k - 1).collect();
        views.push(ViewMatrix::new(data.select_columns(cols.iter()))?);
    }
    let mut ds = MultiViewDataset::new(views)?;
    ds.view_index_sets = Some(index_sets.to_vec());
    Ok(ds)
}

/// Places all views side by side, in view order.
pub fn concatenate_views(ds: &MultiViewDataset) -> ViewMatrix {
    let total: usize = ds.views.iter().map(ViewMatrix::ncols).sum();
    let mut out = DMatrix::zeros(ds.n, total);
    let mut offset = 0;
    for v in &ds.views {
        out.columns_mut(offset, v.ncols()).copy_from(v.data());
        offset += v.ncols();
    }
    ViewMatrix { data: out }
}

/// Reads a numeric CSV matrix. A first record that does not parse as numbers is a header.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if k == 0 => continue,
            Err(e) => {
                return Err(MvkError::InvalidData(format!(
                    "{}: record {}: {e}",
                    path.display(),
                    k + 1
                )))
            }
        }
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(MvkError::InvalidData(format!(
            "{}: ragged rows",
            path.display()
        )));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.into_iter().flatten(),
    ))
}

/// Writes a matrix as CSV with an optional header row. Values use shortest round-trip form.
pub fn write_matrix_csv(path: &Path, data: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    if let Some(h) = header {
        writer.write_record(h)?;
    }
    let mut record = Vec::with_capacity(data.ncols());
    for i in 0..data.nrows() {
        record.clear();
        record.extend((0..data.ncols()).map(|k| data[(i, k)].to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// JSON description of a dataset on disk. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub views: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

pub fn load_dataset(manifest_path: &Path) -> Result<MultiViewDataset> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let views = manifest
        .views
        .iter()
        .map(|p| read_matrix_csv(&base.join(p)).and_then(ViewMatrix::new))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = MultiViewDataset::new(views)?;
    if ds.n() != manifest.n {
        return Err(MvkError::InvalidData(format!(
            "manifest declares n = {}, views have {} rows",
            manifest.n,
            ds.n()
        )));
    }
    if let Some(gt) = &manifest.ground_truth {
        ds = ds.with_ground_truth(read_matrix_csv(&base.join(gt))?)?;
    }
    Ok(ds)
}

/// Writes `view_<l>.csv` for every view, `ground_truth.csv` when present and `dataset.json`.
/// Returns the written paths, manifest last.
pub fn save_dataset(ds: &MultiViewDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut names = Vec::new();
    for (l, v) in ds.views.iter().enumerate() {
        let name = PathBuf::from(format!("view_{}.csv", l + 1));
        write_matrix_csv(&dir.join(&name), v.data(), None)?;
        written.push(dir.join(&name));
        names.push(name);
    }
    let gt_name = match &ds.ground_truth {
        Some(theta) => {
            let name = PathBuf::from("ground_truth.csv");
            write_matrix_csv(&dir.join(&name), theta, None)?;
            written.push(dir.join(&name));
            Some(name)
        }
        None => None,
    };
    let manifest = DatasetManifest {
        n: ds.n,
        views: names,
        ground_truth: gt_name,
    };
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    written.push(path);
    Ok(written)
}
