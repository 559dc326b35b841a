//! Multi-view datasets: on-disk format, validation, synthetic generation and
//! corruption.
//!
//! A dataset directory holds `manifest.json`, one headerless CSV per view
//! (`view_0.csv` … `view_{M-1}.csv`, one sample per row) and, when
//! `has_labels` is set, `labels.csv` with one non-negative integer per row.
//! Features are min-max normalized column-wise to `[0, 1]` on load; constant
//! columns become 0.

use std::fs;
use std::path::{Path, PathBuf};

use gdcn_tensor::Tensor;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: expected {expected} rows, found {found}")]
    RowCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: label {label} outside [0, {n_clusters})")]
    LabelOutOfRange {
        path: PathBuf,
        line: usize,
        label: usize,
        n_clusters: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

type Result<T, E = DataError> = std::result::Result<T, E>;

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub n_samples: usize,
    pub n_views: usize,
    pub n_clusters: usize,
    pub view_dims: Vec<usize>,
    pub has_labels: bool,
}

/// `N` samples observed through `M` views; view `m` is an `N × D_m` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub name: String,
    views: Vec<Tensor>,
    labels: Option<Vec<usize>>,
    n_clusters: usize,
}

impl MultiViewDataset {
    pub fn new(
        name: impl Into<String>,
        views: Vec<Tensor>,
        labels: Option<Vec<usize>>,
        n_clusters: usize,
    ) -> Result<Self> {
        let n = views.first().map(|v| v.rows()).unwrap_or(0);
        if views.is_empty() {
            return Err(DataError::Invalid("at least one view is required".into()));
        }
        for (m, v) in views.iter().enumerate() {
            if v.rank() != 2 || v.rows() != n {
                return Err(DataError::Invalid(format!(
                    "view {m} has shape {:?}, expected {n} rows",
                    v.shape()
                )));
            }
            if !v.all_finite() {
                return Err(DataError::Invalid(format!("view {m} has non-finite values")));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(DataError::Invalid(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= n_clusters) {
                return Err(DataError::Invalid(format!(
                    "label {bad} outside [0, {n_clusters})"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            views,
            labels,
            n_clusters,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].rows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.cols()).collect()
    }

    pub fn views(&self) -> &[Tensor] {
        &self.views
    }

    pub fn view(&self, m: usize) -> &Tensor {
        &self.views[m]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            name: self.name.clone(),
            n_samples: self.n_samples(),
            n_views: self.n_views(),
            n_clusters: self.n_clusters,
            view_dims: self.view_dims(),
            has_labels: self.labels.is_some(),
        }
    }

    /// Rows `indices` of every view, in order.
    pub fn batch(&self, indices: &[usize]) -> Vec<Tensor> {
        self.views.iter().map(|v| v.select_rows(indices)).collect()
    }

    /// Column-wise min-max scaling of every view to `[0, 1]`.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for view in &mut out.views {
            normalize_columns(view);
        }
        out
    }
}

/// Maps each column to `[0, 1]`; constant columns map to 0. Idempotent on
/// columns whose min is 0 and max is 1.
pub fn normalize_columns(view: &mut Tensor) {
    let (rows, cols) = (view.rows(), view.cols());
    for c in 0..cols {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in 0..rows {
            let v = view.get(r, c);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        let data = view.data_mut();
        for r in 0..rows {
            let v = &mut data[r * cols + c];
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        rows.push(record.iter().map(|s| s.trim().to_string()).collect());
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Reads and validates a dataset directory, then min-max normalizes it.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<MultiViewDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
        path: manifest_path.clone(),
        msg: e.to_string(),
    })?;
    if manifest.view_dims.len() != manifest.n_views || manifest.n_views == 0 {
        return Err(DataError::Manifest {
            path: manifest_path,
            msg: format!(
                "n_views is {} but view_dims lists {} entries",
                manifest.n_views,
                manifest.view_dims.len()
            ),
        });
    }
    if manifest.n_clusters == 0 {
        return Err(DataError::Manifest {
            path: manifest_path,
            msg: "n_clusters must be at least 1".into(),
        });
    }

    let mut views = Vec::with_capacity(manifest.n_views);
    for (m, &dim) in manifest.view_dims.iter().enumerate() {
        let path = dir.join(format!("view_{m}.csv"));
        let rows = read_csv_rows(&path)?;
        if rows.len() != manifest.n_samples {
            return Err(DataError::RowCount {
                path,
                expected: manifest.n_samples,
                found: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(manifest.n_samples * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(DataError::Parse {
                    path,
                    line: i + 1,
                    msg: format!("expected {dim} columns, found {}", row.len()),
                });
            }
            for cell in row {
                let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                    path: path.clone(),
                    line: i + 1,
                    msg: format!("non-numeric cell {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(DataError::Parse {
                        path: path.clone(),
                        line: i + 1,
                        msg: format!("non-finite cell {cell:?}"),
                    });
                }
                data.push(v);
            }
        }
        let mut view = Tensor::matrix(manifest.n_samples, dim, data)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        normalize_columns(&mut view);
        views.push(view);
    }

    let labels = if manifest.has_labels {
        let path = dir.join("labels.csv");
        let rows = read_csv_rows(&path)?;
        if rows.len() != manifest.n_samples {
            return Err(DataError::RowCount {
                path,
                expected: manifest.n_samples,
                found: rows.len(),
            });
        }
        let mut labels = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let cell = row.first().map(String::as_str).unwrap_or("");
            let label: usize = cell.parse().map_err(|_| DataError::Parse {
                path: path.clone(),
                line: i + 1,
                msg: format!("invalid label {cell:?}"),
            })?;
            if label >= manifest.n_clusters {
                return Err(DataError::LabelOutOfRange {
                    path,
                    line: i + 1,
                    label,
                    n_clusters: manifest.n_clusters,
                });
            }
            labels.push(label);
        }
        Some(labels)
    } else {
        None
    };

    MultiViewDataset::new(manifest.name, views, labels, manifest.n_clusters)
}

/// Writes `ds` in the directory format read by [`load_dataset`].
pub fn save_dataset(ds: &MultiViewDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join("manifest.json");
    let manifest = serde_json::to_string_pretty(&ds.manifest()).expect("manifest serializes");
    fs::write(&manifest_path, manifest + "\n").map_err(io_err(&manifest_path))?;

    for (m, view) in ds.views().iter().enumerate() {
        let path = dir.join(format!("view_{m}.csv"));
        let mut text = String::with_capacity(view.len() * 20);
        for r in 0..view.rows() {
            let row: Vec<String> = view.row(r).iter().map(|v| format!("{v:?}")).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    if let Some(labels) = ds.labels() {
        let path = dir.join("labels.csv");
        let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Parameters of [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dims: Vec<usize>,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 3,
            per_cluster: 200,
            dims: vec![3, 3, 3],
            separation: 6.0,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<MultiViewDataset> {
        generate_synthetic(
            self.clusters,
            self.per_cluster,
            &self.dims,
            self.separation,
            self.seed,
        )
    }
}

/// Gaussian blobs that share cluster identity across views.
///
/// Cluster `c` has latent code `separation · e_c`. Each view maps the code
/// through its own random linear map (orthonormal columns when the view is
/// at least as wide as the code) and adds unit Gaussian noise. Samples are
/// ordered by cluster; the result is min-max normalized.
pub fn generate_synthetic(
    n_clusters: usize,
    per_cluster: usize,
    view_dims: &[usize],
    separation: f64,
    seed: u64,
) -> Result<MultiViewDataset> {
    if n_clusters == 0 || per_cluster == 0 || view_dims.is_empty() || view_dims.contains(&0) {
        return Err(DataError::Invalid(
            "clusters, per-cluster count and every view dim must be at least 1".into(),
        ));
    }
    if separation.is_nan() || separation <= 0.0 {
        return Err(DataError::Invalid(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let n = n_clusters * per_cluster;
    let mut rng = seed::rng(seed);
    let mut views = Vec::with_capacity(view_dims.len());
    for &dim in view_dims {
        let map = random_map(dim, n_clusters, &mut rng);
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            let c = i / per_cluster;
            for r in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(separation * map[r * n_clusters + c] + noise);
            }
        }
        let mut view = Tensor::matrix(n, dim, data).expect("sized buffer");
        normalize_columns(&mut view);
        views.push(view);
    }
    let labels = (0..n).map(|i| i / per_cluster).collect();
    MultiViewDataset::new(
        format!("synthetic-{n_clusters}x{per_cluster}"),
        views,
        Some(labels),
        n_clusters,
    )
}

/// `rows × cols` row-major map. Columns are Gram-Schmidt orthonormalized
/// when `rows >= cols`, otherwise scaled to unit norm.
fn random_map(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..cols {
        if rows >= cols {
            for k in 0..j {
                let (done, rest) = columns.split_at_mut(j);
                let dot: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(&done[k]).for_each(|(v, q)| *v -= dot * q);
            }
        }
        let norm = columns[j].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        columns[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            out[r * cols + j] = *v;
        }
    }
    out
}

/// Per-(sample, view) cell corruption.
///
/// `noise_fraction` of the eligible cells receive additive `N(0, noise_sigma²)`
/// noise on every feature, then `missing_fraction` of them (drawn
/// independently) are zeroed. `views` restricts the eligible cells to the
/// listed views; `None` means all views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub noise_sigma: f64,
    pub noise_fraction: f64,
    pub missing_fraction: f64,
    pub seed: u64,
    pub views: Option<Vec<usize>>,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            noise_fraction: 0.0,
            missing_fraction: 0.0,
            seed: 0,
            views: None,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self, n_views: usize) -> Result<()> {
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.noise_fraction) || !frac_ok(self.missing_fraction) {
            return Err(DataError::Invalid("corruption fractions must lie in [0, 1]".into()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(DataError::Invalid("noise_sigma must be non-negative".into()));
        }
        if let Some(views) = &self.views {
            if let Some(bad) = views.iter().find(|&&m| m >= n_views) {
                return Err(DataError::Invalid(format!("corruption view {bad} does not exist")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.noise_fraction == 0.0 && self.missing_fraction == 0.0
    }
}

/// Returns a corrupted copy of `ds`; labels are untouched.
pub fn corrupt(ds: &MultiViewDataset, spec: &CorruptionSpec) -> Result<MultiViewDataset> {
    spec.validate(ds.n_views())?;
    let n = ds.n_samples();
    let eligible: Vec<usize> = match &spec.views {
        Some(v) => {
            let mut v = v.clone();
            v.sort_unstable();
            v.dedup();
            v
        }
        None => (0..ds.n_views()).collect(),
    };
    // cell id = position in eligible views × n + sample
    let cells = eligible.len() * n;
    let mut rng = seed::rng(spec.seed);
    let mut out = ds.clone();

    let n_noisy = (spec.noise_fraction * cells as f64).floor() as usize;
    let n_missing = (spec.missing_fraction * cells as f64).floor() as usize;
    let mut noisy: Vec<usize> = index::sample(&mut rng, cells, n_noisy).into_vec();
    noisy.sort_unstable();
    let mut missing: Vec<usize> = index::sample(&mut rng, cells, n_missing).into_vec();
    missing.sort_unstable();

    for cell in noisy {
        let (m, i) = (eligible[cell / n], cell % n);
        for v in out.views[m].row_mut(i) {
            let z: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * z;
        }
    }
    for cell in missing {
        let (m, i) = (eligible[cell / n], cell % n);
        out.views[m].row_mut(i).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}
