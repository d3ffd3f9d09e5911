//! Shared data model.
//!
//! Every value here is immutable once built and can be shared read-only
//! across worker threads. All numeric storage is `f64`: the test statistic
//! is a difference of two large sums and loses too much in single precision.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NplmError, Result};

/// Version tag mixed into configuration fingerprints.
pub const FORMAT_VERSION: &str = concat!("nplm-", env!("CARGO_PKG_VERSION"));

/// An ordered collection of `dim`-dimensional points, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    points: Vec<f64>,
    dim: usize,
    pub label: String,
    pub seed: Option<u64>,
}

impl Dataset {
    /// Builds a dataset from row-major values, rejecting empty or
    /// non-finite input.
    pub fn new(points: Vec<f64>, dim: usize, label: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(NplmError::invalid("dataset dimension must be positive"));
        }
        if points.is_empty() {
            return Err(NplmError::invalid("dataset must hold at least one point"));
        }
        if points.len() % dim != 0 {
            return Err(NplmError::invalid(format!(
                "{} values do not form rows of dimension {dim}",
                points.len()
            )));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(NplmError::invalid(format!(
                "non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            points,
            dim,
            label: label.into(),
            seed: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], label: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(NplmError::DimensionMismatch {
                expected: dim,
                found: rows[bad].len(),
            });
        }
        Self::new(rows.concat(), dim, label)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn n_points(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.points
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize], label: impl Into<String>) -> Result<Dataset> {
        let mut points = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n_points() {
                return Err(NplmError::invalid(format!("row index {i} out of range")));
            }
            points.extend_from_slice(self.row(i));
        }
        Dataset::new(points, self.dim, label)
    }

    /// Concatenates `self` followed by `other`.
    pub fn concat(&self, other: &Dataset, label: impl Into<String>) -> Result<Dataset> {
        check_dims(self.dim, other.dim)?;
        let mut points = Vec::with_capacity(self.points.len() + other.points.len());
        points.extend_from_slice(&self.points);
        points.extend_from_slice(&other.points);
        Dataset::new(points, self.dim, label)
    }

    /// Stable content hash (dimension plus the exact bit patterns).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.n_points() as u64).to_le_bytes());
        for v in &self.points {
            h.update(v.to_bits().to_le_bytes());
        }
        hex16(&h.finalize())
    }
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(NplmError::DimensionMismatch { expected, found });
    }
    Ok(())
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-coordinate affine map to zero mean and unit variance, estimated on
/// the reference sample only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(reference: &Dataset) -> Self {
        let n = reference.n_points() as f64;
        let d = reference.dim();
        let mut mean = vec![0.0; d];
        for row in reference.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in reference.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        check_dims(self.mean.len(), data.dim())?;
        let mut points = data.values().to_vec();
        for row in points.chunks_exact_mut(data.dim()) {
            self.apply_row(row);
        }
        let mut out = Dataset::new(points, data.dim(), data.label.clone())?;
        out.seed = data.seed;
        Ok(out)
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
    }
}

/// Hyperparameters and solver settings of a single test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NplmConfig {
    /// Number of Nyström centers (M).
    pub n_centers: usize,
    /// Gaussian kernel width (σ).
    pub kernel_width: f64,
    /// Regularization strength (λ).
    pub regularization: f64,
    /// Expected data count N(R). `None` means "use the data sample size".
    #[serde(default)]
    pub expected_count: Option<f64>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub cg_max_iter: usize,
    pub master_seed: u64,
    /// Standardize both samples with reference statistics before fitting.
    pub standardize: bool,
}

impl NplmConfig {
    pub fn new(n_centers: usize, kernel_width: f64, regularization: f64) -> Self {
        Self {
            n_centers,
            kernel_width,
            regularization,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_centers == 0 {
            return Err(NplmError::invalid("n_centers must be positive"));
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return Err(NplmError::invalid("kernel_width must be positive and finite"));
        }
        if !(self.regularization > 0.0 && self.regularization.is_finite()) {
            return Err(NplmError::invalid("regularization must be positive and finite"));
        }
        if let Some(n) = self.expected_count {
            if !(n > 0.0 && n.is_finite()) {
                return Err(NplmError::invalid("expected_count must be positive"));
            }
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 || self.cg_max_iter == 0 {
            return Err(NplmError::invalid("solver tolerances must be positive"));
        }
        Ok(())
    }

    /// Hash identifying the configuration a null distribution is valid for.
    pub fn fingerprint(&self, n_reference: usize, toy_size: usize) -> String {
        let mut h = Sha256::new();
        let canon = format!(
            "M={};sigma={:016x};lambda={:016x};nref={};toy={};std={};v={}",
            self.n_centers,
            self.kernel_width.to_bits(),
            self.regularization.to_bits(),
            n_reference,
            toy_size,
            self.standardize,
            FORMAT_VERSION
        );
        h.update(canon.as_bytes());
        hex16(&h.finalize())
    }
}

impl Default for NplmConfig {
    fn default() -> Self {
        Self {
            n_centers: 500,
            kernel_width: 1.0,
            regularization: 1e-6,
            expected_count: None,
            newton_tol: 1e-6,
            newton_max_iter: 50,
            cg_max_iter: 500,
            master_seed: 0,
            standardize: true,
        }
    }
}

/// A fitted log-density-ratio model `f(x) = Σ wᵢ k_σ(x, cᵢ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    /// Centers, row-major `n_centers × dim`, in the (possibly standardized)
    /// training coordinates.
    pub centers: Vec<f64>,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub kernel_width: f64,
    pub ref_count: usize,
    pub data_count: usize,
    pub expected_count: f64,
    pub converged: bool,
    pub iterations_used: usize,
    pub final_risk: f64,
    pub relative_grad_norm: f64,
    /// Applied to raw inputs before kernel evaluation, when present.
    pub standardizer: Option<Standardizer>,
}

impl TrainedModel {
    pub fn n_centers(&self) -> usize {
        self.weights.len()
    }

    /// Weight `N(R)/N_ℛ` applied to reference terms.
    pub fn ref_weight(&self) -> f64 {
        self.expected_count / self.ref_count as f64
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }
}

/// Which sample plays the reference role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Direction {
    #[default]
    TrueAsReference,
    GeneratorAsReference,
}

/// Empirical null distribution of the test statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    /// Sorted ascending.
    pub toy_values: Vec<f64>,
    pub chi2_dof: f64,
    pub ks_pvalue: f64,
    pub n_toys: usize,
    pub n_failed: usize,
    pub config_fingerprint: String,
    pub reference_fingerprint: String,
    pub master_seed: u64,
    pub toy_size: usize,
    /// Set when toys share points with each other or with the reference.
    pub overlap: bool,
    pub warnings: Vec<String>,
}

/// Outcome of one observed test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub t_obs: f64,
    pub p_empirical: f64,
    pub p_chi2: f64,
    /// Z-score through the fitted χ² null.
    pub z_score: f64,
    /// Z-score through the empirical p-value.
    pub z_empirical: f64,
    /// The empirical Z is only a lower bound (no toy reached `t_obs`).
    pub z_empirical_saturated: bool,
    pub alpha: Option<f64>,
    pub decision: Option<bool>,
    pub seeds: Vec<u64>,
    pub direction: Direction,
    pub config_fingerprint: String,
    pub n_toys: usize,
}

/// Distribution of Z-scores over repeated tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub z_median: f64,
    pub ci68_low: f64,
    pub ci68_high: f64,
    pub per_repeat_reports: Vec<TestReport>,
    pub n_repeats: usize,
}
