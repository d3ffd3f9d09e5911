//! Gaussian kernel primitives and Nyström center sampling.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{NplmError, Result};
use crate::exec::Execution;
use crate::seeds::rng_from_seed;
use crate::types::{check_dims, Dataset};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Gaussian kernel evaluated between two datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub values: DenseMatrix,
    pub row_source: String,
    pub col_source: String,
    pub kernel_width: f64,
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn sq_norms(values: &[f64], dim: usize) -> Vec<f64> {
    values.chunks_exact(dim).map(|r| dot(r, r)).collect()
}

#[inline]
fn sq_dist(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    (na + nb - 2.0 * dot(a, b)).max(0.0)
}

/// Kernel rows between row-major `points` and `centers`, written into a
/// `n × m` row-major buffer. Rows are independent, so the result does not
/// depend on how rows are distributed over workers.
pub(crate) fn kernel_block(
    exec: Execution,
    points: &[f64],
    centers: &[f64],
    dim: usize,
    sigma: f64,
) -> Vec<f64> {
    let m = centers.len() / dim;
    let n = points.len() / dim;
    let center_norms = sq_norms(centers, dim);
    let scale = -0.5 / (sigma * sigma);
    let mut out = vec![0.0; n * m];
    if m == 0 {
        return out;
    }
    const ROWS: usize = 64;
    exec.for_each_chunk_mut(&mut out, ROWS * m, |chunk_idx, block| {
        let first = chunk_idx * ROWS;
        for (r, out_row) in block.chunks_exact_mut(m).enumerate() {
            let x = &points[(first + r) * dim..(first + r + 1) * dim];
            let nx = dot(x, x);
            for ((o, c), nc) in out_row
                .iter_mut()
                .zip(centers.chunks_exact(dim))
                .zip(&center_norms)
            {
                *o = (scale * sq_dist(x, nx, c, *nc)).exp();
            }
        }
    });
    out
}

/// Squared Euclidean distances `‖aᵢ − bⱼ‖²`, via `‖a‖² + ‖b‖² − 2a·b`
/// clamped at zero.
pub fn pairwise_sq_distances(a: &Dataset, b: &Dataset) -> Result<DenseMatrix> {
    check_dims(a.dim(), b.dim())?;
    let dim = a.dim();
    let nb = sq_norms(b.values(), dim);
    let m = b.n_points();
    let rows = Execution::default().map(a.n_points(), |i| {
        let x = a.row(i);
        let nx = dot(x, x);
        b.rows()
            .zip(&nb)
            .map(|(y, ny)| sq_dist(x, nx, y, *ny))
            .collect::<Vec<_>>()
    });
    Ok(DenseMatrix {
        rows: a.n_points(),
        cols: m,
        data: rows.concat(),
    })
}

/// `exp(−‖aᵢ − bⱼ‖² / 2σ²)` for every pair.
pub fn gaussian_kernel(a: &Dataset, b: &Dataset, sigma: f64) -> Result<KernelMatrix> {
    gaussian_kernel_with(Execution::default(), a, b, sigma)
}

pub fn gaussian_kernel_with(
    exec: Execution,
    a: &Dataset,
    b: &Dataset,
    sigma: f64,
) -> Result<KernelMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(NplmError::invalid(format!("kernel width must be positive, got {sigma}")));
    }
    check_dims(a.dim(), b.dim())?;
    let data = kernel_block(exec, a.values(), b.values(), a.dim(), sigma);
    Ok(KernelMatrix {
        values: DenseMatrix {
            rows: a.n_points(),
            cols: b.n_points(),
            data,
        },
        row_source: a.fingerprint(),
        col_source: b.fingerprint(),
        kernel_width: sigma,
    })
}

/// Indices of `m` distinct rows drawn uniformly without replacement.
pub fn sample_center_indices(pool_size: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > pool_size {
        return Err(NplmError::invalid(format!(
            "cannot draw {m} centers from a pool of {pool_size} points"
        )));
    }
    let mut rng = rng_from_seed(seed);
    Ok(index::sample(&mut rng, pool_size, m).into_vec())
}

/// Nyström centers: `m` distinct rows of `pool`, uniformly at random.
pub fn sample_centers(pool: &Dataset, m: usize, seed: u64) -> Result<Dataset> {
    let idx = sample_center_indices(pool.n_points(), m, seed)?;
    Ok(pool.select(&idx, "centers")?.with_seed(seed))
}
