//! Synthetic benchmark generators: random Gaussian mixtures, perturbed
//! copies standing in for imperfect generators, and resampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NplmError, Result};
use crate::seeds::{rng_from_seed, stream_rng, Stream};
use crate::types::Dataset;

/// Axis-aligned Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MogSpec {
    pub dim: usize,
    pub n_components: usize,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
    pub mixture_probs: Vec<f64>,
    pub seed: u64,
}

impl MogSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.n_components;
        if self.dim == 0 || k == 0 {
            return Err(NplmError::invalid("mixture needs a positive dimension and component count"));
        }
        if self.means.len() != k || self.stds.len() != k || self.mixture_probs.len() != k {
            return Err(NplmError::invalid("mixture arrays disagree with n_components"));
        }
        for (m, s) in self.means.iter().zip(&self.stds) {
            if m.len() != self.dim || s.len() != self.dim {
                return Err(NplmError::DimensionMismatch {
                    expected: self.dim,
                    found: if m.len() != self.dim { m.len() } else { s.len() },
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(NplmError::invalid("mixture means must be finite"));
            }
            if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(NplmError::invalid("mixture stds must be positive"));
            }
        }
        if self.mixture_probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(NplmError::invalid("mixture probabilities must be non-negative"));
        }
        let total: f64 = self.mixture_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(NplmError::invalid(format!("mixture probabilities sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Analytic mean of the mixture.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (p, m) in self.mixture_probs.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += p * v;
            }
        }
        out
    }

    /// Analytic per-coordinate variance of the mixture.
    pub fn variance(&self) -> Vec<f64> {
        let mu = self.mean();
        let mut out = vec![0.0; self.dim];
        for ((p, m), s) in self.mixture_probs.iter().zip(&self.means).zip(&self.stds) {
            for j in 0..self.dim {
                out[j] += p * (s[j] * s[j] + (m[j] - mu[j]).powi(2));
            }
        }
        out
    }
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        let k = w.len() as f64;
        w.iter_mut().for_each(|v| *v = 1.0 / k);
    }
    w
}

/// Means uniform on [0, 10], stds uniform on (0, 1], weights uniform then
/// normalized.
pub fn random_mog(dim: usize, n_components: usize, seed: u64) -> Result<MogSpec> {
    if dim == 0 || n_components == 0 {
        return Err(NplmError::invalid("mixture needs dim ≥ 1 and n_components ≥ 1"));
    }
    let mut rng = stream_rng(seed, Stream::MogSpec, 0);
    let mut means = Vec::with_capacity(n_components);
    let mut stds = Vec::with_capacity(n_components);
    for _ in 0..n_components {
        means.push((0..dim).map(|_| rng.gen_range(0.0..10.0)).collect());
        // 1 − U[0,1) lies in (0, 1].
        stds.push((0..dim).map(|_| 1.0 - rng.gen::<f64>()).collect());
    }
    let probs = (0..n_components).map(|_| rng.gen::<f64>()).collect();
    Ok(MogSpec {
        dim,
        n_components,
        means,
        stds,
        mixture_probs: normalize(probs),
        seed,
    })
}

pub fn sample_mog(spec: &MogSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(NplmError::invalid("sample size must be positive"));
    }
    let choose = WeightedIndex::new(&spec.mixture_probs)
        .map_err(|e| NplmError::invalid(format!("mixture probabilities: {e}")))?;
    let mut rng = stream_rng(seed, Stream::MogSample, 0);
    let mut points = Vec::with_capacity(n * spec.dim);
    for _ in 0..n {
        let k = choose.sample(&mut rng);
        for (m, s) in spec.means[k].iter().zip(&spec.stds[k]) {
            let z: f64 = StandardNormal.sample(&mut rng);
            points.push(m + s * z);
        }
    }
    Ok(Dataset::new(points, spec.dim, "mog")?.with_seed(seed))
}

/// `log Σₖ πₖ Πⱼ N(xⱼ; μₖⱼ, σₖⱼ)` via log-sum-exp.
pub fn mog_log_density(spec: &MogSpec, x: &[f64]) -> Result<f64> {
    if x.len() != spec.dim {
        return Err(NplmError::DimensionMismatch {
            expected: spec.dim,
            found: x.len(),
        });
    }
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let terms: Vec<f64> = spec
        .mixture_probs
        .iter()
        .zip(spec.means.iter().zip(&spec.stds))
        .map(|(&p, (m, s))| {
            let mut lp = p.ln();
            for ((xj, mj), sj) in x.iter().zip(m).zip(s) {
                let z = (xj - mj) / sj;
                lp -= 0.5 * z * z + sj.ln() + half_log_2pi;
            }
            lp
        })
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Ok(top);
    }
    Ok(top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln())
}

/// Surrogate for an imperfect generator: each component's mean moves by
/// `epsilon` along a random unit direction, its stds are scaled by
/// `1 + epsilon·u` with `u ~ U[−1, 1]` (floored at 0.05), and the weights
/// are tilted by `exp(epsilon·v)`, `v ~ U[−1, 1]`, then renormalized.
/// Draws come from `spec.seed`, so a given base spec always perturbs along
/// the same directions.
pub fn perturb_mog(spec: &MogSpec, epsilon: f64) -> Result<MogSpec> {
    spec.validate()?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(NplmError::invalid(format!("epsilon must be non-negative, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(spec.clone());
    }
    let mut rng = stream_rng(spec.seed, Stream::Perturb, 0);
    let mut out = spec.clone();
    let mut tilts = Vec::with_capacity(spec.n_components);
    for k in 0..spec.n_components {
        let dir: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (m, d) in out.means[k].iter_mut().zip(&dir) {
            *m += epsilon * d / len;
        }
        let u: f64 = rng.gen_range(-1.0..=1.0);
        let factor = (1.0 + epsilon * u).max(0.05);
        out.stds[k].iter_mut().for_each(|s| *s *= factor);
        let v: f64 = rng.gen_range(-1.0..=1.0);
        tilts.push(spec.mixture_probs[k] * (epsilon * v).exp());
    }
    out.mixture_probs = normalize(tilts);
    Ok(out)
}

/// Every component's stds multiplied by `factor`: a generator that spreads
/// mass beyond the true support.
pub fn inflate_stds(spec: &MogSpec, factor: f64) -> Result<MogSpec> {
    spec.validate()?;
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(NplmError::invalid(format!("inflation factor must be positive, got {factor}")));
    }
    let mut out = spec.clone();
    out.stds.iter_mut().flatten().for_each(|s| *s *= factor);
    Ok(out)
}

/// Row indices of a uniform draw of `n` rows.
pub fn resample_indices(pool_size: usize, n: usize, with_replacement: bool, seed: u64) -> Result<Vec<usize>> {
    if pool_size == 0 {
        return Err(NplmError::invalid("cannot resample an empty pool"));
    }
    let mut rng = rng_from_seed(seed);
    if with_replacement {
        Ok((0..n).map(|_| rng.gen_range(0..pool_size)).collect())
    } else {
        if n > pool_size {
            return Err(NplmError::invalid(format!(
                "cannot draw {n} rows without replacement from a pool of {pool_size}"
            )));
        }
        Ok(index::sample(&mut rng, pool_size, n).into_vec())
    }
}

pub fn resample(pool: &Dataset, n: usize, with_replacement: bool, seed: u64) -> Result<Dataset> {
    let idx = resample_indices(pool.n_points(), n, with_replacement, seed)?;
    Ok(pool.select(&idx, pool.label.clone())?.with_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_component_has_unit_weight() {
        let s = random_mog(3, 1, 9).unwrap();
        assert_eq!(s.mixture_probs, vec![1.0]);
        assert_eq!(random_mog(3, 1, 9).unwrap(), s);
        s.validate().unwrap();
    }

    #[test]
    fn log_density_examples() {
        let s = MogSpec {
            dim: 1,
            n_components: 1,
            means: vec![vec![0.0]],
            stds: vec![vec![1.0]],
            mixture_probs: vec![1.0],
            seed: 0,
        };
        assert_abs_diff_eq!(mog_log_density(&s, &[0.0]).unwrap(), -0.918938533204672, epsilon = 1e-12);
        let twin = MogSpec {
            n_components: 2,
            means: vec![vec![0.0]; 2],
            stds: vec![vec![1.0]; 2],
            mixture_probs: vec![0.5, 0.5],
            ..s.clone()
        };
        for x in [-3.0, 0.2, 4.0] {
            assert_abs_diff_eq!(
                mog_log_density(&twin, &[x]).unwrap(),
                mog_log_density(&s, &[x]).unwrap(),
                epsilon = 1e-14
            );
        }
        assert!(mog_log_density(&s, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let s = random_mog(4, 3, 2).unwrap();
        assert_eq!(perturb_mog(&s, 0.0).unwrap(), s);
        let p = perturb_mog(&s, 0.3).unwrap();
        p.validate().unwrap();
        assert_ne!(p, s);
        assert_eq!(perturb_mog(&s, 0.3).unwrap(), p);
    }

    #[test]
    fn degenerate_component_samples_its_mean() {
        let s = MogSpec {
            dim: 2,
            n_components: 1,
            means: vec![vec![1.0, -2.0]],
            stds: vec![vec![1e-9; 2]],
            mixture_probs: vec![1.0],
            seed: 0,
        };
        let d = sample_mog(&s, 500, 3).unwrap();
        for row in d.rows() {
            assert!((row[0] - 1.0).abs() < 1e-6 && (row[1] + 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn without_replacement_rejects_oversized_draws() {
        let pool = Dataset::new((0..10).map(f64::from).collect(), 1, "p").unwrap();
        assert!(resample(&pool, 11, false, 0).is_err());
        let perm = resample(&pool, 10, false, 0).unwrap();
        let mut v = perm.values().to_vec();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, pool.values());
    }
}
