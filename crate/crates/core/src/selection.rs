//! Hyperparameter heuristics: kernel width from pairwise distances, number
//! of centers from the saturation of the null median, and regularization
//! from a stability scan.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::benchmarks::resample_indices;
use crate::calibration::{percentile_sorted, toy_statistics, ResamplingPolicy};
use crate::error::{NplmError, Result};
use crate::seeds::{derive_seed, Stream};
use crate::types::{Dataset, NplmConfig};

pub const DEFAULT_PERCENTILE: f64 = 90.0;
pub const DEFAULT_SUBSAMPLE: usize = 5000;
/// Relative distance to the largest-M median that counts as saturated.
pub const SATURATION_THRESHOLD: f64 = 0.05;

/// Percentile of the Euclidean pairwise distances among at most
/// `subsample` uniformly chosen points, interpolated linearly between
/// order statistics.
pub fn select_sigma(reference_sample: &Dataset, percentile: f64, subsample: usize, seed: u64) -> Result<f64> {
    let n = reference_sample.n_points();
    if n < 2 {
        return Err(NplmError::invalid("kernel width heuristic needs at least two points"));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(NplmError::invalid(format!("percentile must lie in (0, 100], got {percentile}")));
    }
    if subsample < 2 {
        return Err(NplmError::invalid("subsample must keep at least two points"));
    }
    let rows: Vec<usize> = if n > subsample {
        let mut idx = resample_indices(n, subsample, false, derive_seed(seed, Stream::Subsample, 0))?;
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let k = rows.len();
    let mut dist = Vec::with_capacity(k * (k - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        let x = reference_sample.row(i);
        for &j in &rows[a + 1..] {
            let y = reference_sample.row(j);
            dist.push(x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt());
        }
    }
    let rank = percentile / 100.0 * (dist.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut lo_val, upper) = dist.select_nth_unstable_by(lo, f64::total_cmp);
    let hi_val = if frac > 0.0 {
        upper.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        lo_val
    };
    Ok(lo_val + frac * (hi_val - lo_val))
}

/// Stability markers of one scan point.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanFlags {
    pub failed: usize,
    pub non_converged: usize,
    pub non_finite: usize,
}

impl ScanFlags {
    pub fn stable(&self) -> bool {
        self.failed == 0 && self.non_converged == 0 && self.non_finite == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    /// `(M, λ)` per grid point.
    pub grid: Vec<(usize, f64)>,
    /// Median null statistic per grid point; NaN when no toy succeeded.
    pub medians: Vec<f64>,
    /// Mean seconds per toy.
    pub wall_times: Vec<f64>,
    pub flags: Vec<ScanFlags>,
}

impl ScanResult {
    /// Smallest M whose median lies within `threshold` (relative) of the
    /// largest-M median, considering stable points only.
    pub fn saturation_m(&self, threshold: f64) -> Option<usize> {
        let stable: Vec<usize> = (0..self.grid.len())
            .filter(|&i| self.flags[i].stable() && self.medians[i].is_finite())
            .collect();
        let &last = stable.last()?;
        let reference = self.medians[last];
        stable
            .into_iter()
            .find(|&i| (self.medians[i] - reference).abs() <= threshold * reference.abs())
            .map(|i| self.grid[i].0)
    }
}

struct Probe {
    median: f64,
    seconds_per_toy: f64,
    flags: ScanFlags,
}

fn probe(
    reference: &Dataset,
    toy_pool: &Dataset,
    config: &NplmConfig,
    policy: &ResamplingPolicy,
    n_toys: usize,
    stream: Stream,
) -> Result<Probe> {
    let start = Instant::now();
    let results = toy_statistics(reference, toy_pool, config, policy, n_toys, stream)?;
    let seconds_per_toy = start.elapsed().as_secs_f64() / n_toys.max(1) as f64;
    let mut flags = ScanFlags::default();
    let mut values = Vec::new();
    for r in results {
        match r {
            Ok((s, converged)) => {
                if !s.t.is_finite() || s.clamped > 0 {
                    flags.non_finite += 1;
                } else {
                    values.push(s.t);
                }
                if !converged {
                    flags.non_converged += 1;
                }
            }
            Err(e) if e.is_numerical() => flags.non_finite += 1,
            Err(e) if matches!(e, NplmError::InvalidInput(_) | NplmError::DimensionMismatch { .. }) => {
                return Err(e)
            }
            Err(_) => flags.failed += 1,
        }
    }
    values.sort_by(f64::total_cmp);
    let median = if values.is_empty() {
        f64::NAN
    } else {
        percentile_sorted(&values, 50.0)
    };
    Ok(Probe {
        median,
        seconds_per_toy,
        flags,
    })
}

/// Runs `n_toys_per_point` null toys for each M in an ascending grid.
pub fn scan_m(
    reference: &Dataset,
    toy_pool: &Dataset,
    base: &NplmConfig,
    m_grid: &[usize],
    n_toys_per_point: usize,
    policy: &ResamplingPolicy,
) -> Result<ScanResult> {
    if m_grid.is_empty() || n_toys_per_point == 0 {
        return Err(NplmError::invalid("scan needs a non-empty grid and at least one toy"));
    }
    if m_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(NplmError::invalid("M grid must be strictly ascending"));
    }
    let mut out = ScanResult {
        grid: Vec::new(),
        medians: Vec::new(),
        wall_times: Vec::new(),
        flags: Vec::new(),
    };
    for &m in m_grid {
        let mut cfg = base.clone();
        cfg.n_centers = m;
        let p = probe(reference, toy_pool, &cfg, policy, n_toys_per_point, Stream::Probe)?;
        out.grid.push((m, base.regularization));
        out.medians.push(p.median);
        out.wall_times.push(p.seconds_per_toy);
        out.flags.push(p.flags);
    }
    Ok(out)
}

/// Outcome of probing one λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaProbe {
    pub lambda: f64,
    pub stable: bool,
    pub seconds_per_toy: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub probes: Vec<LambdaProbe>,
    /// Set when no grid value qualified and the largest was returned.
    pub fallback: bool,
}

/// Decision rule on a descending list of probes: the smallest λ reached
/// before the first probe that is unstable or slower than `time_budget`.
pub fn choose_lambda(probes: &[LambdaProbe], time_budget: f64) -> Option<f64> {
    probes
        .iter()
        .take_while(|p| p.stable && p.seconds_per_toy <= time_budget)
        .last()
        .map(|p| p.lambda)
}

/// Walks a descending λ grid with `n_probe_toys` null toys per value and
/// stops at the first value that is unstable or exceeds the per-toy time
/// budget; returns the last qualifying value, or the largest grid value
/// with `fallback` set when even that one fails.
pub fn select_lambda(
    reference: &Dataset,
    toy_pool: &Dataset,
    base: &NplmConfig,
    lambda_grid: &[f64],
    n_probe_toys: usize,
    time_budget: f64,
    policy: &ResamplingPolicy,
) -> Result<LambdaSelection> {
    if lambda_grid.is_empty() {
        return Err(NplmError::invalid("λ grid is empty"));
    }
    if lambda_grid.windows(2).any(|w| w[0] <= w[1]) || lambda_grid.iter().any(|&l| !(l > 0.0)) {
        return Err(NplmError::invalid("λ grid must be positive and strictly descending"));
    }
    if n_probe_toys == 0 {
        return Err(NplmError::invalid("need at least one probe toy"));
    }
    let mut probes = Vec::new();
    for &lambda in lambda_grid {
        let mut cfg = base.clone();
        cfg.regularization = lambda;
        let p = probe(reference, toy_pool, &cfg, policy, n_probe_toys, Stream::Probe)?;
        let record = LambdaProbe {
            lambda,
            stable: p.flags.stable(),
            seconds_per_toy: p.seconds_per_toy,
            median: p.median,
        };
        let keep_going = record.stable && record.seconds_per_toy <= time_budget;
        log::info!(
            "λ = {lambda:e}: stable {} , {:.3} s/toy, median t {:.3}",
            record.stable,
            record.seconds_per_toy,
            record.median
        );
        probes.push(record);
        if !keep_going {
            break;
        }
    }
    match choose_lambda(&probes, time_budget) {
        Some(lambda) => Ok(LambdaSelection {
            lambda,
            probes,
            fallback: false,
        }),
        None => {
            log::warn!("no λ in the grid trained stably within budget; using the largest, {:e}", lambda_grid[0]);
            Ok(LambdaSelection {
                lambda: lambda_grid[0],
                probes,
                fallback: true,
            })
        }
    }
}

/// Published large-scale settings for the Gaussian-mixture benchmarks.
/// They are expressed in raw coordinates, so standardization is off.
pub fn mog_preset(dim: usize) -> Option<NplmConfig> {
    let sigma = match dim {
        4 => 4.96,
        8 => 6.08,
        20 => 9.69,
        30 => 10.9,
        _ => return None,
    };
    Some(NplmConfig {
        standardize: false,
        ..NplmConfig::new(10_000, sigma, 1e-10)
    })
}

/// Published setting for the detector-simulation benchmark, raw
/// coordinates.
pub fn flowsim_preset() -> NplmConfig {
    NplmConfig {
        standardize: false,
        ..NplmConfig::new(8000, 7.4, 1e-6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sigma_examples() {
        let two = Dataset::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0]], "x").unwrap();
        for pct in [1.0, 50.0, 90.0, 100.0] {
            assert_eq!(select_sigma(&two, pct, 5000, 0).unwrap(), 3.0);
        }
        let line = Dataset::from_rows(&[vec![0.0], vec![1.0], vec![2.0]], "x").unwrap();
        assert_abs_diff_eq!(select_sigma(&line, 90.0, 5000, 0).unwrap(), 1.8, epsilon = 1e-12);
        let one = Dataset::from_rows(&[vec![0.0]], "x").unwrap();
        assert!(select_sigma(&one, 90.0, 5000, 0).is_err());
    }

    #[test]
    fn lambda_rule_prefers_smallest_stable_prefix() {
        let p = |lambda, stable, secs| LambdaProbe {
            lambda,
            stable,
            seconds_per_toy: secs,
            median: 1.0,
        };
        let probes = [p(1e-4, true, 1.0), p(1e-6, true, 2.0), p(1e-8, false, 3.0)];
        assert_eq!(choose_lambda(&probes, 10.0), Some(1e-6));
        assert_eq!(choose_lambda(&probes, 1.5), Some(1e-4));
        assert_eq!(choose_lambda(&probes, 0.5), None);
    }

    #[test]
    fn presets() {
        assert_eq!(mog_preset(8).unwrap().kernel_width, 6.08);
        assert!(mog_preset(5).is_none());
        let f = flowsim_preset();
        assert_eq!((f.n_centers, f.kernel_width, f.regularization), (8000, 7.4, 1e-6));
        assert!(!f.standardize);
    }
}
