//! Null calibration: toys drawn from the reference distribution, the χ²
//! fit of their statistics, the KS compatibility check, and validation
//! runs against a calibrated null.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma_lr};

use crate::benchmarks::resample_indices;
use crate::error::{NplmError, Result};
use crate::exec::Execution;
use crate::seeds::{derive_seed, Stream};
use crate::testing::{run_single_test_with, score_against_null, Statistic};
use crate::types::{check_dims, Dataset, Direction, NplmConfig, NullModel, TrainedModel, ValidationSummary};

/// Fraction of failed toys above which a calibration is rejected.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResamplingMode {
    /// Disjoint draws without replacement.
    Partition,
    /// Draws with replacement.
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplingPolicy {
    pub mode: ResamplingMode,
    pub toy_size: usize,
}

impl ResamplingPolicy {
    pub fn partition(toy_size: usize) -> Self {
        Self {
            mode: ResamplingMode::Partition,
            toy_size,
        }
    }

    pub fn bootstrap(toy_size: usize) -> Self {
        Self {
            mode: ResamplingMode::Bootstrap,
            toy_size,
        }
    }
}

/// How the `n_units` draws of one run are taken from a pool.
struct DrawPlan {
    policy: ResamplingPolicy,
    pool_size: usize,
    /// One shared permutation when the pool holds enough disjoint blocks.
    permutation: Option<Vec<usize>>,
    overlap: bool,
}

impl DrawPlan {
    fn new(pool_size: usize, policy: ResamplingPolicy, n_units: usize, master: u64, stream: Stream) -> Result<Self> {
        if policy.toy_size == 0 {
            return Err(NplmError::invalid("toy_size must be positive"));
        }
        let mut plan = Self {
            policy,
            pool_size,
            permutation: None,
            overlap: false,
        };
        if policy.mode == ResamplingMode::Partition {
            if pool_size < policy.toy_size {
                return Err(NplmError::invalid(format!(
                    "pool of {pool_size} points cannot supply toys of size {}",
                    policy.toy_size
                )));
            }
            if pool_size >= n_units * policy.toy_size {
                let seed = derive_seed(master, Stream::Partition, stream as u64);
                plan.permutation = Some(resample_indices(pool_size, pool_size, false, seed)?);
            } else {
                plan.overlap = true;
            }
        }
        Ok(plan)
    }

    fn indices(&self, unit: usize, unit_seed: u64) -> Result<Vec<usize>> {
        let n = self.policy.toy_size;
        if let Some(perm) = &self.permutation {
            return Ok(perm[unit * n..(unit + 1) * n].to_vec());
        }
        let seed = derive_seed(unit_seed, Stream::Subsample, 0);
        let with_replacement = self.policy.mode == ResamplingMode::Bootstrap;
        resample_indices(self.pool_size, n, with_replacement, seed)
    }
}

/// Seed of one toy or repeat; also the master seed of its fit.
pub fn unit_seed(master: u64, stream: Stream, index: usize) -> u64 {
    derive_seed(master, stream, index as u64)
}

struct UnitOutcome {
    seed: u64,
    statistic: Statistic,
    model: TrainedModel,
}

#[allow(clippy::too_many_arguments)]
fn run_unit(
    exec: Execution,
    reference: &Dataset,
    pool: &Dataset,
    config: &NplmConfig,
    plan: &DrawPlan,
    stream: Stream,
    index: usize,
) -> Result<UnitOutcome> {
    let seed = unit_seed(config.master_seed, stream, index);
    let idx = plan.indices(index, seed)?;
    let data = pool.select(&idx, format!("{}#{index}", pool.label))?;
    let mut cfg = config.clone();
    cfg.master_seed = seed;
    let run = run_single_test_with(exec, reference, &data, &cfg)?;
    Ok(UnitOutcome {
        seed,
        statistic: run.statistic,
        model: run.model,
    })
}

fn check_inputs(reference: &Dataset, pool: &Dataset, config: &NplmConfig, policy: &ResamplingPolicy) -> Result<()> {
    config.validate()?;
    check_dims(reference.dim(), pool.dim())?;
    if policy.toy_size == 0 {
        return Err(NplmError::invalid("toy_size must be positive"));
    }
    Ok(())
}

fn balance_warning(n_ref: usize, toy_size: usize) -> Option<String> {
    (n_ref < 5 * toy_size).then(|| {
        format!("reference size {n_ref} is below 5× the toy size {toy_size}; reference fluctuations may not be subdominant")
    })
}

pub fn calibrate_null(
    reference: &Dataset,
    toy_pool: &Dataset,
    config: &NplmConfig,
    policy: &ResamplingPolicy,
    n_toys: usize,
) -> Result<NullModel> {
    calibrate_null_with(Execution::default(), reference, toy_pool, config, policy, n_toys)
}

/// Runs `n_toys` reference-distributed tests and fits their distribution.
/// Toys that error or fail to converge are excluded and counted.
pub fn calibrate_null_with(
    exec: Execution,
    reference: &Dataset,
    toy_pool: &Dataset,
    config: &NplmConfig,
    policy: &ResamplingPolicy,
    n_toys: usize,
) -> Result<NullModel> {
    check_inputs(reference, toy_pool, config, policy)?;
    if n_toys < 20 {
        return Err(NplmError::invalid(format!("calibration needs at least 20 toys, got {n_toys}")));
    }
    let plan = DrawPlan::new(toy_pool.n_points(), *policy, n_toys, config.master_seed, Stream::Toy)?;
    let mut warnings = Vec::new();
    warnings.extend(balance_warning(reference.n_points(), policy.toy_size));
    let mut overlap = plan.overlap;
    if overlap {
        warnings.push(format!(
            "pool of {} points holds fewer than {n_toys} disjoint toys of size {}; toys overlap",
            toy_pool.n_points(),
            policy.toy_size
        ));
    }
    if toy_pool.fingerprint() == reference.fingerprint() {
        overlap = true;
        warnings.push("toy pool is the reference sample itself; toys share points with the reference".into());
    }

    let outcomes = exec.map(n_toys, |i| {
        run_unit(exec, reference, toy_pool, config, &plan, Stream::Toy, i)
    });
    let mut values = Vec::with_capacity(n_toys);
    let mut failed = 0;
    let mut clamped = 0;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) if o.model.converged => {
                clamped += o.statistic.clamped;
                values.push(o.statistic.t);
            }
            Ok(o) => {
                failed += 1;
                log::warn!(
                    "toy {i} did not converge (relative gradient {:.2e}); excluded",
                    o.model.relative_grad_norm
                );
            }
            Err(e) => {
                failed += 1;
                log::warn!("toy {i} failed: {e}; excluded");
            }
        }
    }
    if failed as f64 > MAX_FAILED_FRACTION * n_toys as f64 {
        return Err(NplmError::CalibrationRejected { failed, total: n_toys });
    }
    if failed > 0 {
        warnings.push(format!("{failed} of {n_toys} toys failed and were excluded"));
    }
    if clamped > 0 {
        warnings.push(format!("{clamped} exponentials hit the overflow clamp across toys"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    values.sort_by(f64::total_cmp);
    let chi2_dof = fit_chi2_dof(&values)?;
    let ks_pvalue = ks_compatibility(&values, chi2_dof)?;
    Ok(NullModel {
        n_toys: values.len(),
        toy_values: values,
        chi2_dof,
        ks_pvalue,
        n_failed: failed,
        config_fingerprint: config.fingerprint(reference.n_points(), policy.toy_size),
        reference_fingerprint: reference.fingerprint(),
        master_seed: config.master_seed,
        toy_size: policy.toy_size,
        overlap,
        warnings,
    })
}

/// Trained models of the first `n` null toys, with the same seeds
/// [`calibrate_null`] uses.
pub fn toy_models(
    reference: &Dataset,
    toy_pool: &Dataset,
    config: &NplmConfig,
    policy: &ResamplingPolicy,
    n: usize,
) -> Result<Vec<TrainedModel>> {
    check_inputs(reference, toy_pool, config, policy)?;
    let exec = Execution::default();
    let plan = DrawPlan::new(toy_pool.n_points(), *policy, n, config.master_seed, Stream::Toy)?;
    exec.map(n, |i| run_unit(exec, reference, toy_pool, config, &plan, Stream::Toy, i).map(|o| o.model))
        .into_iter()
        .collect()
}

/// Statistics of `n` null toys, each as a `Result` so callers can inspect
/// failures. Used by the hyperparameter scans.
pub(crate) fn toy_statistics(
    reference: &Dataset,
    toy_pool: &Dataset,
    config: &NplmConfig,
    policy: &ResamplingPolicy,
    n: usize,
    stream: Stream,
) -> Result<Vec<Result<(Statistic, bool)>>> {
    check_inputs(reference, toy_pool, config, policy)?;
    let exec = Execution::default();
    let plan = DrawPlan::new(toy_pool.n_points(), *policy, n, config.master_seed, stream)?;
    Ok(exec.map(n, |i| {
        run_unit(exec, reference, toy_pool, config, &plan, stream, i).map(|o| (o.statistic, o.model.converged))
    }))
}

/// Maximum-likelihood χ² degrees of freedom of the positive values,
/// falling back to the sample mean of all values when the likelihood
/// equation cannot be bracketed (including zero-spread samples).
pub fn fit_chi2_dof(t_values: &[f64]) -> Result<f64> {
    if t_values.len() < 20 {
        return Err(NplmError::invalid(format!(
            "χ² fit needs at least 20 values, got {}",
            t_values.len()
        )));
    }
    if t_values.iter().any(|t| !t.is_finite()) {
        return Err(NplmError::invalid("χ² fit needs finite values"));
    }
    let positive: Vec<f64> = t_values.iter().copied().filter(|&t| t > 0.0).collect();
    if positive.is_empty() {
        return Err(NplmError::invalid("χ² fit needs at least one positive value"));
    }
    let mean_all = t_values.iter().sum::<f64>() / t_values.len() as f64;
    let fallback = || {
        log::warn!("χ² likelihood could not be bracketed; using the sample mean {mean_all}");
        if mean_all > 0.0 {
            Ok(mean_all)
        } else {
            Err(NplmError::Numerical(format!(
                "χ² fit failed and the sample mean {mean_all} is not positive"
            )))
        }
    };
    let first = positive[0];
    if positive.iter().all(|&t| t == first) {
        return fallback();
    }
    // Score equation of the χ² likelihood: ψ(k/2) = mean(ln t) − ln 2.
    let target = positive.iter().map(|t| t.ln()).sum::<f64>() / positive.len() as f64 - 2f64.ln();
    let score = |log_k: f64| digamma(0.5 * log_k.exp()) - target;
    let (mut lo, mut hi) = (1e-6f64.ln(), 1e8f64.ln());
    if !(score(lo) < 0.0 && score(hi) > 0.0) {
        return fallback();
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if score(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

fn chi2_cdf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(dof / 2.0, x / 2.0)
    }
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.18 {
        // Jacobi-theta form, fast for small arguments.
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=20)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (-j * j * c).exp()
            })
            .sum();
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let k = k as f64;
                let sign = if k as u64 % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum();
        2.0 * s
    };
    p.clamp(0.0, 1.0)
}

/// Kolmogorov–Smirnov statistic `D_n` of the values against χ²(dof).
pub fn ks_statistic(t_values: &[f64], dof: f64) -> f64 {
    let mut sorted = t_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = chi2_cdf(x, dof);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS p-value of the values against χ²(dof).
pub fn ks_compatibility(t_values: &[f64], dof: f64) -> Result<f64> {
    if t_values.len() < 20 {
        return Err(NplmError::invalid(format!(
            "KS test needs at least 20 values, got {}",
            t_values.len()
        )));
    }
    if !(dof > 0.0 && dof.is_finite()) {
        return Err(NplmError::invalid(format!("degrees of freedom must be positive, got {dof}")));
    }
    if t_values.iter().any(|t| t.is_nan()) {
        return Err(NplmError::invalid("KS test values contain NaN"));
    }
    let d = ks_statistic(t_values, dof);
    Ok(kolmogorov_survival((t_values.len() as f64).sqrt() * d))
}

/// Percentile `pct ∈ [0, 100]` of ascending values, interpolating linearly
/// between order statistics.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn run_validation(
    reference: &Dataset,
    data_pool: &Dataset,
    config: &NplmConfig,
    null: &NullModel,
    n_repeats: usize,
    policy: &ResamplingPolicy,
) -> Result<ValidationSummary> {
    run_validation_with(Execution::default(), reference, data_pool, config, null, n_repeats, policy)
}

/// Repeats the test on `n_repeats` draws from `data_pool` and summarizes
/// the χ²-route Z-scores by their median and 16th/84th percentiles.
pub fn run_validation_with(
    exec: Execution,
    reference: &Dataset,
    data_pool: &Dataset,
    config: &NplmConfig,
    null: &NullModel,
    n_repeats: usize,
    policy: &ResamplingPolicy,
) -> Result<ValidationSummary> {
    check_inputs(reference, data_pool, config, policy)?;
    if n_repeats == 0 {
        return Err(NplmError::invalid("n_repeats must be positive"));
    }
    let found = config.fingerprint(reference.n_points(), policy.toy_size);
    if found != null.config_fingerprint {
        return Err(NplmError::FingerprintMismatch {
            expected: null.config_fingerprint.clone(),
            found,
        });
    }
    let plan = DrawPlan::new(data_pool.n_points(), *policy, n_repeats, config.master_seed, Stream::Repeat)?;
    if let Some(w) = balance_warning(reference.n_points(), policy.toy_size) {
        log::warn!("{w}");
    }
    let reports = exec
        .map(n_repeats, |i| {
            let o = run_unit(exec, reference, data_pool, config, &plan, Stream::Repeat, i)?;
            if !o.model.converged {
                log::warn!("repeat {i} did not converge");
            }
            score_against_null(o.statistic.t, null, None, vec![o.seed], Direction::TrueAsReference)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut z: Vec<f64> = reports.iter().map(|r| r.z_score).collect();
    z.sort_by(f64::total_cmp);
    Ok(ValidationSummary {
        z_median: percentile_sorted(&z, 50.0),
        ci68_low: percentile_sorted(&z, 16.0),
        ci68_high: percentile_sorted(&z, 84.0),
        per_repeat_reports: reports,
        n_repeats,
    })
}

/// On-disk store of calibrated nulls keyed by configuration fingerprint,
/// reference fingerprint and master seed.
#[derive(Debug, Clone)]
pub struct NullCache {
    dir: PathBuf,
}

impl NullCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, config_fingerprint: &str, reference_fingerprint: &str, master_seed: u64) -> PathBuf {
        self.dir
            .join(format!("null-{config_fingerprint}-{reference_fingerprint}-{master_seed}.json"))
    }

    pub fn load(&self, config_fingerprint: &str, reference_fingerprint: &str, master_seed: u64) -> Result<Option<NullModel>> {
        let path = self.path_for(config_fingerprint, reference_fingerprint, master_seed);
        if !path.exists() {
            return Ok(None);
        }
        let (null, _): (NullModel, _) = crate::io::read_report(&path)?;
        Ok(Some(null))
    }

    pub fn store(&self, null: &NullModel) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path_for(&null.config_fingerprint, &null.reference_fingerprint, null.master_seed);
        crate::io::write_report(null, None, &path)?;
        Ok(path)
    }
}

/// Returns the cached null for this configuration if present, otherwise
/// calibrates and stores it.
pub fn calibrate_null_cached(
    cache: &NullCache,
    reference: &Dataset,
    toy_pool: &Dataset,
    config: &NplmConfig,
    policy: &ResamplingPolicy,
    n_toys: usize,
) -> Result<NullModel> {
    let fp = config.fingerprint(reference.n_points(), policy.toy_size);
    let rfp = reference.fingerprint();
    if let Some(null) = cache.load(&fp, &rfp, config.master_seed)? {
        if null.toy_values.len() + null.n_failed >= n_toys {
            return Ok(null);
        }
    }
    let null = calibrate_null(reference, toy_pool, config, policy, n_toys)?;
    cache.store(&null)?;
    Ok(null)
}
