//! The extended-likelihood-ratio statistic and its conversion to p-values
//! and Z-scores.

use statrs::function::erf::erfc_inv;
use statrs::function::gamma::gamma_ur;

use crate::error::{NplmError, Result};
use crate::exec::Execution;
use crate::solver::{evaluate_f, fit_detailed_with, EXP_CLAMP};
use crate::types::{check_dims, Dataset, Direction, NplmConfig, NullModel, TestReport, TrainedModel};

/// Largest reported |Z|; the normal quantile of the smallest positive
/// double.
pub const Z_MAX: f64 = 37.5;

/// Value of the statistic plus the number of `e^f` evaluations that hit
/// the overflow clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Statistic {
    pub t: f64,
    pub clamped: usize,
}

/// `t = −2·[a·Σ_ℛ(e^f − 1) − Σ_𝒟 f]` from fitted values.
pub fn statistic_from_values(f_ref: &[f64], f_data: &[f64], ref_weight: f64) -> Result<Statistic> {
    let mut clamped = 0;
    let mut ref_sum = 0.0;
    for &f in f_ref {
        if f > EXP_CLAMP {
            clamped += 1;
        }
        ref_sum += f.min(EXP_CLAMP).exp_m1();
    }
    let data_sum: f64 = f_data.iter().sum();
    let t = -2.0 * (ref_weight * ref_sum - data_sum);
    if !t.is_finite() {
        return Err(NplmError::Numerical(format!(
            "test statistic is not finite ({clamped} exponentials clamped)"
        )));
    }
    if clamped > 0 {
        log::warn!("{clamped} reference points had f > {EXP_CLAMP}; e^f was clamped");
    }
    Ok(Statistic { t, clamped })
}

/// Statistic of `model` on the sample pair it was trained on.
pub fn test_statistic(model: &TrainedModel, reference: &Dataset, data: &Dataset) -> Result<Statistic> {
    check_dims(reference.dim(), data.dim())?;
    if reference.n_points() != model.ref_count || data.n_points() != model.data_count {
        return Err(NplmError::invalid(format!(
            "model was trained on {} reference and {} data points, got {} and {}",
            model.ref_count,
            model.data_count,
            reference.n_points(),
            data.n_points()
        )));
    }
    let f_ref = evaluate_f(model, reference)?;
    let f_data = evaluate_f(model, data)?;
    statistic_from_values(&f_ref, &f_data, model.ref_weight())
}

#[derive(Debug, Clone)]
pub struct SingleTest {
    pub model: TrainedModel,
    pub statistic: Statistic,
}

/// Fits the model and evaluates the statistic in-sample.
pub fn run_single_test(reference: &Dataset, data: &Dataset, config: &NplmConfig) -> Result<SingleTest> {
    run_single_test_with(Execution::default(), reference, data, config)
}

pub fn run_single_test_with(
    exec: Execution,
    reference: &Dataset,
    data: &Dataset,
    config: &NplmConfig,
) -> Result<SingleTest> {
    let outcome = fit_detailed_with(exec, reference, data, config)?;
    let n_ref = reference.n_points();
    let statistic = statistic_from_values(
        &outcome.fitted[..n_ref],
        &outcome.fitted[n_ref..],
        outcome.model.ref_weight(),
    )?;
    Ok(SingleTest {
        model: outcome.model,
        statistic,
    })
}

/// `(#{tᵢ ≥ t_obs} + 1) / (N_toys + 1)` for ascending `toys`.
pub fn empirical_p_value(t_obs: f64, toys: &[f64]) -> Result<f64> {
    if toys.is_empty() {
        return Err(NplmError::invalid("empirical p-value needs at least one toy"));
    }
    let below = toys.partition_point(|&t| t < t_obs);
    let at_or_above = toys.len() - below;
    Ok((at_or_above + 1) as f64 / (toys.len() + 1) as f64)
}

/// Upper tail `Q(dof/2, t/2)` of χ²(dof); 1 for `t ≤ 0`.
pub fn chi2_p_value(t_obs: f64, dof: f64) -> Result<f64> {
    if !(dof > 0.0 && dof.is_finite()) {
        return Err(NplmError::invalid(format!("degrees of freedom must be positive, got {dof}")));
    }
    if t_obs.is_nan() {
        return Err(NplmError::invalid("test statistic is NaN"));
    }
    if t_obs <= 0.0 {
        return Ok(1.0);
    }
    if t_obs.is_infinite() {
        return Ok(0.0);
    }
    Ok(gamma_ur(dof / 2.0, t_obs / 2.0))
}

/// `Φ⁻¹(1 − p)`.
pub fn z_score(p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(NplmError::invalid(format!("p-value must lie in (0, 1], got {p}")));
    }
    Ok(z_from_p(p))
}

/// Like [`z_score`] but maps p-values that underflowed to zero onto the
/// largest representable Z.
pub fn z_from_p(p: f64) -> f64 {
    let p = p.clamp(f64::MIN_POSITIVE, 1.0);
    (std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)).clamp(-Z_MAX, Z_MAX)
}

/// Scores an observed statistic against a calibrated null: both p-value
/// routes, both Z-scores, and an optional decision at level `alpha`.
pub fn score_against_null(
    t_obs: f64,
    null: &NullModel,
    alpha: Option<f64>,
    seeds: Vec<u64>,
    direction: Direction,
) -> Result<TestReport> {
    if let Some(a) = alpha {
        if !(a > 0.0 && a < 1.0) {
            return Err(NplmError::invalid(format!("alpha must lie in (0, 1), got {a}")));
        }
    }
    let p_empirical = empirical_p_value(t_obs, &null.toy_values)?;
    let p_chi2 = chi2_p_value(t_obs, null.chi2_dof)?;
    let n = null.toy_values.len();
    Ok(TestReport {
        t_obs,
        p_empirical,
        p_chi2,
        z_score: z_from_p(p_chi2),
        z_empirical: z_from_p(p_empirical),
        z_empirical_saturated: n + 1 == (1.0 / p_empirical).round() as usize,
        alpha,
        decision: alpha.map(|a| p_chi2 < a),
        seeds,
        direction,
        config_fingerprint: null.config_fingerprint.clone(),
        n_toys: n,
    })
}
