//! Per-point diagnostics of a fitted model: classifier scores, anomaly
//! selection, reference reweighting and histogram bundles for corner plots.

use serde::{Deserialize, Serialize};

use crate::error::{NplmError, Result};
use crate::solver::{evaluate_f, sigmoid, EXP_CLAMP};
use crate::types::{check_dims, Dataset, TrainedModel};

pub const DEFAULT_BINS: usize = 40;
/// Fraction of the union range added on each side of histogram axes.
pub const RANGE_PADDING: f64 = 0.01;

/// `1 / (1 + e^{−f(x)})` per point.
pub fn classifier_scores(model: &TrainedModel, points: &Dataset) -> Result<Vec<f64>> {
    Ok(evaluate_f(model, points)?.into_iter().map(sigmoid).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Tail {
    /// Highest scores: overdensities of the data.
    #[default]
    Top,
    /// Lowest scores: underdensities of the data.
    Bottom,
}

/// Indices of the `⌈q·n⌉` most extreme scores in the requested tail, ties
/// broken by original index.
pub fn tail_indices(scores: &[f64], q: f64, tail: Tail) -> Result<Vec<usize>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(NplmError::invalid(format!("quantile must lie in (0, 1), got {q}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(NplmError::invalid("scores contain NaN"));
    }
    let k = (q * scores.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match tail {
            Tail::Top => scores[b].total_cmp(&scores[a]),
            Tail::Bottom => scores[a].total_cmp(&scores[b]),
        };
        by_score.then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

pub fn select_top_quantile(points: &Dataset, scores: &[f64], q: f64) -> Result<Dataset> {
    select_quantile(points, scores, q, Tail::Top)
}

pub fn select_quantile(points: &Dataset, scores: &[f64], q: f64, tail: Tail) -> Result<Dataset> {
    if scores.len() != points.n_points() {
        return Err(NplmError::DimensionMismatch {
            expected: points.n_points(),
            found: scores.len(),
        });
    }
    let idx = tail_indices(scores, q, tail)?;
    points.select(&idx, format!("{}-selected", points.label))
}

/// `e^{f(x)}` per reference point, with the exponent clamped at the
/// solver's overflow limit.
pub fn reweight_reference(model: &TrainedModel, reference: &Dataset) -> Result<Vec<f64>> {
    let f = evaluate_f(model, reference)?;
    let clamped = f.iter().filter(|&&v| v > EXP_CLAMP).count();
    if clamped > 0 {
        log::warn!("{clamped} reweighting factors clamped at e^{EXP_CLAMP}");
    }
    Ok(f.into_iter().map(|v| v.min(EXP_CLAMP).exp()).collect())
}

/// Uniform bins on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
}

impl BinSpec {
    pub fn new(lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) || n_bins == 0 {
            return Err(NplmError::invalid(format!("invalid bins [{lo}, {hi}] × {n_bins}")));
        }
        Ok(Self { lo, hi, n_bins })
    }

    pub fn edges(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.n_bins as f64;
        (0..=self.n_bins).map(|i| self.lo + w * i as f64).collect()
    }

    /// Bin of `x`; values outside the range are dropped, the upper edge
    /// belongs to the last bin.
    pub fn bin(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let b = ((x - self.lo) / (self.hi - self.lo) * self.n_bins as f64) as usize;
        Some(b.min(self.n_bins - 1))
    }

    pub fn histogram(&self, values: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_bins];
        for (i, &v) in values.iter().enumerate() {
            if let Some(b) = self.bin(v) {
                counts[b] += weights.map_or(1.0, |w| w[i]);
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBand {
    pub edges: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-bin mean and standard deviation of the score histograms that each
/// null-toy model assigns to `points`.
pub fn score_reference_band(models: &[TrainedModel], points: &Dataset, bins: &BinSpec) -> Result<ScoreBand> {
    if models.len() < 2 {
        return Err(NplmError::invalid("score band needs at least two models"));
    }
    let hists = models
        .iter()
        .map(|m| classifier_scores(m, points).map(|s| bins.histogram(&s, None)))
        .collect::<Result<Vec<_>>>()?;
    let k = hists.len() as f64;
    let mut mean = vec![0.0; bins.n_bins];
    for h in &hists {
        for (m, c) in mean.iter_mut().zip(h) {
            *m += c / k;
        }
    }
    let mut std = vec![0.0; bins.n_bins];
    for h in &hists {
        for ((s, c), m) in std.iter_mut().zip(h).zip(&mean) {
            *s += (c - m) * (c - m);
        }
    }
    // Sample standard deviation across toys.
    std.iter_mut().for_each(|s| *s = (*s / (k - 1.0)).sqrt());
    Ok(ScoreBand {
        edges: bins.edges(),
        mean,
        std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram1d {
    pub axis: usize,
    pub edges: Vec<f64>,
    /// One count vector per source.
    pub counts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub x_axis: usize,
    pub y_axis: usize,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// One row-major `x_bins × y_bins` grid per source.
    pub counts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBundle {
    pub dim: usize,
    pub sources: Vec<String>,
    pub marginals: Vec<Histogram1d>,
    pub pairs: Vec<Histogram2d>,
    /// Whether the reference source carries per-point weights.
    pub weighted: bool,
}

fn axis_bins(sets: &[&Dataset], axis: usize, n_bins: usize) -> Result<BinSpec> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for d in sets {
        for row in d.rows() {
            lo = lo.min(row[axis]);
            hi = hi.max(row[axis]);
        }
    }
    let pad = if hi > lo { RANGE_PADDING * (hi - lo) } else { 0.5 };
    BinSpec::new(lo - pad, hi + pad, n_bins)
}

/// Marginal and pairwise histograms of reference, data and selected
/// points on shared axes.
pub fn corner_data(reference: &Dataset, data: &Dataset, selected: &Dataset, bins_per_dim: usize) -> Result<HistogramBundle> {
    corner_data_weighted(reference, None, data, selected, bins_per_dim)
}

/// As [`corner_data`], optionally weighting the reference points (for
/// instance with [`reweight_reference`]).
pub fn corner_data_weighted(
    reference: &Dataset,
    reference_weights: Option<&[f64]>,
    data: &Dataset,
    selected: &Dataset,
    bins_per_dim: usize,
) -> Result<HistogramBundle> {
    check_dims(reference.dim(), data.dim())?;
    check_dims(reference.dim(), selected.dim())?;
    if bins_per_dim < 2 {
        return Err(NplmError::invalid("need at least two bins per dimension"));
    }
    if let Some(w) = reference_weights {
        if w.len() != reference.n_points() {
            return Err(NplmError::DimensionMismatch {
                expected: reference.n_points(),
                found: w.len(),
            });
        }
    }
    let sets = [reference, data, selected];
    let dim = reference.dim();
    let axes = (0..dim)
        .map(|a| axis_bins(&sets, a, bins_per_dim))
        .collect::<Result<Vec<_>>>()?;
    let weights_for = |s: usize| if s == 0 { reference_weights } else { None };
    let column = |d: &Dataset, a: usize| d.rows().map(|r| r[a]).collect::<Vec<_>>();

    let marginals = (0..dim)
        .map(|a| Histogram1d {
            axis: a,
            edges: axes[a].edges(),
            counts: sets
                .iter()
                .enumerate()
                .map(|(s, d)| axes[a].histogram(&column(d, a), weights_for(s)))
                .collect(),
        })
        .collect();

    let mut pairs = Vec::with_capacity(dim * dim.saturating_sub(1) / 2);
    for x in 0..dim {
        for y in x + 1..dim {
            let (bx, by) = (&axes[x], &axes[y]);
            let counts = sets
                .iter()
                .enumerate()
                .map(|(s, d)| {
                    let w = weights_for(s);
                    let mut grid = vec![0.0; bx.n_bins * by.n_bins];
                    for (i, row) in d.rows().enumerate() {
                        if let (Some(i_x), Some(i_y)) = (bx.bin(row[x]), by.bin(row[y])) {
                            grid[i_x * by.n_bins + i_y] += w.map_or(1.0, |w| w[i]);
                        }
                    }
                    grid
                })
                .collect();
            pairs.push(Histogram2d {
                x_axis: x,
                y_axis: y,
                x_edges: bx.edges(),
                y_edges: by.edges(),
                counts,
            });
        }
    }
    Ok(HistogramBundle {
        dim,
        sources: vec!["reference".into(), "data".into(), "selected".into()],
        marginals,
        pairs,
        weighted: reference_weights.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(dim: usize) -> TrainedModel {
        TrainedModel {
            centers: vec![0.0; dim],
            dim,
            weights: vec![0.0],
            kernel_width: 1.0,
            ref_count: 1,
            data_count: 1,
            expected_count: 1.0,
            converged: true,
            iterations_used: 0,
            final_risk: 0.0,
            relative_grad_norm: 0.0,
            standardizer: None,
        }
    }

    #[test]
    fn scores_of_constant_models() {
        let pts = Dataset::from_rows(&[vec![0.1], vec![5.0]], "p").unwrap();
        assert_eq!(classifier_scores(&zero_model(1), &pts).unwrap(), vec![0.5, 0.5]);
        let mut m = zero_model(1);
        m.weights = vec![3f64.ln()];
        let at_center = Dataset::from_rows(&[vec![0.0]], "c").unwrap();
        assert!((classifier_scores(&m, &at_center).unwrap()[0] - 0.75).abs() < 1e-15);
        assert!((reweight_reference(&m, &at_center).unwrap()[0] - 3.0).abs() < 1e-14);
        assert_eq!(reweight_reference(&zero_model(1), &pts).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn quantile_selection_rules() {
        let n = 1000;
        let pts = Dataset::new((0..n).map(|i| i as f64).collect(), 1, "p").unwrap();
        let flat = vec![0.3; n];
        let sel = select_top_quantile(&pts, &flat, 0.01).unwrap();
        assert_eq!(sel.values(), (0..10).map(|i| i as f64).collect::<Vec<_>>().as_slice());
        let rising: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let sel = select_top_quantile(&pts, &rising, 0.01).unwrap();
        let mut got = sel.values().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, (990..1000).map(|i| i as f64).collect::<Vec<_>>());
        let low = select_quantile(&pts, &rising, 0.005, Tail::Bottom).unwrap();
        assert_eq!(low.values(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn band_of_identical_models_has_zero_spread() {
        let pts = Dataset::new(vec![0.0, 1.0, 2.0, 3.0], 1, "p").unwrap();
        let bins = BinSpec::new(0.0, 1.0, 10).unwrap();
        let band = score_reference_band(&[zero_model(1), zero_model(1)], &pts, &bins).unwrap();
        assert!(band.std.iter().all(|&s| s == 0.0));
        assert_eq!(band.mean[5], 4.0);
        assert_eq!(band.mean.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn corner_counts() {
        let r = Dataset::new((0..40).map(|i| (i % 7) as f64).collect(), 4, "r").unwrap();
        let b = corner_data(&r, &r, &r, 5).unwrap();
        assert_eq!(b.marginals.len(), 4);
        assert_eq!(b.pairs.len(), 6);
        for h in &b.marginals {
            for c in &h.counts {
                assert_eq!(c.iter().sum::<f64>(), 10.0);
            }
        }
        let one = Dataset::new(vec![1.0, 2.0], 1, "o").unwrap();
        let b = corner_data(&one, &one, &one, 3).unwrap();
        assert_eq!((b.marginals.len(), b.pairs.len()), (1, 0));
    }
}
