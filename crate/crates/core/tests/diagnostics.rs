use nplm_core::benchmarks::{perturb_mog, random_mog, sample_mog};
use nplm_core::calibration::{toy_models, ResamplingPolicy};
use nplm_core::diagnostics::{
    classifier_scores, corner_data, reweight_reference, score_reference_band, select_top_quantile, BinSpec,
};
use nplm_core::selection::select_sigma;
use nplm_core::solver::{evaluate_f, fit};
use nplm_core::{Dataset, NplmConfig, Standardizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(n: usize, shift: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect();
    Dataset::new(v, 1, "normal").unwrap()
}

#[test]
fn scores_order_like_f() {
    let r = normal(3000, 0.0, 1);
    let d = normal(600, 0.4, 2);
    let model = fit(&r, &d, &NplmConfig::new(60, 1.0, 1e-6).with_seed(3)).unwrap();
    let grid = Dataset::new((0..200).map(|i| -4.0 + 0.04 * i as f64).collect(), 1, "g").unwrap();
    let f = evaluate_f(&model, &grid).unwrap();
    let s = classifier_scores(&model, &grid).unwrap();
    for i in 0..f.len() {
        for j in 0..f.len() {
            assert_eq!(f[i] < f[j], s[i] < s[j]);
        }
    }
    // Selection is invariant under strictly monotone maps of the scores.
    let a = select_top_quantile(&grid, &s, 0.05).unwrap();
    let b = select_top_quantile(&grid, &f, 0.05).unwrap();
    assert_eq!(a.values(), b.values());
}

#[test]
fn reweighting_balances_mass() {
    let r = normal(50_000, 0.0, 11);
    let d = normal(10_000, 0.5, 12);
    let z = Standardizer::fit(&r).apply(&r).unwrap();
    let sigma = select_sigma(&z, 90.0, 5000, 13).unwrap();
    let model = fit(&r, &d, &NplmConfig::new(300, sigma, 1e-8).with_seed(14)).unwrap();
    let w = reweight_reference(&model, &r).unwrap();
    let mass: f64 = w.iter().sum::<f64>() * model.ref_weight();
    assert!((mass - 10_000.0).abs() <= 1000.0, "{mass}");
    let chi2 = closure_chi2_per_bin(&r, &w, model.ref_weight(), &d);
    assert!(chi2 <= 2.0, "χ²/bin {chi2}");
}

/// Weighted reference histogram against the data histogram on [−2, 2.5].
fn closure_chi2_per_bin(r: &Dataset, w: &[f64], a: f64, d: &Dataset) -> f64 {
    let bins = BinSpec::new(-2.0, 2.5, 18).unwrap();
    let scaled: Vec<f64> = w.iter().map(|x| x * a).collect();
    let squares: Vec<f64> = scaled.iter().map(|x| x * x).collect();
    let expected = bins.histogram(r.values(), Some(&scaled));
    let var_expected = bins.histogram(r.values(), Some(&squares));
    let observed = bins.histogram(d.values(), None);
    let chi2: f64 = (0..18)
        .map(|b| (observed[b] - expected[b]).powi(2) / (observed[b] + var_expected[b]))
        .sum();
    chi2 / 18.0
}

#[test]
fn identical_samples_give_compatible_marginals() {
    let spec = random_mog(2, 3, 4).unwrap();
    let a = sample_mog(&spec, 200_000, 1).unwrap();
    let b = sample_mog(&spec, 200_000, 2).unwrap();
    let bundle = corner_data(&a, &b, &b, 40).unwrap();
    for h in &bundle.marginals {
        for (ca, cb) in h.counts[0].iter().zip(&h.counts[1]) {
            let bound = 5.0 * ca.max(*cb).max(1.0).sqrt();
            assert!((ca - cb).abs() <= bound, "{ca} vs {cb}");
        }
    }
    assert_eq!(bundle.pairs.len(), 1);
}

#[test]
fn null_band_and_anomaly_localization() {
    let spec = random_mog(4, 3, 21).unwrap();
    let generator = perturb_mog(&spec, 1.0).unwrap();
    let reference = sample_mog(&spec, 8000, 1).unwrap();
    let pool = sample_mog(&spec, 20_000, 2).unwrap();
    let data = sample_mog(&generator, 1000, 3).unwrap();
    let z = Standardizer::fit(&reference).apply(&reference).unwrap();
    let sigma = select_sigma(&z, 90.0, 5000, 4).unwrap();
    let config = NplmConfig::new(200, sigma, 1e-7).with_seed(5);

    let models = toy_models(&reference, &pool, &config, &ResamplingPolicy::partition(1000), 10).unwrap();
    let bins = BinSpec::new(0.0, 1.0, 20).unwrap();
    let band = score_reference_band(&models, &reference, &bins).unwrap();

    let model = fit(&reference, &data, &config).unwrap();
    let scores = classifier_scores(&model, &reference).unwrap();
    let observed = bins.histogram(&scores, None);
    let excess = observed
        .iter()
        .zip(band.mean.iter().zip(&band.std))
        .skip(10)
        .any(|(o, (m, s))| *o > m + s);
    assert!(excess, "no right-tail excess over the null band");

    let data_scores = classifier_scores(&model, &data).unwrap();
    let selected = select_top_quantile(&data, &data_scores, 0.01).unwrap();
    assert_eq!(selected.n_points(), 10);
    let bundle = corner_data(&reference, &data, &selected, 20).unwrap();
    assert_eq!((bundle.marginals.len(), bundle.pairs.len()), (4, 6));
    let total_ref = reference.n_points() as f64;
    let localized = bundle.pairs.iter().any(|p| {
        let (r, s) = (&p.counts[0], &p.counts[2]);
        let sel_total: f64 = s.iter().sum();
        // Cells holding at least half of the selected points.
        let mut cells: Vec<usize> = (0..s.len()).filter(|&c| s[c] > 0.0).collect();
        cells.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        let mut acc = 0.0;
        let mut ref_mass = 0.0;
        for c in cells {
            acc += s[c];
            ref_mass += r[c];
            if acc >= 0.5 * sel_total {
                break;
            }
        }
        ref_mass / total_ref < 0.05
    });
    assert!(localized, "selected points are not localized in any pair histogram");
}
