use nplm_core::benchmarks::{random_mog, sample_mog};
use nplm_core::calibration::{
    calibrate_null, calibrate_null_cached, fit_chi2_dof, ks_compatibility, run_validation, NullCache,
    ResamplingPolicy,
};
use nplm_core::{Dataset, NplmConfig, NplmError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};

fn chi2_draws(k: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ChiSquared::new(k).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

#[test]
fn dof_fit_recovers_truth() {
    let k = fit_chi2_dof(&chi2_draws(10.0, 2000, 1)).unwrap();
    assert!((9.5..=10.5).contains(&k), "{k}");
    let k = fit_chi2_dof(&chi2_draws(98.3, 5000, 2)).unwrap();
    assert!((95.0..=101.5).contains(&k), "{k}");
}

#[test]
fn ks_is_calibrated_under_the_model() {
    let mut p: Vec<f64> = (0..200)
        .map(|r| ks_compatibility(&chi2_draws(20.0, 1000, 100 + r), 20.0).unwrap())
        .collect();
    p.sort_by(f64::total_cmp);
    let median = 0.5 * (p[99] + p[100]);
    assert!((0.35..=0.65).contains(&median), "median KS p = {median}");
}

#[test]
fn ks_rejects_gross_mismatch() {
    let p = ks_compatibility(&chi2_draws(20.0, 1000, 9), 5.0).unwrap();
    assert!(p < 1e-6, "{p}");
}

#[test]
fn fitted_chi2_passes_ks() {
    let reps = 200;
    let passed = (0..reps)
        .filter(|&r| {
            let v = chi2_draws(15.0, 300, 1000 + r);
            let k = fit_chi2_dof(&v).unwrap();
            ks_compatibility(&v, k).unwrap() > 0.01
        })
        .count();
    assert!(passed as f64 >= 0.98 * reps as f64, "{passed}/{reps}");
}

fn small_problem() -> (Dataset, Dataset, NplmConfig) {
    let spec = random_mog(2, 2, 4).unwrap();
    let reference = sample_mog(&spec, 2000, 1).unwrap();
    let pool = sample_mog(&spec, 8000, 2).unwrap();
    let config = NplmConfig::new(60, 1.5, 1e-5).with_seed(42);
    (reference, pool, config)
}

#[test]
fn calibration_is_deterministic_and_complete() {
    let (reference, pool, config) = small_problem();
    let policy = ResamplingPolicy::partition(200);
    let a = calibrate_null(&reference, &pool, &config, &policy, 30).unwrap();
    let b = calibrate_null(&reference, &pool, &config, &policy, 30).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.toy_values.len(), a.n_toys);
    assert_eq!(a.n_toys + a.n_failed, 30);
    assert!(a.toy_values.windows(2).all(|w| w[0] <= w[1]));
    assert!(!a.overlap);
    assert!(a.chi2_dof > 0.0 && (0.0..=1.0).contains(&a.ks_pvalue));
    assert_eq!(a.config_fingerprint, config.fingerprint(2000, 200));
}

#[test]
fn overlapping_draws_are_flagged() {
    let (reference, _, config) = small_problem();
    let policy = ResamplingPolicy::partition(200);
    let null = calibrate_null(&reference, &reference, &config, &policy, 20).unwrap();
    assert!(null.overlap);
    assert!(!null.warnings.is_empty());
    let boot = calibrate_null(&reference, &reference, &config, &ResamplingPolicy::bootstrap(200), 20).unwrap();
    assert!(boot.overlap);
}

#[test]
fn too_few_toys_are_rejected() {
    let (reference, pool, config) = small_problem();
    assert!(calibrate_null(&reference, &pool, &config, &ResamplingPolicy::partition(200), 10).is_err());
}

#[test]
fn unstable_configuration_is_rejected() {
    // A single non-converging Newton iteration per toy makes every toy fail.
    let (reference, pool, mut config) = small_problem();
    config.newton_max_iter = 1;
    config.newton_tol = 1e-300;
    match calibrate_null(&reference, &pool, &config, &ResamplingPolicy::partition(200), 20) {
        Err(NplmError::CalibrationRejected { failed, total }) => assert_eq!((failed, total), (20, 20)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn validation_checks_fingerprint_and_summarizes() {
    let (reference, pool, config) = small_problem();
    let policy = ResamplingPolicy::partition(200);
    let null = calibrate_null(&reference, &pool, &config, &policy, 25).unwrap();

    let one = run_validation(&reference, &pool, &config, &null, 1, &policy).unwrap();
    assert_eq!(one.per_repeat_reports.len(), 1);
    let z = one.per_repeat_reports[0].z_score;
    assert_eq!((one.z_median, one.ci68_low, one.ci68_high), (z, z, z));

    let several = run_validation(&reference, &pool, &config, &null, 5, &policy).unwrap();
    assert!(several.ci68_low <= several.z_median && several.z_median <= several.ci68_high);

    let other = NplmConfig {
        kernel_width: 2.0,
        ..config.clone()
    };
    assert!(matches!(
        run_validation(&reference, &pool, &other, &null, 2, &policy),
        Err(NplmError::FingerprintMismatch { .. })
    ));
}

#[test]
fn cache_round_trips() {
    let (reference, pool, config) = small_problem();
    let policy = ResamplingPolicy::partition(200);
    let dir = tempfile::tempdir().unwrap();
    let cache = NullCache::new(dir.path());
    let first = calibrate_null_cached(&cache, &reference, &pool, &config, &policy, 20).unwrap();
    let fp = config.fingerprint(reference.n_points(), 200);
    let stored = cache.load(&fp, &reference.fingerprint(), config.master_seed).unwrap().unwrap();
    assert_eq!(stored, first);
    let second = calibrate_null_cached(&cache, &reference, &pool, &config, &policy, 20).unwrap();
    assert_eq!(second, first);
}
