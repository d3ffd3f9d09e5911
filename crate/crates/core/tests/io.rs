use nplm_core::benchmarks::random_mog;
use nplm_core::diagnostics::corner_data;
use nplm_core::io::{read_dataset, read_report, write_dataset, write_report, DataFormat, RunManifest};
use nplm_core::{Dataset, Direction, NplmConfig, NullModel, TestReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(n: usize, dim: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Awkward magnitudes exercise the shortest-round-trip encoding.
    let v = (0..n * dim).map(|_| rng.gen::<f64>() * 10f64.powi(rng.gen_range(-30..30))).collect();
    Dataset::new(v, dim, "r").unwrap()
}

#[test]
fn datasets_round_trip_bit_exactly() {
    let d = random_dataset(100, 4);
    let dir = tempfile::tempdir().unwrap();
    for (name, format) in [("d.bin", DataFormat::Binary), ("d.csv", DataFormat::DelimitedText)] {
        let p = dir.path().join(name);
        write_dataset(&d, &p, format).unwrap();
        let back = read_dataset(&p, format).unwrap();
        assert_eq!(back.values().len(), d.values().len());
        for (a, b) in back.values().iter().zip(d.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

fn sample_report() -> TestReport {
    TestReport {
        t_obs: 12.345678901234567,
        p_empirical: 1.0 / 3.0,
        p_chi2: 0.1234567890123,
        z_score: 1.1578,
        z_empirical: 0.43,
        z_empirical_saturated: false,
        alpha: Some(0.05),
        decision: Some(false),
        seeds: vec![u64::MAX, 7],
        direction: Direction::GeneratorAsReference,
        config_fingerprint: "abc".into(),
        n_toys: 200,
    }
}

#[test]
fn reports_round_trip_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    let mut manifest = RunManifest::new("test");
    manifest.config = Some(NplmConfig::default());
    manifest.seeds = vec![1, 2];
    write_report(&sample_report(), Some(&manifest), &p).unwrap();
    let (back, m): (TestReport, _) = read_report(&p).unwrap();
    assert_eq!(back, sample_report());
    assert_eq!(m.unwrap(), manifest);
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.contains("\"schema\": \"nplm.TestReport/1\""));
}

#[test]
fn null_model_keeps_every_toy() {
    let null = NullModel {
        toy_values: (0..200).map(|i| i as f64 * 0.1).collect(),
        chi2_dof: 9.87,
        ks_pvalue: 0.4,
        n_toys: 200,
        n_failed: 0,
        config_fingerprint: "f".into(),
        reference_fingerprint: "r".into(),
        master_seed: 3,
        toy_size: 100,
        overlap: false,
        warnings: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("n.json");
    write_report(&null, None, &p).unwrap();
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(raw["toy_values"].as_array().unwrap().len(), 200);
    let (back, _): (NullModel, _) = read_report(&p).unwrap();
    assert_eq!(back, null);
}

#[test]
fn histogram_bundle_lists_all_pairs() {
    let d = random_dataset(50, 4);
    let bundle = corner_data(&d, &d, &d, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.json");
    write_report(&bundle, None, &p).unwrap();
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(raw["marginals"].as_array().unwrap().len(), 4);
    assert_eq!(raw["pairs"].as_array().unwrap().len(), 6);
}

#[test]
fn mog_spec_round_trips() {
    let spec = random_mog(3, 2, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    write_report(&spec, None, &p).unwrap();
    let (back, _): (nplm_core::benchmarks::MogSpec, _) = read_report(&p).unwrap();
    assert_eq!(back, spec);
}
