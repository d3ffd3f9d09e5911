use std::path::{Path, PathBuf};
use std::time::Instant;

use nplm_core::benchmarks::{inflate_stds, perturb_mog, random_mog, sample_mog, MogSpec};
use nplm_core::calibration::{
    calibrate_null, calibrate_null_cached, run_validation, toy_models, NullCache, ResamplingPolicy,
};
use nplm_core::diagnostics::{
    classifier_scores, corner_data, corner_data_weighted, reweight_reference, score_reference_band,
    select_top_quantile, BinSpec,
};
use nplm_core::io::{read_dataset, read_report, write_dataset, write_report, write_scan_table, DataFormat, RunManifest};
use nplm_core::selection::{scan_m, select_lambda, select_sigma};
use nplm_core::solver::fit;
use nplm_core::testing::{score_against_null, test_statistic};
use nplm_core::{Dataset, Direction, NplmConfig, NplmError, NullModel, Standardizer};
use serde_json::Value;

use crate::cli::{
    CalibrateArgs, Cli, Command, DiagnoseArgs, DirectionArg, FormatArg, GenMogArgs, ModeArg, NullArgs, PairArgs,
    PoolArgs, ScanArgs, SelectHyperArgs, TestArgs, ValidateArgs,
};
use crate::error::{CliError, CliResult};

struct Context {
    seed: Option<u64>,
    config_path: Option<PathBuf>,
    direction: DirectionArg,
    format: DataFormat,
    started: Instant,
}

impl Context {
    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command);
        m.wall_time_seconds = self.started.elapsed().as_secs_f64();
        m
    }

    fn config(&self) -> CliResult<NplmConfig> {
        let path = self
            .config_path
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs --config".into()))?;
        let (mut config, _): (NplmConfig, _) = read_report(path)?;
        if let Some(seed) = self.seed {
            config.master_seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    fn read(&self, path: &Path) -> CliResult<Dataset> {
        Ok(read_dataset(path, self.format)?)
    }

    fn write(&self, data: &Dataset, path: &Path, manifest: &RunManifest) -> CliResult<()> {
        write_dataset(data, path, self.format)?;
        write_report(manifest, None, sidecar(path))?;
        Ok(())
    }

    fn extension(&self) -> &'static str {
        match self.format {
            DataFormat::DelimitedText => "csv",
            DataFormat::Binary => "bin",
        }
    }

    fn direction(&self) -> Direction {
        match self.direction {
            DirectionArg::TrueAsRef => Direction::TrueAsReference,
            DirectionArg::GenAsRef => Direction::GeneratorAsReference,
        }
    }

    /// (reference, data) in the order the direction asks for.
    fn roles(&self, pair: &PairArgs) -> CliResult<(Dataset, Dataset)> {
        let t = self.read(&pair.true_sample)?;
        let g = self.read(&pair.gen_sample)?;
        Ok(match self.direction {
            DirectionArg::TrueAsRef => (t, g),
            DirectionArg::GenAsRef => (g, t),
        })
    }
}

/// Manifest written next to a sample file.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn policy(mode: ModeArg, toy_size: usize) -> ResamplingPolicy {
    match mode {
        ModeArg::Partition => ResamplingPolicy::partition(toy_size),
        ModeArg::Bootstrap => ResamplingPolicy::bootstrap(toy_size),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {k} threads: {e}")))?;
    }
    let ctx = Context {
        seed: cli.seed,
        config_path: cli.config,
        direction: cli.direction,
        format: match cli.format {
            FormatArg::Text => DataFormat::DelimitedText,
            FormatArg::Binary => DataFormat::Binary,
        },
        started: Instant::now(),
    };
    match cli.command {
        Command::GenMog(a) => gen_mog(&ctx, a),
        Command::SelectHyper(a) => select_hyper(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
        Command::Test(a) => test(&ctx, a),
        Command::Validate(a) => validate(&ctx, a),
        Command::Diagnose(a) => diagnose(&ctx, a),
        Command::Scan(a) => scan(&ctx, a),
    }
}

fn gen_mog(ctx: &Context, a: GenMogArgs) -> CliResult<()> {
    let seed = ctx.seed.unwrap_or(0);
    let mut spec: MogSpec = match &a.spec {
        Some(path) => read_report(path)?.0,
        None => random_mog(a.dim, a.components, a.spec_seed.unwrap_or(seed))?,
    };
    if let Some(eps) = a.perturb {
        spec = perturb_mog(&spec, eps)?;
    }
    if let Some(factor) = a.inflate {
        spec = inflate_stds(&spec, factor)?;
    }
    if a.out.is_none() && a.spec_out.is_none() {
        return Err(CliError::Usage("gen-mog needs --out and/or --spec-out".into()));
    }
    let mut manifest = ctx.manifest("gen-mog");
    manifest.seeds = vec![spec.seed, seed];
    if let Some(p) = &a.spec {
        manifest.inputs.insert("spec".into(), p.display().to_string());
    }
    if let Some(p) = &a.spec_out {
        manifest.outputs.push(p.display().to_string());
    }
    if let Some(out) = &a.out {
        if a.n == 0 {
            return Err(CliError::Usage("--out needs --n > 0".into()));
        }
        let data = sample_mog(&spec, a.n, seed)?;
        manifest.outputs.push(out.display().to_string());
        manifest.inputs.insert("sample".into(), data.fingerprint());
        manifest.wall_time_seconds = ctx.started.elapsed().as_secs_f64();
        ctx.write(&data, out, &manifest)?;
    }
    if let Some(p) = &a.spec_out {
        write_report(&spec, Some(&manifest), p)?;
    }
    Ok(())
}

fn load_pool(ctx: &Context, p: &PoolArgs) -> CliResult<(Dataset, Dataset, ResamplingPolicy)> {
    Ok((ctx.read(&p.reference)?, ctx.read(&p.toy_pool)?, policy(p.mode, p.toy_size)))
}

fn select_hyper(ctx: &Context, a: SelectHyperArgs) -> CliResult<()> {
    let (reference, pool, policy) = load_pool(ctx, &a.pool)?;
    let seed = ctx.seed.unwrap_or(0);
    let standardize = !a.no_standardize;
    let geometry = if standardize {
        Standardizer::fit(&reference).apply(&reference)?
    } else {
        reference.clone()
    };
    let sigma = select_sigma(&geometry, a.percentile, a.subsample, seed)?;
    log::info!("σ = {sigma:.6} ({}th percentile of pairwise distances)", a.percentile);
    let base = NplmConfig {
        standardize,
        ..NplmConfig::new(a.centers, sigma, a.lambda_grid.first().copied().unwrap_or(1e-6)).with_seed(seed)
    };
    base.validate()?;
    let selection = select_lambda(&reference, &pool, &base, &a.lambda_grid, a.probe_toys, a.time_budget, &policy)?;
    let config = NplmConfig {
        regularization: selection.lambda,
        ..base
    };
    let mut manifest = ctx.manifest("select-hyper");
    manifest.config = Some(config.clone());
    manifest.inputs.insert("reference".into(), reference.fingerprint());
    manifest.inputs.insert("toy_pool".into(), pool.fingerprint());
    manifest.seeds = vec![seed];
    manifest.outputs.push(a.out.display().to_string());
    if let Some(p) = &a.selection_out {
        manifest.outputs.push(p.display().to_string());
        write_report(&selection, Some(&manifest), p)?;
    }
    write_report(&config, Some(&manifest), &a.out)?;
    Ok(())
}

fn calibrate(ctx: &Context, a: CalibrateArgs) -> CliResult<()> {
    let config = ctx.config()?;
    let (reference, pool, policy) = load_pool(ctx, &a.pool)?;
    let null = match &a.cache_dir {
        Some(dir) => calibrate_null_cached(&NullCache::new(dir), &reference, &pool, &config, &policy, a.n_toys)?,
        None => calibrate_null(&reference, &pool, &config, &policy, a.n_toys)?,
    };
    let mut manifest = ctx.manifest("calibrate");
    manifest.config = Some(config.clone());
    manifest.inputs.insert("reference".into(), reference.fingerprint());
    manifest.inputs.insert("toy_pool".into(), pool.fingerprint());
    manifest.seeds = vec![config.master_seed];
    if let Some(dir) = &a.cache_dir {
        let path = NullCache::new(dir).path_for(&null.config_fingerprint, &null.reference_fingerprint, null.master_seed);
        manifest.outputs.push(path.display().to_string());
    }
    if let Some(out) = &a.out {
        manifest.outputs.push(out.display().to_string());
    }
    // Cache entries are rewritten with the manifest attached.
    for path in manifest.outputs.clone() {
        write_report(&null, Some(&manifest), path)?;
    }
    println!(
        "null: {} toys ({} failed), χ² dof {:.3}, KS p {:.4}",
        null.n_toys, null.n_failed, null.chi2_dof, null.ks_pvalue
    );
    Ok(())
}

/// Loads the null named by `--null`, or looks one up in the cache
/// directory: among entries for this reference, the one whose config
/// fingerprint matches, preferring the current master seed.
fn find_null(args: &NullArgs, config: &NplmConfig, reference: &Dataset) -> CliResult<(NullModel, Option<NplmConfig>, PathBuf)> {
    let read = |path: PathBuf| -> CliResult<(NullModel, Option<NplmConfig>, PathBuf)> {
        let (null, manifest): (NullModel, _) = read_report(&path)?;
        Ok((null, manifest.and_then(|m| m.config), path))
    };
    let dir = match (&args.null, &args.cache_dir) {
        (Some(p), _) => return read(p.clone()),
        (None, Some(dir)) => dir,
        (None, None) => return Err(CliError::Usage("need --null or --cache-dir".into())),
    };
    let reference_fp = reference.fingerprint();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(NplmError::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("null-") && n.contains(&format!("-{reference_fp}-")))
        })
        .collect();
    paths.sort();
    let candidates = paths.into_iter().map(read).collect::<CliResult<Vec<_>>>()?;
    let Some(first) = candidates.first().cloned() else {
        return Err(CliError::Usage(format!(
            "no cached null for reference {reference_fp} in {}",
            dir.display()
        )));
    };
    let mut matching: Vec<_> = candidates
        .into_iter()
        .filter(|(n, _, _)| n.config_fingerprint == config.fingerprint(reference.n_points(), n.toy_size))
        .collect();
    matching.sort_by_key(|(n, _, _)| n.master_seed != config.master_seed);
    // With no match, the first entry goes through the fingerprint check
    // and produces the diff.
    Ok(matching.into_iter().next().unwrap_or(first))
}

fn check_null(null: &NullModel, null_config: Option<&NplmConfig>, config: &NplmConfig, reference: &Dataset) -> CliResult<()> {
    let found = config.fingerprint(reference.n_points(), null.toy_size);
    let reference_fp = reference.fingerprint();
    if found == null.config_fingerprint && reference_fp == null.reference_fingerprint {
        return Ok(());
    }
    let mut diff = vec![
        format!("- null    config {}  reference {}", null.config_fingerprint, null.reference_fingerprint),
        format!("+ current config {found}  reference {reference_fp}"),
    ];
    if let Some(old) = null_config {
        diff.extend(config_diff(old, config, null.toy_size, reference.n_points()));
    }
    Err(CliError::Fingerprint {
        summary: "null model does not match the current configuration".into(),
        diff: diff.join("\n"),
    })
}

fn config_diff(old: &NplmConfig, new: &NplmConfig, toy_size: usize, n_reference: usize) -> Vec<String> {
    let (Ok(Value::Object(a)), Ok(Value::Object(b))) = (serde_json::to_value(old), serde_json::to_value(new)) else {
        return Vec::new();
    };
    let mut out: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("  {k}: {v} -> {}", b.get(k).unwrap_or(&Value::Null)))
        .collect();
    if old.fingerprint(n_reference, toy_size) == new.fingerprint(n_reference, toy_size) && out.is_empty() {
        out.push("  configs agree; the reference sample or its size differs".into());
    }
    out
}

fn test(ctx: &Context, a: TestArgs) -> CliResult<()> {
    let config = ctx.config()?;
    let (reference, data) = ctx.roles(&a.pair)?;
    let (null, null_config, null_path) = find_null(&a.null, &config, &reference)?;
    check_null(&null, null_config.as_ref(), &config, &reference)?;
    if data.n_points() != null.toy_size {
        log::warn!(
            "data has {} points but the null was calibrated with toys of {}",
            data.n_points(),
            null.toy_size
        );
    }
    let model = fit(&reference, &data, &config)?;
    if !model.converged {
        log::warn!("fit did not converge (relative gradient {:e})", model.relative_grad_norm);
    }
    let t = test_statistic(&model, &reference, &data)?;
    if t.clamped > 0 {
        log::warn!("{} exponentials were clamped", t.clamped);
    }
    let report = score_against_null(t.t, &null, a.alpha, vec![config.master_seed], ctx.direction())?;
    let mut manifest = ctx.manifest("test");
    manifest.config = Some(config.clone());
    manifest.inputs.insert("reference".into(), reference.fingerprint());
    manifest.inputs.insert("data".into(), data.fingerprint());
    manifest.inputs.insert("null".into(), null_path.display().to_string());
    manifest.seeds = vec![config.master_seed];
    manifest.outputs.push(a.out.display().to_string());
    write_report(&report, Some(&manifest), &a.out)?;
    println!(
        "t = {:.4}, p(χ²) = {:.4e}, Z = {:.3}, p(empirical) = {:.4}",
        report.t_obs, report.p_chi2, report.z_score, report.p_empirical
    );
    Ok(())
}

fn validate(ctx: &Context, a: ValidateArgs) -> CliResult<()> {
    let config = ctx.config()?;
    let (reference, pool) = ctx.roles(&a.pair)?;
    let (null, null_config, null_path) = find_null(&a.null, &config, &reference)?;
    check_null(&null, null_config.as_ref(), &config, &reference)?;
    let mut summary = run_validation(&reference, &pool, &config, &null, a.repeats, &policy(a.mode, null.toy_size))?;
    let direction = ctx.direction();
    for r in &mut summary.per_repeat_reports {
        r.direction = direction;
    }
    let mut manifest = ctx.manifest("validate");
    manifest.config = Some(config.clone());
    manifest.inputs.insert("reference".into(), reference.fingerprint());
    manifest.inputs.insert("data_pool".into(), pool.fingerprint());
    manifest.inputs.insert("null".into(), null_path.display().to_string());
    manifest.seeds = vec![config.master_seed];
    manifest.outputs.push(a.out.display().to_string());
    write_report(&summary, Some(&manifest), &a.out)?;
    println!(
        "median Z = {:.3}, 68% band [{:.3}, {:.3}] over {} repeats",
        summary.z_median, summary.ci68_low, summary.ci68_high, summary.n_repeats
    );
    Ok(())
}

fn diagnose(ctx: &Context, a: DiagnoseArgs) -> CliResult<()> {
    let config = ctx.config()?;
    let (reference, data) = ctx.roles(&a.pair)?;
    std::fs::create_dir_all(&a.out_dir).map_err(NplmError::from)?;
    let model = fit(&reference, &data, &config)?;
    let scores = classifier_scores(&model, &data)?;
    let selected = select_top_quantile(&data, &scores, a.quantile)?;
    let weights: Vec<f64> = reweight_reference(&model, &reference)?
        .into_iter()
        .map(|w| w * model.ref_weight())
        .collect();

    let ext = ctx.extension();
    let paths = DiagnosePaths::new(&a.out_dir, ext);
    let mut manifest = ctx.manifest("diagnose");
    manifest.config = Some(config.clone());
    manifest.inputs.insert("reference".into(), reference.fingerprint());
    manifest.inputs.insert("data".into(), data.fingerprint());
    manifest.seeds = vec![config.master_seed];
    manifest.outputs = paths.all(a.toy_pool.is_some());

    let score_set = Dataset::new(scores, 1, "scores")?;
    ctx.write(&score_set, &paths.scores, &manifest)?;
    ctx.write(&selected, &paths.selected, &manifest)?;
    write_report(&corner_data(&reference, &data, &selected, a.bins)?, Some(&manifest), &paths.corner)?;
    write_report(
        &corner_data_weighted(&reference, Some(&weights), &data, &selected, a.bins)?,
        Some(&manifest),
        &paths.reweighted,
    )?;
    if let (Some(pool_path), Some(toy_size)) = (&a.toy_pool, a.toy_size) {
        let pool = ctx.read(pool_path)?;
        let models = toy_models(&reference, &pool, &config, &ResamplingPolicy::partition(toy_size), a.band_toys)?;
        let bins = BinSpec::new(0.0, 1.0, a.bins)?;
        let band = score_reference_band(&models, &reference, &bins)?;
        write_report(&band, Some(&manifest), &paths.band)?;
    }
    println!("selected {} of {} points", selected.n_points(), data.n_points());
    Ok(())
}

struct DiagnosePaths {
    scores: PathBuf,
    selected: PathBuf,
    corner: PathBuf,
    reweighted: PathBuf,
    band: PathBuf,
}

impl DiagnosePaths {
    fn new(dir: &Path, ext: &str) -> Self {
        Self {
            scores: dir.join(format!("scores.{ext}")),
            selected: dir.join(format!("selected.{ext}")),
            corner: dir.join("corner.json"),
            reweighted: dir.join("corner_reweighted.json"),
            band: dir.join("score_band.json"),
        }
    }

    fn all(&self, with_band: bool) -> Vec<String> {
        let mut v = vec![&self.scores, &self.selected, &self.corner, &self.reweighted];
        if with_band {
            v.push(&self.band);
        }
        v.into_iter().map(|p| p.display().to_string()).collect()
    }
}

fn scan(ctx: &Context, a: ScanArgs) -> CliResult<()> {
    if a.m_grid.is_empty() && a.lambda_grid.is_empty() {
        return Err(CliError::Usage("scan needs --m-grid and/or --lambda-grid".into()));
    }
    let config = ctx.config()?;
    let (reference, pool, policy) = load_pool(ctx, &a.pool)?;
    std::fs::create_dir_all(&a.out_dir).map_err(NplmError::from)?;
    let mut manifest = ctx.manifest("scan");
    manifest.config = Some(config.clone());
    manifest.inputs.insert("reference".into(), reference.fingerprint());
    manifest.inputs.insert("toy_pool".into(), pool.fingerprint());
    manifest.seeds = vec![config.master_seed];
    if !a.m_grid.is_empty() {
        let result = scan_m(&reference, &pool, &config, &a.m_grid, a.toys, &policy)?;
        let (json, csv) = (a.out_dir.join("m_scan.json"), a.out_dir.join("m_scan.csv"));
        manifest.outputs.extend([json.display().to_string(), csv.display().to_string()]);
        write_report(&result, Some(&manifest), &json)?;
        write_scan_table(&result, &csv)?;
        match result.saturation_m(nplm_core::selection::SATURATION_THRESHOLD) {
            Some(m) => println!("median t saturates at M = {m}"),
            None => println!("median t has not saturated over the grid"),
        }
    }
    if !a.lambda_grid.is_empty() {
        let sel = select_lambda(&reference, &pool, &config, &a.lambda_grid, a.toys, a.time_budget, &policy)?;
        let json = a.out_dir.join("lambda_scan.json");
        manifest.outputs.push(json.display().to_string());
        write_report(&sel, Some(&manifest), &json)?;
        println!("λ = {:e}{}", sel.lambda, if sel.fallback { " (fallback)" } else { "" });
    }
    Ok(())
}
