//! Command front end: generate → preprocess → train → estimate → evaluate →
//! visualize, all driven by one JSON config plus a few overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, Views};
use crate::error::{Result, SliceVolError};
use crate::estimators::{ci_estimate, estimate_volume, EstimationMethod};
use crate::eval::{
    self, evaluate_models, make_folds, train_method_for, EvalReport, FoldSpec, MethodMetrics, MethodReport,
};
use crate::phantom::{make_dataset, CaseRecord, LabelVolume};
use crate::preprocess::{canonicalize, extract_slices, mode_filter_coronal, resample_isotropic};
use crate::vae::{train, TrainCase, TrainMethod, TrainedModel};

#[derive(Parser)]
#[command(name = "slicevol", version, about = "Organ volume estimation from 2D segmentation slices")]
pub struct Cli {
    /// JSON run configuration (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Estimation method (repeatable): nn, plr, rvae-lr, rvae-fcnr.
    #[arg(long, global = true)]
    method: Vec<String>,
    /// Input views: single or dual.
    #[arg(long, global = true)]
    views: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset and manifest.
    Generate,
    /// Resample, canonicalize, mode-filter and slice every case.
    Preprocess,
    /// Train one model per cross-validation fold for each requested method.
    Train,
    /// Estimate the volume of one preprocessed slice file.
    Estimate {
        /// Path to a .slice2d file.
        #[arg(long)]
        input: PathBuf,
        /// Cross-validation fold whose model to use (default: first trained).
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Evaluate trained models on the hold-out fold and write reports.
    Evaluate,
    /// Re-emit scatter plots and slice PNGs from an existing report.
    Visualize,
}

/// 0 success, 2 config error, 3 data error, 4 training failure.
fn exit_code(err: &SliceVolError) -> i32 {
    use SliceVolError::*;
    match err {
        InvalidConfig(_) | ConfigMismatch(_) | InvalidSize(_) | InvalidKernel(_) => 2,
        Training(_) => 4,
        _ => 3,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Worker cap from SLICEVOL_THREADS; the pipeline is currently
/// single-threaded, so the cap only validates and bounds the value.
fn worker_cap() -> Result<usize> {
    match std::env::var("SLICEVOL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(|n| n.min(1))
            .ok_or_else(|| SliceVolError::InvalidConfig(format!("SLICEVOL_THREADS must be a positive integer, got '{v}'"))),
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(views) = &cli.views {
        let v: Views = views.parse()?;
        cfg.views = v;
        cfg.model.input_views = v.count();
    }
    if !cli.method.is_empty() {
        cfg.methods = cli.method.iter().map(|m| m.parse()).collect::<Result<Vec<_>>>()?;
    }
    cfg.validate()?;
    let _ = worker_cap()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Preprocess => cmd_preprocess(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Estimate { input, fold } => cmd_estimate(&cfg, &input, fold),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Visualize => cmd_visualize(&cfg),
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.volumes_dir();
    std::fs::create_dir_all(&dir)?;
    let cases = make_dataset(&cfg.dataset, cfg.seed)?;
    let records: Vec<CaseRecord> = cases.iter().map(|(_, r)| r.clone()).collect();
    for (vol, rec) in &cases {
        crate::io::write_seg3d(&dir.join(format!("{}.seg3d", rec.case_id)), vol)?;
    }
    crate::io::write_manifest(&cfg.manifest_path(), &records)?;
    let spleno = records.iter().filter(|r| r.splenomegaly).count();
    println!("generated {} cases ({spleno} splenomegaly) in {}", records.len(), dir.display());
    Ok(())
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    let records = crate::io::read_manifest(&cfg.manifest_path())?;
    std::fs::create_dir_all(cfg.canonical_dir())?;
    std::fs::create_dir_all(cfg.slices_dir())?;
    for rec in &records {
        let raw = crate::io::read_seg3d(&cfg.volumes_dir().join(format!("{}.seg3d", rec.case_id)))?;
        let iso = resample_isotropic(&raw, cfg.grid.voxel_size_mm)?;
        let canonical = canonicalize(&iso, &cfg.grid)?;
        let filtered = mode_filter_coronal(&canonical, cfg.mode_filter)?;
        crate::io::write_seg3d(&cfg.canonical_dir().join(format!("{}.seg3d", rec.case_id)), &filtered)?;
        let pair = extract_slices(&filtered, cfg.model.image_size, cfg.views == Views::Dual)?;
        crate::io::write_slice2d(&cfg.slices_dir().join(format!("{}.slice2d", rec.case_id)), &pair)?;
    }
    println!("preprocessed {} cases into {}", records.len(), cfg.canonical_dir().display());
    Ok(())
}

fn load_canonical_cases(cfg: &RunConfig) -> Result<Vec<(LabelVolume, CaseRecord)>> {
    let records = crate::io::read_manifest(&cfg.manifest_path())?;
    records
        .into_iter()
        .map(|rec| {
            let vol = crate::io::read_seg3d(&cfg.canonical_dir().join(format!("{}.seg3d", rec.case_id)))?;
            Ok((vol, rec))
        })
        .collect()
}

fn load_or_make_folds(cfg: &RunConfig, records: &[CaseRecord]) -> Result<FoldSpec> {
    if cfg.folds_path().exists() {
        Ok(serde_json::from_reader(std::fs::File::open(cfg.folds_path())?)?)
    } else {
        let folds = make_folds(records, cfg.n_folds, cfg.seed)?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        serde_json::to_writer_pretty(std::fs::File::create(cfg.folds_path())?, &folds)?;
        Ok(folds)
    }
}

fn train_method_dir(tm: TrainMethod) -> &'static str {
    match tm {
        TrainMethod::Vae => "vae",
        TrainMethod::RvaeLr => "rvae_lr",
        TrainMethod::RvaeFcn => "rvae_fcn",
        TrainMethod::RvaeFcnCi => "rvae_fcn_ci",
    }
}

fn needed_train_methods(cfg: &RunConfig) -> Vec<TrainMethod> {
    let set: BTreeSet<&'static str> = cfg
        .methods
        .iter()
        .map(|&m| train_method_dir(train_method_for(m, cfg.with_ci)))
        .collect();
    [TrainMethod::Vae, TrainMethod::RvaeLr, TrainMethod::RvaeFcn, TrainMethod::RvaeFcnCi]
        .into_iter()
        .filter(|&tm| set.contains(train_method_dir(tm)))
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let cases = load_canonical_cases(cfg)?;
    let records: Vec<CaseRecord> = cases.iter().map(|(_, r)| r.clone()).collect();
    let folds = load_or_make_folds(cfg, &records)?;
    let by_fold = |f: usize| -> Vec<TrainCase> {
        cases
            .iter()
            .filter(|(_, r)| folds.fold_of(&r.case_id) == Some(f))
            .map(|(v, r)| TrainCase { volume: v.clone(), volume_ml: r.volume_ml })
            .collect()
    };
    for tm in needed_train_methods(cfg) {
        let dir = cfg.models_dir().join(train_method_dir(tm));
        std::fs::create_dir_all(&dir)?;
        for val_fold in (0..folds.n_folds).filter(|&f| f != folds.holdout_fold) {
            let start = Instant::now();
            let train_set: Vec<TrainCase> = (0..folds.n_folds)
                .filter(|&f| f != folds.holdout_fold && f != val_fold)
                .flat_map(by_fold)
                .collect();
            let mut tc = cfg.train.clone();
            tc.seed = splitmix64(cfg.train.seed ^ (val_fold as u64) << 8);
            let ckpt = dir.join(format!("fold{val_fold}.ckpt"));
            let log = dir.join(format!("fold{val_fold}.log.csv"));
            let model = train(&train_set, &by_fold(val_fold), &cfg.model, &tc, tm, Some(&log), Some(&ckpt))?;
            model.save(&dir, &format!("fold{val_fold}"))?;
            println!(
                "trained {}/fold{val_fold} ({} cases) in {:.1}s",
                train_method_dir(tm),
                train_set.len(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

fn load_models(cfg: &RunConfig, tm: TrainMethod, folds: &FoldSpec) -> Result<Vec<(usize, TrainedModel)>> {
    let dir = cfg.models_dir().join(train_method_dir(tm));
    let mut models = Vec::new();
    for val_fold in (0..folds.n_folds).filter(|&f| f != folds.holdout_fold) {
        let name = format!("fold{val_fold}");
        if !dir.join(format!("{name}.model.json")).exists() {
            return Err(SliceVolError::Data(format!(
                "missing trained model {}/{name}; run `slicevol train` first",
                dir.display()
            )));
        }
        models.push((val_fold, TrainedModel::load(&dir, &name)?));
    }
    Ok(models)
}

pub fn cmd_estimate(cfg: &RunConfig, input: &Path, fold: Option<usize>) -> Result<()> {
    let method = cfg.methods[0];
    let records = crate::io::read_manifest(&cfg.manifest_path())?;
    let folds = load_or_make_folds(cfg, &records)?;
    let fold = fold.unwrap_or_else(|| (0..folds.n_folds).find(|&f| f != folds.holdout_fold).unwrap_or(0));
    let tm = train_method_for(method, cfg.with_ci);
    let dir = cfg.models_dir().join(train_method_dir(tm));
    let mut model = TrainedModel::load(&dir, &format!("fold{fold}"))?;
    let pair = crate::io::read_slice2d(input)?;
    let est = estimate_volume(&mut model, &pair, method)?;
    let clamped = if est.clamped { " (clamped)" } else { "" };
    println!("{} {method} {:.2} mL{clamped}", pair.case_id, est.volume_ml);
    if cfg.with_ci && method == EstimationMethod::RvaeFcnr {
        let (_, iv) = ci_estimate(&mut model, &pair, cfg.ci_samples, cfg.seed)?;
        println!(
            "{} {method} 95% CI [{:.2}, {:.2}] mL (eta {:.2}, theta {:.2}, n={})",
            pair.case_id, iv.lower, iv.upper, iv.eta, iv.theta, iv.n_samples
        );
    }
    Ok(())
}

fn baseline_report(
    mode: crate::baselines::MeasurementMode,
    name: &str,
    train_records: &[CaseRecord],
    holdout: &[CaseRecord],
) -> Result<MethodReport> {
    let model = crate::baselines::fit_measurement_regression(train_records, mode)?;
    let truths: Vec<f64> = holdout.iter().map(|r| r.volume_ml).collect();
    let preds: Vec<f64> = holdout
        .iter()
        .map(|r| crate::baselines::predict_measurement_regression(&model, &r.measurements).map(|(p, _)| p))
        .collect::<Result<_>>()?;
    let (m, s) = eval::mrva(&truths, &preds)?;
    let rates = eval::splenomegaly_metrics(&truths, &preds, crate::SPLENOMEGALY_THRESHOLD_ML)?;
    let metrics = MethodMetrics {
        mrva: m,
        std: s,
        r: eval::pearson_r(&truths, &preds)?,
        sen: rates.sen,
        spe: rates.spe,
        acc: rates.acc,
        mcia: None,
    };
    Ok(MethodReport { method: name.into(), mean: metrics.clone(), per_model: vec![metrics] })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let cases = load_canonical_cases(cfg)?;
    let records: Vec<CaseRecord> = cases.iter().map(|(_, r)| r.clone()).collect();
    let folds = load_or_make_folds(cfg, &records)?;
    let holdout: Vec<(LabelVolume, CaseRecord)> = cases
        .iter()
        .filter(|(_, r)| folds.fold_of(&r.case_id) == Some(folds.holdout_fold))
        .map(|(v, r)| (v.clone(), r.clone()))
        .collect();
    if holdout.is_empty() {
        return Err(SliceVolError::NoHoldout);
    }
    let train_records: Vec<CaseRecord> = records
        .iter()
        .filter(|r| folds.fold_of(&r.case_id) != Some(folds.holdout_fold))
        .cloned()
        .collect();

    let mut methods = Vec::new();
    let mut predictions = Vec::new();
    let mut pca_model: Option<TrainedModel> = None;
    for &method in &cfg.methods {
        let tm = train_method_for(method, cfg.with_ci);
        let mut models = load_models(cfg, tm, &folds)?;
        let with_ci = cfg.with_ci && method == EstimationMethod::RvaeFcnr;
        let (report, rows) =
            evaluate_models(&mut models, &holdout, method, with_ci, cfg.ci_samples, cfg.seed)?;
        methods.push(report);
        predictions.extend(rows);
        if pca_model.is_none() {
            pca_model = Some(models.remove(0).1);
        }
    }
    // clinical comparator rows, re-fit on the non-holdout cases
    methods.push(baseline_report(
        crate::baselines::MeasurementMode::Single,
        "he-single",
        &train_records,
        &holdout.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>(),
    )?);
    methods.push(baseline_report(
        crate::baselines::MeasurementMode::Triple,
        "he-triple",
        &train_records,
        &holdout.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>(),
    )?);

    let report = EvalReport { methods, predictions, config: serde_json::to_value(cfg)? };
    std::fs::create_dir_all(&cfg.out_dir)?;
    eval::write_report_json(&cfg.out_dir.join("report.json"), &report)?;
    eval::write_report_csv(&cfg.out_dir.join("report.csv"), &report)?;
    eval::write_predictions_csv(&cfg.out_dir.join("predictions.csv"), &report.predictions)?;
    write_plots(cfg, &report, pca_model.as_mut(), &cases)?;
    for m in &report.methods {
        println!(
            "{}: MRVA {:.2}% ± {:.2}, R {:.3}, ACC {:.1}%{}",
            m.method,
            m.mean.mrva,
            m.mean.std,
            m.mean.r,
            m.mean.acc,
            m.mean.mcia.map(|c| format!(", MCIA {c:.1}%")).unwrap_or_default()
        );
    }
    println!("report written to {}", cfg.out_dir.join("report.json").display());
    Ok(())
}

fn write_plots(
    cfg: &RunConfig,
    report: &EvalReport,
    pca_model: Option<&mut TrainedModel>,
    cases: &[(LabelVolume, CaseRecord)],
) -> Result<()> {
    let plots = cfg.out_dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    for m in report.methods.iter().filter(|m| !m.method.starts_with("he-")) {
        let points: Vec<(f64, f64)> = report
            .predictions
            .iter()
            .filter(|p| p.method == m.method)
            .map(|p| (p.true_volume_ml, p.volume_ml))
            .collect();
        if !points.is_empty() {
            crate::plot::scatter_predicted_vs_true(
                &plots.join(format!("pred_vs_true_{}.svg", m.method)),
                &points,
                &format!("{} on hold-out", m.method),
            )?;
        }
    }
    if let Some(model) = pca_model {
        let mut mus = Vec::with_capacity(cases.len());
        for (vol, _) in cases {
            let pair = extract_slices(vol, model.config.image_size, model.config.input_views == 2)?;
            mus.push(crate::vae::encode(model, &pair)?.mu);
        }
        match eval::latent_pca(&mus) {
            Ok((coords, _)) => {
                let volumes: Vec<f64> = cases.iter().map(|(_, r)| r.volume_ml).collect();
                let spleno: Vec<bool> = cases.iter().map(|(_, r)| r.splenomegaly).collect();
                crate::plot::scatter_latent_pca(
                    &plots.join("latent_pca.svg"),
                    &coords,
                    &volumes,
                    &spleno,
                    "latent means, top-2 principal components",
                )?;
            }
            Err(e) => eprintln!("warning: skipping latent PCA plot: {e}"),
        }
    }
    Ok(())
}

pub fn cmd_visualize(cfg: &RunConfig) -> Result<()> {
    let report_path = cfg.out_dir.join("report.json");
    let report: EvalReport = serde_json::from_reader(std::fs::File::open(&report_path)?)?;
    write_plots(cfg, &report, None, &[])?;
    // slice previews for a handful of cases
    let records = crate::io::read_manifest(&cfg.manifest_path())?;
    let preview_dir = cfg.out_dir.join("plots").join("slices");
    std::fs::create_dir_all(&preview_dir)?;
    let mut exported = 0;
    for rec in records.iter().take(8) {
        let path = cfg.slices_dir().join(format!("{}.slice2d", rec.case_id));
        if path.exists() {
            let pair = crate::io::read_slice2d(&path)?;
            crate::io::export_slice_png(&preview_dir, &pair)?;
            exported += 1;
        }
    }
    println!("plots refreshed in {}; {exported} slice previews", cfg.out_dir.join("plots").display());
    Ok(())
}
