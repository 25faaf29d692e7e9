//! Metrics, stratified folds, hold-out cross-validation, latent PCA, and
//! report serialization.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SliceVolError};
use crate::estimators::{ci_estimate, estimate_volume, ConfidenceInterval, EstimationMethod};
use crate::phantom::{CaseRecord, LabelVolume};
use crate::preprocess::extract_slices;
use crate::vae::{train, ModelConfig, TrainCase, TrainConfig, TrainMethod};

/// Mean relative volume accuracy: per-case RVA = (1 - |err|/vol) * 100,
/// reported as (mean, population standard deviation). RVA is not clamped
/// below zero, so wildly wrong predictions drag the mean below 0.
pub fn mrva(truths: &[f64], preds: &[f64]) -> Result<(f64, f64)> {
    if truths.is_empty() || truths.len() != preds.len() {
        return Err(SliceVolError::ShapeMismatch(format!("{} vs {}", truths.len(), preds.len())));
    }
    if truths.iter().any(|&v| v <= 0.0) {
        return Err(SliceVolError::Data("true volumes must be positive".into()));
    }
    let rva: Vec<f64> =
        truths.iter().zip(preds).map(|(&t, &p)| (1.0 - (p - t).abs() / t) * 100.0).collect();
    let n = rva.len() as f64;
    let mean = rva.iter().sum::<f64>() / n;
    let var = rva.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(SliceVolError::ShapeMismatch(format!("{} vs {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(SliceVolError::UndefinedCorrelation);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Sensitivity / specificity / accuracy of splenomegaly classification at a
/// strict `> threshold` rule applied to both truths and predictions. A rate
/// whose denominator is zero is `None` ("not applicable"); accuracy is always
/// defined for nonempty input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRates {
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub acc: f64,
}

pub fn splenomegaly_metrics(truths: &[f64], preds: &[f64], threshold: f64) -> Result<ClassificationRates> {
    if truths.is_empty() || truths.len() != preds.len() {
        return Err(SliceVolError::ShapeMismatch(format!("{} vs {}", truths.len(), preds.len())));
    }
    let (mut tp, mut tn, mut fp, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&t, &p) in truths.iter().zip(preds) {
        match (t > threshold, p > threshold) {
            (true, true) => tp += 1,
            (true, false) => fnn += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64 * 100.0);
    Ok(ClassificationRates {
        sen: rate(tp, tp + fnn),
        spe: rate(tn, tn + fp),
        acc: (tp + tn) as f64 / truths.len() as f64 * 100.0,
    })
}

/// Confidence-interval accuracy: percentage of cases whose true volume lies
/// within the closed interval [lower, upper].
pub fn cia(truths: &[f64], intervals: &[ConfidenceInterval]) -> Result<f64> {
    if truths.is_empty() || truths.len() != intervals.len() {
        return Err(SliceVolError::ShapeMismatch(format!("{} vs {}", truths.len(), intervals.len())));
    }
    let mut inside = 0usize;
    for (&t, iv) in truths.iter().zip(intervals) {
        if iv.lower > iv.upper {
            return Err(SliceVolError::MalformedInterval { lower: iv.lower, upper: iv.upper });
        }
        if iv.lower <= t && t <= iv.upper {
            inside += 1;
        }
    }
    Ok(inside as f64 / truths.len() as f64 * 100.0)
}

/// Disjoint stratified folds over case ids; fold `holdout_fold` is the
/// hold-out test set and never enters training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSpec {
    pub n_folds: usize,
    pub holdout_fold: usize,
    pub folds: Vec<Vec<String>>,
}

impl FoldSpec {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|id| id == case_id))
    }

    pub fn splenomegaly_counts(&self, records: &[CaseRecord]) -> Vec<usize> {
        self.folds
            .iter()
            .map(|fold| {
                fold.iter()
                    .filter(|id| records.iter().any(|r| &r.case_id == *id && r.splenomegaly))
                    .count()
            })
            .collect()
    }
}

/// Stratified split: splenomegaly and normal cases are shuffled separately
/// and dealt round-robin, so both the label counts and the fold sizes differ
/// by at most one across folds.
pub fn make_folds(records: &[CaseRecord], n_folds: usize, seed: u64) -> Result<FoldSpec> {
    if n_folds < 2 || records.len() < n_folds {
        return Err(SliceVolError::InsufficientData(format!(
            "{} cases cannot fill {n_folds} folds",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spleno: Vec<&str> =
        records.iter().filter(|r| r.splenomegaly).map(|r| r.case_id.as_str()).collect();
    let mut normal: Vec<&str> =
        records.iter().filter(|r| !r.splenomegaly).map(|r| r.case_id.as_str()).collect();
    spleno.shuffle(&mut rng);
    normal.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); n_folds];
    let mut next = 0usize;
    for id in spleno.into_iter().chain(normal) {
        folds[next].push(id.to_string());
        next = (next + 1) % n_folds;
    }
    Ok(FoldSpec { n_folds, holdout_fold: 0, folds })
}

/// Metrics for one trained model evaluated on the hold-out set, or their mean
/// across models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub mrva: f64,
    pub std: f64,
    pub r: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub acc: f64,
    pub mcia: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub mean: MethodMetrics,
    pub per_model: Vec<MethodMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub case_id: String,
    pub method: String,
    pub model_index: usize,
    pub volume_ml: f64,
    pub clamped: bool,
    pub true_volume_ml: f64,
    pub eta: Option<f64>,
    pub theta: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
    pub predictions: Vec<PredictionRow>,
    pub config: serde_json::Value,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>> + Clone) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

fn mean_metrics(per_model: &[MethodMetrics]) -> MethodMetrics {
    let n = per_model.len() as f64;
    MethodMetrics {
        mrva: per_model.iter().map(|m| m.mrva).sum::<f64>() / n,
        std: per_model.iter().map(|m| m.std).sum::<f64>() / n,
        r: per_model.iter().map(|m| m.r).sum::<f64>() / n,
        sen: mean_opt(per_model.iter().map(|m| m.sen)),
        spe: mean_opt(per_model.iter().map(|m| m.spe)),
        acc: per_model.iter().map(|m| m.acc).sum::<f64>() / n,
        mcia: mean_opt(per_model.iter().map(|m| m.mcia)),
    }
}

/// Maps an estimation method to the network it needs: NN and PLR share a
/// plain VAE; the FCN head has a CI variant trained on sampled latents.
pub fn train_method_for(method: EstimationMethod, with_ci: bool) -> TrainMethod {
    match method {
        EstimationMethod::Nn | EstimationMethod::Plr => TrainMethod::Vae,
        EstimationMethod::RvaeLr => TrainMethod::RvaeLr,
        EstimationMethod::RvaeFcnr => {
            if with_ci {
                TrainMethod::RvaeFcnCi
            } else {
                TrainMethod::RvaeFcn
            }
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Trains one model per non-holdout validation fold and evaluates each on the
/// hold-out set; the report carries per-model metrics and their mean. When
/// `with_ci` is set (RVAE-FCNR only) intervals are sampled per case and MCIA
/// is included.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    cases: &[(LabelVolume, CaseRecord)],
    folds: &FoldSpec,
    method: EstimationMethod,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    with_ci: bool,
    ci_samples: usize,
) -> Result<(MethodReport, Vec<PredictionRow>)> {
    let by_fold = |f: usize| -> Vec<&(LabelVolume, CaseRecord)> {
        cases.iter().filter(|(_, r)| folds.fold_of(&r.case_id) == Some(f)).collect()
    };
    let holdout = by_fold(folds.holdout_fold);
    if holdout.is_empty() {
        return Err(SliceVolError::NoHoldout);
    }
    let as_train = |items: &[&(LabelVolume, CaseRecord)]| -> Vec<TrainCase> {
        items.iter().map(|(v, r)| TrainCase { volume: v.clone(), volume_ml: r.volume_ml }).collect()
    };
    let tmethod = train_method_for(method, with_ci);

    let mut models = Vec::new();
    for val_fold in (0..folds.n_folds).filter(|&f| f != folds.holdout_fold) {
        let train_items: Vec<&(LabelVolume, CaseRecord)> = (0..folds.n_folds)
            .filter(|&f| f != folds.holdout_fold && f != val_fold)
            .flat_map(|f| by_fold(f))
            .collect();
        debug_assert!(train_items.iter().all(|(_, r)| !holdout.iter().any(|(_, h)| h.case_id == r.case_id)));
        let mut tc = train_config.clone();
        tc.seed = splitmix64(train_config.seed ^ (val_fold as u64) << 8);
        let model = train(
            &as_train(&train_items),
            &as_train(&by_fold(val_fold)),
            model_config,
            &tc,
            tmethod,
            None,
            None,
        )?;
        models.push((val_fold, model));
    }
    let holdout_owned: Vec<(LabelVolume, CaseRecord)> =
        holdout.iter().map(|&(v, r)| (v.clone(), r.clone())).collect();
    evaluate_models(&mut models, &holdout_owned, method, with_ci, ci_samples, train_config.seed)
}

/// Evaluates already-trained models (one per cross-validation fold) on the
/// hold-out cases. `models` pairs each model with its fold index, used for
/// bookkeeping and deterministic per-case CI seeds.
pub fn evaluate_models(
    models: &mut [(usize, crate::vae::TrainedModel)],
    holdout: &[(LabelVolume, CaseRecord)],
    method: EstimationMethod,
    with_ci: bool,
    ci_samples: usize,
    seed: u64,
) -> Result<(MethodReport, Vec<PredictionRow>)> {
    if models.is_empty() {
        return Err(SliceVolError::InsufficientData("no trained models to evaluate".into()));
    }
    if holdout.is_empty() {
        return Err(SliceVolError::NoHoldout);
    }
    let truths: Vec<f64> = holdout.iter().map(|(_, r)| r.volume_ml).collect();
    let mut per_model = Vec::new();
    let mut predictions = Vec::new();
    for (model_index, model) in models.iter_mut() {
        let cfg = model.config.clone();
        let mut preds = Vec::with_capacity(holdout.len());
        let mut intervals = Vec::new();
        for (i, (vol, rec)) in holdout.iter().enumerate() {
            let pair = extract_slices(vol, cfg.image_size, cfg.input_views == 2)?;
            let est = estimate_volume(model, &pair, method)?;
            let mut row = PredictionRow {
                case_id: rec.case_id.clone(),
                method: method.to_string(),
                model_index: *model_index,
                volume_ml: est.volume_ml,
                clamped: est.clamped,
                true_volume_ml: rec.volume_ml,
                eta: None,
                theta: None,
                ci_lower: None,
                ci_upper: None,
            };
            if with_ci {
                let ci_seed = splitmix64(seed ^ (*model_index as u64) << 8 ^ 0x5eed ^ (i as u64) << 16);
                let (_, iv) = ci_estimate(model, &pair, ci_samples, ci_seed)?;
                row.eta = Some(iv.eta);
                row.theta = Some(iv.theta);
                row.ci_lower = Some(iv.lower);
                row.ci_upper = Some(iv.upper);
                intervals.push(iv);
            }
            preds.push(est.volume_ml);
            predictions.push(row);
        }
        let (m, s) = mrva(&truths, &preds)?;
        let rates = splenomegaly_metrics(&truths, &preds, crate::SPLENOMEGALY_THRESHOLD_ML)?;
        per_model.push(MethodMetrics {
            mrva: m,
            std: s,
            r: pearson_r(&truths, &preds)?,
            sen: rates.sen,
            spe: rates.spe,
            acc: rates.acc,
            mcia: with_ci.then(|| cia(&truths, &intervals)).transpose()?,
        });
    }
    Ok((MethodReport { method: method.to_string(), mean: mean_metrics(&per_model), per_model }, predictions))
}

/// Mean-centered projection of latent means onto the top-2 principal
/// components, plus the two explained variances (descending).
pub fn latent_pca(mus: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    if mus.len() < 3 {
        return Err(SliceVolError::InsufficientData(format!("PCA needs >= 3 vectors, got {}", mus.len())));
    }
    let d = mus[0].len();
    if d < 2 || mus.iter().any(|m| m.len() != d) {
        return Err(SliceVolError::DimMismatch { expected: d.max(2), got: mus.iter().map(Vec::len).min().unwrap() });
    }
    let n = mus.len();
    let mut mean = vec![0.0; d];
    for m in mus {
        for (acc, &v) in mean.iter_mut().zip(m) {
            *acc += v / n as f64;
        }
    }
    let xc = DMatrix::from_fn(n, d, |i, j| mus[i][j] - mean[j]);
    let cov = xc.transpose() * &xc / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let (i1, i2) = (order[0], order[1]);
    let (l1, l2) = (eig.eigenvalues[i1], eig.eigenvalues[i2]);
    if l2 <= l1.abs().max(1.0) * 1e-12 {
        return Err(SliceVolError::DegenerateLatent);
    }
    let pc1 = eig.eigenvectors.column(i1);
    let pc2 = eig.eigenvectors.column(i2);
    let coords = (0..n)
        .map(|i| {
            let row = xc.row(i);
            [row.iter().zip(pc1.iter()).map(|(a, b)| a * b).sum(), row.iter().zip(pc2.iter()).map(|(a, b)| a * b).sum()]
        })
        .collect();
    Ok((coords, [l1, l2]))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    serde_json::to_writer_pretty(std::fs::File::create(path)?, report)?;
    Ok(())
}

/// Table-shaped summary: one row per method with the cross-model means.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "MRVA", "STD", "R", "SEN", "SPE", "ACC", "MCIA"])?;
    for m in &report.methods {
        w.write_record([
            m.method.clone(),
            format!("{:.4}", m.mean.mrva),
            format!("{:.4}", m.mean.std),
            format!("{:.4}", m.mean.r),
            fmt_opt(m.mean.sen),
            fmt_opt(m.mean.spe),
            format!("{:.4}", m.mean.acc),
            fmt_opt(m.mean.mcia),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "case_id", "method", "model_index", "volume_mL", "clamped", "true_volume_mL", "eta", "theta",
        "ci_lower", "ci_upper",
    ])?;
    for r in rows {
        w.write_record([
            r.case_id.clone(),
            r.method.clone(),
            r.model_index.to_string(),
            format!("{:.4}", r.volume_ml),
            r.clamped.to_string(),
            format!("{:.4}", r.true_volume_ml),
            fmt_opt(r.eta),
            fmt_opt(r.theta),
            fmt_opt(r.ci_lower),
            fmt_opt(r.ci_upper),
        ])?;
    }
    w.flush()?;
    Ok(())
}
