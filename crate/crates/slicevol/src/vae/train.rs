//! Two-phase training loop: the plain VAE objective (reconstruction + KL)
//! alone for `phase1_epochs`, then with the volume-regression term until
//! `max_epochs`, with per-epoch 3D rotation augmentation, best-validation
//! checkpointing, and deterministic seeding throughout.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses;
use super::{HeadKind, ModelConfig, MuCacheEntry, NamedTensors, TensorMap, TrainConfig, TrainedModel};
use crate::error::{Result, SliceVolError};
use crate::nn::Adam;
use crate::phantom::LabelVolume;
use crate::preprocess::{augment_rotate, extract_slices, SlicePair};

/// What the network is trained for. The CI variant feeds the sampled z (not
/// the mean) to the regression head, per the confidence-interval procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Vae,
    RvaeLr,
    RvaeFcn,
    RvaeFcnCi,
}

impl TrainMethod {
    fn head_kind(self) -> HeadKind {
        match self {
            Self::Vae => HeadKind::None,
            Self::RvaeLr => HeadKind::Linear,
            Self::RvaeFcn | Self::RvaeFcnCi => HeadKind::Fcn,
        }
    }

    fn head_on_sample(self) -> bool {
        matches!(self, Self::RvaeFcnCi)
    }
}

/// One training case: the canonicalized 3D label volume (slices are re-cut
/// from it each epoch after augmentation) and its ground-truth volume.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub volume: LabelVolume,
    pub volume_ml: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub bce: f64,
    pub kld: f64,
    pub mse: f64,
    /// Higher is better: validation MRVA for regression methods, negated
    /// validation loss for the plain VAE.
    pub val_metric: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stateless per-(epoch, stream) RNG so a resumed run replays the exact same
/// shuffles, noise and augmentations without serializing RNG state.
fn stream_rng(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch) ^ splitmix64(stream.wrapping_add(0xa5a5))))
}

fn case_slices(case: &TrainCase, cfg: &ModelConfig, max_deg: f64, seed: u64) -> Result<SlicePair> {
    let dual = cfg.input_views == 2;
    if max_deg > 0.0 {
        let rotated = augment_rotate(&case.volume, max_deg, seed)?;
        extract_slices(&rotated, cfg.image_size, dual)
    } else {
        extract_slices(&case.volume, cfg.image_size, dual)
    }
}

fn to_f64d(x: &Array4<f32>) -> ArrayD<f64> {
    x.mapv(|v| v as f64).into_dyn()
}

fn to_f64_2(x: &Array2<f32>) -> Array2<f64> {
    x.mapv(|v| v as f64)
}

/// Epoch-mean loss components for one pass over the shuffled training set.
struct EpochStats {
    bce: f64,
    kld: f64,
    mse: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_epoch(
    model: &mut TrainedModel,
    opt: &mut Adam,
    cases: &[TrainCase],
    slices: &[SlicePair],
    w1: f64,
    w2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let scale = model.train_config.volume_scale;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(rng);
    let batch = model.train_config.batch_size;
    let (mut bce_sum, mut kld_sum, mut mse_sum, mut n_batches) = (0.0, 0.0, 0.0, 0usize);
    for chunk in order.chunks(batch) {
        let pairs: Vec<&SlicePair> = chunk.iter().map(|&i| &slices[i]).collect();
        let targets: Vec<f64> = chunk.iter().map(|&i| cases[i].volume_ml / scale).collect();
        let x = model.batch_input(&pairs)?;
        let n = pairs.len();
        let latent = model.config.latent_dim;

        for p in model.params_mut() {
            p.zero_grad();
        }
        let (mu, logvar) = model.encoder.forward(&x, true);
        let sigma_f32 = logvar.mapv(|v| (0.5 * v).exp());
        let eps = Array2::<f32>::from_shape_fn((n, latent), |_| rng.sample::<f32, _>(StandardNormal));
        let z = &mu + &(&eps * &sigma_f32);
        let recon = model.decoder.forward(&z, true);

        let a = to_f64d(&x);
        let b = to_f64d(&recon);
        let mu64 = to_f64_2(&mu);
        let sigma64 = sigma_f32.mapv(|v| (v as f64).max(1e-30));
        let bce_val = losses::bce(&a, &b)?;
        let kld_val = losses::kld(&mu64, &sigma64)?;
        bce_sum += bce_val;
        kld_sum += kld_val;

        // reconstruction branch
        let db = losses::bce_grad(&a, &b)?;
        let db32 = db.mapv(|v| v as f32).into_dimensionality::<ndarray::Ix4>().expect("recon shape");
        let dz_recon = model.decoder.backward(&db32);

        // latent regularization
        let (dmu_k, dsig_k) = losses::kld_grads(&mu64, &sigma64)?;
        let mut dmu = dmu_k.mapv(|v| (w1 * v) as f32);
        // d sigma / d logvar = sigma / 2
        let mut dlogvar = Array2::from_shape_fn((n, latent), |(i, j)| {
            (w1 * dsig_k[(i, j)]) as f32 * 0.5 * sigma_f32[(i, j)]
        });

        // z = mu + eps .* sigma feeds the decoder (and, for the CI variant,
        // the regression head); fold every dz path through that map.
        let mut dz_total = dz_recon;

        // regression branch (phase 2 only)
        if w2 > 0.0 {
            let head = model.regression.as_mut().ok_or_else(|| {
                SliceVolError::Training("regression weight set but model has no head".into())
            })?;
            let head_in = if model.head_on_sample { &z } else { &mu };
            let pred = head.forward(head_in, true);
            let pred64: Vec<f64> = pred.column(0).iter().map(|&v| v as f64).collect();
            mse_sum += losses::mse(&targets, &pred64)?;
            let dpred = losses::mse_grad(&targets, &pred64)?;
            let dpred32 =
                Array2::from_shape_vec((n, 1), dpred.iter().map(|&v| (w2 * v) as f32).collect()).unwrap();
            let dhead_in = head.backward(&dpred32);
            if model.head_on_sample {
                dz_total += &dhead_in;
            } else {
                dmu += &dhead_in;
            }
        }

        dmu += &dz_total;
        dlogvar += &(&dz_total * &eps * &sigma_f32 * 0.5);
        model.encoder.backward(&dmu, &dlogvar);
        opt.step(model.params_mut());
        n_batches += 1;
    }
    let nb = n_batches.max(1) as f64;
    Ok(EpochStats { bce: bce_sum / nb, kld: kld_sum / nb, mse: mse_sum / nb })
}

/// Higher-is-better validation score: MRVA over the given cases for
/// regression methods, negated VAE loss for the plain VAE.
pub fn validation_metric(model: &mut TrainedModel, cases: &[TrainCase], method: TrainMethod) -> Result<f64> {
    if cases.is_empty() {
        return Err(SliceVolError::InsufficientData("no validation cases".into()));
    }
    let cfg = model.config.clone();
    let slices: Result<Vec<SlicePair>> = cases.iter().map(|c| case_slices(c, &cfg, 0.0, 0)).collect();
    let slices = slices?;
    let refs: Vec<&SlicePair> = slices.iter().collect();
    match method {
        TrainMethod::Vae => {
            let x = model.batch_input(&refs)?;
            let (mu, logvar) = model.encoder.forward(&x, false);
            let recon = model.decoder.forward(&mu, false);
            let sigma = logvar.mapv(|v| ((0.5 * v).exp() as f64).max(1e-30));
            let loss = losses::vae_loss(&to_f64d(&x), &to_f64d(&recon), &to_f64_2(&mu), &sigma, model.train_config.w1)?;
            Ok(-loss)
        }
        _ => {
            let head = model
                .regression
                .as_ref()
                .ok_or_else(|| SliceVolError::Training("validation of a regression method needs a head".into()))?
                .export();
            let (mu, _) = model.encode_batch(&refs)?;
            let scale = model.train_config.volume_scale;
            let mut acc = 0.0;
            for (i, c) in cases.iter().enumerate() {
                let zrow: Vec<f64> = mu.row(i).iter().map(|&v| v as f64).collect();
                let pred = (crate::estimators::head_forward(&head, &zrow)? * scale).max(0.0);
                acc += (1.0 - (pred - c.volume_ml).abs() / c.volume_ml) * 100.0;
            }
            Ok(acc / cases.len() as f64)
        }
    }
}

/// Optimizer + progress state for resumable training.
pub struct Checkpoint {
    pub next_epoch: usize,
    pub adam_t: i32,
    pub best_metric: f64,
    tensors: TensorMap,
}

const CKPT_BLOB: &str = "checkpoint.bin";
const CKPT_MANIFEST: &str = "checkpoint.weights.json";
const CKPT_META: &str = "checkpoint.json";

impl Checkpoint {
    fn capture(model: &mut TrainedModel, opt: &Adam, next_epoch: usize, best_metric: f64, best: &NamedTensors) -> Self {
        let mut tensors: NamedTensors = model.collect_tensors();
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let (m, v) = p.moments();
            tensors.push((format!("opt.m.{i}"), m.shape().to_vec(), m.iter().copied().collect()));
            tensors.push((format!("opt.v.{i}"), v.shape().to_vec(), v.iter().copied().collect()));
        }
        for (name, shape, values) in best {
            tensors.push((format!("best.{name}"), shape.clone(), values.clone()));
        }
        Self {
            next_epoch,
            adam_t: opt.timestep(),
            best_metric,
            tensors: tensors.into_iter().map(|(n, s, v)| (n, (s, v))).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let tensors: NamedTensors =
            self.tensors.iter().map(|(n, (s, v))| (n.clone(), s.clone(), v.clone())).collect();
        crate::io::write_weights(&dir.join(CKPT_BLOB), &dir.join(CKPT_MANIFEST), &tensors)?;
        let meta = serde_json::json!({
            "next_epoch": self.next_epoch,
            "adam_t": self.adam_t,
            "best_metric": self.best_metric,
        });
        serde_json::to_writer_pretty(std::fs::File::create(dir.join(CKPT_META))?, &meta)?;
        Ok(())
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(CKPT_META).exists()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_reader(std::fs::File::open(dir.join(CKPT_META))?)?;
        let tensors = crate::io::read_weights(&dir.join(CKPT_BLOB), &dir.join(CKPT_MANIFEST))?;
        Ok(Self {
            next_epoch: meta["next_epoch"].as_u64().unwrap_or(0) as usize,
            adam_t: meta["adam_t"].as_i64().unwrap_or(0) as i32,
            best_metric: meta["best_metric"].as_f64().unwrap_or(f64::NEG_INFINITY),
            tensors: tensors.into_iter().map(|(n, s, v)| (n, (s, v))).collect(),
        })
    }

    fn restore(&self, model: &mut TrainedModel, opt: &mut Adam) -> NamedTensors {
        model.load_tensors(&self.tensors);
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let m = &self.tensors[&format!("opt.m.{i}")];
            let v = &self.tensors[&format!("opt.v.{i}")];
            let to_arr = |(shape, values): &(Vec<usize>, Vec<f32>)| {
                ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), values.clone()).expect("checkpoint shape")
            };
            p.set_moments(to_arr(m), to_arr(v));
        }
        opt.set_timestep(self.adam_t);
        self.tensors
            .iter()
            .filter_map(|(n, (s, v))| n.strip_prefix("best.").map(|base| (base.to_string(), s.clone(), v.clone())))
            .collect()
    }
}

/// Trains a model end to end. Phase 1 optimizes the plain VAE loss only;
/// regression methods add the volume term after `phase1_epochs`. The
/// returned model carries
/// the best-validation weights, the training-set latent cache for the NN
/// estimator, and a fitted post-hoc latent regression.
pub fn train(
    train_cases: &[TrainCase],
    val_cases: &[TrainCase],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    method: TrainMethod,
    log_path: Option<&Path>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedModel> {
    if train_cases.is_empty() {
        return Err(SliceVolError::InsufficientData("empty training set".into()));
    }
    if method != TrainMethod::Vae && train_cases.iter().chain(val_cases).any(|c| c.volume_ml <= 0.0) {
        return Err(SliceVolError::InsufficientData("regression training needs positive volumes".into()));
    }
    let mut cfg = model_config.clone();
    cfg.head = method.head_kind();
    let mut model = TrainedModel::init(cfg, train_config.clone(), method.head_on_sample())?;
    let mut opt = Adam::new(train_config.lr as f32);

    let val_for_metric = if val_cases.is_empty() { train_cases } else { val_cases };
    let mut best_metric = f64::NEG_INFINITY;
    let mut best: NamedTensors = model.collect_tensors();
    let mut start_epoch = 0usize;
    if let Some(dir) = checkpoint_dir {
        if Checkpoint::exists(dir) {
            let ckpt = Checkpoint::load(dir)?;
            best = ckpt.restore(&mut model, &mut opt);
            best_metric = ckpt.best_metric;
            start_epoch = ckpt.next_epoch;
        }
    }

    let mut log_rows: Vec<TrainLogRow> = Vec::new();
    for epoch in start_epoch..train_config.max_epochs {
        let w2 = if method == TrainMethod::Vae || epoch < train_config.phase1_epochs {
            0.0
        } else {
            train_config.w2
        };
        // re-cut slices from freshly augmented 3D volumes each epoch
        let slices: Result<Vec<SlicePair>> = train_cases
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let aug_seed = splitmix64(train_config.seed ^ ((epoch as u64) << 24) ^ i as u64);
                case_slices(c, &model.config, train_config.augment_max_deg, aug_seed)
            })
            .collect();
        let slices = slices?;
        let mut rng = stream_rng(train_config.seed, epoch as u64, 1);
        let stats = train_epoch(&mut model, &mut opt, train_cases, &slices, train_config.w1, w2, &mut rng)?;
        let metric = validation_metric(&mut model, val_for_metric, method)?;
        if metric > best_metric {
            best_metric = metric;
            best = model.collect_tensors();
        }
        log_rows.push(TrainLogRow { epoch, bce: stats.bce, kld: stats.kld, mse: stats.mse, val_metric: metric });
        if let Some(dir) = checkpoint_dir {
            if (epoch + 1) % 25 == 0 || epoch + 1 == train_config.max_epochs {
                Checkpoint::capture(&mut model, &opt, epoch + 1, best_metric, &best).save(dir)?;
            }
        }
    }

    if let Some(path) = log_path {
        write_log(path, &log_rows)?;
    }

    if train_config.max_epochs > 0 {
        let map: TensorMap = best.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
        model.load_tensors(&map);
    }
    finalize(&mut model, train_cases)?;
    Ok(model)
}

/// Caches training-set latent means (for the NN estimator) and fits the
/// post-hoc ridge regression from latent means to scaled volumes.
fn finalize(model: &mut TrainedModel, train_cases: &[TrainCase]) -> Result<()> {
    let cfg = model.config.clone();
    let slices: Result<Vec<SlicePair>> = train_cases.iter().map(|c| case_slices(c, &cfg, 0.0, 0)).collect();
    let slices = slices?;
    let refs: Vec<&SlicePair> = slices.iter().collect();
    let (mu, _) = model.encode_batch(&refs)?;
    let cache: Vec<MuCacheEntry> = train_cases
        .iter()
        .enumerate()
        .map(|(i, c)| MuCacheEntry {
            case_id: c.volume.case_id.clone(),
            mu: mu.row(i).iter().map(|&v| v as f64).collect(),
            volume_ml: c.volume_ml,
        })
        .collect();
    if train_cases.len() >= 2 {
        let mus: Vec<Vec<f64>> = cache.iter().map(|e| e.mu.clone()).collect();
        let targets: Vec<f64> =
            cache.iter().map(|e| e.volume_ml / model.train_config.volume_scale).collect();
        model.plr_head =
            Some(crate::estimators::plr_fit(&mus, &targets, model.train_config.plr_lambda)?);
    }
    model.training_mu_cache = Some(cache);
    Ok(())
}

fn write_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "bce", "kld", "mse", "val_metric"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.bce),
            format!("{:.6}", r.kld),
            format!("{:.6}", r.mse),
            format!("{:.6}", r.val_metric),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| SliceVolError::Data("bad number in training log".into()))
        };
        out.push(TrainLogRow {
            epoch: num(0)? as usize,
            bce: num(1)?,
            kld: num(2)?,
            mse: num(3)?,
            val_metric: num(4)?,
        });
    }
    Ok(out)
}

/// Exhaustive search over the loss-weight grid (w1 alone for the plain VAE,
/// the (w1, w2) product for regression methods). Returns the winning config
/// and one (w1, w2, val_metric) row per candidate.
pub fn grid_search_weights(
    train_cases: &[TrainCase],
    val_cases: &[TrainCase],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    method: TrainMethod,
) -> Result<(TrainConfig, Vec<(f64, f64, f64)>)> {
    let grid = train_config.grid_search.clone().unwrap_or_default();
    if grid.w_values.is_empty() {
        return Err(SliceVolError::InvalidConfig("empty weight grid".into()));
    }
    let candidates: Vec<(f64, f64)> = if method == TrainMethod::Vae {
        grid.w_values.iter().map(|&w1| (w1, train_config.w2)).collect()
    } else {
        grid.w_values
            .iter()
            .flat_map(|&w1| grid.w_values.iter().map(move |&w2| (w1, w2)))
            .collect()
    };
    let mut rows = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, TrainConfig)> = None;
    for (w1, w2) in candidates {
        let mut cfg = train_config.clone();
        cfg.w1 = w1;
        cfg.w2 = w2;
        cfg.grid_search = None;
        let mut model = train(train_cases, val_cases, model_config, &cfg, method, None, None)?;
        let val = if val_cases.is_empty() { train_cases } else { val_cases };
        let metric = validation_metric(&mut model, val, method)?;
        rows.push((w1, w2, metric));
        if best.as_ref().map_or(true, |(m, _)| metric > *m) {
            best = Some((metric, cfg));
        }
    }
    Ok((best.expect("nonempty grid").1, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomParams};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 8,
            input_views: 1,
            image_size: 16,
            encoder_blocks: 2,
            decoder_blocks: 2,
            channel_widths: vec![2, 4],
            head: HeadKind::None,
            fcn_hidden: 4,
        }
    }

    fn tiny_cases(n: usize) -> Vec<TrainCase> {
        (0..n)
            .map(|i| {
                let params = PhantomParams {
                    base_semi_axes_mm: [8.0 + i as f64, 6.0, 10.0],
                    bend_strength: 0.1 * (i % 4) as f64,
                    taper_strength: 0.1 * (i % 3) as f64,
                    rotation_deg: [10.0 * i as f64, 5.0, 0.0],
                    grid_dims: [32, 32, 32],
                    voxel_size_mm: [2.0, 2.0, 2.0],
                    target_volume_ml: None,
                };
                let volume = generate_phantom(&params, 100 + i as u64).unwrap();
                let volume_ml = crate::phantom::voxel_volume(&volume);
                TrainCase { volume, volume_ml }
            })
            .collect()
    }

    fn tiny_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            max_epochs: epochs,
            phase1_epochs: 2,
            batch_size: 4,
            augment_max_deg: 0.0,
            lr: 3e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let cases = tiny_cases(4);
        let model = train(&cases, &[], &tiny_model_config(), &tiny_train_config(0), TrainMethod::Vae, None, None)
            .unwrap();
        assert!(model.training_mu_cache.as_ref().unwrap().len() == 4);
        assert!(model.plr_head.is_some());
        assert!(model.regression.is_none());
    }

    #[test]
    fn loss_decreases_over_early_epochs() {
        let cases = tiny_cases(6);
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.csv");
        train(&cases, &[], &tiny_model_config(), &tiny_train_config(10), TrainMethod::Vae, Some(&log), None)
            .unwrap();
        let rows = read_log(&log).unwrap();
        assert_eq!(rows.len(), 10);
        let total = |r: &TrainLogRow| r.bce + 0.2 * r.kld;
        assert!(total(&rows[9]) < total(&rows[0]), "{} !< {}", total(&rows[9]), total(&rows[0]));
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let cases = tiny_cases(4);
        let run = || {
            let m = train(&cases, &[], &tiny_model_config(), &tiny_train_config(3), TrainMethod::RvaeLr, None, None)
                .unwrap();
            m.collect_tensors()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for ((na, _, va), (nb, _, vb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(va, vb, "tensor {na} differs between identical runs");
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let cases = tiny_cases(4);
        let cfg = tiny_model_config();
        // uninterrupted: 50 epochs so a checkpoint lands at epoch 25
        let mut tc = tiny_train_config(50);
        tc.phase1_epochs = 10;
        let full = train(&cases, &[], &cfg, &tc, TrainMethod::RvaeLr, None, None).unwrap();
        // interrupted: run to the 25-epoch checkpoint, then resume from disk
        let dir = tempfile::tempdir().unwrap();
        let mut tc_half = tc.clone();
        tc_half.max_epochs = 25;
        train(&cases, &[], &cfg, &tc_half, TrainMethod::RvaeLr, None, Some(dir.path())).unwrap();
        let resumed = train(&cases, &[], &cfg, &tc, TrainMethod::RvaeLr, None, Some(dir.path())).unwrap();
        for ((na, _, va), (_, _, vb)) in full.collect_tensors().iter().zip(&resumed.collect_tensors()) {
            assert_eq!(va, vb, "tensor {na} differs after resume");
        }
    }

    #[test]
    fn encode_decode_round_trip_shapes() {
        let cases = tiny_cases(2);
        for views in [1usize, 2] {
            let mut cfg = tiny_model_config();
            cfg.input_views = views;
            let mut model =
                train(&cases, &[], &cfg, &tiny_train_config(0), TrainMethod::Vae, None, None).unwrap();
            let pair = extract_slices(&cases[0].volume, cfg.image_size, views == 2).unwrap();
            let latent = crate::vae::encode(&mut model, &pair).unwrap();
            assert_eq!(latent.mu.len(), 8);
            assert_eq!(latent.sigma.len(), 8);
            assert!(latent.sigma.iter().all(|&s| s > 0.0));
            let z = losses::reparameterize(&latent.mu, &latent.sigma, &vec![0.0; 8]).unwrap();
            assert_eq!(z, latent.mu);
            let recon = crate::vae::decode(&mut model, &z).unwrap();
            assert_eq!(recon.dim(), (views, 16, 16));
            assert!(recon.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn grid_search_returns_row_per_candidate_and_best_config() {
        let cases = tiny_cases(4);
        let mut tc = tiny_train_config(1);
        tc.grid_search = Some(crate::vae::GridSearchConfig { w_values: vec![0.1, 0.3] });
        let (best, rows) =
            grid_search_weights(&cases, &[], &tiny_model_config(), &tc, TrainMethod::Vae).unwrap();
        assert_eq!(rows.len(), 2);
        let best_row = rows.iter().fold((0.0, 0.0, f64::NEG_INFINITY), |acc, &r| if r.2 > acc.2 { r } else { acc });
        assert_eq!(best.w1, best_row.0);
    }
}
