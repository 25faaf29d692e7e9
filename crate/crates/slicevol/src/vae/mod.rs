//! Residual-block variational autoencoder with a 128-dimensional Gaussian
//! latent, optional end-to-end regression heads, and the two-phase training
//! loop.

pub mod losses;
mod train;

pub use train::{
    grid_search_weights, read_log, train, validation_metric, Checkpoint, TrainCase, TrainLogRow, TrainMethod,
};

use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SliceVolError};
use crate::nn::{BatchNorm2d, Conv2d, Linear, Param, ResidualBlock, Sigmoid, Upsample2x};
use crate::preprocess::SlicePair;

pub use crate::nn::{NamedTensors, TensorMap};

/// Regression head flavour attached to the latent mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    None,
    Linear,
    Fcn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub input_views: usize,
    pub image_size: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub channel_widths: Vec<usize>,
    pub head: HeadKind,
    pub fcn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            input_views: 1,
            image_size: 224,
            encoder_blocks: 8,
            decoder_blocks: 8,
            channel_widths: vec![32, 64, 128, 256],
            head: HeadKind::None,
            fcn_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.channel_widths.len()
    }

    /// Spatial size at the bottleneck.
    pub fn bottleneck(&self) -> usize {
        self.image_size >> self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(SliceVolError::InvalidConfig("latent_dim and block counts must be >= 1".into()));
        }
        if !(1..=2).contains(&self.input_views) {
            return Err(SliceVolError::InvalidConfig("input_views must be 1 or 2".into()));
        }
        let stages = self.stages();
        if stages == 0 {
            return Err(SliceVolError::InvalidConfig("channel_widths must be nonempty".into()));
        }
        if self.encoder_blocks % stages != 0 || self.decoder_blocks % stages != 0 {
            return Err(SliceVolError::InvalidConfig(
                "block counts must be a multiple of the number of channel widths".into(),
            ));
        }
        if self.image_size % (1 << stages) != 0 || self.bottleneck() == 0 {
            return Err(SliceVolError::InvalidConfig(format!(
                "image_size must be a positive multiple of the downsampling factor {}",
                1 << stages
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchConfig {
    /// Candidate values tried for w1 (and w2 for regression methods).
    pub w_values: Vec<f64>,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self { w_values: vec![0.1, 0.2, 0.3, 0.4, 0.5] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// KL divergence weight.
    pub w1: f64,
    /// Regression (MSE) weight, active after `phase1_epochs`.
    pub w2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub max_epochs: usize,
    /// Ground-truth volumes are divided by this factor during training.
    pub volume_scale: f64,
    pub seed: u64,
    /// Per-epoch 3D rotation augmentation range; 0 disables.
    pub augment_max_deg: f64,
    /// Ridge penalty for the post-hoc latent regression head.
    #[serde(default = "default_plr_lambda")]
    pub plr_lambda: f64,
    pub grid_search: Option<GridSearchConfig>,
}

fn default_plr_lambda() -> f64 {
    1e-3
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w1: 0.2,
            w2: 0.2,
            lr: 1e-3,
            batch_size: 8,
            phase1_epochs: 150,
            max_epochs: 650,
            volume_scale: crate::VOLUME_SCALE,
            seed: 0,
            augment_max_deg: 15.0,
            plr_lambda: default_plr_lambda(),
            grid_search: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(SliceVolError::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if self.volume_scale <= 0.0 {
            return Err(SliceVolError::InvalidConfig("volume_scale must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(SliceVolError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.plr_lambda <= 0.0 {
            return Err(SliceVolError::InvalidConfig("plr_lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Per-input Gaussian latent parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub struct Encoder {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stem_mask: Option<Array4<f32>>,
    blocks: Vec<ResidualBlock>,
    fc_mu: Linear,
    fc_logvar: Linear,
    flat_len: usize,
    bottleneck_shape: (usize, usize), // (C, S)
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let widths = &cfg.channel_widths;
        let stages = cfg.stages();
        let bps = cfg.encoder_blocks / stages;
        let stem = Conv2d::new(cfg.input_views, widths[0], 3, 1, 1, rng);
        let stem_bn = BatchNorm2d::new(widths[0]);
        let mut blocks = Vec::with_capacity(cfg.encoder_blocks);
        let mut cin = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ResidualBlock::new(cin, w, 2, rng));
            for _ in 1..bps {
                blocks.push(ResidualBlock::new(w, w, 1, rng));
            }
            cin = w;
            let _ = i;
        }
        let s = cfg.bottleneck();
        let flat_len = cin * s * s;
        Self {
            stem,
            stem_bn,
            stem_mask: None,
            blocks,
            fc_mu: Linear::new(flat_len, cfg.latent_dim, rng),
            fc_logvar: Linear::new(flat_len, cfg.latent_dim, rng),
            flat_len,
            bottleneck_shape: (cin, s),
        }
    }

    /// Returns (mu, logvar), each `[N, latent_dim]`.
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> (Array2<f32>, Array2<f32>) {
        let mut h = self.stem_bn.forward(&self.stem.forward(x, train), train);
        let mask = h.mapv(|v| (v > 0.0) as u8 as f32);
        h *= &mask;
        if train {
            self.stem_mask = Some(mask);
        }
        for b in &mut self.blocks {
            h = b.forward(&h, train);
        }
        let n = h.dim().0;
        let flat = h.into_shape_with_order((n, self.flat_len)).expect("bottleneck shape");
        (self.fc_mu.forward(&flat, train), self.fc_logvar.forward(&flat, train))
    }

    pub fn backward(&mut self, dmu: &Array2<f32>, dlogvar: &Array2<f32>) {
        let dflat = self.fc_mu.backward(dmu) + self.fc_logvar.backward(dlogvar);
        let n = dflat.dim().0;
        let (c, s) = self.bottleneck_shape;
        let mut g = dflat.into_shape_with_order((n, c, s, s)).expect("bottleneck shape");
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        g *= &self.stem_mask.take().expect("forward(train) before backward");
        let _ = self.stem.backward(&self.stem_bn.backward(&g));
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        p.extend(self.stem_bn.params_mut());
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.fc_mu.params_mut());
        p.extend(self.fc_logvar.params_mut());
        p
    }

    pub fn collect(&self, out: &mut NamedTensors) {
        self.stem.collect("encoder.stem", out);
        self.stem_bn.collect("encoder.stem_bn", out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("encoder.block{i}"), out);
        }
        self.fc_mu.collect("encoder.fc_mu", out);
        self.fc_logvar.collect("encoder.fc_logvar", out);
    }

    pub fn load(&mut self, map: &TensorMap) {
        self.stem.load("encoder.stem", map);
        self.stem_bn.load("encoder.stem_bn", map);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.load(&format!("encoder.block{i}"), map);
        }
        self.fc_mu.load("encoder.fc_mu", map);
        self.fc_logvar.load("encoder.fc_logvar", map);
    }
}

pub struct Decoder {
    fc: Linear,
    stages: Vec<(Upsample2x, Vec<ResidualBlock>)>,
    final_conv: Conv2d,
    sigmoid: Sigmoid,
    start_shape: (usize, usize), // (C, S)
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let widths = &cfg.channel_widths;
        let n_stages = cfg.stages();
        let bps = cfg.decoder_blocks / n_stages;
        let s = cfg.bottleneck();
        let c_start = *widths.last().unwrap();
        let fc = Linear::new(cfg.latent_dim, c_start * s * s, rng);
        let mut stages = Vec::with_capacity(n_stages);
        let mut cur = c_start;
        for i in (0..n_stages).rev() {
            let target = if i == 0 { widths[0] } else { widths[i - 1] };
            let mut blocks = Vec::with_capacity(bps);
            blocks.push(ResidualBlock::new(cur, target, 1, rng));
            for _ in 1..bps {
                blocks.push(ResidualBlock::new(target, target, 1, rng));
            }
            stages.push((Upsample2x, blocks));
            cur = target;
        }
        Self {
            fc,
            stages,
            final_conv: Conv2d::new(widths[0], cfg.input_views, 3, 1, 1, rng),
            sigmoid: Sigmoid::new(),
            start_shape: (c_start, s),
        }
    }

    /// Maps `[N, latent]` to per-view probability maps `[N, views, S, S]`.
    pub fn forward(&mut self, z: &Array2<f32>, train: bool) -> Array4<f32> {
        let n = z.dim().0;
        let (c, s) = self.start_shape;
        let flat = self.fc.forward(z, train);
        let mut h = flat.into_shape_with_order((n, c, s, s)).expect("start shape");
        for (up, blocks) in &mut self.stages {
            h = up.forward(&h);
            for b in blocks {
                h = b.forward(&h, train);
            }
        }
        self.sigmoid.forward(&self.final_conv.forward(&h, train), train)
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array2<f32> {
        let mut g = self.final_conv.backward(&self.sigmoid.backward(gy));
        for (up, blocks) in self.stages.iter_mut().rev() {
            for b in blocks.iter_mut().rev() {
                g = b.backward(&g);
            }
            g = up.backward(&g);
        }
        let n = g.dim().0;
        let (c, s) = self.start_shape;
        let flat = g.into_shape_with_order((n, c * s * s)).expect("start shape");
        self.fc.backward(&flat)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc.params_mut();
        for (_, blocks) in &mut self.stages {
            for b in blocks {
                p.extend(b.params_mut());
            }
        }
        p.extend(self.final_conv.params_mut());
        p
    }

    pub fn collect(&self, out: &mut NamedTensors) {
        self.fc.collect("decoder.fc", out);
        for (si, (_, blocks)) in self.stages.iter().enumerate() {
            for (bi, b) in blocks.iter().enumerate() {
                b.collect(&format!("decoder.stage{si}.block{bi}"), out);
            }
        }
        self.final_conv.collect("decoder.final", out);
    }

    pub fn load(&mut self, map: &TensorMap) {
        self.fc.load("decoder.fc", map);
        for (si, (_, blocks)) in self.stages.iter_mut().enumerate() {
            for (bi, b) in blocks.iter_mut().enumerate() {
                b.load(&format!("decoder.stage{si}.block{bi}"), map);
            }
        }
        self.final_conv.load("decoder.final", map);
    }
}

/// Training-side regression head: either a single affine layer or an FCN with
/// one rectified hidden layer.
pub struct RegressionNet {
    hidden: Option<Linear>,
    out: Linear,
    relu_mask: Option<Array2<f32>>,
}

impl RegressionNet {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Option<Self> {
        match cfg.head {
            HeadKind::None => None,
            HeadKind::Linear => Some(Self {
                hidden: None,
                out: Linear::new(cfg.latent_dim, 1, rng),
                relu_mask: None,
            }),
            HeadKind::Fcn => Some(Self {
                hidden: Some(Linear::new(cfg.latent_dim, cfg.fcn_hidden, rng)),
                out: Linear::new(cfg.fcn_hidden, 1, rng),
                relu_mask: None,
            }),
        }
    }

    pub fn forward(&mut self, latent: &Array2<f32>, train: bool) -> Array2<f32> {
        match &mut self.hidden {
            None => self.out.forward(latent, train),
            Some(hidden) => {
                let mut h = hidden.forward(latent, train);
                let mask = h.mapv(|v| (v > 0.0) as u8 as f32);
                h *= &mask;
                if train {
                    self.relu_mask = Some(mask);
                }
                self.out.forward(&h, train)
            }
        }
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array2<f32> {
        let mut g = self.out.backward(gy);
        if let Some(hidden) = &mut self.hidden {
            g *= &self.relu_mask.take().expect("forward(train) before backward");
            g = hidden.backward(&g);
        }
        g
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        if let Some(h) = &mut self.hidden {
            p.extend(h.params_mut());
        }
        p.extend(self.out.params_mut());
        p
    }

    pub fn collect(&self, out: &mut NamedTensors) {
        if let Some(h) = &self.hidden {
            h.collect("head.hidden", out);
        }
        self.out.collect("head.out", out);
    }

    pub fn load(&mut self, map: &TensorMap) {
        if let Some(h) = &mut self.hidden {
            h.load("head.hidden", map);
        }
        self.out.load("head.out", map);
    }

    /// Exports the head as plain coefficient vectors for the estimator layer.
    pub fn export(&self) -> crate::estimators::Head {
        let w_of = |lin: &Linear| -> Vec<Vec<f64>> {
            let w = lin.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            w.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
        };
        let b_of = |lin: &Linear| -> Vec<f64> { lin.b.value.iter().map(|&v| v as f64).collect() };
        match &self.hidden {
            None => crate::estimators::Head::Linear(crate::estimators::LinearHead {
                w: w_of(&self.out).remove(0),
                b: b_of(&self.out)[0],
            }),
            Some(h) => crate::estimators::Head::Fcn(crate::estimators::FcnHead {
                hidden_w: w_of(h),
                hidden_b: b_of(h),
                out_w: w_of(&self.out).remove(0),
                out_b: b_of(&self.out)[0],
            }),
        }
    }
}

/// One latent cache entry from the training set, used by the NN estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MuCacheEntry {
    pub case_id: String,
    pub mu: Vec<f64>,
    pub volume_ml: f64,
}

/// A trained network plus everything inference needs.
pub struct TrainedModel {
    pub config: ModelConfig,
    pub train_config: TrainConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub regression: Option<RegressionNet>,
    /// CI variant: the regression head was trained on sampled z, not mu.
    pub head_on_sample: bool,
    pub plr_head: Option<crate::estimators::LinearHead>,
    pub training_mu_cache: Option<Vec<MuCacheEntry>>,
}

impl TrainedModel {
    /// Fresh, unoptimized model with seeded initialization.
    pub fn init(config: ModelConfig, train_config: TrainConfig, head_on_sample: bool) -> Result<Self> {
        config.validate()?;
        train_config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        Ok(Self {
            encoder: Encoder::new(&config, &mut rng),
            decoder: Decoder::new(&config, &mut rng),
            regression: RegressionNet::new(&config, &mut rng),
            head_on_sample,
            plr_head: None,
            training_mu_cache: None,
            config,
            train_config,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        if let Some(r) = &mut self.regression {
            p.extend(r.params_mut());
        }
        p
    }

    pub fn collect_tensors(&self) -> NamedTensors {
        let mut out = Vec::new();
        self.encoder.collect(&mut out);
        self.decoder.collect(&mut out);
        if let Some(r) = &self.regression {
            r.collect(&mut out);
        }
        out
    }

    pub fn load_tensors(&mut self, map: &TensorMap) {
        self.encoder.load(map);
        self.decoder.load(map);
        if let Some(r) = &mut self.regression {
            r.load(map);
        }
    }

    /// Builds the `[N, views, S, S]` input batch, checking view/size
    /// consistency against the model config.
    pub fn batch_input(&self, slices: &[&SlicePair]) -> Result<Array4<f32>> {
        let s = self.config.image_size;
        let views = self.config.input_views;
        let mut x = Array4::<f32>::zeros((slices.len(), views, s, s));
        for (i, pair) in slices.iter().enumerate() {
            if pair.views() != views || pair.size() != s {
                return Err(SliceVolError::ConfigMismatch(format!(
                    "expected {views} view(s) of {s}x{s}, got {} view(s) of {1}x{1}",
                    pair.views(),
                    pair.size()
                )));
            }
            for ((y, xx), &v) in pair.coronal.indexed_iter() {
                x[(i, 0, y, xx)] = v as f32;
            }
            if let Some(t) = &pair.transverse {
                for ((y, xx), &v) in t.indexed_iter() {
                    x[(i, 1, y, xx)] = v as f32;
                }
            }
        }
        Ok(x)
    }

    /// Batch encode in eval mode; rows of the results follow input order.
    pub fn encode_batch(&mut self, slices: &[&SlicePair]) -> Result<(Array2<f32>, Array2<f32>)> {
        let x = self.batch_input(slices)?;
        let (mu, logvar) = self.encoder.forward(&x, false);
        let sigma = logvar.mapv(|v| (0.5 * v).exp());
        Ok((mu, sigma))
    }

    pub fn save(&self, dir: &std::path::Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let tensors = self.collect_tensors();
        crate::io::write_weights(
            &dir.join(format!("{name}.weights.bin")),
            &dir.join(format!("{name}.weights.json")),
            &tensors,
        )?;
        let meta = serde_json::json!({
            "config": self.config,
            "train_config": self.train_config,
            "head_on_sample": self.head_on_sample,
            "plr_head": self.plr_head,
            "training_mu_cache": self.training_mu_cache,
        });
        serde_json::to_writer_pretty(std::fs::File::create(dir.join(format!("{name}.model.json")))?, &meta)?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path, name: &str) -> Result<Self> {
        let meta: serde_json::Value =
            serde_json::from_reader(std::fs::File::open(dir.join(format!("{name}.model.json")))?)?;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let train_config: TrainConfig = serde_json::from_value(meta["train_config"].clone())?;
        let head_on_sample = meta["head_on_sample"].as_bool().unwrap_or(false);
        let mut model = Self::init(config, train_config, head_on_sample)?;
        model.plr_head = serde_json::from_value(meta["plr_head"].clone())?;
        model.training_mu_cache = serde_json::from_value(meta["training_mu_cache"].clone())?;
        let tensors = crate::io::read_weights(
            &dir.join(format!("{name}.weights.bin")),
            &dir.join(format!("{name}.weights.json")),
        )?;
        let map: TensorMap = tensors.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
        model.load_tensors(&map);
        Ok(model)
    }
}

/// Encodes one slice pair into its latent distribution (eval mode, sigma via
/// the exponential parameterization so it is strictly positive).
pub fn encode(model: &mut TrainedModel, slices: &SlicePair) -> Result<LatentDistribution> {
    let (mu, sigma) = model.encode_batch(&[slices])?;
    Ok(LatentDistribution {
        mu: mu.row(0).iter().map(|&v| v as f64).collect(),
        sigma: sigma.row(0).iter().map(|&v| v as f64).collect(),
    })
}

/// Decodes a latent vector into per-view probability maps `[views, S, S]`.
pub fn decode(model: &mut TrainedModel, z: &[f64]) -> Result<Array3<f64>> {
    if z.len() != model.config.latent_dim {
        return Err(SliceVolError::DimMismatch { expected: model.config.latent_dim, got: z.len() });
    }
    let zin = Array2::from_shape_vec((1, z.len()), z.iter().map(|&v| v as f32).collect()).unwrap();
    let y = model.decoder.forward(&zin, false);
    let (_, views, h, w) = y.dim();
    Ok(Array3::from_shape_fn((views, h, w), |(v, yy, xx)| y[(0, v, yy, xx)] as f64))
}
