//! Alternating discriminator / generator optimization.
//!
//! Each iteration: semantic features of the reference (and of the low-dose
//! input) are extracted without gradient; the generator denoises the batch;
//! the discriminator takes one Adam step on real vs detached fake, both
//! conditioned on the reference pyramid; the generator then takes one Adam
//! step on the weighted total objective, with the denoised image's dense
//! features extracted through the frozen backbone so the contrastive term
//! reaches the generator.
//!
//! Batch order and contrastive sampling are pure functions of
//! `(seed, iteration)`, so the iteration counter is the complete random
//! state and a resumed run replays the uninterrupted one exactly.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec, FeaturePyramid};
use crate::checkpoint;
use crate::data::{normalize_hu, PairedSample, Window};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::Adam;
use crate::objectives::{
    adversarial_d_loss, adversarial_g_loss, compose_total, l1_loss, sample_contrastive_batch,
    scalar, scl_loss, LossReport, ObjectiveConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    pub log_every: u64,
    /// Zero disables interim checkpoints.
    pub checkpoint_every: u64,
    /// HU window mapped to the network's `[0, 1]` input range.
    pub window: Window,
    pub objective: ObjectiveConfig,
    pub backbone: BackboneSpec,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Named objective switches for the four ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationPreset {
    /// L1 only.
    Baseline,
    /// L1 + adversarial with the conditioned discriminator.
    AadOnly,
    /// L1 + contrastive.
    SclOnly,
    /// Everything.
    Full,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 4] = [Self::Baseline, Self::AadOnly, Self::SclOnly, Self::Full];

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::AadOnly => "AAD",
            Self::SclOnly => "SCL",
            Self::Full => "ALDEN",
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            Self::Baseline => (false, false),
            Self::AadOnly => (true, false),
            Self::SclOnly => (false, true),
            Self::Full => (true, true),
        }
    }

    pub fn apply(self, objective: &mut ObjectiveConfig) {
        (objective.enable_aad, objective.enable_scl) = self.flags();
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::Baseline),
            "aad" | "aad-only" => Ok(Self::AadOnly),
            "scl" | "scl-only" => Ok(Self::SclOnly),
            "full" | "alden" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown ablation preset `{other}` (baseline, aad-only, scl-only, full)"
            ))),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings: tiny backbone, batch 2, 2000 iterations.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 2,
            total_iterations: 2000,
            adam_betas: (0.5, 0.999),
            seed: 0,
            log_every: 1,
            checkpoint_every: 500,
            window: Window::SOFT_TISSUE,
            objective: ObjectiveConfig::toy(),
            backbone: BackboneSpec::tiny_test(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }

    /// The published regimen: batch 8, 300k iterations, full-width
    /// discriminator, ViT-base backbone from `checkpoint`.
    pub fn paper_scale(checkpoint: PathBuf) -> Self {
        Self {
            batch_size: 8,
            total_iterations: 300_000,
            checkpoint_every: 10_000,
            log_every: 100,
            objective: ObjectiveConfig::default(),
            backbone: BackboneSpec::vit_base(checkpoint),
            generator: GeneratorConfig {
                base_channels: 32,
                depth: 4,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig::full(),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be at least 1".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("adam_betas must lie in [0, 1), got {:?}", self.adam_betas)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        self.window.validate().map_err(|e| Error::Config(format!("window: {e}")))?;
        self.objective.validate()?;
        self.generator.validate()?;
        if self.objective.enable_aad || self.objective.enable_scl {
            self.backbone.validate()?;
        }
        if self.objective.enable_aad {
            self.discriminator.validate()?;
        }
        if self.objective.enable_scl {
            let cells = self.backbone.grid_size().pow(2);
            if self.objective.k > cells || self.objective.m + 1 > cells {
                return Err(Error::Config(format!(
                    "objective: K={} / M={} exceed the {cells}-cell backbone grid",
                    self.objective.k, self.objective.m
                )));
            }
        }
        Ok(())
    }

    pub fn needs_backbone(&self) -> bool {
        self.objective.enable_aad || self.objective.enable_scl
    }
}

/// Splitmix64 finalizer; derives independent stream seeds.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_SALT: u64 = 0x5348_5546;
const CONTRAST_SALT: u64 = 0x5343_4C00;

/// Sample indices of the batch consumed at `iteration` (0-based). Each epoch
/// is a fresh permutation; a trailing partial batch is dropped.
pub fn batch_indices(seed: u64, dataset_len: usize, batch_size: usize, iteration: u64) -> Vec<usize> {
    let per_epoch = (dataset_len / batch_size) as u64;
    let epoch = iteration / per_epoch;
    let pos = (iteration % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..dataset_len).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed ^ SHUFFLE_SALT, epoch)));
    perm[pos * batch_size..(pos + 1) * batch_size].to_vec()
}

/// Everything that changes during training.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    /// Present when the adversarial term is enabled.
    pub discriminator: Option<Discriminator>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed iterations.
    pub iteration: u64,
}

/// Generator-side losses of one step, still attached to the graph.
pub struct GeneratorObjective {
    pub total: Tensor,
    pub l1: Tensor,
    pub adv_g: Option<Tensor>,
    pub scl: Option<Tensor>,
}

/// Conditioning and contrastive features extracted without gradient.
pub struct StepFeatures {
    pub pyramid: Option<FeaturePyramid>,
    pub f_x: Option<Tensor>,
    pub f_y: Option<Tensor>,
}

fn finite(v: f64, term: &'static str, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { term, iteration })
    }
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(&config.generator, DType::F32)?;
        let discriminator = if config.objective.enable_aad {
            Some(Discriminator::new(
                &config.discriminator,
                config.backbone.embed_dim,
                DType::F32,
            )?)
        } else {
            None
        };
        let opt_g = Adam::new(config.learning_rate, config.adam_betas);
        let opt_d = Adam::new(config.learning_rate, config.adam_betas);
        Ok(Self {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            iteration: 0,
        })
    }

    /// Independent copy of all numeric state.
    pub fn deep_clone(&self) -> Result<Self> {
        checkpoint::from_bytes(&checkpoint::to_bytes(self)?, Path::new("<memory>"))
    }

    pub fn load_backbone(&self) -> Result<Option<Backbone>> {
        if self.config.needs_backbone() {
            Ok(Some(Backbone::load(&self.config.backbone)?))
        } else {
            Ok(None)
        }
    }

    pub fn extract_features(&self, backbone: Option<&Backbone>, x: &Tensor, y: &Tensor) -> Result<StepFeatures> {
        let obj = &self.config.objective;
        if !(obj.enable_aad || obj.enable_scl) {
            return Ok(StepFeatures { pyramid: None, f_x: None, f_y: None });
        }
        let bb = backbone.ok_or_else(|| Error::Config("objective needs a backbone".into()))?;
        let pyramid = if obj.enable_aad {
            Some(bb.pyramid_batch(y)?.detach())
        } else {
            None
        };
        let (f_x, f_y) = if obj.enable_scl {
            let f_y = match &pyramid {
                Some(p) => p.high.values.clone(),
                None => bb.dense_batch(y)?.values.detach(),
            };
            (Some(bb.dense_batch(x)?.values.detach()), Some(f_y))
        } else {
            (None, None)
        };
        Ok(StepFeatures { pyramid, f_x, f_y })
    }

    /// Total generator objective for denoised `yhat` against `y`.
    pub fn generator_objective(
        &self,
        backbone: Option<&Backbone>,
        features: &StepFeatures,
        yhat: &Tensor,
        y: &Tensor,
        contrast_seed: u64,
    ) -> Result<GeneratorObjective> {
        let obj = &self.config.objective;
        let l1 = l1_loss(yhat, y)?;
        let adv_g = match (&self.discriminator, obj.enable_aad) {
            (Some(d), true) => {
                let fake = d.discriminate(yhat, features.pyramid.as_ref())?;
                Some(adversarial_g_loss(&fake.logits)?)
            }
            _ => None,
        };
        let scl = match (obj.enable_scl, &features.f_x, &features.f_y, backbone) {
            (true, Some(f_x), Some(f_y), Some(bb)) => {
                let f_yhat = bb.dense_batch(yhat)?.values;
                let batch = sample_contrastive_batch(f_x, &f_yhat, f_y, obj, contrast_seed)?;
                Some(scl_loss(&f_yhat, f_x, f_y, &batch, obj)?)
            }
            (true, ..) => return Err(Error::Config("contrastive term needs backbone features".into())),
            _ => None,
        };
        let total = compose_total(&l1, adv_g.as_ref(), scl.as_ref(), obj)?;
        Ok(GeneratorObjective { total, l1, adv_g, scl })
    }

    /// One Adam step of the discriminator on real `y` against detached
    /// `yhat`; returns the discriminator loss (zero without one).
    pub fn discriminator_step(&mut self, features: &StepFeatures, yhat: &Tensor, y: &Tensor) -> Result<f64> {
        let it = self.iteration;
        let (Some(d), true) = (&self.discriminator, self.config.objective.enable_aad) else {
            return Ok(0.0);
        };
        let pyr = features.pyramid.as_ref();
        let real = d.discriminate(y, pyr)?.logits;
        let fake = d.discriminate(&yhat.detach(), pyr)?.logits;
        let loss = adversarial_d_loss(&real, &fake).map_err(|_| Error::NonFiniteLoss {
            term: "adv_d",
            iteration: it,
        })?;
        let value = finite(scalar(&loss)?, "adv_d", it)?;
        let grads = loss.backward()?;
        self.opt_d.step(d.params(), &grads)?;
        Ok(value)
    }

    /// One Adam step of the generator on the total objective. `adv_d` is
    /// copied into the returned report.
    pub fn generator_step(
        &mut self,
        backbone: Option<&Backbone>,
        features: &StepFeatures,
        yhat: &Tensor,
        y: &Tensor,
    ) -> Result<LossReport> {
        let it = self.iteration;
        let seed = mix_seed(self.config.seed ^ CONTRAST_SALT, it);
        let objective = self.generator_objective(backbone, features, yhat, y, seed)?;
        let l1 = finite(scalar(&objective.l1)?, "l1", it)?;
        let adv_g = match &objective.adv_g {
            Some(t) => finite(scalar(t)?, "adv_g", it)?,
            None => 0.0,
        };
        let scl = match &objective.scl {
            Some(t) => finite(scalar(t)?, "scl", it)?,
            None => 0.0,
        };
        let total = finite(scalar(&objective.total)?, "total", it)?;
        let grads = objective.total.backward()?;
        self.opt_g.step(self.generator.params(), &grads)?;
        Ok(LossReport {
            l1,
            adv_g,
            adv_d: 0.0,
            scl,
            total,
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, backbone: Option<&Backbone>, x: &Tensor, y: &Tensor) -> Result<LossReport> {
        let features = self.extract_features(backbone, x, y)?;
        let yhat = self.generator.forward(x)?;
        let adv_d = self.discriminator_step(&features, &yhat, y)?;
        let report = self.generator_step(backbone, &features, &yhat, y)?;
        self.iteration += 1;
        Ok(LossReport { adv_d, ..report })
    }
}

/// Normalized `(x, y)` tensors of each pair, `(1, 1, H, W)` each.
pub fn prepare_pairs(dataset: &[PairedSample], window: Window) -> Result<Vec<(Tensor, Tensor)>> {
    let to_tensor = |img: &crate::data::NormalizedImage| -> Result<Tensor> {
        let (h, w) = img.dims();
        Ok(Tensor::from_vec(img.pixels().iter().copied().collect::<Vec<f32>>(), (1, 1, h, w), &Device::Cpu)?)
    };
    dataset
        .iter()
        .map(|p| {
            Ok((
                to_tensor(&normalize_hu(&p.ldct, window)?)?,
                to_tensor(&normalize_hu(&p.ndct, window)?)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `loss_log.tsv`, interim checkpoints and `final.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume_from: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// `(iteration, report)` for every step run in this call, 1-based.
    pub history: Vec<(u64, LossReport)>,
    pub checkpoints: Vec<PathBuf>,
    pub backbone_checksum: Option<[u8; 32]>,
}

pub const LOSS_LOG: &str = "loss_log.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn interim_checkpoint_name(iteration: u64) -> String {
    format!("checkpoint_{iteration:08}.ckpt")
}

/// Runs training up to `config.total_iterations`.
pub fn train(config: &TrainConfig, dataset: &[PairedSample], options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.len() < config.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} pairs, fewer than batch_size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let dims = dataset[0].ndct.dims();
    if let Some(p) = dataset.iter().find(|p| p.ndct.dims() != dims) {
        return Err(Error::Shape(format!(
            "training pairs must share one size: `{}` is {:?}, expected {dims:?}",
            p.sample_id,
            p.ndct.dims()
        )));
    }
    let mut state = match &options.resume_from {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if let Some(warning) = ck.config_mismatch(config) {
                log::warn!("{warning}");
            }
            let mut st = ck.into_state()?;
            st.config.total_iterations = config.total_iterations;
            st.config.log_every = config.log_every;
            st.config.checkpoint_every = config.checkpoint_every;
            st
        }
        None => TrainState::new(config.clone())?,
    };
    state.generator.check_input_dims(dims.0, dims.1)?;
    let backbone = state.load_backbone()?;
    let backbone_before = backbone.as_ref().map(|b| b.checksum()).transpose()?;
    let pairs = prepare_pairs(dataset, state.config.window)?;

    let mut log_file = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let f = OpenOptions::new()
                .create(true)
                .append(options.resume_from.is_some())
                .write(true)
                .truncate(options.resume_from.is_none())
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    while state.iteration < state.config.total_iterations {
        let idx = batch_indices(state.config.seed, pairs.len(), state.config.batch_size, state.iteration);
        let xs: Vec<&Tensor> = idx.iter().map(|&i| &pairs[i].0).collect();
        let ys: Vec<&Tensor> = idx.iter().map(|&i| &pairs[i].1).collect();
        let x = Tensor::cat(&xs, 0)?;
        let y = Tensor::cat(&ys, 0)?;
        let report = state.train_step(backbone.as_ref(), &x, &y)?;
        let it = state.iteration;
        history.push((it, report));
        if let Some((f, path)) = log_file.as_mut() {
            if it % state.config.log_every == 0 {
                writeln!(f, "{}", report.log_line(it)).map_err(|e| Error::io(path.as_path(), e))?;
            }
        }
        if let Some(dir) = &options.out_dir {
            let every = state.config.checkpoint_every;
            if every > 0 && it % every == 0 {
                let path = dir.join(interim_checkpoint_name(it));
                checkpoint::save(&state, &path)?;
                checkpoints.push(path);
            }
        }
        if it % 100 == 0 {
            log::info!("iteration {it}: {}", report.log_line(it));
        }
    }
    if let Some(dir) = &options.out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        checkpoint::save(&state, &path)?;
        checkpoints.push(path);
    }
    let backbone_checksum = match (&backbone, backbone_before) {
        (Some(bb), Some(before)) => {
            let after = bb.checksum()?;
            if after != before {
                return Err(Error::Numeric("frozen backbone parameters changed during training".into()));
            }
            Some(after)
        }
        _ => None,
    };
    Ok(TrainOutcome {
        state,
        history,
        checkpoints,
        backbone_checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|it| batch_indices(3, n, 2, it)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(
            (0..5).flat_map(|it| batch_indices(3, n, 2, it)).collect::<Vec<_>>(),
            (5..10).flat_map(|it| batch_indices(3, n, 2, it)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn presets_set_flags() {
        let mut o = ObjectiveConfig::default();
        AblationPreset::Baseline.apply(&mut o);
        assert!(!o.enable_aad && !o.enable_scl);
        AblationPreset::SclOnly.apply(&mut o);
        assert!(!o.enable_aad && o.enable_scl);
        assert_eq!("aad-only".parse::<AblationPreset>().unwrap(), AblationPreset::AadOnly);
        assert!("nope".parse::<AblationPreset>().is_err());
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = TrainConfig { learning_rate: -1.0, ..TrainConfig::toy() };
        assert!(cfg.validate().unwrap_err().to_string().contains("learning_rate"));
        let cfg = TrainConfig {
            objective: ObjectiveConfig { k: 65, ..ObjectiveConfig::toy() },
            ..TrainConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }
}
