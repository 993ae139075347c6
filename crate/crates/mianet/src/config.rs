//! Run configuration: two named profiles, JSON (de)serialization, flag-style
//! overrides, and the projections into the module-level config structs.
//!
//! The desk profile is deliberately small so every command terminates in
//! seconds; the paper profile carries the published hyperparameters and must
//! be requested explicitly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::SgdConfig;
use crate::episodes::encoder::EncoderConfig;
use crate::episodes::eval::EvalProtocol;
use crate::episodes::metrics::MiouMode;
use crate::episodes::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::gim::TripletMetric;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricChoice {
    Euclidean,
    Cosine,
}

impl From<MetricChoice> for TripletMetric {
    fn from(m: MetricChoice) -> Self {
        match m {
            MetricChoice::Euclidean => TripletMetric::Euclidean,
            MetricChoice::Cosine => TripletMetric::Cosine,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub profile: Profile,
    /// Square synthetic image side (H == W).
    pub image_size: usize,
    pub scales: Vec<(usize, usize)>,
    /// Mid-level feature width; also the fusion and generator width.
    pub c: usize,
    /// High-level feature width feeding the prior builder.
    pub c_high: usize,
    /// Word-embedding dimension.
    pub d: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Support shots per episode (K).
    pub shots: usize,
    pub fold: usize,
    pub seed_list: Vec<u64>,
    pub eval_pairs: usize,
    /// Training episode pool; one epoch is one pass over it.
    pub train_pool: usize,
    pub samples_per_class: usize,
    pub dataset_seed: u64,
    pub encoder_seed: u64,
    pub init_seed: u64,
    pub train_seed: u64,
    // ablation switches, all "on" by default
    pub hpm: bool,
    pub gim: bool,
    pub one_scale: bool,
    pub info_channels: bool,
    pub triplet_loss: bool,
    pub word_embeddings: bool,
    pub metric: MetricChoice,
    pub stop_gradient_mined: bool,
    /// Alternative mIoU convention: mean of per-episode IoUs.
    pub per_episode_miou: bool,
    pub data: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            image_size: 96,
            scales: vec![(24, 24), (12, 12), (6, 6), (3, 3)],
            c: 32,
            c_high: 16,
            d: 16,
            margin: 0.5,
            learning_rate: 5e-3,
            batch_size: 4,
            epochs: 4,
            shots: 1,
            fold: 0,
            seed_list: vec![0, 1, 2, 3, 4],
            eval_pairs: 100,
            train_pool: 16,
            samples_per_class: 12,
            dataset_seed: 7,
            encoder_seed: 17,
            init_seed: 0,
            train_seed: 100,
            hpm: true,
            gim: true,
            one_scale: false,
            info_channels: true,
            triplet_loss: true,
            word_embeddings: true,
            metric: MetricChoice::Euclidean,
            stop_gradient_mined: false,
            per_episode_miou: false,
            data: None,
            embeddings: None,
            checkpoint: None,
            out: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            image_size: 473,
            scales: vec![(60, 60), (30, 30), (15, 15), (8, 8)],
            c: 256,
            c_high: 64,
            d: 300,
            epochs: 200,
            eval_pairs: 1000,
            ..Self::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Load a (possibly partial) JSON config. Missing fields fall back to the
    /// file's own `profile` (not blindly to desk), so `{"profile": "paper"}`
    /// really means the paper settings. A `profile` argument (the CLI flag)
    /// takes precedence over the field and picks the fallback base instead.
    pub fn load_layered(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let file_value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        let fields = file_value
            .as_object()
            .ok_or_else(|| Error::Config("config file must be a JSON object".into()))?;
        let base_profile = match profile {
            Some(p) => p,
            None => match fields.get("profile") {
                Some(v) => serde_json::from_value(v.clone())?,
                None => Profile::Desk,
            },
        };
        let mut merged =
            serde_json::to_value(Self::for_profile(base_profile)).expect("config serializes");
        let slots = merged.as_object_mut().expect("config is an object");
        for (key, value) in fields {
            if !slots.contains_key(key) {
                return Err(Error::Config(format!("unknown config field `{key}`")));
            }
            slots.insert(key.clone(), value.clone());
        }
        if profile.is_some() {
            slots.insert(
                "profile".into(),
                serde_json::to_value(base_profile).expect("profile serializes"),
            );
        }
        Ok(serde_json::from_value(merged)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots (K) must be at least 1".into()));
        }
        if self.fold >= crate::episodes::N_FOLDS {
            return Err(Error::Config(format!(
                "fold {} out of range, {} folds",
                self.fold,
                crate::episodes::N_FOLDS
            )));
        }
        if self.seed_list.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        if self.eval_pairs == 0 {
            return Err(Error::Config("eval pairs must be at least 1".into()));
        }
        if self.train_pool == 0 {
            return Err(Error::Config("train pool must be at least 1".into()));
        }
        self.model_config().validate()
    }

    /// Scales after the one-scale ablation: a single (finest) entry.
    pub fn resolved_scales(&self) -> Vec<(usize, usize)> {
        if self.one_scale {
            self.scales.iter().take(1).copied().collect()
        } else {
            self.scales.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.c,
            word_dim: self.d,
            scales: self.resolved_scales(),
            margin: self.margin,
            metric: self.metric.into(),
            use_hpm: self.hpm,
            use_gim: self.gim,
            use_triplet: self.triplet_loss,
            use_word_embeddings: self.word_embeddings,
            info_channels: self.info_channels,
            stop_gradient_mined: self.stop_gradient_mined,
            support_reduce: crate::hpm::SupportReduce::Mean,
            init_seed: self.init_seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            mid_channels: self.c,
            high_channels: self.c_high,
            seed: self.encoder_seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.image_size,
            width: self.image_size,
            samples_per_class: self.samples_per_class,
            ..SynthConfig::default()
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            ..SgdConfig::default()
        }
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            seeds: self.seed_list.clone(),
            pairs_per_seed: self.eval_pairs,
            shots: self.shots,
            miou_mode: if self.per_episode_miou {
                MiouMode::PerEpisodeMean
            } else {
                MiouMode::Accumulate
            },
        }
    }

    /// Optimizer steps for the configured schedule: one pass over the pool
    /// per epoch, `batch_size` episodes per step.
    pub fn train_steps(&self) -> usize {
        self.epochs * self.train_pool / self.batch_size.max(1)
    }
}
