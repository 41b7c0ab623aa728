//! A trained denoiser together with everything needed to sample from it.
//!
//! On disk a checkpoint is a directory holding `params.bin` (named parameter
//! arrays) and `checkpoint.json` (configuration, schedule and normalization).

use std::path::Path;

use candle_core::{DType, Device};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use signmotion_core::arrayfile::ArrayFile;
use signmotion_core::kinematics::{KinematicTree, ParamSequence, SkeletonFile, StateLayout};

use crate::denoiser::{Denoiser, ModelConfig, ParamSummary, TextInput};
use crate::diffusion::{sample, Normalizer};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::schedule::{NoiseSchedule, ScheduleConfig};

pub const PARAMS_FILE: &str = "params.bin";
pub const META_FILE: &str = "checkpoint.json";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u16,
    pub schedule: ScheduleConfig,
    pub state_dim: usize,
    pub layout: StateLayout,
    pub normalizer: Normalizer,
    /// Bound on the clean-state estimate during sampling, in normalized units.
    #[serde(default)]
    pub x0_clip: Option<f64>,
    pub model: ModelConfig,
    /// Word list of a word-bag text embedding; empty otherwise.
    pub vocabulary: Vec<String>,
    pub skeleton: SkeletonFile,
    pub shape_dim: usize,
    pub fps: f64,
    /// Seed of the parameter initialization.
    pub seed: u64,
    pub epochs_trained: usize,
}

pub struct TrainedModel {
    pub meta: CheckpointMeta,
    pub tree: KinematicTree,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    pub model: Denoiser,
}

impl TrainedModel {
    /// Freshly initialized model described by `meta`.
    pub fn build(meta: CheckpointMeta, dtype: DType) -> Result<Self> {
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Core(signmotion_core::Error::VersionMismatch {
                found: meta.format_version,
                expected: FORMAT_VERSION,
            }));
        }
        if meta.layout.dim() != meta.state_dim || meta.normalizer.dim() != meta.state_dim {
            return Err(Error::Checkpoint(format!(
                "state width {} disagrees with layout ({}) or normalization ({})",
                meta.state_dim,
                meta.layout.dim(),
                meta.normalizer.dim()
            )));
        }
        let tree = KinematicTree::from_file(&meta.skeleton)?;
        let schedule = NoiseSchedule::from_config(meta.schedule)?;
        let mut store = ParamStore::new(meta.seed, dtype, Device::Cpu);
        let model = Denoiser::new(&mut store, meta.model.clone(), &tree, meta.layout, &meta.vocabulary)?;
        Ok(Self {
            meta,
            tree,
            schedule,
            store,
            model,
        })
    }

    pub fn summary(&self) -> ParamSummary {
        ParamSummary::of(&self.store)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.store.to_arrays()?.write(dir.join(PARAMS_FILE))?;
        std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    /// Loads a checkpoint for single-precision inference or further training.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::load_as(dir, DType::F32)
    }

    pub fn load_as(dir: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        let mut model = Self::build(meta, dtype)?;
        model.store.load_arrays(&ArrayFile::read(dir.join(PARAMS_FILE))?)?;
        Ok(model)
    }

    pub fn prepare_texts(&self, texts: &[&str]) -> Result<Vec<TextInput>> {
        texts.iter().map(|t| self.model.prepare_text(t)).collect()
    }

    /// One parameter sequence per transcript with the canonical (zero) shape.
    pub fn sample(&self, texts: &[&str], frames: &[usize], seed: u64) -> Result<Vec<ParamSequence>> {
        let inputs = self.prepare_texts(texts)?;
        let states = sample(
            &self.model,
            &self.schedule,
            &self.meta.normalizer,
            &inputs,
            frames,
            seed,
            self.meta.x0_clip,
        )?;
        states
            .iter()
            .map(|s| {
                Ok(ParamSequence::from_state(
                    self.meta.layout,
                    s,
                    Array1::zeros(self.meta.shape_dim),
                    self.meta.fps,
                )?)
            })
            .collect()
    }
}
