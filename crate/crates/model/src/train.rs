//! Mini-batch training of the denoiser with AdamW and a linearly decaying
//! learning rate.

use std::path::Path;

use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use signmotion_core::dataset::MotionSample;
use signmotion_core::kinematics::KinematicTree;

use crate::checkpoint::{CheckpointMeta, TrainedModel, FORMAT_VERSION};
use crate::denoiser::{ModelConfig, TextConditioning, TextInput};
use crate::diffusion::{training_loss, Batch, Normalizer};
use crate::error::{Error, Result};
use crate::schedule::{LossWeights, ScheduleConfig};

/// Number of batches whose sequences are sorted by length together.
const BUCKET_BATCHES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    /// Loss weight of hand channels relative to the rest.
    pub hand_weight: f64,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            final_learning_rate: 1e-6,
            hand_weight: 2.0,
            schedule: ScheduleConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.hand_weight > 0.0) {
            return Err(Error::InvalidConfig("hand weight must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.learning_rate;
        }
        let frac = step as f64 / (total - 1) as f64;
        self.learning_rate + (self.final_learning_rate - self.learning_rate) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

/// Checkpoint metadata for a model about to be trained on `samples`.
pub fn initial_meta(
    samples: &[&MotionSample],
    tree: &KinematicTree,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<CheckpointMeta> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidConfig("no training samples".into()))?;
    let layout = first.params.layout();
    for s in samples {
        if s.params.layout() != layout {
            return Err(Error::InvalidConfig(format!("sample `{}` has a different state layout", s.id)));
        }
        s.params.check_tree(tree)?;
    }
    let states: Vec<_> = samples.iter().map(|s| s.params.to_state()).collect();
    let views: Vec<_> = states.iter().map(|s| s.view()).collect();
    let vocabulary = match model.text {
        TextConditioning::WordBag { .. } => {
            let mut words: Vec<String> = samples
                .iter()
                .flat_map(|s| signmotion_core::text::tokenize(&s.transcript))
                .collect();
            words.sort();
            words.dedup();
            words
        }
        TextConditioning::Sentence { .. } => Vec::new(),
    };
    let normalizer = Normalizer::fit(&views)?;
    // Largest normalized magnitude seen in training bounds sampled estimates.
    let x0_clip = states
        .iter()
        .flat_map(|s| normalizer.normalize(&s.view()).into_iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(CheckpointMeta {
        format_version: FORMAT_VERSION,
        schedule: config.schedule,
        state_dim: layout.dim(),
        layout,
        normalizer,
        x0_clip: Some(x0_clip),
        model: model.clone(),
        vocabulary,
        skeleton: tree.to_file(),
        shape_dim: first.params.shape.len(),
        fps: first.params.fps,
        seed: config.seed,
        epochs_trained: 0,
    })
}

/// Trains from scratch. With `checkpoint_dir`, periodic checkpoints go to
/// `epoch_NNNN/` subdirectories and the final model to `final/`.
pub fn train(
    samples: &[&MotionSample],
    tree: &KinematicTree,
    model_config: &ModelConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainedModel, Vec<EpochLog>)> {
    config.validate()?;
    let meta = initial_meta(samples, tree, model_config, config)?;
    let mut trained = TrainedModel::build(meta, DType::F32)?;
    let log = train_model(&mut trained, samples, config, checkpoint_dir)?;
    if let Some(dir) = checkpoint_dir {
        trained.save(dir.join("final"))?;
    }
    Ok((trained, log))
}

/// Continues training `trained` for `config.epochs` epochs.
pub fn train_model(
    trained: &mut TrainedModel,
    samples: &[&MotionSample],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let device = trained.store.device().clone();
    let dtype = trained.store.dtype();
    let normalized: Vec<_> = samples
        .iter()
        .map(|s| trained.meta.normalizer.normalize(&s.params.to_state().view()))
        .collect();
    let texts: Vec<TextInput> = samples
        .iter()
        .map(|s| trained.model.prepare_text(&s.transcript))
        .collect::<Result<_>>()?;
    let weights = LossWeights::for_layout(&trained.meta.layout, config.hand_weight);

    let mut optimizer = AdamW::new(
        trained.store.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let batches_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        // Batch sequences of similar length together to limit padding.
        let mut batches: Vec<Vec<usize>> = Vec::with_capacity(batches_per_epoch);
        for group in order.chunks(config.batch_size * BUCKET_BATCHES) {
            let mut group = group.to_vec();
            group.sort_by_key(|&i| normalized[i].nrows());
            batches.extend(group.chunks(config.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = config.learning_rate;
        for chunk in &batches {
            let views: Vec<_> = chunk.iter().map(|&i| normalized[i].view()).collect();
            let batch = Batch::new(&views, chunk.iter().map(|&i| texts[i].clone()).collect(), dtype, &device)?;
            let loss = training_loss(&trained.model, &trained.schedule, &weights, &batch, &mut rng)
                .map_err(|e| match e {
                    Error::TrainingInstability { .. } => Error::TrainingInstability { step },
                    other => other,
                })?;
            lr = config.learning_rate_at(step, total_steps);
            optimizer.set_learning_rate(lr);
            optimizer.backward_step(&loss)?;
            loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            step += 1;
        }
        let mean_loss = loss_sum / samples.len() as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.5} lr {lr:.2e}");
        log.push(EpochLog {
            epoch,
            mean_loss,
            learning_rate: lr,
        });
        trained.meta.epochs_trained += 1;
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                trained.save(dir.join(format!("epoch_{epoch:04}")))?;
            }
        }
    }
    Ok(log)
}
