//! Scoring generated motions against held-out references.

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};
use signmotion_core::dataset::MotionSample;
use signmotion_core::kinematics::{ParamSequence, VertexRegressor};
use signmotion_core::metrics::{curve_l1, evaluate_pairs, fid, frame_pose_stats, EvaluationReport};

use crate::checkpoint::TrainedModel;
use crate::denoiser::{ParamSummary, Variant};
use crate::error::{Error, Result};

/// Sequences sampled per reverse-diffusion batch.
pub const SAMPLE_BATCH: usize = 16;

/// One generated motion per sample, matching its transcript and frame count.
/// Batch `k` uses seed `seed + k`.
pub fn generate_for(model: &TrainedModel, samples: &[&MotionSample], seed: u64) -> Result<Vec<ParamSequence>> {
    let mut out = Vec::with_capacity(samples.len());
    for (k, chunk) in samples.chunks(SAMPLE_BATCH).enumerate() {
        let texts: Vec<&str> = chunk.iter().map(|s| s.transcript.as_str()).collect();
        let frames: Vec<usize> = chunk.iter().map(|s| s.params.frames()).collect();
        out.extend(model.sample(&texts, &frames, seed.wrapping_add(k as u64))?);
    }
    Ok(out)
}

/// FID between the pooled frames of two sequence sets over all state channels.
pub fn pose_fid(a: &[ParamSequence], b: &[ParamSequence]) -> Result<f64> {
    let pool = |set: &[ParamSequence]| -> Result<Array2<f64>> {
        let states: Vec<Array2<f64>> = set.iter().map(ParamSequence::to_state).collect();
        let views: Vec<_> = states.iter().map(|s| s.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| Error::InvalidConfig(e.to_string()))
    };
    Ok(fid(pool(a)?.view(), pool(b)?.view())?)
}

/// L1 distance between the per-frame pose standard deviation curves of two
/// sets, over the frames both cover.
pub fn diversity_gap(generated: &[ParamSequence], reference: &[ParamSequence]) -> Result<f64> {
    let curve = |set: &[ParamSequence]| -> Result<Vec<f64>> {
        let states: Vec<Array2<f64>> = set.iter().map(ParamSequence::to_state).collect();
        let views: Vec<_> = states.iter().map(|s| s.view()).collect();
        Ok(frame_pose_stats(&views)?.std)
    };
    Ok(curve_l1(&curve(generated)?, &curve(reference)?))
}

/// Table-shaped report for `model` on `samples`.
pub fn evaluate_model(model: &TrainedModel, samples: &[&MotionSample], seed: u64) -> Result<EvaluationReport> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no samples to evaluate".into()));
    }
    let generated = generate_for(model, samples, seed)?;
    let reference: Vec<ParamSequence> = samples.iter().map(|s| s.params.clone()).collect();
    Ok(evaluate_pairs(
        &model.tree,
        &VertexRegressor::for_tree(&model.tree),
        &generated,
        &reference,
    )?)
}

/// One row of an ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvaluationReport,
    pub params: ParamSummary,
    pub final_loss: f64,
    /// L1 gap between generated and reference per-frame pose deviation.
    pub diversity_gap: f64,
}

pub fn ablation_row(
    variant: Variant,
    model: &TrainedModel,
    samples: &[&MotionSample],
    final_loss: f64,
    seed: u64,
) -> Result<AblationRow> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no samples to evaluate".into()));
    }
    let generated = generate_for(model, samples, seed)?;
    let reference: Vec<ParamSequence> = samples.iter().map(|s| s.params.clone()).collect();
    let report = evaluate_pairs(&model.tree, &VertexRegressor::for_tree(&model.tree), &generated, &reference)?;
    Ok(AblationRow {
        variant,
        report,
        params: model.summary(),
        final_loss,
        diversity_gap: diversity_gap(&generated, &reference)?,
    })
}
