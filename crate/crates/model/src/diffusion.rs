//! Training objective and ancestral sampling on top of the noise schedule.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, TextInput};
use crate::error::{Error, Result};
use crate::schedule::{LossWeights, NoiseSchedule};

/// Smallest per-channel scale used when standardizing.
pub const STD_FLOOR: f64 = 1e-3;

/// Per-channel standardization of state vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over every frame of every sequence.
    pub fn fit(sequences: &[ArrayView2<f64>]) -> Result<Self> {
        let dim = sequences
            .first()
            .map(|s| s.ncols())
            .ok_or_else(|| Error::InvalidConfig("cannot normalize an empty training set".into()))?;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for s in sequences {
            if s.ncols() != dim {
                return Err(Error::InvalidConfig("sequences disagree on the state width".into()));
            }
            for row in s.rows() {
                for (k, v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InvalidConfig("training sequences have no frames".into()));
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        out
    }

    pub fn denormalize(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[k] + self.mean[k];
            }
        }
        out
    }
}

/// Padded mini-batch of normalized sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (B, F, D) clean states, zero past each sequence's end.
    pub x0: Tensor,
    /// (B, F) with 1 on valid frames.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    pub texts: Vec<TextInput>,
}

impl Batch {
    pub fn new(
        sequences: &[ArrayView2<f64>],
        texts: Vec<TextInput>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if sequences.is_empty() || sequences.len() != texts.len() {
            return Err(Error::InvalidConfig("a batch needs one text per non-empty sequence".into()));
        }
        let d = sequences[0].ncols();
        let frames = sequences.iter().map(|s| s.nrows()).max().unwrap_or(0);
        if frames == 0 {
            return Err(Error::InvalidConfig("batch sequences have no frames".into()));
        }
        let b = sequences.len();
        let mut x = vec![0.0; b * frames * d];
        let mut mask = vec![0.0; b * frames];
        for (i, s) in sequences.iter().enumerate() {
            if s.ncols() != d {
                return Err(Error::InvalidConfig("batch sequences disagree on the state width".into()));
            }
            for (f, row) in s.rows().into_iter().enumerate() {
                let base = (i * frames + f) * d;
                for (k, v) in row.iter().enumerate() {
                    x[base + k] = *v;
                }
                mask[i * frames + f] = 1.0;
            }
        }
        Ok(Self {
            x0: Tensor::from_vec(x, (b, frames, d), device)?.to_dtype(dtype)?,
            mask: Tensor::from_vec(mask, (b, frames), device)?.to_dtype(dtype)?,
            lengths: sequences.iter().map(|s| s.nrows()).collect(),
            texts,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }
}

/// Host-sampled standard normal tensor.
pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// `sum_{b,f,d} w_d m_bf (pred - target)^2 / sum_{b,f,d} w_d m_bf`.
pub fn weighted_masked_mse(pred: &Tensor, target: &Tensor, weights: &[f64], mask: &Tensor) -> Result<Tensor> {
    let d = pred.dims3()?.2;
    if weights.len() != d {
        return Err(Error::InvalidConfig(format!(
            "{} loss weights for {d} channels",
            weights.len()
        )));
    }
    let w = Tensor::from_vec(weights.to_vec(), d, pred.device())?.to_dtype(pred.dtype())?;
    let sq = (pred - target)?.sqr()?.broadcast_mul(&w)?.sum(2)?;
    let numerator = (sq * mask)?.sum_all()?;
    let denominator = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? * weights.iter().sum::<f64>();
    if denominator <= 0.0 {
        return Err(Error::InvalidConfig("loss mask selects no weighted entries".into()));
    }
    Ok((numerator / denominator)?)
}

/// Per-sample `(sqrt(abar_t), sqrt(1 - abar_t))` as (B, 1, 1) tensors.
fn marginal_coefficients(schedule: &NoiseSchedule, t: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    for &s in t {
        schedule.check(s)?;
    }
    let a: Vec<f64> = t.iter().map(|&s| schedule.alpha_bar_at(s).sqrt()).collect();
    let b: Vec<f64> = t.iter().map(|&s| (1.0 - schedule.alpha_bar_at(s)).sqrt()).collect();
    let shape = (t.len(), 1, 1);
    Ok((
        Tensor::from_vec(a, shape, device)?.to_dtype(dtype)?,
        Tensor::from_vec(b, shape, device)?.to_dtype(dtype)?,
    ))
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with one step per batch row.
pub fn q_sample_batch(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let (a, b) = marginal_coefficients(schedule, t, x0.dtype(), x0.device())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// Noise-prediction loss for one batch with uniformly drawn steps.
pub fn training_loss(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let t: Vec<usize> = (0..batch.size())
        .map(|_| rng.random_range(1..=schedule.steps()))
        .collect();
    let eps = gaussian(batch.x0.dims(), rng, batch.x0.dtype(), batch.x0.device())?;
    loss_at(model, schedule, weights, batch, &t, &eps)
}

/// Noise-prediction loss of `model` at explicit steps and noise.
pub fn loss_at(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    batch: &Batch,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    loss_with(
        |xt, t| model.forward(xt, t, &batch.texts, &batch.lengths),
        schedule,
        weights,
        batch,
        t,
        eps,
    )
}

/// Noise-prediction loss for an arbitrary predictor `(x_t, t) -> eps_hat`.
/// A non-finite loss is reported as training instability at step 0; the
/// training loop substitutes the real step.
pub fn loss_with<P>(
    predict: P,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    batch: &Batch,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor>
where
    P: FnOnce(&Tensor, &[usize]) -> Result<Tensor>,
{
    let xt = q_sample_batch(&batch.x0, t, eps, schedule)?;
    let pred = predict(&xt, t)?;
    if pred.dims() != eps.dims() {
        return Err(Error::InvalidConfig(format!(
            "prediction has shape {:?}, noise has {:?}",
            pred.dims(),
            eps.dims()
        )));
    }
    let loss = weighted_masked_mse(&pred, eps, &weights.weights, &batch.mask)?;
    if !loss.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite() {
        return Err(Error::TrainingInstability { step: 0 });
    }
    Ok(loss)
}

/// Ancestral sampling from pure noise of `shape` (B, F, D). `predict` maps
/// `(x_t, t)` to the predicted noise.
///
/// Each step forms the implied clean estimate
/// `x0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`, optionally clamps it to
/// `[-clip, clip]`, and draws from the Gaussian posterior `q(x_{t-1} | x_t, x0)`
/// with variance `beta_t`. Without clamping this equals the usual
/// `(x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)` update; with it, a
/// small noise error at large `t` (where `sqrt(abar_t)` is tiny) cannot push
/// the trajectory far outside the data range.
pub fn sample_loop<P>(
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    seed: u64,
    clip: Option<f64>,
    dtype: DType,
    device: &Device,
    mut predict: P,
) -> Result<Tensor>
where
    P: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [shape.0, shape.1, shape.2];
    let mut x = gaussian(&dims, &mut rng, dtype, device)?;
    for t in (1..=schedule.steps()).rev() {
        // Detached so no autograd graph accumulates across steps.
        let eps = predict(&x, t)?.detach();
        let ab = schedule.alpha_bar_at(t);
        let ab_prev = if t > 1 { schedule.alpha_bar_at(t - 1) } else { 1.0 };
        let beta = schedule.beta_at(t);
        let x0 = ((&x - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        let x0 = match clip {
            Some(c) => x0.clamp(-c, c)?,
            None => x0,
        };
        let mean = ((x0 * (ab_prev.sqrt() * beta / (1.0 - ab)))?
            + (&x * (schedule.alpha_at(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab)))?)?;
        x = if t > 1 {
            (mean + (gaussian(&dims, &mut rng, dtype, device)? * beta.sqrt())?)?
        } else {
            mean
        };
    }
    Ok(x)
}

/// Draws one sequence per text, each with its own length, and returns them in
/// the original (denormalized) state space.
pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    normalizer: &Normalizer,
    texts: &[TextInput],
    lengths: &[usize],
    seed: u64,
    clip: Option<f64>,
) -> Result<Vec<Array2<f64>>> {
    if texts.len() != lengths.len() || texts.is_empty() {
        return Err(Error::InvalidConfig("sampling needs one length per text".into()));
    }
    if lengths.contains(&0) {
        return Err(Error::InvalidConfig("cannot sample an empty sequence".into()));
    }
    let b = texts.len();
    let frames = *lengths.iter().max().expect("non-empty");
    let d = model.layout.dim();
    let x = sample_loop(schedule, (b, frames, d), seed, clip, model.dtype(), model.device(), |x, t| {
        model.forward(x, &vec![t; b], texts, lengths)
    })?;
    let x = x.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    x.into_iter()
        .zip(lengths)
        .map(|(seq, &len)| {
            let flat: Vec<f64> = seq.into_iter().take(len).flatten().collect();
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Core(signmotion_core::Error::NonFinite("sampled sequence".into())));
            }
            let a = Array2::from_shape_vec((len, d), flat).expect("row-major frames");
            Ok(normalizer.denormalize(&a.view()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, q_sample};
    use ndarray::Array2;
    use rand::Rng;

    fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn weighted_mse_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (b, f, d) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
            let n = b * f * d;
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
            let mut mask: Vec<f64> = (0..b * f).map(|_| f64::from(rng.random_bool(0.7))).collect();
            mask[0] = 1.0;
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..b * f {
                for k in 0..d {
                    let e = pred[i * d + k] - target[i * d + k];
                    num += w[k] * mask[i] * e * e;
                    den += w[k] * mask[i];
                }
            }
            let got = weighted_masked_mse(
                &tensor(pred, &[b, f, d]),
                &tensor(target, &[b, f, d]),
                &w,
                &tensor(mask, &[b, f]),
            )
            .unwrap();
            assert!((scalar(&got) - num / den).abs() <= 1e-12 * (num / den).max(1.0));
        }
    }

    #[test]
    fn constant_unit_residual_gives_unit_loss() {
        let target = tensor(vec![0.3, -1.0, 2.0, 0.5], &[1, 1, 4]);
        let pred = (&target + 1.0).unwrap();
        let mask = tensor(vec![1.0], &[1, 1]);
        let loss = weighted_masked_mse(&pred, &target, &[1.0, 1.0, 2.0, 2.0], &mask).unwrap();
        assert!((scalar(&loss) - 1.0).abs() < 1e-15);
    }

    fn toy_batch(rng: &mut ChaCha8Rng, lengths: &[usize], d: usize) -> Batch {
        let seqs: Vec<Array2<f64>> = lengths
            .iter()
            .map(|&l| Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
        let texts = vec![TextInput::Vector(vec![]); lengths.len()];
        Batch::new(&views, texts, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn exact_noise_prediction_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = toy_batch(&mut rng, &[3, 5], 4);
        let schedule = make_schedule(10, 1e-3, 0.2).unwrap();
        let eps = gaussian(&[2, 5, 4], &mut rng, DType::F64, &Device::Cpu).unwrap();
        let weights = LossWeights::uniform(4);
        let loss = loss_with(|_, _| Ok(eps.clone()), &schedule, &weights, &batch, &[2, 9], &eps).unwrap();
        assert_eq!(scalar(&loss), 0.0);
        let nan = loss_with(|x, _| Ok((x * f64::NAN)?), &schedule, &weights, &batch, &[2, 9], &eps);
        assert!(matches!(nan, Err(Error::TrainingInstability { .. })));
        let bad_t = loss_with(|_, _| Ok(eps.clone()), &schedule, &weights, &batch, &[0, 11], &eps);
        assert!(bad_t.is_err());
    }

    #[test]
    fn batched_forward_jump_matches_per_sequence_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let schedule = make_schedule(50, 1e-3, 0.2).unwrap();
        let x0 = gaussian(&[3, 4, 2], &mut rng, DType::F64, &Device::Cpu).unwrap();
        let eps = gaussian(&[3, 4, 2], &mut rng, DType::F64, &Device::Cpu).unwrap();
        let t = [1, 25, 50];
        let got = q_sample_batch(&x0, &t, &eps, &schedule).unwrap().to_vec3::<f64>().unwrap();
        let (x0v, ev) = (x0.to_vec3::<f64>().unwrap(), eps.to_vec3::<f64>().unwrap());
        for b in 0..3 {
            let p0 = Array2::from_shape_fn((4, 2), |(i, j)| x0v[b][i][j]);
            let e = Array2::from_shape_fn((4, 2), |(i, j)| ev[b][i][j]);
            let want = q_sample(&p0, t[b], &e, &schedule).unwrap();
            for i in 0..4 {
                for j in 0..2 {
                    assert!((got[b][i][j] - want[[i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_step_sampling_with_zero_denoiser() {
        let schedule = make_schedule(1, 0.1, 0.1).unwrap();
        let x = sample_loop(&schedule, (2, 3, 4), 42, None, DType::F64, &Device::Cpu, |x, t| {
            assert_eq!(t, 1);
            Ok(x.zeros_like()?)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z = gaussian(&[2, 3, 4], &mut rng, DType::F64, &Device::Cpu).unwrap();
        let want = (z / 0.9f64.sqrt()).unwrap();
        let diff = (x - want).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&diff) < 1e-12);
    }

    #[test]
    fn posterior_form_matches_noise_form_without_clipping() {
        let schedule = make_schedule(6, 1e-2, 0.3).unwrap();
        let predict = |x: &Tensor, t: usize| Ok((x.sin()? * (0.2 * t as f64))?);
        let got = sample_loop(&schedule, (2, 3, 2), 9, None, DType::F64, &Device::Cpu, predict).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = gaussian(&[2, 3, 2], &mut rng, DType::F64, &Device::Cpu).unwrap();
        for t in (1..=6).rev() {
            let eps = predict(&x, t).unwrap();
            let coef = schedule.beta_at(t) / (1.0 - schedule.alpha_bar_at(t)).sqrt();
            let mean = ((&x - (eps * coef).unwrap()).unwrap() / schedule.alpha_at(t).sqrt()).unwrap();
            x = if t > 1 {
                (mean + (gaussian(&[2, 3, 2], &mut rng, DType::F64, &Device::Cpu).unwrap() * schedule.beta_at(t).sqrt()).unwrap())
                    .unwrap()
            } else {
                mean
            };
        }
        let diff = (got - x).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&diff) < 1e-10);
    }

    #[test]
    fn clipping_bounds_the_final_estimate() {
        let schedule = make_schedule(20, 1e-3, 0.2).unwrap();
        // A biased predictor implies clean states far outside the data range.
        let x = sample_loop(&schedule, (1, 4, 3), 2, Some(2.0), DType::F64, &Device::Cpu, |x, _| Ok((x * 0.5)?))
            .unwrap();
        let max = scalar(&x.abs().unwrap().max_all().unwrap());
        assert!(max <= 2.0 + 1e-12, "{max}");
    }

    #[test]
    fn sampling_loop_is_seeded() {
        let schedule = make_schedule(5, 1e-2, 0.1).unwrap();
        let run = |seed| {
            sample_loop(&schedule, (1, 2, 3), seed, None, DType::F64, &Device::Cpu, |x, _| Ok((x * 0.1)?))
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn batch_masks_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = toy_batch(&mut rng, &[2, 4], 3);
        assert_eq!(batch.x0.dims(), &[2, 4, 3]);
        assert_eq!(
            batch.mask.to_vec2::<f64>().unwrap(),
            vec![vec![1.0, 1.0, 0.0, 0.0], vec![1.0; 4]]
        );
        let padded = batch.x0.narrow(1, 2, 2).unwrap().narrow(0, 0, 1).unwrap();
        assert_eq!(scalar(&padded.abs().unwrap().sum_all().unwrap()), 0.0);
    }

    #[test]
    fn normalizer_round_trips_and_floors_constant_channels() {
        let a = Array2::from_shape_fn((5, 3), |(i, j)| if j == 2 { 4.0 } else { (i * (j + 1)) as f64 });
        let norm = Normalizer::fit(&[a.view()]).unwrap();
        assert_eq!(norm.std[2], STD_FLOOR);
        let z = norm.normalize(&a.view());
        for j in 0..2 {
            let col = z.column(j);
            assert!(col.mean().unwrap().abs() < 1e-12);
            assert!((col.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-12);
        }
        let back = norm.denormalize(&z.view());
        assert!(back.iter().zip(a.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(Normalizer::fit(&[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalization_round_trips_and_centers(
            values in proptest::collection::vec(-50.0f64..50.0, 12..60),
        ) {
            let rows = values.len() / 3;
            let a = Array2::from_shape_vec((rows, 3), values[..rows * 3].to_vec()).unwrap();
            let norm = Normalizer::fit(&[a.view()]).unwrap();
            let z = norm.normalize(&a.view());
            for col in z.columns() {
                proptest::prop_assert!(col.mean().unwrap().abs() < 1e-9);
            }
            let back = norm.denormalize(&z.view());
            proptest::prop_assert!(back.iter().zip(a.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }
}
