//! Linear variance schedule, the closed-form forward jump and channel loss
//! weights.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use signmotion_core::kinematics::StateLayout;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// 1000 steps over [1e-4, 0.02].
    pub fn standard() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    /// 100 steps over [1e-3, 0.2]: the same total noise as the standard
    /// schedule in a tenth of the steps.
    pub fn short() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::short()
    }
}

/// Per-step noise amounts. Index `t - 1` holds step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("at least one step is required".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn from_config(config: ScheduleConfig) -> Result<Self> {
        make_schedule(config.steps, config.beta_start, config.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

/// `sqrt(alpha_bar_t) * p0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample(p0: &Array2<f64>, t: usize, eps: &Array2<f64>, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
    schedule.check(t)?;
    if p0.dim() != eps.dim() {
        return Err(Error::InvalidConfig(format!(
            "state {:?} and noise {:?} differ in shape",
            p0.dim(),
            eps.dim()
        )));
    }
    let ab = schedule.alpha_bar_at(t);
    Ok(p0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Per-channel loss weights: hand pose channels count double.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub weights: Vec<f64>,
}

impl LossWeights {
    pub fn for_layout(layout: &StateLayout, hand_factor: f64) -> Self {
        let hand = layout.hand_range();
        Self {
            weights: (0..layout.dim())
                .map(|c| if hand.contains(&c) { hand_factor } else { 1.0 })
                .collect(),
        }
    }

    pub fn uniform(dim: usize) -> Self {
        Self {
            weights: vec![1.0; dim],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn small_schedules() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(s.alpha_bar[0], 0.9, epsilon = 1e-15);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert_abs_diff_eq!(s.alpha_bar[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bar[1], 0.72, epsilon = 1e-15);
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn standard_schedule_matches_log_space_product() {
        let s = NoiseSchedule::from_config(ScheduleConfig::standard()).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        // Independent route: accumulate log(1 - beta) with ln_1p.
        let log: f64 = (0..1000)
            .map(|i| (-(1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln_1p())
            .sum();
        assert!((s.alpha_bar[999] - log.exp()).abs() <= 1e-12 * log.exp().max(1e-300) + 1e-15);
        for t in 1..=1000 {
            let expected: f64 = s.alpha[..t].iter().product();
            assert!((s.alpha_bar_at(t) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn short_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::from_config(ScheduleConfig::short()).unwrap();
        assert!(s.alpha_bar_at(100) < 1e-3);
    }

    #[test]
    fn q_sample_examples() {
        let mut s = make_schedule(3, 0.1, 0.3).unwrap();
        let p0 = Array2::from_elem((2, 3), 1.0);
        let eps = Array2::from_elem((2, 3), 1.0);
        s.alpha_bar[1] = 0.64;
        let out = q_sample(&p0, 2, &eps, &s).unwrap();
        assert!(out.iter().all(|v| (v - 1.4).abs() < 1e-12));
        s.alpha_bar[0] = 1.0;
        assert_eq!(q_sample(&p0, 1, &eps, &s).unwrap(), p0);
        let zero = Array2::zeros((2, 3));
        let out = q_sample(&p0, 3, &zero, &s).unwrap();
        assert!(out.iter().all(|v| (v - s.alpha_bar[2].sqrt()).abs() < 1e-15));
        assert!(q_sample(&p0, 0, &eps, &s).is_err());
        assert!(q_sample(&p0, 4, &eps, &s).is_err());
    }

    #[test]
    fn hand_channels_weigh_double() {
        let layout = StateLayout {
            body_joints: 8,
            hand_joints: 8,
            expression: 10,
            translation: false,
        };
        let w = LossWeights::for_layout(&layout, 2.0);
        let hand: f64 = w.weights[layout.hand_range()].iter().sum();
        let body: f64 = w.weights[layout.body_range()].iter().sum();
        let (nh, nb) = (layout.hand_range().len() as f64, layout.body_range().len() as f64);
        assert_eq!(hand, 2.0 * (nh / nb) * body);
        assert!(w.weights.iter().all(|&x| x > 0.0));
    }

    proptest::proptest! {
        #[test]
        fn valid_schedules_decay_monotonically(
            steps in 1usize..400,
            start in 1e-5f64..0.1,
            span in 0.0f64..0.5,
        ) {
            let end = (start + span).min(0.99);
            let s = make_schedule(steps, start, end).unwrap();
            proptest::prop_assert!(s.beta.windows(2).all(|w| w[1] >= w[0]));
            proptest::prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            proptest::prop_assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
        }

        #[test]
        fn q_sample_preserves_unit_second_moment(t in 1usize..=100, x in -3.0f64..3.0, e in -3.0f64..3.0) {
            // For x0 and eps with equal magnitude the combination is a rotation.
            let s = NoiseSchedule::from_config(ScheduleConfig::short()).unwrap();
            let ab = s.alpha_bar_at(t);
            let out = q_sample(&Array2::from_elem((1, 1), x), t, &Array2::from_elem((1, 1), e), &s).unwrap()[[0, 0]];
            proptest::prop_assert!((out - (ab.sqrt() * x + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
            let rotated = (1.0 - ab).sqrt() * x - ab.sqrt() * e;
            proptest::prop_assert!((out * out + rotated * rotated - (x * x + e * e)).abs() < 1e-9);
        }
    }
}
