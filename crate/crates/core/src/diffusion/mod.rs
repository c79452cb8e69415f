//! Conditional denoising diffusion over cascaded channel vectors.
//!
//! Index convention: level `k` in `0..K` is the state after `β_0..β_k` have
//! been applied, so `x_k = √ᾱ_k·x_0 + √(1-ᾱ_k)·ε` and the reverse step from
//! level `k` uses `β_k`, `ᾱ_k` and `Σ_k`. The data itself sits below level 0.

mod model;
mod unet;

pub use model::{
    dm_loss, dm_train_step, predict_noise, reverse_sample, reverse_sample_from, DiffusionConfig,
    DiffusionModel, NoisePredictor,
};
pub use unet::{UNet, UNetConfig};

use serde::{Deserialize, Serialize};

use crate::channel::C64;
use crate::error::{D2tError, Result};

/// Linear-β DDPM schedule with precomputed products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// `Σ_k = (1-ᾱ_{k-1})/(1-ᾱ_k)·β_k` with `ᾱ_{-1} = 1`.
    pub posterior_var: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(steps, beta_min, beta_max)
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(D2tError::Config("diffusion needs at least one step".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(D2tError::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min} and {beta_max}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            (0..steps)
                .map(|k| beta_min + (beta_max - beta_min) * k as f64 / (steps - 1) as f64)
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    /// Any β sequence in `(0, 1)`; used by tests with hand-picked values.
    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_var = (0..betas.len())
            .map(|k| {
                let prev = if k == 0 { 1.0 } else { alpha_bars[k - 1] };
                let denom = 1.0 - alpha_bars[k];
                if denom > 0.0 {
                    ((1.0 - prev) / denom * betas[k]).max(0.0)
                } else {
                    0.0
                }
            })
            .collect();
        DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
            posterior_var,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ` after the last forward step.
    pub fn terminal_alpha_bar(&self) -> f64 {
        *self.alpha_bars.last().expect("non-empty schedule")
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps() {
            return Err(D2tError::StepOutOfRange {
                k,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

/// One forward step `√(1-β_k)·x + √β_k·ε`.
pub fn forward_noise(
    x: &[f64],
    k: usize,
    eps: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    same_len(x, eps)?;
    let (a, b) = (schedule.alphas[k].sqrt(), schedule.betas[k].sqrt());
    Ok(x.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Level `k` directly from data: `√ᾱ_k·x_0 + √(1-ᾱ_k)·ε̄`.
pub fn forward_noise_closed(
    x0: &[f64],
    k: usize,
    eps: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    same_len(x0, eps)?;
    let ab = schedule.alpha_bars[k];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(D2tError::Shape(format!(
            "vector lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// A cascaded channel as a real vector (real parts then imaginary parts,
/// row-major over `H`) divided by `scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVector {
    pub x: Vec<f64>,
    pub scale: f64,
}

impl ChannelVector {
    pub fn from_channel(h: &[C64], scale: f64) -> Self {
        let mut x = channel_to_vector(h);
        x.iter_mut().for_each(|v| *v /= scale);
        ChannelVector { x, scale }
    }

    pub fn to_channel(&self) -> Result<Vec<C64>> {
        let raw: Vec<f64> = self.x.iter().map(|v| v * self.scale).collect();
        vector_to_channel(&raw)
    }
}

pub fn channel_to_vector(h: &[C64]) -> Vec<f64> {
    h.iter()
        .map(|c| c.re)
        .chain(h.iter().map(|c| c.im))
        .collect()
}

pub fn vector_to_channel(x: &[f64]) -> Result<Vec<C64>> {
    if !x.len().is_multiple_of(2) {
        return Err(D2tError::Shape(format!(
            "channel vector length {} is odd",
            x.len()
        )));
    }
    let half = x.len() / 2;
    Ok((0..half).map(|i| C64::new(x[i], x[half + i])).collect())
}

/// Root-mean-square over every coordinate of every vector; 1 for empty or
/// all-zero data.
pub fn rms_scale<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let (s, c) = vectors
        .into_iter()
        .flat_map(|v| v.iter())
        .fold((0.0, 0usize), |(s, c), x| (s + x * x, c + 1));
    let r = if c == 0 { 0.0 } else { (s / c as f64).sqrt() };
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

/// Mixing of conditional and null-condition noise predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub eta: f64,
    /// Train with condition dropout instead of mixing inside the loss.
    pub cfg_dropout: bool,
    pub dropout_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            eta: 0.8,
            cfg_dropout: false,
            dropout_prob: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(D2tError::Config(format!(
                "eta must be finite and >= 0, got {}",
                self.eta
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(D2tError::Config("dropout_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `η·ε̂_cond + (1-η)·ε̂_uncond`.
pub fn guided_noise(cond: &[f64], uncond: &[f64], eta: f64) -> Result<Vec<f64>> {
    same_len(cond, uncond)?;
    if eta == 1.0 {
        return Ok(cond.to_vec());
    }
    if eta == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| eta * c + (1.0 - eta) * u)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_beta_products() {
        let s = DiffusionSchedule::new(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.81).abs() < 1e-15);
        assert_eq!(s.posterior_var[0], 0.0);
        // Σ_1 = (1 - 0.9)/(1 - 0.81)·0.1
        assert!((s.posterior_var[1] - 0.1 / 0.19 * 0.1).abs() < 1e-15);
    }

    #[test]
    fn paper_schedule_terminal_value() {
        let s = DiffusionSchedule::new(500, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 500);
        assert!((s.betas[0] - 1e-4).abs() < 1e-18 && (s.betas[499] - 0.02).abs() < 1e-15);
        // Independent oracle: log-sum of (1 - β) with β linearly spaced.
        let log: f64 = (0..500)
            .map(|k| (1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 499.0)).ln())
            .sum();
        assert!((s.terminal_alpha_bar() - log.exp()).abs() < 1e-12);
        assert!((s.terminal_alpha_bar() - 6.3527e-3).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(DiffusionSchedule::new(10, 0.0, 0.1).is_err());
        assert!(DiffusionSchedule::new(10, 0.2, 0.1).is_err());
        assert!(DiffusionSchedule::new(10, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::new(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn zero_beta_step_is_identity() {
        let s = DiffusionSchedule::from_betas(vec![0.0, 0.5]);
        let x = vec![1.5, -2.0];
        assert_eq!(forward_noise(&x, 0, &[7.0, 7.0], &s).unwrap(), x);
        assert!(forward_noise(&x, 2, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn zero_data_variance() {
        let s = DiffusionSchedule::new(50, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 20;
        let draws = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let e: f64 = StandardNormal.sample(&mut rng);
            let x = forward_noise_closed(&[0.0], k, &[e], &s).unwrap()[0];
            s1 += x;
            s2 += x * x;
        }
        let var = 1.0 - s.alpha_bars[k];
        let mean = s1 / draws as f64;
        let v = s2 / draws as f64 - mean * mean;
        // Sample variance has std ≈ var·√(2/n).
        assert!((v - var).abs() < 3.0 * var * (2.0 / draws as f64).sqrt());
        assert!(mean.abs() < 3.0 * (var / draws as f64).sqrt());
    }

    #[test]
    fn vector_round_trip_and_shape() {
        let h: Vec<C64> = (0..64)
            .map(|i| C64::new(i as f64 * 1e-5, -(i as f64) * 3e-6))
            .collect();
        let v = ChannelVector::from_channel(&h, 2.7e-4);
        assert_eq!(v.x.len(), 128);
        let back = v.to_channel().unwrap();
        for (a, b) in h.iter().zip(&back) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(channel_to_vector(&[C64::new(0.0, 0.0); 3])
            .iter()
            .all(|&x| x == 0.0));
        assert!(vector_to_channel(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn rms_of_empty_is_one() {
        assert_eq!(rms_scale(std::iter::empty::<&[f64]>()), 1.0);
        let a = [3.0, 4.0];
        assert!((rms_scale([&a[..]]) - (12.5f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn guidance_examples() {
        assert_eq!(
            guided_noise(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            guided_noise(&[1.0, 2.0], &[3.0, 4.0], 1.0).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            guided_noise(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(),
            vec![3.0, 4.0]
        );
        assert!(guided_noise(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(steps in 1usize..300, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
            let hi = (lo + span).min(0.999);
            let s = DiffusionSchedule::new(steps, lo, hi).unwrap();
            for k in 0..steps {
                prop_assert!(s.betas[k] > 0.0 && s.betas[k] < 1.0);
                prop_assert!(s.posterior_var[k] >= 0.0);
                if k > 0 {
                    prop_assert!(s.betas[k] >= s.betas[k - 1]);
                    prop_assert!(s.alpha_bars[k] < s.alpha_bars[k - 1]);
                }
            }
        }

        #[test]
        fn guidance_is_affine(c in prop::collection::vec(-5.0f64..5.0, 3), u in prop::collection::vec(-5.0f64..5.0, 3), eta in 0.0f64..1.5) {
            let g = guided_noise(&c, &u, eta).unwrap();
            for i in 0..3 {
                prop_assert!((g[i] - (u[i] + eta * (c[i] - u[i]))).abs() < 1e-12);
            }
        }
    }
}
