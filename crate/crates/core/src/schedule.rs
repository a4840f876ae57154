//! Variance schedules and the Gaussian posterior of the forward process.
//!
//! Timesteps are 1-based. Index 0 of every table holds the "no noise" state:
//! `alpha_bar(0) == 1`, `one_minus_alpha_bar(0) == 0`. All tables are f64;
//! values are cast to f32 only when applied to coefficient tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavelet::WaveletCoefficients;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::Config(format!("unknown schedule kind {s:?}"))),
        }
    }
}

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip for cosine-schedule betas.
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    /// Ignored by the cosine schedule.
    pub beta_start: f64,
    /// Ignored by the cosine schedule.
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if self.kind == ScheduleKind::Linear
            && !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0)
        {
            return Err(Error::Config(format!(
                "linear schedule needs 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }
}

/// Weights of the posterior `q(x_{t-1} | x_t, x0) = N(coef_x0·x0 + coef_xt·x_t, variance·I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorParams {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    one_minus_alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        params.validate()?;
        let t_max = params.timesteps;
        let mut betas = vec![0.0; t_max + 1];
        match params.kind {
            ScheduleKind::Linear => {
                for (t, beta) in betas.iter_mut().enumerate().skip(1) {
                    *beta = if t_max == 1 {
                        params.beta_start
                    } else {
                        params.beta_start
                            + (t - 1) as f64 / (t_max - 1) as f64
                                * (params.beta_end - params.beta_start)
                    };
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                for (t, beta) in betas.iter_mut().enumerate().skip(1) {
                    *beta = (1.0 - f(t) / f(t - 1)).min(COSINE_MAX_BETA);
                }
            }
        }

        let mut alpha_bars = vec![1.0; t_max + 1];
        // 1 - alpha_bar is accumulated directly so that it equals beta_1
        // exactly at t = 1; the posterior at t = 1 then collapses onto x0.
        let mut one_minus_alpha_bars = vec![0.0; t_max + 1];
        let mut posterior_variances = vec![0.0; t_max + 1];
        for t in 1..=t_max {
            alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t]);
            one_minus_alpha_bars[t] = one_minus_alpha_bars[t - 1] + alpha_bars[t - 1] * betas[t];
            posterior_variances[t] =
                one_minus_alpha_bars[t - 1] / one_minus_alpha_bars[t] * betas[t];
        }
        Ok(Self {
            params,
            betas,
            alpha_bars,
            one_minus_alpha_bars,
            posterior_variances,
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn timesteps(&self) -> usize {
        self.params.timesteps
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Timestep {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// Panics for `t` outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1, "beta is defined for t >= 1");
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Defined for `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus_alpha_bars[t]
    }

    /// Posterior variance `β̃_t`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        assert!(t >= 1, "beta_tilde is defined for t >= 1");
        self.posterior_variances[t]
    }

    pub fn posterior_params(&self, t: usize) -> Result<PosteriorParams> {
        self.check_t(t)?;
        let denom = self.one_minus_alpha_bars[t];
        Ok(PosteriorParams {
            coef_x0: self.alpha_bars[t - 1].sqrt() * self.betas[t] / denom,
            coef_xt: (1.0 - self.betas[t]).sqrt() * self.one_minus_alpha_bars[t - 1] / denom,
            variance: self.posterior_variances[t],
        })
    }

    /// Closed-form forward marginal `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn q_sample(
        &self,
        x0: &WaveletCoefficients,
        t: usize,
        noise: &WaveletCoefficients,
    ) -> Result<WaveletCoefficients> {
        self.check_t(t)?;
        x0.check_same_shape(noise)?;
        let a = self.alpha_bars[t].sqrt() as f32;
        let b = self.one_minus_alpha_bars[t].sqrt() as f32;
        let mut data = x0.data.clone();
        data.zip_mut_with(&noise.data, |x, &n| *x = a * *x + b * n);
        Ok(WaveletCoefficients { data })
    }
}
