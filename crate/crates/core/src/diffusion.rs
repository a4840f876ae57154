//! Reverse transition, x0-prediction objective, and assembly of the
//! conditioned network input.

use ndarray::Array4;

use crate::data::SubjectVolumes;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::schedule::NoiseSchedule;
use crate::wavelet::{dwt3d, WaveletCoefficients};

/// Current point of a reverse chain. `t == 0` means the chain is finished.
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub x_t: WaveletCoefficients,
    pub t: usize,
}

/// One draw from `p(x_{t-1} | x_t, x̃0) = N(μ_t, β̃_t·I)`, with the caller's
/// standard-normal `noise`. At `t == 1` the variance is zero and the result
/// is exactly `x0_pred`.
pub fn reverse_step(
    x_t: &WaveletCoefficients,
    x0_pred: &WaveletCoefficients,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &WaveletCoefficients,
) -> Result<WaveletCoefficients> {
    x_t.check_same_shape(x0_pred)?;
    x_t.check_same_shape(noise)?;
    let p = schedule.posterior_params(t)?;
    if p.variance == 0.0 && p.coef_xt == 0.0 && p.coef_x0 == 1.0 {
        return Ok(x0_pred.clone());
    }
    let (cx0, cxt) = (p.coef_x0 as f32, p.coef_xt as f32);
    let sd = p.variance.sqrt() as f32;
    let mut data = Array4::zeros(x_t.data.raw_dim());
    ndarray::Zip::from(&mut data)
        .and(&x_t.data)
        .and(&x0_pred.data)
        .and(&noise.data)
        .for_each(|o, &xt, &x0, &n| *o = cx0 * x0 + cxt * xt + sd * n);
    Ok(WaveletCoefficients { data })
}

/// Mean squared error over all coefficient entries.
///
/// This is the squared L2 norm divided by the number of entries, so loss
/// values are comparable across volume sizes.
pub fn training_loss(x0_pred: &WaveletCoefficients, x0_true: &WaveletCoefficients) -> Result<f64> {
    x0_pred.check_same_shape(x0_true)?;
    if x0_pred.data.is_empty() {
        return Err(Error::Shape("loss of empty tensors".into()));
    }
    let sum: f64 = x0_pred
        .data
        .iter()
        .zip(x0_true.data.iter())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok(sum / x0_pred.data.len() as f64)
}

/// `DWT(C1) ⊕ DWT(C2) ⊕ DWT(C3)` in the given order.
pub fn condition_stack(
    subject: &SubjectVolumes,
    order: &[Modality],
) -> Result<WaveletCoefficients> {
    let parts = order
        .iter()
        .map(|&m| dwt3d(subject.get(m)?))
        .collect::<Result<Vec<_>>>()?;
    WaveletCoefficients::concat(&parts.iter().collect::<Vec<_>>())
}

/// Builds the network input `X_t = q_sample(x0, t, noise) ⊕ c` and the
/// regression target `x0 = DWT(target volume)`.
pub fn training_step_inputs(
    subject: &SubjectVolumes,
    target: Modality,
    t: usize,
    noise: &WaveletCoefficients,
    schedule: &NoiseSchedule,
) -> Result<(WaveletCoefficients, WaveletCoefficients)> {
    for m in Modality::ALL {
        if !subject.volumes.contains_key(&m) {
            return Err(Error::Data(format!(
                "training subject {} lacks {m}",
                subject.subject_id
            )));
        }
    }
    let x0 = dwt3d(subject.get(target)?)?;
    let cond = condition_stack(subject, &target.condition_order())?;
    let x_t = schedule.q_sample(&x0, t, noise)?;
    Ok((WaveletCoefficients::concat(&[&x_t, &cond])?, x0))
}
