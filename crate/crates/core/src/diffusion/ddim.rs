//! Deterministic (eta = 0) DDIM sampling and inversion.
//!
//! With `S` steps over a `T`-step schedule the visited timesteps are
//! `tau_i = floor(i * T / S)` for `i = 0..=S`, where `tau_0 = 0` is the clean
//! latent. Both directions query the predictor at the noisier timestep of
//! each pair, so a sample step exactly undoes an inversion step whenever the
//! prediction does not depend on the latent.

use serde::{Deserialize, Serialize};

use super::latent::Latent;
use super::model::{NoisePredictor, Prompt};
use super::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Which update the inversion uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionForm {
    /// Standard DDIM inversion written with cumulative `alpha_bar`.
    #[default]
    Standard,
    /// The per-step form
    /// `z_t = sqrt(a_t) z_{t-1} + (sqrt(1 - a_t) - sqrt((1 - a_t) / a_{t-1})) eps`
    /// with `a_t = 1 - beta_t`. Kept for comparison; it does not invert
    /// [`ddim_sample`].
    Literal,
}

/// `tau_0 = 0 < tau_1 < ... < tau_S = T`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps > total {
        return Err(Error::invalid(format!(
            "{steps} DDIM steps exceed the {total}-step schedule"
        )));
    }
    if steps == 0 {
        return Ok(vec![0]);
    }
    Ok((0..=steps).map(|i| i * total / steps).collect())
}

fn checked(z: Latent, phase: &'static str, timestep: usize) -> Result<Latent> {
    if z.is_finite() {
        Ok(z)
    } else {
        Err(Error::NonFinite { phase, timestep })
    }
}

/// Runs the sampler from `z_T` down to an estimate of `z_0`.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    z_t: &Latent,
    prompt: &Prompt,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Latent> {
    let taus = ddim_timesteps(sched.len(), steps)?;
    let mut z = z_t.clone();
    for i in (1..taus.len()).rev() {
        let (t, prev) = (taus[i], taus[i - 1]);
        let eps = model.predict_noise(&z, t, prompt)?;
        z.check_same_shape(&eps)?;
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(prev));
        let x0 = z.lincomb(1.0 / ab.sqrt(), &eps, -(1.0 - ab).sqrt() / ab.sqrt());
        z = checked(x0.lincomb(ab_prev.sqrt(), &eps, (1.0 - ab_prev).sqrt()), "sampling", t)?;
    }
    Ok(z)
}

/// Maps a clean latent to its noisy counterpart at `T` by running the
/// update in increasing timestep order.
pub fn ddim_invert<P: NoisePredictor + ?Sized>(
    model: &P,
    z0: &Latent,
    prompt: &Prompt,
    sched: &NoiseSchedule,
    steps: usize,
    form: InversionForm,
) -> Result<Latent> {
    let taus = ddim_timesteps(sched.len(), steps)?;
    let mut z = z0.clone();
    for i in 1..taus.len() {
        let (prev, t) = (taus[i - 1], taus[i]);
        let eps = model.predict_noise(&z, t, prompt)?;
        z.check_same_shape(&eps)?;
        z = match form {
            InversionForm::Standard => {
                let (ab_prev, ab) = (sched.alpha_bar(prev), sched.alpha_bar(t));
                let x0 = z.lincomb(1.0 / ab_prev.sqrt(), &eps, -(1.0 - ab_prev).sqrt() / ab_prev.sqrt());
                x0.lincomb(ab.sqrt(), &eps, (1.0 - ab).sqrt())
            }
            InversionForm::Literal => {
                let (a, a_prev) = (sched.alpha(t), sched.alpha(prev));
                let coef = (1.0 - a).sqrt() - ((1.0 - a) / a_prev).sqrt();
                z.lincomb(a.sqrt(), &eps, coef)
            }
        };
        z = checked(z, "inversion", t)?;
    }
    Ok(z)
}
