//! Noise-prediction objectives and their parameter gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::autograd::Tape;
use super::latent::Latent;
use super::model::{Binder, DenoiserModel, NoisePredictor, ParamGroup, Prompt};
use super::schedule::NoiseSchedule;
use super::tensor::Mat;
use crate::{Error, Result};

/// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(z0: &Latent, t: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    z0.check_same_shape(eps)?;
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    Ok(z0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// One sampled timestep and its Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Latent,
}

pub fn standard_normal(shape: [usize; 4], rng: &mut impl Rng) -> Latent {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Latent::new(shape, data).expect("data sized from shape")
}

impl NoiseDraw {
    /// Uniform `t` in `1..=T`, standard normal noise shaped like the latent.
    pub fn sample(shape: [usize; 4], sched: &NoiseSchedule, rng: &mut impl Rng) -> Self {
        let t = rng.random_range(1..=sched.len());
        let eps = standard_normal(shape, rng);
        Self { t, eps }
    }

    pub fn from_seed(shape: [usize; 4], sched: &NoiseSchedule, seed: u64) -> Self {
        Self::sample(shape, sched, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Mat>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add(&mut self, other: &Gradients) {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.0.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    /// Every coordinate, ordered by parameter name then row-major index.
    pub fn flatten(&self) -> Vec<(String, usize, f64)> {
        self.0
            .iter()
            .flat_map(|(k, m)| m.data.iter().enumerate().map(move |(i, v)| (k.clone(), i, *v)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
}

/// One `||eps - eps_theta(z_t, t, p)||^2` term of a composite objective.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub z0: Latent,
    pub prompt: Prompt,
    pub draw: NoiseDraw,
    pub weight: f64,
}

/// Weighted sum of noise-prediction terms, evaluated on one tape.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    terms: Vec<LossTerm>,
}

impl Objective {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn term(mut self, z0: Latent, prompt: Prompt, draw: NoiseDraw, weight: f64) -> Self {
        self.terms.push(LossTerm {
            z0,
            prompt,
            draw,
            weight,
        });
        self
    }

    pub fn terms(&self) -> &[LossTerm] {
        &self.terms
    }

    /// Loss value and gradients for the parameters in `trainable`.
    pub fn evaluate(
        &self,
        model: &DenoiserModel,
        sched: &NoiseSchedule,
        trainable: &[ParamGroup],
    ) -> Result<LossOutput> {
        if self.terms.is_empty() {
            return Err(Error::invalid("objective has no terms"));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(model, trainable);
        let mut total = None;
        for term in &self.terms {
            let z_t = forward_noise(&term.z0, term.draw.t, &term.draw.eps, sched)?;
            let pred = model.forward(&mut tape, &mut binder, &z_t, term.draw.t, &term.prompt)?;
            let target = model.to_patches(&term.draw.eps);
            let mse = tape.mse(pred, target);
            let weighted = tape.scale(mse, term.weight);
            total = Some(match total {
                None => weighted,
                Some(acc) => tape.add(acc, weighted),
            });
        }
        let root = total.expect("at least one term");
        let loss = tape.value(root).data[0];
        if !loss.is_finite() {
            return Err(Error::Divergence { step: 0, loss });
        }
        let back = tape.backward(root);
        let mut grads = BTreeMap::new();
        for (name, var) in binder.bound() {
            if ParamGroup::of(name).is_some_and(|g| trainable.contains(&g)) {
                let g = back
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(tape.value(*var).rows, tape.value(*var).cols));
                grads.insert(name.clone(), g);
            }
        }
        Ok(LossOutput {
            loss,
            grads: Gradients(grads),
        })
    }
}

/// Seeded latent-diffusion loss: draws `t ~ U{1..T}` and `eps ~ N(0, I)` from
/// `seed` and returns the mean squared noise-prediction error with gradients
/// for the `trainable` groups.
pub fn ldm_loss(
    model: &DenoiserModel,
    z0: &Latent,
    prompt: &Prompt,
    sched: &NoiseSchedule,
    seed: u64,
    trainable: &[ParamGroup],
) -> Result<LossOutput> {
    let draw = NoiseDraw::from_seed(z0.shape(), sched, seed);
    Objective::new()
        .term(z0.clone(), prompt.clone(), draw, 1.0)
        .evaluate(model, sched, trainable)
}

/// Loss value only, for any noise predictor.
pub fn denoising_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z0: &Latent,
    prompt: &Prompt,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let z_t = forward_noise(z0, draw.t, &draw.eps, sched)?;
    let pred = predictor.predict_noise(&z_t, draw.t, prompt)?;
    draw.eps.check_same_shape(&pred)?;
    let n = pred.data().len() as f64;
    let loss = pred
        .data()
        .iter()
        .zip(draw.eps.data())
        .map(|(p, e)| (e - p) * (e - p))
        .sum::<f64>()
        / n;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }
    Ok(loss)
}

/// Plain gradient descent on the parameters present in `grads`.
pub fn sgd_step(model: &mut DenoiserModel, grads: &Gradients, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = model
            .param_mut(name)
            .ok_or_else(|| Error::Missing(name.clone()))?;
        for (w, d) in p.data.iter_mut().zip(&g.data) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ModelConfig;

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, z: &Latent, _: usize, _: &Prompt) -> Result<Latent> {
            Ok(Latent::zeros(z.shape()))
        }
    }

    /// Knows the noise it is asked about.
    struct Perfect(Latent);
    impl NoisePredictor for Perfect {
        fn predict_noise(&self, _: &Latent, _: usize, _: &Prompt) -> Result<Latent> {
            Ok(self.0.clone())
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn forward_noise_closed_form() {
        let s = sched();
        let z0 = Latent::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let eps = Latent::new([1, 1, 1, 1], vec![0.5]).unwrap();
        let t = 4;
        // betas: 1e-4 + k * (2e-2 - 1e-4) / 9
        let ab: f64 = (0..t).map(|k| 1.0 - (1e-4 + k as f64 * (2e-2 - 1e-4) / 9.0)).product();
        let want = ab.sqrt() * 1.0 + (1.0 - ab).sqrt() * 0.5;
        let got = forward_noise(&z0, t, &eps, &s).unwrap();
        assert!((got.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_scales_latent() {
        let s = sched();
        let z0 = Latent::new([1, 1, 1, 2], vec![1.0, -2.0]).unwrap();
        let got = forward_noise(&z0, 3, &Latent::zeros([1, 1, 1, 2]), &s).unwrap();
        let k = s.alpha_bar(3).sqrt();
        assert_eq!(got.data(), &[k, -2.0 * k]);
    }

    #[test]
    fn tiny_betas_leave_latent_nearly_unchanged() {
        let s = NoiseSchedule::linear(10, 1e-9, 1e-8).unwrap();
        let z0 = Latent::new([1, 1, 1, 2], vec![0.3, 0.7]).unwrap();
        let eps = Latent::new([1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
        let got = forward_noise(&z0, 1, &eps, &s).unwrap();
        assert!(got.max_abs_diff(&z0) < 1e-4);
    }

    #[test]
    fn forward_noise_validates() {
        let s = sched();
        let z0 = Latent::zeros([1, 1, 1, 2]);
        assert!(forward_noise(&z0, 0, &z0, &s).is_err());
        assert!(forward_noise(&z0, 11, &z0, &s).is_err());
        assert!(forward_noise(&z0, 1, &Latent::zeros([1, 1, 2, 1]), &s).is_err());
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = sched();
        let z0 = Latent::new([1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let draw = NoiseDraw::from_seed(z0.shape(), &s, 9);
        let p = Perfect(draw.eps.clone());
        assert_eq!(denoising_loss(&p, &z0, &Prompt::null(), &draw, &s).unwrap(), 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_about_one() {
        let s = sched();
        let z0 = Latent::zeros([1, 1, 1, 1]);
        let n = 10_000;
        let mean = (0..n)
            .map(|seed| {
                let draw = NoiseDraw::from_seed(z0.shape(), &s, seed);
                denoising_loss(&Zero, &z0, &Prompt::null(), &draw, &s).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn draws_are_deterministic_per_seed() {
        let s = sched();
        assert_eq!(
            NoiseDraw::from_seed([1, 1, 2, 2], &s, 4),
            NoiseDraw::from_seed([1, 1, 2, 2], &s, 4)
        );
    }

    #[test]
    fn gradients_only_for_trainable_groups() {
        let cfg = ModelConfig {
            height: 4,
            width: 4,
            dim: 4,
            attn_dim: 2,
            time_features: 4,
            max_frames: 4,
            ..ModelConfig::default()
        };
        let m = DenoiserModel::new(cfg, 0).unwrap();
        let z0 = Latent::zeros([2, 1, 4, 4]);
        let out = ldm_loss(&m, &z0, &Prompt::new("a person"), &sched(), 1, &[ParamGroup::Temporal]).unwrap();
        assert!(out.grads.iter().all(|(k, _)| k.starts_with("temporal.")));
        assert!(!out.grads.is_empty());
    }
}
