//! Instance-preserving action editing.
//!
//! Stage 1 treats the selected frames as unordered images and learns the
//! instance token together with the spatial layers, while reconstructing
//! generic class images under the class prompt. Stage 2 freezes everything
//! learned so far and fits only the temporal layers to the moment. Editing
//! inverts the moment under its source prompt and samples it back under the
//! edit prompt.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddim_invert, ddim_sample, sgd_step, DenoiserModel, Encoder, InversionForm, Latent, NoiseDraw,
    NoiseSchedule, Objective, ParamGroup, Prompt,
};
use crate::{Error, FrameSequence, Result};

pub const INSTANCE_TOKEN: &str = "[v]";

const STAGE1_TRAINABLE: &[ParamGroup] = &[ParamGroup::Spatial, ParamGroup::Token];
const STAGE2_TRAINABLE: &[ParamGroup] = &[ParamGroup::Temporal];

/// Inserts the instance token in front of `subject` ("a person opens" ->
/// "a [v] person opens"), or prefixes `token subject` when absent.
pub fn instance_prompt(query: &str, token: &str, subject: &str) -> String {
    let mut out = Vec::new();
    let mut found = false;
    for w in query.split_whitespace() {
        let bare: String = w.chars().filter(|c| c.is_alphanumeric()).collect();
        if !found && bare.eq_ignore_ascii_case(subject) {
            out.push(token.to_string());
            found = true;
        }
        out.push(w.to_string());
    }
    if found {
        out.join(" ")
    } else {
        format!("{token} {subject} {query}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fixed noise draws used to measure the objective before and after.
    #[serde(default = "default_eval_draws")]
    pub eval_draws: usize,
}

fn default_eval_draws() -> usize {
    16
}

impl TrainConfig {
    pub fn new(steps: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            steps,
            learning_rate,
            seed,
            eval_draws: default_eval_draws(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.eval_draws == 0 {
            return Err(Error::invalid("eval_draws must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Objective at every step, on that step's random draw.
    pub losses: Vec<f64>,
    /// Mean objective over the fixed evaluation draws, before training.
    pub initial_eval: f64,
    /// Same, after training.
    pub final_eval: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub instance_frames: FrameSequence,
    pub class_images: FrameSequence,
    pub instance_prompt: String,
    pub class_prompt: String,
}

impl TrainingBatch {
    fn validate(&self) -> Result<()> {
        if self.instance_frames.is_empty() {
            return Err(Error::invalid("stage 1 needs instance frames"));
        }
        if self.class_images.is_empty() {
            return Err(Error::invalid("stage 1 needs class images for prior preservation"));
        }
        if self.instance_frames.shape() != self.class_images.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.instance_frames.shape()),
                got: format!("{:?}", self.class_images.shape()),
            });
        }
        Ok(())
    }
}

/// Instance-reconstruction term plus class prior-preservation term, with
/// equal weight, for one pair of single-image draws.
pub fn idl_objective(
    instance: Latent,
    instance_prompt: &Prompt,
    instance_draw: NoiseDraw,
    class: Latent,
    class_prompt: &Prompt,
    class_draw: NoiseDraw,
) -> Objective {
    Objective::new()
        .term(instance, instance_prompt.clone(), instance_draw, 1.0)
        .term(class, class_prompt.clone(), class_draw, 1.0)
}

/// Temporal-encoding objective for a clip. All frames share `t`; the squared
/// error is averaged over frames (and elements within a frame).
pub fn te_objective(clip: Latent, prompt: &Prompt, draw: NoiseDraw) -> Objective {
    Objective::new().term(clip, prompt.clone(), draw, 1.0)
}

/// Per-frame noise-prediction errors of one clip prediction; their mean is
/// the temporal-encoding loss.
pub fn te_per_frame_losses(
    model: &DenoiserModel,
    clip: &Latent,
    prompt: &Prompt,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    use crate::diffusion::{forward_noise, NoisePredictor};
    let z_t = forward_noise(clip, draw.t, &draw.eps, sched)?;
    let pred = model.predict_noise(&z_t, draw.t, prompt)?;
    Ok((0..clip.frames())
        .map(|f| {
            let p = pred.frame_slice(f);
            let e = draw.eps.frame_slice(f);
            p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
        })
        .collect())
}

fn stage1_pair(
    rng: &mut impl Rng,
    inst: &Latent,
    class: &Latent,
    sched: &NoiseSchedule,
) -> (usize, NoiseDraw, usize, NoiseDraw) {
    let shape = inst.frame(0).shape();
    let i = rng.random_range(0..inst.frames());
    let di = NoiseDraw::sample(shape, sched, rng);
    let c = rng.random_range(0..class.frames());
    let dc = NoiseDraw::sample(shape, sched, rng);
    (i, di, c, dc)
}

fn mean(xs: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let v = xs.collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Stage 1: learns the instance token and spatial layers. Temporal
/// parameters are never touched.
pub fn train_stage1(
    mut model: DenoiserModel,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
    encoder: &Encoder,
    cfg: &TrainConfig,
) -> Result<(DenoiserModel, TrainReport)> {
    batch.validate()?;
    cfg.validate()?;
    let p_inst = Prompt::new(&batch.instance_prompt);
    let p_class = Prompt::new(&batch.class_prompt);
    let tokens: Vec<String> = p_inst.instance_tokens().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(Error::invalid(format!(
            "instance prompt `{}` has no bracketed instance token",
            batch.instance_prompt
        )));
    }
    if cfg.steps == 0 {
        // nothing to fit; the model is returned untouched
        return Ok((model, TrainReport::default()));
    }
    for t in &tokens {
        model.add_token(t)?;
    }
    let inst = encoder.encode(&batch.instance_frames)?;
    let class = encoder.encode(&batch.class_images)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    let eval_set: Vec<_> = (0..cfg.eval_draws)
        .map(|_| stage1_pair(&mut eval_rng, &inst, &class, sched))
        .collect();
    let evaluate = |m: &DenoiserModel| {
        mean(eval_set.iter().map(|(i, di, c, dc)| {
            idl_objective(inst.frame(*i), &p_inst, di.clone(), class.frame(*c), &p_class, dc.clone())
                .evaluate(m, sched, &[])
                .map(|o| o.loss)
        }))
    };

    let initial_eval = evaluate(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (i, di, c, dc) = stage1_pair(&mut rng, &inst, &class, sched);
        let out = idl_objective(inst.frame(i), &p_inst, di, class.frame(c), &p_class, dc)
            .evaluate(&model, sched, STAGE1_TRAINABLE)
            .map_err(|e| at_step(e, step))?;
        sgd_step(&mut model, &out.grads, cfg.learning_rate)?;
        losses.push(out.loss);
    }
    let final_eval = evaluate(&model).map_err(|e| at_step(e, cfg.steps))?;
    Ok((
        model,
        TrainReport {
            losses,
            initial_eval,
            final_eval,
        },
    ))
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { loss, .. } => Error::Divergence { step, loss },
        other => other,
    }
}

/// Stage 2: fits only the temporal layers to a moment. Spatial parameters
/// and the token table are bit-identical afterwards.
pub fn train_stage2(
    mut model: DenoiserModel,
    frames: &FrameSequence,
    prompt: &str,
    sched: &NoiseSchedule,
    encoder: &Encoder,
    cfg: &TrainConfig,
) -> Result<(DenoiserModel, TrainReport)> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::invalid("stage 2 needs at least one frame"));
    }
    let p = Prompt::new(prompt);
    for t in p.instance_tokens() {
        if !model.has_token(t) {
            return Err(Error::UnknownToken(t.to_string()));
        }
    }
    if model.tokens().next().is_none() {
        return Err(Error::invalid("stage 2 expects a model that completed stage 1"));
    }
    if cfg.steps == 0 {
        return Ok((model, TrainReport::default()));
    }
    let clip = encoder.encode(frames)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e3f_0a11);
    let eval_set: Vec<NoiseDraw> = (0..cfg.eval_draws)
        .map(|_| NoiseDraw::sample(clip.shape(), sched, &mut eval_rng))
        .collect();
    let evaluate = |m: &DenoiserModel| {
        mean(eval_set.iter().map(|d| {
            te_objective(clip.clone(), &p, d.clone())
                .evaluate(m, sched, &[])
                .map(|o| o.loss)
        }))
    };

    let initial_eval = evaluate(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draw = NoiseDraw::sample(clip.shape(), sched, &mut rng);
        let out = te_objective(clip.clone(), &p, draw)
            .evaluate(&model, sched, STAGE2_TRAINABLE)
            .map_err(|e| at_step(e, step))?;
        sgd_step(&mut model, &out.grads, cfg.learning_rate)?;
        losses.push(out.loss);
    }
    let final_eval = evaluate(&model).map_err(|e| at_step(e, cfg.steps))?;
    Ok((
        model,
        TrainReport {
            losses,
            initial_eval,
            final_eval,
        },
    ))
}

/// Which prompt conditions the inversion half of an edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionPrompt {
    #[default]
    Source,
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditOptions {
    pub inversion_prompt: InversionPrompt,
    pub form: InversionForm,
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub moment: FrameSequence,
    pub source_prompt: String,
    pub edit_prompt: String,
    pub inversion_steps: usize,
    pub sampling_steps: usize,
}

impl EditRequest {
    fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.moment.is_empty() {
            return Err(Error::invalid("cannot edit an empty moment"));
        }
        if self.source_prompt.trim().is_empty() || self.edit_prompt.trim().is_empty() {
            return Err(Error::invalid("edit prompts must be nonempty"));
        }
        for (name, s) in [("inversion", self.inversion_steps), ("sampling", self.sampling_steps)] {
            if s == 0 || s > sched.len() {
                return Err(Error::invalid(format!(
                    "{name} steps {s} outside 1..={}",
                    sched.len()
                )));
            }
        }
        Ok(())
    }
}

/// Inverts the moment under the source (or null) prompt, then samples it
/// back under the edit prompt. Output has the input's frame count and size.
pub fn edit_moment(
    model: &DenoiserModel,
    req: &EditRequest,
    sched: &NoiseSchedule,
    encoder: &Encoder,
    opts: &EditOptions,
) -> Result<FrameSequence> {
    req.validate(sched)?;
    let source = Prompt::new(&req.source_prompt);
    let edit = Prompt::new(&req.edit_prompt);
    for t in source.instance_tokens().chain(edit.instance_tokens()) {
        if !model.has_token(t) {
            return Err(Error::UnknownToken(t.to_string()));
        }
    }
    let inv_prompt = match opts.inversion_prompt {
        InversionPrompt::Source => source,
        InversionPrompt::Null => Prompt::null(),
    };
    let z0 = encoder.encode(&req.moment)?;
    let z_t = ddim_invert(model, &z0, &inv_prompt, sched, req.inversion_steps, opts.form)?;
    let z = ddim_sample(model, &z_t, &edit, sched, req.sampling_steps)?;
    let out = encoder.decode(&z)?;
    debug_assert_eq!(out.shape(), req.moment.shape());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ModelConfig;
    use crate::Frame;

    fn cfg() -> ModelConfig {
        ModelConfig {
            channels: 1,
            height: 4,
            width: 4,
            patch: 2,
            dim: 4,
            attn_dim: 2,
            time_features: 4,
            max_frames: 4,
            blocks: 1,
            zero_init_temporal: true,
        }
    }

    fn frames(n: usize, k: usize) -> FrameSequence {
        FrameSequence::new(
            (0..n)
                .map(|i| {
                    Frame::gray(4, 4, (0..16).map(|p| ((p * (k + 1) + i) % 5) as f64 / 4.0).collect())
                        .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn batch() -> TrainingBatch {
        TrainingBatch {
            instance_frames: frames(3, 1),
            class_images: frames(2, 3),
            instance_prompt: "a [v] person".into(),
            class_prompt: "a person".into(),
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn instance_prompt_inserts_token() {
        assert_eq!(instance_prompt("a person opens a door", "[v]", "person"), "a [v] person opens a door");
        assert_eq!(instance_prompt("Person sits.", "[v]", "person"), "[v] Person sits.");
        assert_eq!(instance_prompt("someone runs", "[v]", "person"), "[v] person someone runs");
    }

    #[test]
    fn zero_steps_leave_model_untouched() {
        let m = DenoiserModel::new(cfg(), 0).unwrap();
        let (m1, _) = train_stage1(m.clone(), &batch(), &sched(), &Encoder::default(), &TrainConfig::new(0, 0.1, 1)).unwrap();
        assert_eq!(m1, m);
        let mut trained = m.clone();
        trained.add_token("[v]").unwrap();
        let (m2, _) = train_stage2(trained.clone(), &frames(3, 0), "a [v] person", &sched(), &Encoder::default(), &TrainConfig::new(0, 0.1, 1)).unwrap();
        assert_eq!(m2, trained);
    }

    #[test]
    fn stage1_freezes_temporal_and_adds_token() {
        let m = DenoiserModel::new(cfg(), 0).unwrap();
        let before = m.checksum(ParamGroup::Temporal);
        let (m1, rep) = train_stage1(m, &batch(), &sched(), &Encoder::default(), &TrainConfig::new(5, 0.05, 1)).unwrap();
        assert_eq!(m1.checksum(ParamGroup::Temporal), before);
        assert!(m1.has_token("[v]"));
        assert_eq!(rep.losses.len(), 5);
    }

    #[test]
    fn stage1_requires_instance_token_and_class_images() {
        let m = DenoiserModel::new(cfg(), 0).unwrap();
        let mut b = batch();
        b.instance_prompt = "a person".into();
        assert!(train_stage1(m.clone(), &b, &sched(), &Encoder::default(), &TrainConfig::new(1, 0.1, 0)).is_err());
        let mut b = batch();
        b.class_images = FrameSequence::default();
        assert!(train_stage1(m, &b, &sched(), &Encoder::default(), &TrainConfig::new(1, 0.1, 0)).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let m = DenoiserModel::new(cfg(), 0).unwrap();
        let err = train_stage1(m, &batch(), &sched(), &Encoder::default(), &TrainConfig::new(50, 1e6, 3)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn negative_learning_rate_is_rejected() {
        let m = DenoiserModel::new(cfg(), 0).unwrap();
        assert!(train_stage1(m, &batch(), &sched(), &Encoder::default(), &TrainConfig::new(1, -0.1, 0)).is_err());
    }

    #[test]
    fn edit_preserves_shape_and_rejects_unknown_tokens() {
        let mut m = DenoiserModel::new(cfg(), 0).unwrap();
        m.add_token("[v]").unwrap();
        let req = EditRequest {
            moment: frames(3, 2),
            source_prompt: "a [v] person sits".into(),
            edit_prompt: "a [v] person jumps".into(),
            inversion_steps: 10,
            sampling_steps: 10,
        };
        let out = edit_moment(&m, &req, &sched(), &Encoder::default(), &EditOptions::default()).unwrap();
        assert_eq!(out.shape(), req.moment.shape());
        assert_eq!(out.len(), 3);
        let bad = EditRequest {
            edit_prompt: "a [w] person".into(),
            ..req.clone()
        };
        assert!(matches!(
            edit_moment(&m, &bad, &sched(), &Encoder::default(), &EditOptions::default()),
            Err(Error::UnknownToken(_))
        ));
        let too_many = EditRequest {
            sampling_steps: 21,
            ..req
        };
        assert!(edit_moment(&m, &too_many, &sched(), &Encoder::default(), &EditOptions::default()).is_err());
    }
}
