//! Toy noise-prediction network.
//!
//! Latent frames are cut into `patch x patch` tiles, each tile becomes a token
//! of width `dim`, and every block applies, with residual connections:
//!
//! 1. spatial self-attention among the tiles of one frame,
//! 2. cross-attention from tiles to the prompt token embeddings,
//! 3. temporal attention across frames at the same tile position.
//!
//! Parameters are named `spatial.*`, `temporal.*` or `token.<token>`, which
//! is how the two training stages decide what they may update.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::autograd::{Tape, Var};
use super::latent::Latent;
use super::tensor::Mat;
use crate::text::{is_instance_token, stable_hash, tokenize};
use crate::{Error, Result};

/// Which training stage owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Spatial,
    Temporal,
    Token,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Spatial, ParamGroup::Temporal, ParamGroup::Token];

    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next() {
            Some("spatial") => Some(ParamGroup::Spatial),
            Some("temporal") => Some(ParamGroup::Temporal),
            Some("token") => Some(ParamGroup::Token),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels.
    pub channels: usize,
    /// Latent height and width.
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Token width (also the prompt embedding dimension).
    pub dim: usize,
    /// Query/key/value width inside attention.
    pub attn_dim: usize,
    /// Number of sinusoidal timestep features (even).
    pub time_features: usize,
    /// Longest clip the temporal position table supports.
    pub max_frames: usize,
    pub blocks: usize,
    /// Start temporal attention as an exact pass-through.
    #[serde(default = "default_true")]
    pub zero_init_temporal: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 8,
            width: 8,
            patch: 2,
            dim: 32,
            attn_dim: 16,
            time_features: 8,
            max_frames: 16,
            blocks: 1,
            zero_init_temporal: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("dim", self.dim),
            ("attn_dim", self.attn_dim),
            ("time_features", self.time_features),
            ("max_frames", self.max_frames),
            ("blocks", self.blocks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model {name} must be positive")));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::invalid(format!(
                "patch {} does not divide latent {}x{}",
                self.patch, self.width, self.height
            )));
        }
        if self.time_features % 2 != 0 {
            return Err(Error::invalid("time_features must be even"));
        }
        Ok(())
    }

    /// Tiles per frame.
    pub fn positions(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Values per tile.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// `(name, rows, cols)` of every non-token parameter.
    fn layout(&self) -> Vec<(String, usize, usize)> {
        let (d, a, p) = (self.dim, self.attn_dim, self.patch_dim());
        let mut l = vec![
            ("spatial.in.weight".to_string(), p, d),
            ("spatial.in.bias".to_string(), 1, d),
            ("spatial.pos".to_string(), self.positions(), d),
            ("spatial.time.weight".to_string(), self.time_features, d),
        ];
        for b in 0..self.blocks {
            for part in ["self", "cross"] {
                for proj in ["q", "k", "v"] {
                    l.push((format!("spatial.block{b}.{part}.{proj}"), d, a));
                }
                l.push((format!("spatial.block{b}.{part}.out"), a, d));
            }
            l.push((format!("temporal.block{b}.pos"), self.max_frames, d));
            for proj in ["q", "k", "v"] {
                l.push((format!("temporal.block{b}.{proj}"), d, a));
            }
            l.push((format!("temporal.block{b}.out"), a, d));
        }
        l.push(("spatial.out.weight".to_string(), d, p));
        l.push(("spatial.out.bias".to_string(), 1, p));
        l
    }
}

/// Tokenized prompt. Plain words map to fixed hash-seeded embeddings; the
/// only learnable text embeddings are bracketed instance tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub tokens: Vec<String>,
}

const NULL_TOKEN: &str = "<null>";

impl Prompt {
    pub fn new(text: &str) -> Self {
        Self {
            text: text.to_string(),
            tokens: tokenize(text),
        }
    }

    /// Empty prompt, represented by a single fixed null embedding.
    pub fn null() -> Self {
        Self::new("")
    }

    /// Instance tokens (e.g. `[v]`) referenced by the prompt.
    pub fn instance_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str).filter(|t| is_instance_token(t))
    }
}

/// Fixed embedding for a non-learnable word, roughly unit norm.
pub fn word_embedding(word: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(word));
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// Sinusoidal timestep features.
pub fn time_features(t: usize, k: usize) -> Vec<f64> {
    let half = k / 2;
    let mut out = Vec::with_capacity(k);
    for j in 0..half {
        let freq = (-(1000f64.ln()) * j as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for j in 0..half {
        let freq = (-(1000f64.ln()) * j as f64 / half as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    out
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Latent, t: usize, prompt: &Prompt) -> Result<Latent>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    params: BTreeMap<String, Mat>,
}

impl DenoiserModel {
    /// Randomly initialized model. Projections use `N(0, 1/fan_in)`, biases
    /// start at zero, and the temporal output projection is zero when
    /// `zero_init_temporal` is set.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, rows, cols) in config.layout() {
            let std = if name.ends_with(".bias") {
                0.0
            } else if name.ends_with("pos") {
                0.1
            } else if name.starts_with("temporal.") && name.ends_with(".out") && config.zero_init_temporal {
                0.0
            } else {
                1.0 / (rows as f64).sqrt()
            };
            let data = (0..rows * cols)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect();
            params.insert(name, Mat::from_vec(rows, cols, data));
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named parameters, checking the layout.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Mat>) -> Result<Self> {
        config.validate()?;
        for (name, rows, cols) in config.layout() {
            match params.get(&name) {
                Some(m) if m.rows == rows && m.cols == cols => {}
                Some(m) => {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{name}: {rows}x{cols}"),
                        got: format!("{}x{}", m.rows, m.cols),
                    })
                }
                None => return Err(Error::Missing(name)),
            }
        }
        for (name, m) in &params {
            match ParamGroup::of(name) {
                Some(ParamGroup::Token) => {
                    if m.rows != 1 || m.cols != config.dim {
                        return Err(Error::ShapeMismatch {
                            expected: format!("{name}: 1x{}", config.dim),
                            got: format!("{}x{}", m.rows, m.cols),
                        });
                    }
                }
                Some(_) => {
                    if !config.layout().iter().any(|(n, _, _)| n == name) {
                        return Err(Error::invalid(format!("unexpected parameter {name}")));
                    }
                }
                None => return Err(Error::invalid(format!("parameter {name} has no group"))),
            }
            if !m.is_finite() {
                return Err(Error::invalid(format!("parameter {name} is not finite")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn param_names(&self, group: ParamGroup) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .map(String::as_str)
            .filter(move |n| ParamGroup::of(n) == Some(group))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Mat::len).sum()
    }

    pub fn has_token(&self, token: &str) -> bool {
        self.params.contains_key(&format!("token.{token}"))
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.params.keys().filter_map(|k| k.strip_prefix("token."))
    }

    /// Adds a learnable token initialized from its hashed word embedding.
    /// Existing tokens are left untouched.
    pub fn add_token(&mut self, token: &str) -> Result<()> {
        if !is_instance_token(token) {
            return Err(Error::invalid(format!(
                "learnable tokens are bracketed, got `{token}`"
            )));
        }
        let dim = self.config.dim;
        self.params
            .entry(format!("token.{token}"))
            .or_insert_with(|| Mat::from_vec(1, dim, word_embedding(token, dim)));
        Ok(())
    }

    /// SHA-256 over the names and bit patterns of one parameter group.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.params {
            if ParamGroup::of(name) == Some(group) {
                h.update(name.as_bytes());
                for v in &m.data {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        let [f, c, h, w] = z.shape();
        let cfg = &self.config;
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
            return Err(Error::ShapeMismatch {
                expected: format!("latent {}x{}x{}", cfg.channels, cfg.height, cfg.width),
                got: format!("{c}x{h}x{w}"),
            });
        }
        if f == 0 || f > cfg.max_frames {
            return Err(Error::invalid(format!(
                "clip of {f} frames outside 1..={}",
                cfg.max_frames
            )));
        }
        Ok(())
    }

    fn patchify(&self, z: &Latent) -> Mat {
        let cfg = &self.config;
        let (p, gw) = (cfg.patch, cfg.width / cfg.patch);
        let n = cfg.positions();
        let pd = cfg.patch_dim();
        let frames = z.frames();
        let mut out = Mat::zeros(frames * n, pd);
        for f in 0..frames {
            let src = z.frame_slice(f);
            for pos in 0..n {
                let (py, px) = (pos / gw, pos % gw);
                let row = f * n + pos;
                let mut k = 0;
                for c in 0..cfg.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, x) = (py * p + dy, px * p + dx);
                            out.data[row * pd + k] = src[(c * cfg.height + y) * cfg.width + x];
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    fn unpatchify(&self, m: &Mat, frames: usize) -> Latent {
        let cfg = &self.config;
        let (p, gw) = (cfg.patch, cfg.width / cfg.patch);
        let n = cfg.positions();
        let pd = cfg.patch_dim();
        let mut z = Latent::zeros([frames, cfg.channels, cfg.height, cfg.width]);
        let flen = z.frame_len();
        let data = z.data_mut();
        for f in 0..frames {
            for pos in 0..n {
                let (py, px) = (pos / gw, pos % gw);
                let row = f * n + pos;
                let mut k = 0;
                for c in 0..cfg.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, x) = (py * p + dy, px * p + dx);
                            data[f * flen + (c * cfg.height + y) * cfg.width + x] = m.data[row * pd + k];
                            k += 1;
                        }
                    }
                }
            }
        }
        z
    }

    /// Records the forward pass for a clip on `tape` and returns the node
    /// holding the predicted noise in patch layout (`frames * positions` rows).
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        z_t: &Latent,
        t: usize,
        prompt: &Prompt,
    ) -> Result<Var> {
        self.check_latent(z_t)?;
        let cfg = &self.config;
        let frames = z_t.frames();
        let n = cfg.positions();
        let rows = frames * n;
        let inv_sqrt = 1.0 / (cfg.attn_dim as f64).sqrt();

        let context = self.context(tape, binder, prompt)?;
        let x = tape.constant(self.patchify(z_t));
        let tf = tape.constant(Mat::from_vec(1, cfg.time_features, time_features(t, cfg.time_features)));

        let w_in = binder.get(tape, "spatial.in.weight");
        let b_in = binder.get(tape, "spatial.in.bias");
        let pos = binder.get(tape, "spatial.pos");
        let w_time = binder.get(tape, "spatial.time.weight");

        let mut h = tape.matmul(x, w_in);
        h = tape.add_row(h, b_in);
        let pos_rows = tape.gather_rows(pos, (0..rows).map(|r| r % n).collect());
        h = tape.add(h, pos_rows);
        let temb = tape.matmul(tf, w_time);
        h = tape.add_row(h, temb);
        h = tape.tanh(h);

        // row r = f * n + pos  <->  position-major row pos * frames + f
        let to_pos_major: Vec<usize> = (0..n)
            .flat_map(|pos| (0..frames).map(move |f| f * n + pos))
            .collect();
        let from_pos_major: Vec<usize> = (0..rows)
            .map(|r| (r % n) * frames + r / n)
            .collect();
        let frame_of_pos_major: Vec<usize> = (0..rows).map(|r| r % frames).collect();

        for b in 0..cfg.blocks {
            // spatial self-attention, per frame
            let q = binder.get(tape, &format!("spatial.block{b}.self.q"));
            let k = binder.get(tape, &format!("spatial.block{b}.self.k"));
            let v = binder.get(tape, &format!("spatial.block{b}.self.v"));
            let o = binder.get(tape, &format!("spatial.block{b}.self.out"));
            let attn = attention(tape, h, h, [q, k, v, o], inv_sqrt, n, n);
            h = tape.add(h, attn);

            // cross-attention to the prompt
            let q = binder.get(tape, &format!("spatial.block{b}.cross.q"));
            let k = binder.get(tape, &format!("spatial.block{b}.cross.k"));
            let v = binder.get(tape, &format!("spatial.block{b}.cross.v"));
            let o = binder.get(tape, &format!("spatial.block{b}.cross.out"));
            let ctx_rows = tape.value(context).rows;
            let attn = attention(tape, h, context, [q, k, v, o], inv_sqrt, rows, ctx_rows);
            h = tape.add(h, attn);

            // temporal attention, per tile position
            let tpos = binder.get(tape, &format!("temporal.block{b}.pos"));
            let q = binder.get(tape, &format!("temporal.block{b}.q"));
            let k = binder.get(tape, &format!("temporal.block{b}.k"));
            let v = binder.get(tape, &format!("temporal.block{b}.v"));
            let o = binder.get(tape, &format!("temporal.block{b}.out"));
            let hp = tape.gather_rows(h, to_pos_major.clone());
            let tp = tape.gather_rows(tpos, frame_of_pos_major.clone());
            let xin = tape.add(hp, tp);
            let attn = attention(tape, xin, xin, [q, k, v, o], inv_sqrt, frames, frames);
            let attn = tape.gather_rows(attn, from_pos_major.clone());
            h = tape.add(h, attn);
        }

        let w_out = binder.get(tape, "spatial.out.weight");
        let b_out = binder.get(tape, "spatial.out.bias");
        let y = tape.matmul(h, w_out);
        Ok(tape.add_row(y, b_out))
    }

    fn context(&self, tape: &mut Tape, binder: &mut Binder<'_>, prompt: &Prompt) -> Result<Var> {
        let dim = self.config.dim;
        let mut rows = Vec::with_capacity(prompt.tokens.len().max(1));
        if prompt.tokens.is_empty() {
            rows.push(tape.constant(Mat::from_vec(1, dim, word_embedding(NULL_TOKEN, dim))));
        }
        for tok in &prompt.tokens {
            if is_instance_token(tok) {
                let name = format!("token.{tok}");
                if !self.params.contains_key(&name) {
                    return Err(Error::UnknownToken(tok.clone()));
                }
                rows.push(binder.get(tape, &name));
            } else {
                rows.push(tape.constant(Mat::from_vec(1, dim, word_embedding(tok, dim))));
            }
        }
        Ok(tape.concat_rows(rows))
    }

    /// Target noise in patch layout, for building losses on the tape.
    pub(crate) fn to_patches(&self, z: &Latent) -> Mat {
        self.patchify(z)
    }
}

/// `softmax(x_q Wq (x_kv Wk)^T / sqrt(a)) x_kv Wv Wo` with block-diagonal
/// masking of size `row_block x col_block`.
fn attention(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    [wq, wk, wv, wo]: [Var; 4],
    scale: f64,
    row_block: usize,
    col_block: usize,
) -> Var {
    let q = tape.matmul(x_q, wq);
    let k = tape.matmul(x_kv, wk);
    let v = tape.matmul(x_kv, wv);
    let s = tape.matmul_t(q, k);
    let s = tape.scale(s, scale);
    let p = tape.block_softmax(s, row_block, col_block);
    let a = tape.matmul(p, v);
    tape.matmul(a, wo)
}

/// Lazily places model parameters on a tape, marking those in the trainable
/// groups as requiring gradients.
pub(crate) struct Binder<'m> {
    model: &'m DenoiserModel,
    trainable: &'m [ParamGroup],
    bound: BTreeMap<String, Var>,
}

impl<'m> Binder<'m> {
    pub(crate) fn new(model: &'m DenoiserModel, trainable: &'m [ParamGroup]) -> Self {
        Self {
            model,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub(crate) fn get(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let value = self
            .model
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from validated model"))
            .clone();
        let grad = ParamGroup::of(name).is_some_and(|g| self.trainable.contains(&g));
        let v = tape.leaf(value, grad);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub(crate) fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, z_t: &Latent, t: usize, prompt: &Prompt) -> Result<Latent> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(self, &[]);
        let out = self.forward(&mut tape, &mut binder, z_t, t, prompt)?;
        Ok(self.unpatchify(tape.value(out), z_t.frames()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
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

    #[test]
    fn groups_partition_parameters() {
        let mut m = DenoiserModel::new(tiny(), 1).unwrap();
        m.add_token("[v]").unwrap();
        let total: usize = ParamGroup::ALL
            .iter()
            .map(|g| m.param_names(*g).count())
            .sum();
        assert_eq!(total, m.params().len());
        assert!(m.params().keys().all(|k| ParamGroup::of(k).is_some()));
        assert!(m.num_params() <= 200, "{}", m.num_params());
    }

    #[test]
    fn patchify_round_trips() {
        let m = DenoiserModel::new(ModelConfig { channels: 2, ..tiny() }, 0).unwrap();
        let z = Latent::new([3, 2, 4, 4], (0..96).map(|i| i as f64).collect()).unwrap();
        let p = m.patchify(&z);
        assert_eq!((p.rows, p.cols), (12, 8));
        assert_eq!(m.unpatchify(&p, 3), z);
    }

    #[test]
    fn zero_temporal_output_makes_frames_independent() {
        let m = DenoiserModel::new(tiny(), 3).unwrap();
        let z = Latent::new([2, 1, 4, 4], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let p = Prompt::new("a person");
        let joint = m.predict_noise(&z, 5, &p).unwrap();
        for f in 0..2 {
            let single = m.predict_noise(&z.frame(f), 5, &p).unwrap();
            assert_eq!(joint.frame_slice(f), single.data());
        }
    }

    #[test]
    fn unknown_instance_token_is_rejected() {
        let m = DenoiserModel::new(tiny(), 3).unwrap();
        let z = Latent::zeros([1, 1, 4, 4]);
        let err = m.predict_noise(&z, 1, &Prompt::new("[w] person")).unwrap_err();
        assert!(matches!(err, Error::UnknownToken(t) if t == "[w]"));
    }

    #[test]
    fn prediction_depends_on_prompt() {
        let m = DenoiserModel::new(tiny(), 3).unwrap();
        let z = Latent::new([1, 1, 4, 4], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let a = m.predict_noise(&z, 10, &Prompt::new("a person")).unwrap();
        let b = m.predict_noise(&z, 10, &Prompt::new("a dog")).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn from_params_validates_layout() {
        let m = DenoiserModel::new(tiny(), 3).unwrap();
        let mut params = m.params().clone();
        assert!(DenoiserModel::from_params(tiny(), params.clone()).is_ok());
        params.remove("spatial.pos");
        assert!(DenoiserModel::from_params(tiny(), params).is_err());
    }
}
