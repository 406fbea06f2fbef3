//! Pipeline configuration: one TOML file with a section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use forge_core::curation::{AssemblyMode, HarmonicAggregation, InjectPlacement};
use forge_core::diffusion::{EncoderMode, ModelConfig, ScheduleConfig};
use forge_core::editor::InversionPrompt;
use forge_core::vmr_eval::DEFAULT_THRESHOLDS;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Input and output locations. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory of `<video_id>.json` timelines with packed moment frames.
    pub videos: Option<PathBuf>,
    /// Source training annotations (JSONL of `{id, video_id, start, end, query}`).
    pub annotations: Option<PathBuf>,
    /// Query corpus the novel word split is built from.
    pub queries: Option<PathBuf>,
    /// Packed frames or image directory of generic class images.
    pub class_images: Option<PathBuf>,
    /// Directory of externally computed embeddings. Files named like the
    /// pipeline's own embedding outputs override the built-in toy encoders.
    pub embeddings: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramesSection {
    /// Frames kept per video for stage 1.
    pub m: usize,
    #[serde(default)]
    pub raw_phi: bool,
}

impl Default for FramesSection {
    fn default() -> Self {
        Self { m: 4, raw_phi: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub encoder: EncoderMode,
    #[serde(default)]
    pub model: ModelConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            encoder: EncoderMode::Centered,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub learning_rate: f64,
    /// Word the instance token is attached to in prompts.
    pub subject: String,
    pub class_prompt: String,
    #[serde(default = "default_eval_draws")]
    pub eval_draws: usize,
}

fn default_eval_draws() -> usize {
    16
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            stage1_steps: 300,
            stage2_steps: 200,
            learning_rate: 0.05,
            subject: "person".into(),
            class_prompt: "a person".into(),
            eval_draws: default_eval_draws(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    pub inversion_steps: usize,
    pub sampling_steps: usize,
    /// Use the per-step inversion update instead of the standard one.
    #[serde(default)]
    pub literal_inversion: bool,
    #[serde(default)]
    pub inversion_prompt: InversionPrompt,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            inversion_steps: 50,
            sampling_steps: 50,
            literal_inversion: false,
            inversion_prompt: InversionPrompt::Source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationSection {
    pub k: usize,
    pub l: usize,
    #[serde(default)]
    pub aggregation: HarmonicAggregation,
    pub mode: AssemblyMode,
    #[serde(default)]
    pub placement: InjectPlacement,
}

impl Default for CurationSection {
    fn default() -> Self {
        Self {
            k: 16,
            l: 8,
            aggregation: HarmonicAggregation::Aggregate,
            mode: AssemblyMode::Replace,
            placement: InjectPlacement::After,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
    pub n: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            n: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub frames: FramesSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub edit: EditSection,
    #[serde(default)]
    pub curation: CurationSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Directory relative paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, toml::de::Error> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::from_toml(&text, base).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialized config. Paths enter as written,
    /// so the hash does not depend on where the config file lives.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    fn resolve(&self, p: &Option<PathBuf>) -> PathBuf {
        let p = p.as_ref().expect("validated config has every path");
        if p.is_absolute() {
            p.clone()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn videos(&self) -> PathBuf {
        self.resolve(&self.paths.videos)
    }
    pub fn annotations(&self) -> PathBuf {
        self.resolve(&self.paths.annotations)
    }
    pub fn queries(&self) -> PathBuf {
        self.resolve(&self.paths.queries)
    }
    pub fn class_images(&self) -> PathBuf {
        self.resolve(&self.paths.class_images)
    }
    pub fn embeddings(&self) -> PathBuf {
        self.resolve(&self.paths.embeddings)
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoints)
    }
    pub fn output(&self) -> PathBuf {
        self.resolve(&self.paths.output)
    }

    /// Every structural problem, or nothing. Reads the filesystem but never
    /// writes to it.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.seed.is_none() {
            errs.push("seed: missing (a seed is mandatory)".to_string());
        }

        let inputs = [
            ("videos", &self.paths.videos),
            ("annotations", &self.paths.annotations),
            ("queries", &self.paths.queries),
            ("class_images", &self.paths.class_images),
            ("embeddings", &self.paths.embeddings),
        ];
        for (name, p) in inputs {
            match p {
                None => errs.push(format!("paths.{name}: missing")),
                Some(_) => {
                    let full = self.resolve(p);
                    if !full.exists() {
                        errs.push(format!("paths.{name}: {} does not exist", full.display()));
                    }
                }
            }
        }
        for (name, p) in [("checkpoints", &self.paths.checkpoints), ("output", &self.paths.output)] {
            match p {
                None => errs.push(format!("paths.{name}: missing")),
                Some(_) => {
                    // outputs are created on demand; the nearest existing
                    // ancestor has to be a directory
                    let full = self.resolve(p);
                    let existing = full.ancestors().find(|a| a.exists());
                    if existing.is_some_and(|a| !a.is_dir()) {
                        errs.push(format!("paths.{name}: {} is not under a directory", full.display()));
                    }
                }
            }
        }

        if self.frames.m == 0 {
            errs.push("frames.m: must be at least 1".into());
        }
        if let Err(e) = self.diffusion.model.validate() {
            errs.push(format!("diffusion.model: {e}"));
        }
        let sched = &self.diffusion.schedule;
        if let Err(e) = forge_core::diffusion::NoiseSchedule::from_config(sched) {
            errs.push(format!("diffusion.schedule: {e}"));
        }
        let lr = self.train.learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            errs.push(format!("train.learning_rate: must be positive, got {lr}"));
        }
        if self.train.eval_draws == 0 {
            errs.push("train.eval_draws: must be at least 1".into());
        }
        if self.train.subject.trim().is_empty() {
            errs.push("train.subject: empty".into());
        }
        for (name, s) in [
            ("edit.inversion_steps", self.edit.inversion_steps),
            ("edit.sampling_steps", self.edit.sampling_steps),
        ] {
            if s == 0 || s > sched.timesteps {
                errs.push(format!("{name}: {s} outside 1..={}", sched.timesteps));
            }
        }
        if self.curation.k == 0 {
            errs.push("curation.k: must be at least 1".into());
        }
        if self.curation.l > self.curation.k {
            errs.push(format!(
                "curation.l: {} exceeds curation.k = {}",
                self.curation.l, self.curation.k
            ));
        }
        if self.eval.thresholds.is_empty() {
            errs.push("eval.thresholds: empty".into());
        }
        if let Some(t) = self.eval.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            errs.push(format!("eval.thresholds: {t} outside [0, 1]"));
        }
        if self.eval.n == 0 {
            errs.push("eval.n: must be at least 1".into());
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}
