//! Synthetic 8x8 fixture: three short grayscale videos of moving stripe
//! patterns, their annotations, a query corpus with a few novel words, and a
//! config that runs the whole pipeline in seconds.

use std::fs;
use std::path::Path;

use forge_core::curation::{TrainingEntry, Video, VideoMoment};
use forge_core::io::{write_json, write_jsonl, write_packed_frames};
use forge_core::text::derive_seed;
use forge_core::vmr_eval::MomentAnnotation;
use forge_core::{Frame, FrameSequence, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 8;
const MOMENT_FRAMES: usize = 4;
const FIXTURE_SEED: u64 = 0x0f1c_7e5d;

#[derive(Clone, Copy)]
enum Action {
    WalkRight,
    WalkLeft,
    Jump,
    Wave,
}

impl Action {
    fn query(self) -> &'static str {
        match self {
            Action::WalkRight => "a person walks to the right",
            Action::WalkLeft => "a person walks to the left",
            Action::Jump => "the person jumps up",
            Action::Wave => "a person waves",
        }
    }

    /// Half of the pixels are lit in every frame.
    fn lit(self, x: usize, y: usize, f: usize, phase: usize) -> bool {
        match self {
            Action::WalkRight => (x + 4 * SIZE - f + phase) % 4 < 2,
            Action::WalkLeft => (x + f + phase) % 4 < 2,
            Action::Jump => (y + f + phase) % 4 < 2,
            Action::Wave => (x / 2 + y / 2 + f + phase) % 2 == 0,
        }
    }
}

struct Identity {
    hi: f64,
    lo: f64,
    phase: usize,
}

fn render(action: Action, id: &Identity, frames: usize, rng: &mut ChaCha8Rng) -> Result<FrameSequence> {
    FrameSequence::new(
        (0..frames)
            .map(|f| {
                let px = (0..SIZE * SIZE)
                    .map(|p| {
                        let v = if action.lit(p % SIZE, p / SIZE, f, id.phase) { id.hi } else { id.lo };
                        (v + rng.random_range(-0.03f64..0.03)).clamp(0.0, 1.0)
                    })
                    .collect();
                Frame::gray(SIZE, SIZE, px)
            })
            .collect::<Result<Vec<_>>>()?,
    )
}

const VIDEOS: [(&str, [Action; 3], Identity); 3] = [
    ("v0", [Action::WalkRight, Action::Jump, Action::Wave], Identity { hi: 0.9, lo: 0.1, phase: 0 }),
    ("v1", [Action::Wave, Action::WalkLeft, Action::Jump], Identity { hi: 0.85, lo: 0.2, phase: 1 }),
    ("v2", [Action::Jump, Action::WalkRight, Action::WalkLeft], Identity { hi: 0.95, lo: 0.05, phase: 2 }),
];

/// `(video, moment, sentence)`. Four words outside the training vocabulary
/// appear in 2, 3, 3 and 5 sentences; seven sentences use known words only.
const QUERIES: &[(&str, usize, &str)] = &[
    ("v0", 0, "a person hops to the right"),
    ("v2", 0, "the person hops up"),
    ("v0", 2, "a person spins"),
    ("v1", 0, "the person spins and waves"),
    ("v2", 2, "a person spins to the left"),
    ("v2", 1, "a person crawls to the right"),
    ("v1", 1, "the person crawls to the left"),
    ("v0", 0, "a person crawls"),
    ("v0", 2, "a person dances"),
    ("v1", 2, "the person dances and jumps"),
    ("v0", 0, "a person dances to the right"),
    ("v0", 1, "the person dances up"),
    ("v2", 2, "a person dances to the left"),
    ("v0", 0, "a person walks right"),
    ("v0", 1, "the person jumps"),
    ("v1", 0, "a person waves"),
    ("v1", 1, "person walks to the left"),
    ("v2", 0, "a person jumps up"),
    ("v2", 1, "the person walks to the right"),
    ("v1", 2, "a person jumps"),
];

pub const DEMO_CONFIG: &str = r#"# Desk-scale demo: three 8x8 videos, 36 candidate edits.
seed = 20240601

[paths]
videos = "videos"
annotations = "annotations/train.jsonl"
queries = "annotations/queries.jsonl"
class_images = "class.vfr"
embeddings = "embeddings"
checkpoints = "out/checkpoints"
output = "out"

[frames]
m = 4
raw_phi = false

[diffusion]
encoder = "centered"

[diffusion.schedule]
timesteps = 100
beta_start = 0.0001
beta_end = 0.02

[diffusion.model]
channels = 1
height = 8
width = 8
patch = 2
dim = 32
attn_dim = 8
time_features = 8
max_frames = 8
blocks = 1

[train]
stage1_steps = 300
stage2_steps = 150
learning_rate = 0.05
subject = "person"
class_prompt = "a person"

[edit]
inversion_steps = 50
sampling_steps = 50
literal_inversion = false
inversion_prompt = "source"

[curation]
k = 16
l = 8
aggregation = "aggregate"
mode = "replace"
placement = "after"

[eval]
thresholds = [0.3, 0.5, 0.7]
n = 1
"#;

/// The 20-sentence query corpus, annotated with the moments it describes.
pub fn query_corpus() -> Vec<MomentAnnotation> {
    QUERIES
        .iter()
        .map(|(vid, i, q)| MomentAnnotation {
            video_id: vid.to_string(),
            start: (i * MOMENT_FRAMES) as f64,
            end: ((i + 1) * MOMENT_FRAMES) as f64,
            query: q.to_string(),
        })
        .collect()
}

/// Writes the fixture and `forge.toml` into `dir`.
pub fn write_fixture(dir: &Path) -> Result<()> {
    let vdir = dir.join("videos");
    let mut train = Vec::new();
    for (vid, actions, ident) in &VIDEOS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(FIXTURE_SEED, vid));
        let mut moments = Vec::new();
        for (i, action) in actions.iter().enumerate() {
            let rel = format!("{vid}/m{i}.vfr");
            write_packed_frames(&vdir.join(&rel), &render(*action, ident, MOMENT_FRAMES, &mut rng)?)?;
            let (start, end) = ((i * MOMENT_FRAMES) as f64, ((i + 1) * MOMENT_FRAMES) as f64);
            moments.push(VideoMoment {
                start,
                end,
                query: action.query().into(),
                frames: Some(rel),
            });
            train.push(TrainingEntry {
                id: format!("src-{vid}-m{i}"),
                annotation: MomentAnnotation {
                    video_id: vid.to_string(),
                    start,
                    end,
                    query: action.query().into(),
                },
                synthetic: false,
            });
        }
        let video = Video {
            video_id: vid.to_string(),
            fps: 1.0,
            duration: (actions.len() * MOMENT_FRAMES) as f64,
            moments,
        };
        write_json(&vdir.join(format!("{vid}.json")), &video)?;
    }

    let queries = query_corpus();
    write_jsonl(&dir.join("annotations/train.jsonl"), &train)?;
    write_jsonl(&dir.join("annotations/queries.jsonl"), &queries)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(FIXTURE_SEED, "class"));
    let class = FrameSequence::new(
        (0..4)
            .map(|k| {
                let px = (0..SIZE * SIZE)
                    .map(|p| {
                        let (x, y) = (p % SIZE, p / SIZE);
                        let v = if (x + y + k) % 4 < 2 { 0.8 } else { 0.2 };
                        (v + rng.random_range(-0.03f64..0.03)).clamp(0.0, 1.0)
                    })
                    .collect();
                Frame::gray(SIZE, SIZE, px)
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    write_packed_frames(&dir.join("class.vfr"), &class)?;

    let emb = dir.join("embeddings");
    fs::create_dir_all(&emb).map_err(|e| forge_core::Error::Io { path: emb.clone(), source: e })?;
    let readme = "Optional external embeddings: <candidate id>/{joint,structure,source_structure,prompt}.emb\n\
                  override the built-in toy encoders.\n";
    fs::write(emb.join("README.txt"), readme).map_err(|e| forge_core::Error::Io { path: emb.clone(), source: e })?;
    let cfg = dir.join("forge.toml");
    fs::write(&cfg, DEMO_CONFIG).map_err(|e| forge_core::Error::Io { path: cfg.clone(), source: e })?;
    Ok(())
}
