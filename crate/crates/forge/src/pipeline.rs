//! Stage orchestration. Stages talk only through files under the output
//! directory; each stage leaves a marker so an unchanged rerun is a no-op.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use forge_core::curation::{
    assemble_variant, build_training_set, pool_report, qualitative_select, quantitative_select,
    variant_video_id, CandidatePool, EditedMoment, EmbeddingSet, EncoderKind, GeneratedMoment,
    HarmonicAggregation, TrainingEntry, Video,
};
use forge_core::diffusion::{
    load_checkpoint, save_checkpoint, CheckpointMeta, DenoiserModel, Encoder, InversionForm,
    NoiseSchedule,
};
use forge_core::editor::{
    edit_moment, instance_prompt, train_stage1, train_stage2, EditOptions, EditRequest,
    TrainConfig, TrainReport, TrainingBatch, INSTANCE_TOKEN,
};
use forge_core::frame_select::{phi_scores, top_m, FrameScore, PhiMode};
use forge_core::io::{
    read_embeddings, read_frames, read_json, read_jsonl, read_packed_frames, write_embeddings,
    write_json, write_jsonl, write_packed_frames,
};
use forge_core::text::derive_seed;
use forge_core::vmr_eval::{
    evaluate, novel_word_split, score_item, MomentAnnotation, NovelWordSplit, ReferenceScorer,
    RetrievalPrediction, ScorerInterface,
};
use forge_core::FrameSequence;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, PipelineConfig};
use crate::embed;
use crate::manifest::{combined_digest, digest_tree, DigestMap, RunManifest, StageRecord, MARKER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Frames,
    Train,
    Edit,
    Score,
    Select,
    Assemble,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Frames,
        Stage::Train,
        Stage::Edit,
        Stage::Score,
        Stage::Select,
        Stage::Assemble,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Frames => "frames",
            Stage::Train => "train",
            Stage::Edit => "edit",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::Assemble => "assemble",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed{}: {cause}", item.as_ref().map(|i| format!(" on item `{i}`")).unwrap_or_default())]
    Stage {
        stage: Stage,
        item: Option<String>,
        cause: String,
    },
}

/// A failure inside a stage, optionally tied to one item.
#[derive(Debug)]
pub struct Failure {
    item: Option<String>,
    cause: String,
}

macro_rules! failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure { item: None, cause: e.to_string() }
            }
        }
    )*};
}
failure_from!(forge_core::Error, std::io::Error, serde_json::Error, csv::Error, String, &str);

type StageResult<T> = Result<T, Failure>;

trait ItemExt<T> {
    fn item(self, id: &str) -> StageResult<T>;
}

impl<T, E: Into<Failure>> ItemExt<T> for Result<T, E> {
    fn item(self, id: &str) -> StageResult<T> {
        self.map_err(|e| {
            let mut f = e.into();
            f.item.get_or_insert_with(|| id.to_string());
            f
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for item-level parallelism; 0 lets rayon decide.
    pub jobs: usize,
    /// Last stage to run.
    pub until: Option<Stage>,
    /// Ignore markers and recompute every stage.
    pub force: bool,
}

/// Everything the stages share.
struct Ctx {
    cfg: PipelineConfig,
    hash: String,
    seed: u64,
    out: PathBuf,
    sched: NoiseSchedule,
    encoder: Encoder,
    pool: rayon::ThreadPool,
}

impl Ctx {
    fn dir(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Train => self.cfg.checkpoints(),
            s => self.out.join(s.name()),
        }
    }

    fn par_map<T: Sync, R: Send>(
        &self,
        items: &[T],
        f: impl Fn(&T) -> StageResult<R> + Sync + Send,
    ) -> StageResult<Vec<R>> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}

/// A source video with the directory its frame paths are relative to.
struct SourceVideo {
    video: Video,
    dir: PathBuf,
}

impl SourceVideo {
    fn moment_frames(&self, i: usize) -> StageResult<FrameSequence> {
        let id = format!("{}/m{i}", self.video.video_id);
        let rel = self.video.moments[i]
            .frames
            .as_ref()
            .ok_or_else(|| format!("moment {i} has no frames"))
            .item(&id)?;
        let seq = read_frames(&self.dir.join(rel)).item(&id)?;
        let expected = self.video.moment_frames(i);
        if seq.len() != expected {
            return Err(format!("moment has {} frames, its span implies {expected}", seq.len())).item(&id);
        }
        Ok(seq)
    }

    fn all_frames(&self) -> StageResult<FrameSequence> {
        let mut frames = Vec::new();
        for i in 0..self.video.moments.len() {
            frames.extend(self.moment_frames(i)?.into_frames());
        }
        FrameSequence::new(frames).item(&self.video.video_id)
    }
}

fn load_videos(dir: &Path) -> StageResult<Vec<SourceVideo>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for p in paths {
        let name = p.display().to_string();
        let video: Video = read_json(&p).item(&name)?;
        video.validate().item(&name)?;
        if !seen.insert(video.video_id.clone()) {
            return Err(format!("duplicate video id {}", video.video_id)).item(&name);
        }
        out.push(SourceVideo {
            video,
            dir: p.parent().unwrap_or(Path::new("")).to_path_buf(),
        });
    }
    if out.is_empty() {
        return Err(format!("no video timelines in {}", dir.display()).into());
    }
    Ok(out)
}

fn training_vocab(entries: &[TrainingEntry]) -> BTreeSet<String> {
    let anns: Vec<MomentAnnotation> = entries.iter().map(|e| e.annotation.clone()).collect();
    ReferenceScorer::vocab_of(&anns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Marker {
    stage: Stage,
    config_hash: String,
    input_digest: String,
    outputs: DigestMap,
}

/// Runs the pipeline up to `opts.until` and writes `manifest.json` into the
/// output directory.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let setup = |cause: String| PipelineError::Stage {
        stage: Stage::Frames,
        item: None,
        cause,
    };
    let sched = NoiseSchedule::from_config(&cfg.diffusion.schedule).map_err(|e| setup(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| setup(e.to_string()))?;
    let ctx = Ctx {
        hash: cfg.hash(),
        seed: cfg.seed(),
        out: cfg.output(),
        cfg: cfg.clone(),
        sched,
        encoder: Encoder::new(cfg.diffusion.encoder),
        pool,
    };
    fs::create_dir_all(&ctx.out).map_err(|e| setup(format!("{}: {e}", ctx.out.display())))?;

    let mut manifest = RunManifest::new(ctx.hash.clone(), ctx.seed);
    for stage in Stage::ALL {
        if opts.until.is_some_and(|u| stage > u) {
            break;
        }
        let record = run_stage(&ctx, stage, opts.force).map_err(|f| PipelineError::Stage {
            stage,
            item: f.item,
            cause: f.cause,
        })?;
        log::info!(
            "{stage}: {} in {:.2}s",
            if record.skipped { "up to date" } else { "done" },
            record.seconds
        );
        manifest.stages.push(record);
    }
    write_json(&ctx.out.join("manifest.json"), &manifest).map_err(|e| PipelineError::Stage {
        stage: Stage::Evaluate,
        item: None,
        cause: e.to_string(),
    })?;
    Ok(manifest)
}

fn stage_inputs(ctx: &Ctx, stage: Stage) -> Vec<(String, PathBuf)> {
    let c = &ctx.cfg;
    let data = |label: &str, p: PathBuf| (label.to_string(), p);
    let prev = |s: Stage| {
        let label = match s {
            Stage::Train => "checkpoints".to_string(),
            s => format!("out/{}", s.name()),
        };
        (label, ctx.dir(s))
    };
    match stage {
        Stage::Frames => vec![data("videos", c.videos())],
        Stage::Train => vec![
            prev(Stage::Frames),
            data("videos", c.videos()),
            data("class_images", c.class_images()),
        ],
        Stage::Edit => vec![
            prev(Stage::Train),
            data("videos", c.videos()),
            data("annotations", c.annotations()),
            data("queries", c.queries()),
            data("embeddings", c.embeddings()),
        ],
        Stage::Score => vec![prev(Stage::Edit)],
        Stage::Select => vec![
            prev(Stage::Score),
            data("videos", c.videos()),
            data("annotations", c.annotations()),
        ],
        Stage::Assemble => vec![
            prev(Stage::Select),
            prev(Stage::Edit),
            data("videos", c.videos()),
            data("annotations", c.annotations()),
        ],
        Stage::Evaluate => vec![
            prev(Stage::Assemble),
            prev(Stage::Edit),
            data("videos", c.videos()),
            data("annotations", c.annotations()),
        ],
    }
}

fn output_label(stage: Stage) -> String {
    match stage {
        Stage::Train => "checkpoints".into(),
        s => format!("out/{}", s.name()),
    }
}

fn run_stage(ctx: &Ctx, stage: Stage, force: bool) -> StageResult<StageRecord> {
    let started = Instant::now();
    let mut inputs = DigestMap::new();
    for (label, path) in stage_inputs(ctx, stage) {
        if !path.exists() {
            return Err(format!("missing input {}", path.display()).into());
        }
        inputs.extend(digest_tree(&path, &label)?);
    }
    let input_digest = combined_digest(&ctx.hash, &inputs);
    let dir = ctx.dir(stage);
    let marker_path = dir.join(MARKER);

    if !force && marker_path.exists() {
        let marker: Option<Marker> = read_json(&marker_path).ok();
        if let Some(m) = marker.filter(|m| m.input_digest == input_digest && m.stage == stage) {
            if digest_tree(&dir, &output_label(stage))? == m.outputs {
                return Ok(StageRecord {
                    name: stage.name().into(),
                    input_digest,
                    inputs,
                    outputs: m.outputs,
                    seconds: started.elapsed().as_secs_f64(),
                    skipped: true,
                });
            }
        }
    }

    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    match stage {
        Stage::Frames => stage_frames(ctx, &dir)?,
        Stage::Train => stage_train(ctx, &dir)?,
        Stage::Edit => stage_edit(ctx, &dir)?,
        Stage::Score => stage_score(ctx, &dir)?,
        Stage::Select => stage_select(ctx, &dir)?,
        Stage::Assemble => stage_assemble(ctx, &dir)?,
        Stage::Evaluate => stage_evaluate(ctx, &dir)?,
    }
    let outputs = digest_tree(&dir, &output_label(stage))?;
    write_json(
        &marker_path,
        &Marker {
            stage,
            config_hash: ctx.hash.clone(),
            input_digest: input_digest.clone(),
            outputs: outputs.clone(),
        },
    )?;
    Ok(StageRecord {
        name: stage.name().into(),
        input_digest,
        inputs,
        outputs,
        seconds: started.elapsed().as_secs_f64(),
        skipped: false,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameSelection {
    video_id: String,
    config_hash: String,
    mode: PhiMode,
    scores: Vec<FrameScore>,
    selected: Vec<usize>,
}

fn stage_frames(ctx: &Ctx, dir: &Path) -> StageResult<()> {
    let videos = load_videos(&ctx.cfg.videos())?;
    let mode = if ctx.cfg.frames.raw_phi { PhiMode::Raw } else { PhiMode::Normalized };
    ctx.par_map(&videos, |sv| {
        let id = &sv.video.video_id;
        let frames = sv.all_frames()?;
        let scores = phi_scores(&frames, mode).item(id)?;
        let selected = top_m(&scores, ctx.cfg.frames.m).item(id)?;
        write_packed_frames(&dir.join(format!("{id}.vfr")), &frames.pick(&selected).item(id)?).item(id)?;
        write_json(
            &dir.join(format!("{id}.json")),
            &FrameSelection {
                video_id: id.clone(),
                config_hash: ctx.hash.clone(),
                mode,
                scores,
                selected,
            },
        )
        .item(id)
    })?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSummary {
    video_id: String,
    config_hash: String,
    stage1: TrainReport,
    stage2: Vec<TrainReport>,
}

fn checkpoint_meta(ctx: &Ctx) -> CheckpointMeta {
    CheckpointMeta {
        model: ctx.cfg.diffusion.model.clone(),
        schedule: ctx.cfg.diffusion.schedule,
        encoder: ctx.cfg.diffusion.encoder,
    }
}

fn moment_checkpoint(dir: &Path, video_id: &str, i: usize) -> PathBuf {
    dir.join(video_id).join(format!("m{i}.fckp"))
}

fn subject_prompt(ctx: &Ctx, query: &str) -> String {
    instance_prompt(query, INSTANCE_TOKEN, &ctx.cfg.train.subject)
}

fn stage_train(ctx: &Ctx, dir: &Path) -> StageResult<()> {
    let videos = load_videos(&ctx.cfg.videos())?;
    let class_images = read_frames(&ctx.cfg.class_images()).item("class_images")?;
    let frames_dir = ctx.dir(Stage::Frames);
    let tc = &ctx.cfg.train;
    let meta = checkpoint_meta(ctx);
    let base = DenoiserModel::new(meta.model.clone(), derive_seed(ctx.seed, "model-init"))?;
    ctx.par_map(&videos, |sv| {
        let id = &sv.video.video_id;
        let selected = read_packed_frames(&frames_dir.join(format!("{id}.vfr"))).item(id)?;
        let batch = TrainingBatch {
            instance_frames: selected,
            class_images: class_images.clone(),
            instance_prompt: subject_prompt(ctx, &tc.class_prompt),
            class_prompt: tc.class_prompt.clone(),
        };
        let mut cfg1 = TrainConfig::new(tc.stage1_steps, tc.learning_rate, derive_seed(ctx.seed, &format!("{id}/stage1")));
        cfg1.eval_draws = tc.eval_draws;
        let (model, stage1) = train_stage1(base.clone(), &batch, &ctx.sched, &ctx.encoder, &cfg1).item(id)?;
        save_checkpoint(&dir.join(id).join("stage1.fckp"), &model, &meta).item(id)?;

        let mut stage2 = Vec::new();
        for (i, m) in sv.video.moments.iter().enumerate() {
            let mid = format!("{id}/m{i}");
            let frames = sv.moment_frames(i)?;
            let mut cfg2 = TrainConfig::new(tc.stage2_steps, tc.learning_rate, derive_seed(ctx.seed, &format!("{mid}/stage2")));
            cfg2.eval_draws = tc.eval_draws;
            let prompt = subject_prompt(ctx, &m.query);
            let (m2, report) =
                train_stage2(model.clone(), &frames, &prompt, &ctx.sched, &ctx.encoder, &cfg2).item(&mid)?;
            save_checkpoint(&moment_checkpoint(dir, id, i), &m2, &meta).item(&mid)?;
            stage2.push(report);
        }
        write_json(
            &dir.join(id).join("report.json"),
            &TrainSummary {
                video_id: id.clone(),
                config_hash: ctx.hash.clone(),
                stage1,
                stage2,
            },
        )
        .item(id)
    })?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitRecord {
    config_hash: String,
    #[serde(flatten)]
    split: NovelWordSplit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EditProvenance {
    id: String,
    config_hash: String,
    source_video_id: String,
    source_moment_index: usize,
    checkpoint: String,
    source_prompt: String,
    edit_prompt: String,
    seed: u64,
    inversion_steps: usize,
    sampling_steps: usize,
    options: EditOptions,
}

struct EditJob<'a> {
    id: String,
    video: &'a SourceVideo,
    moment: usize,
    query: String,
}

/// Uses `<embeddings>/<id>/<name>` when present, otherwise `fallback`.
fn embeddings_or(
    external: &Path,
    id: &str,
    name: &str,
    kind: EncoderKind,
    fallback: impl FnOnce() -> forge_core::Result<EmbeddingSet>,
) -> StageResult<EmbeddingSet> {
    let p = external.join(id).join(name);
    if p.exists() {
        read_embeddings(&p, kind).item(id)
    } else {
        fallback().item(id)
    }
}

fn stage_edit(ctx: &Ctx, dir: &Path) -> StageResult<()> {
    let videos = load_videos(&ctx.cfg.videos())?;
    let source: Vec<TrainingEntry> = read_jsonl(&ctx.cfg.annotations()).item("annotations")?;
    let queries: Vec<MomentAnnotation> = read_jsonl(&ctx.cfg.queries()).item("queries")?;
    for q in &queries {
        q.validate().item("queries")?;
    }
    let split = novel_word_split(&queries, &training_vocab(&source), derive_seed(ctx.seed, "novel-word-split"))
        .item("queries")?;
    if let Some(w) = &split.warning {
        log::warn!("novel word split: {w}");
    }
    write_json(
        &dir.join("split.json"),
        &SplitRecord {
            config_hash: ctx.hash.clone(),
            split: split.clone(),
        },
    )?;

    let mut jobs = Vec::new();
    for (j, g) in split.generation_sentences.iter().enumerate() {
        for sv in &videos {
            for i in 0..sv.video.moments.len() {
                jobs.push(EditJob {
                    id: format!("g{j:02}-{}-m{i}", sv.video.video_id),
                    video: sv,
                    moment: i,
                    query: g.query.clone(),
                });
            }
        }
    }

    let cc = &ctx.cfg;
    let ckpt_dir = ctx.dir(Stage::Train);
    let external = cc.embeddings();
    let opts = EditOptions {
        inversion_prompt: cc.edit.inversion_prompt,
        form: if cc.edit.literal_inversion { InversionForm::Literal } else { InversionForm::Standard },
    };
    let items = ctx.par_map(&jobs, |job| {
        let id = job.id.as_str();
        let sv = job.video;
        let vid = &sv.video.video_id;
        let ckpt = moment_checkpoint(&ckpt_dir, vid, job.moment);
        let (model, _) = load_checkpoint(&ckpt).item(id)?;
        let moment = sv.moment_frames(job.moment)?;
        let req = EditRequest {
            moment: moment.clone(),
            source_prompt: subject_prompt(ctx, &sv.video.moments[job.moment].query),
            edit_prompt: subject_prompt(ctx, &job.query),
            inversion_steps: cc.edit.inversion_steps,
            sampling_steps: cc.edit.sampling_steps,
        };
        let edited = edit_moment(&model, &req, &ctx.sched, &ctx.encoder, &opts).item(id)?;

        let out = dir.join(id);
        write_packed_frames(&out.join("frames.vfr"), &edited).item(id)?;
        let joint = embeddings_or(&external, id, "joint.emb", EncoderKind::Joint, || {
            embed::joint_image_embeddings(&edited)
        })?;
        let structure = embeddings_or(&external, id, "structure.emb", EncoderKind::Structure, || {
            embed::structure_embeddings(&edited)
        })?;
        let source_structure = embeddings_or(&external, id, "source_structure.emb", EncoderKind::Structure, || {
            embed::structure_embeddings(&moment)
        })?;
        let prompt = embeddings_or(&external, id, "prompt.emb", EncoderKind::Joint, || {
            EmbeddingSet::new(vec![embed::prompt_embedding(&job.query)], EncoderKind::Joint)
        })?;
        write_embeddings(&out.join("joint.emb"), &joint).item(id)?;
        write_embeddings(&out.join("structure.emb"), &structure).item(id)?;
        write_embeddings(&out.join("source_structure.emb"), &source_structure).item(id)?;
        write_embeddings(&out.join("prompt.emb"), &prompt).item(id)?;

        let edited_moment = EditedMoment {
            frame_count: edited.len(),
            query: job.query.clone(),
            frames: None,
        };
        let variant = assemble_variant(&sv.video, job.moment, &edited_moment, cc.curation.mode, cc.curation.placement)
            .item(id)?;
        write_json(
            &out.join("provenance.json"),
            &EditProvenance {
                id: id.to_string(),
                config_hash: ctx.hash.clone(),
                source_video_id: vid.clone(),
                source_moment_index: job.moment,
                checkpoint: format!("{vid}/m{}.fckp", job.moment),
                source_prompt: req.source_prompt.clone(),
                edit_prompt: req.edit_prompt.clone(),
                seed: derive_seed(ctx.seed, id),
                inversion_steps: req.inversion_steps,
                sampling_steps: req.sampling_steps,
                options: opts,
            },
        )
        .item(id)?;
        Ok(GeneratedMoment {
            id: id.to_string(),
            source_video_id: vid.clone(),
            source_moment_index: job.moment,
            edit_prompt: job.query.clone(),
            span: variant.edited_span(),
            frames: format!("{id}/frames.vfr"),
            joint_embeddings: format!("{id}/joint.emb"),
            structure_embeddings: format!("{id}/structure.emb"),
            source_structure_embeddings: format!("{id}/source_structure.emb"),
            prompt_embedding: format!("{id}/prompt.emb"),
            prompt_fid: 0.0,
            struct_fid: 0.0,
            h_score: 0.0,
            config_hash: Some(ctx.hash.clone()),
        })
    })?;
    CandidatePool::new(items.clone(), ctx.hash.clone())?;
    write_jsonl(&dir.join("pool.jsonl"), &items)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScoreReport {
    config_hash: String,
    candidates: usize,
    aggregate: Option<forge_core::curation::PoolReport>,
    per_sample: Option<forge_core::curation::PoolReport>,
    /// Which of the two the config asks to report.
    mode: HarmonicAggregation,
}

fn stage_score(ctx: &Ctx, dir: &Path) -> StageResult<()> {
    let edit_dir = ctx.dir(Stage::Edit);
    let items: Vec<GeneratedMoment> = read_jsonl(&edit_dir.join("pool.jsonl")).item("pool")?;
    let scored = ctx.par_map(&items, |m| {
        let id = m.id.as_str();
        let joint = read_embeddings(&edit_dir.join(&m.joint_embeddings), EncoderKind::Joint).item(id)?;
        let structure = read_embeddings(&edit_dir.join(&m.structure_embeddings), EncoderKind::Structure).item(id)?;
        let source = read_embeddings(&edit_dir.join(&m.source_structure_embeddings), EncoderKind::Structure).item(id)?;
        let prompt = read_embeddings(&edit_dir.join(&m.prompt_embedding), EncoderKind::Joint).item(id)?;
        let mut out = m.clone();
        out.score(&joint, &prompt.per_frame()[0], &source, &structure).item(id)?;
        out.config_hash = Some(ctx.hash.clone());
        Ok(out)
    })?;
    let pool = CandidatePool::new(scored, ctx.hash.clone())?;
    // paths in the scored pool stay relative to the edit directory
    write_jsonl(&dir.join("pool.jsonl"), pool.items())?;
    let report = |mode| (!pool.is_empty()).then(|| pool_report(&pool, mode)).transpose();
    write_json(
        &dir.join("report.json"),
        &ScoreReport {
            config_hash: ctx.hash.clone(),
            candidates: pool.len(),
            aggregate: report(HarmonicAggregation::Aggregate)?,
            per_sample: report(HarmonicAggregation::PerSample)?,
            mode: ctx.cfg.curation.aggregation,
        },
    )?;
    Ok(())
}

fn variant_for(videos: &BTreeMap<&str, &SourceVideo>, ctx: &Ctx, m: &GeneratedMoment) -> StageResult<Video> {
    let sv = videos
        .get(m.source_video_id.as_str())
        .ok_or_else(|| format!("unknown source video {}", m.source_video_id))
        .item(&m.id)?;
    let frame_count = sv.video.moment_frames(m.source_moment_index);
    let edited = EditedMoment {
        frame_count,
        query: m.edit_prompt.clone(),
        frames: Some(m.frames.clone()),
    };
    let mut variant = assemble_variant(
        &sv.video,
        m.source_moment_index,
        &edited,
        ctx.cfg.curation.mode,
        ctx.cfg.curation.placement,
    )
    .item(&m.id)?;
    variant.video.video_id = variant_video_id(&m.source_video_id, &m.id);
    Ok(variant.video)
}

pub fn write_scores_csv(path: &Path, scores: &BTreeMap<String, f64>) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "score"])?;
    for (id, s) in scores {
        w.write_record([id.as_str(), &s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<BTreeMap<String, f64>, csv::Error> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        score: f64,
    }
    csv::Reader::from_path(path)?
        .deserialize::<Row>()
        .map(|r| r.map(|r| (r.id, r.score)))
        .collect()
}

fn stage_select(ctx: &Ctx, dir: &Path) -> StageResult<()> {
    let items: Vec<GeneratedMoment> = read_jsonl(&ctx.dir(Stage::Score).join("pool.jsonl")).item("pool")?;
    let pool = CandidatePool::new(items, ctx.hash.clone())?;
    let (k, l) = (ctx.cfg.curation.k.min(pool.len()), ctx.cfg.curation.l.min(pool.len()));
    if k < ctx.cfg.curation.k {
        log::warn!("pool has {} candidates; keeping all instead of top {}", pool.len(), ctx.cfg.curation.k);
    }
    let filtered = quantitative_select(&pool, k)?;
    write_jsonl(&dir.join("filtered.jsonl"), filtered.items())?;

    let videos = load_videos(&ctx.cfg.videos())?;
    let by_id: BTreeMap<&str, &SourceVideo> = videos.iter().map(|v| (v.video.video_id.as_str(), v)).collect();
    let source: Vec<TrainingEntry> = read_jsonl(&ctx.cfg.annotations()).item("annotations")?;
    let scorer = ReferenceScorer::with_vocab(training_vocab(&source));
    let score_one = |m: &GeneratedMoment| -> StageResult<(String, f64)> {
        let video = variant_for(&by_id, ctx, m)?;
        Ok((m.id.clone(), score_item(&scorer, m, &video).item(&m.id)?))
    };
    let scores: BTreeMap<String, f64> = if scorer.read_safe() {
        ctx.par_map(filtered.items(), score_one)?.into_iter().collect()
    } else {
        filtered.items().iter().map(score_one).collect::<StageResult<_>>()?
    };
    write_scores_csv(&dir.join("vmr_scores.csv"), &scores)?;

    let selected = qualitative_select(&filtered, &scores, l.min(k))?;
    write_jsonl(&dir.join("selected.jsonl"), selected.items())?;
    Ok(())
}

/// Path to `target` written relative to directory `from`. Both must exist.
fn relative_path(from: &Path, target: &Path) -> StageResult<String> {
    let from = from.canonicalize()?;
    let target = target.canonicalize()?;
    let a: Vec<Component> = from.components().collect();
    let b: Vec<Component> = target.components().collect();
    let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = vec!["..".into(); a.len() - common];
    parts.extend(b[common..].iter().map(|c| c.as_os_str().to_string_lossy().into_owned()));
    Ok(parts.join("/"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AssemblySummary {
    config_hash: String,
    source_entries: usize,
    synthetic_entries: usize,
    variants: Vec<String>,
}

fn stage_assemble(ctx: &Ctx, dir: &Path) -> StageResult<()> {
    let selected: Vec<GeneratedMoment> = read_jsonl(&ctx.dir(Stage::Select).join("selected.jsonl")).item("selected")?;
    let selected = CandidatePool::new(selected, ctx.hash.clone())?;
    let videos = load_videos(&ctx.cfg.videos())?;
    let by_id: BTreeMap<&str, &SourceVideo> = videos.iter().map(|v| (v.video.video_id.as_str(), v)).collect();
    let edit_dir = ctx.dir(Stage::Edit);
    let vdir = dir.join("videos");
    fs::create_dir_all(&vdir)?;

    let mut variants = Vec::new();
    for m in selected.items() {
        let mut video = variant_for(&by_id, ctx, m)?;
        let sv = by_id[m.source_video_id.as_str()];
        // rewrite frame paths relative to the variant file
        for vm in video.moments.iter_mut() {
            let Some(f) = vm.frames.as_ref() else { continue };
            let target = if *f == m.frames { edit_dir.join(f) } else { sv.dir.join(f) };
            vm.frames = Some(relative_path(&vdir, &target).item(&m.id)?);
        }
        write_json(&vdir.join(format!("{}.json", video.video_id)), &video).item(&m.id)?;
        variants.push(video.video_id);
    }

    let source: Vec<TrainingEntry> = read_jsonl(&ctx.cfg.annotations()).item("annotations")?;
    let train = build_training_set(&source, &selected)?;
    write_jsonl(&dir.join("train.jsonl"), &train)?;
    write_json(
        &dir.join("summary.json"),
        &AssemblySummary {
            config_hash: ctx.hash.clone(),
            source_entries: source.len(),
            synthetic_entries: train.len() - source.len(),
            variants,
        },
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub test_queries: usize,
    pub baseline: Option<forge_core::vmr_eval::Metrics>,
    pub augmented: Option<forge_core::vmr_eval::Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

const PREDICTION_DEPTH: usize = 5;

fn predict(
    scorer: &ReferenceScorer,
    videos: &BTreeMap<&str, &SourceVideo>,
    test: &[MomentAnnotation],
    depth: usize,
) -> StageResult<Vec<RetrievalPrediction>> {
    test.iter()
        .map(|a| {
            let sv = videos
                .get(a.video_id.as_str())
                .ok_or_else(|| format!("unknown video {}", a.video_id))
                .item(&a.query)?;
            let mut spans = scorer.score(&sv.video, &a.query).item(&a.query)?;
            spans.truncate(depth);
            Ok(RetrievalPrediction {
                video_id: a.video_id.clone(),
                query: a.query.clone(),
                ranked_spans: spans,
            })
        })
        .collect()
}

fn stage_evaluate(ctx: &Ctx, dir: &Path) -> StageResult<()> {
    let split: SplitRecord = read_json(&ctx.dir(Stage::Edit).join("split.json")).item("split")?;
    let test = split.split.novel_word_star_test;
    let videos = load_videos(&ctx.cfg.videos())?;
    let by_id: BTreeMap<&str, &SourceVideo> = videos.iter().map(|v| (v.video.video_id.as_str(), v)).collect();
    let source: Vec<TrainingEntry> = read_jsonl(&ctx.cfg.annotations()).item("annotations")?;
    let augmented: Vec<TrainingEntry> =
        read_jsonl(&ctx.dir(Stage::Assemble).join("train.jsonl")).item("training set")?;
    let ec = &ctx.cfg.eval;

    let mut report = EvalReport {
        config_hash: ctx.hash.clone(),
        test_queries: test.len(),
        baseline: None,
        augmented: None,
        warning: None,
    };
    let mut table = String::new();
    if test.is_empty() {
        report.warning = Some("novel-word* test split is empty".into());
        table.push_str("novel-word* test split is empty\n");
    } else {
        let depth = PREDICTION_DEPTH.max(ec.n);
        for (name, entries) in [("baseline", &source), ("augmented", &augmented)] {
            let scorer = ReferenceScorer::with_vocab(training_vocab(entries));
            let preds = predict(&scorer, &by_id, &test, depth)?;
            write_jsonl(&dir.join(format!("predictions_{name}.jsonl")), &preds)?;
            let metrics = evaluate(&preds, &test, &ec.thresholds, ec.n)?;
            table.push_str(&format!("[{name}]\n{}", metrics.table()));
            if name == "baseline" {
                report.baseline = Some(metrics);
            } else {
                report.augmented = Some(metrics);
            }
        }
    }
    write_json(&dir.join("metrics.json"), &report)?;
    fs::write(dir.join("table.txt"), table)?;
    Ok(())
}
