use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use forge::pipeline::read_scores_csv;
use forge::{demo, run_pipeline, ConfigError, PipelineConfig, PipelineError, RunOptions, Stage};
use forge_core::curation::{
    assemble_variant, qualitative_select, quantitative_select, AssemblyMode, CandidatePool,
    EditedMoment, GeneratedMoment, InjectPlacement, Video,
};
use forge_core::diffusion::{load_checkpoint, InversionForm, NoiseSchedule, Encoder};
use forge_core::editor::{edit_moment, EditOptions, EditRequest, InversionPrompt};
use forge_core::frame_select::{phi_scores, top_m, PhiMode};
use forge_core::io::{read_frames, read_json, read_jsonl, write_image_dir, write_json, write_jsonl};
use forge_core::vmr_eval::{evaluate, MomentAnnotation, RetrievalPrediction};
use serde::Serialize;

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "forge", version, about = "Simulate, curate and evaluate video moment retrieval data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for item-level parallelism (0 = all cores).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Recompute stages even when their outputs are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Frame scoring and selection.
    Frames {
        #[command(subcommand)]
        cmd: FramesCmd,
    },
    /// Run the pipeline through instance and temporal training.
    Train(RunArgs),
    /// Edit one moment with a trained checkpoint.
    Edit {
        #[arg(long)]
        moment: PathBuf,
        #[arg(long)]
        source_prompt: String,
        #[arg(long)]
        edit_prompt: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps_invert: usize,
        #[arg(long, default_value_t = 50)]
        steps_sample: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Invert under the empty prompt instead of the source prompt.
        #[arg(long)]
        null_inversion: bool,
        /// Use the per-step inversion update.
        #[arg(long)]
        literal_inversion: bool,
    },
    /// Hybrid selection over a candidate pool.
    Curate {
        #[command(subcommand)]
        cmd: CurateCmd,
    },
    /// Place an edited moment into a video timeline.
    Assemble {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        moment: usize,
        #[arg(long)]
        mode: AssemblyMode,
        /// Frames of the edited moment (directory or packed file).
        #[arg(long)]
        edited: PathBuf,
        /// Description of the edited moment.
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "after")]
        placement: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recall and mIoU of predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Also write the metrics as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the full pipeline.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Stop after this stage.
        #[arg(long)]
        until: Option<Stage>,
    },
    /// Check a config without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Demo fixture management.
    Demo {
        #[command(subcommand)]
        cmd: DemoCmd,
    },
}

#[derive(Subcommand)]
enum FramesCmd {
    /// Score every frame and pick the top m.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        select: usize,
        #[arg(long)]
        raw_phi: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CurateCmd {
    /// Keep the top k candidates by harmonic score.
    Quant {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep the l candidates the retrieval model scores lowest on.
    Qual {
        #[arg(long)]
        pool: PathBuf,
        /// CSV with `id,score` rows.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        l: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Write the synthetic fixture and its config into a directory.
    Init { dir: PathBuf },
}

enum Failure {
    Validation(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Stage(e)
    }
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::load(&args.config).map_err(|e| Failure::Validation(e.into()))?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    Ok(cfg)
}

fn run(cfg: &PipelineConfig, args: &RunArgs, until: Option<Stage>) -> Result<(), Failure> {
    let opts = RunOptions {
        jobs: args.jobs,
        until,
        force: args.force,
    };
    match run_pipeline(cfg, &opts) {
        Ok(m) => {
            for s in &m.stages {
                println!(
                    "{:<9} {:>8.2}s  {}",
                    s.name,
                    s.seconds,
                    if s.skipped { "up to date" } else { "done" }
                );
            }
            println!("manifest: {}", cfg.output().join("manifest.json").display());
            Ok(())
        }
        Err(PipelineError::Config(e)) => Err(Failure::Validation(e.into())),
        Err(e) => Err(Failure::Stage(e.into())),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => write_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn emit_pool(pool: &CandidatePool, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => write_jsonl(p, pool.items())?,
        None => {
            for m in pool.items() {
                println!("{}", serde_json::to_string(m)?);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EditRecord<'a> {
    moment: String,
    checkpoint: String,
    source_prompt: &'a str,
    edit_prompt: &'a str,
    seed: u64,
    steps_invert: usize,
    steps_sample: usize,
    options: EditOptions,
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Frames {
            cmd: FramesCmd::Score { input, select, raw_phi, out },
        } => {
            let frames = read_frames(&input).context("reading frames")?;
            let mode = if raw_phi { PhiMode::Raw } else { PhiMode::Normalized };
            let scores = phi_scores(&frames, mode).map_err(anyhow::Error::from)?;
            let selected = top_m(&scores, select).map_err(anyhow::Error::from)?;
            #[derive(Serialize)]
            struct Out<'a> {
                mode: PhiMode,
                scores: &'a [forge_core::frame_select::FrameScore],
                selected: Vec<usize>,
            }
            emit(&Out { mode, scores: &scores, selected }, out.as_deref())?;
        }
        Cmd::Train(args) => {
            let cfg = load_config(&args)?;
            run(&cfg, &args, Some(Stage::Train))?;
        }
        Cmd::Edit {
            moment,
            source_prompt,
            edit_prompt,
            ckpt,
            steps_invert,
            steps_sample,
            seed,
            out,
            null_inversion,
            literal_inversion,
        } => {
            let (model, meta) = load_checkpoint(&ckpt).context("loading checkpoint")?;
            let sched = NoiseSchedule::from_config(&meta.schedule).map_err(anyhow::Error::from)?;
            let frames = read_frames(&moment).context("reading moment")?;
            let opts = EditOptions {
                inversion_prompt: if null_inversion { InversionPrompt::Null } else { InversionPrompt::Source },
                form: if literal_inversion { InversionForm::Literal } else { InversionForm::Standard },
            };
            let req = EditRequest {
                moment: frames,
                source_prompt: source_prompt.clone(),
                edit_prompt: edit_prompt.clone(),
                inversion_steps: steps_invert,
                sampling_steps: steps_sample,
            };
            let edited = edit_moment(&model, &req, &sched, &Encoder::new(meta.encoder), &opts)
                .map_err(anyhow::Error::from)?;
            write_image_dir(&out, &edited).map_err(anyhow::Error::from)?;
            let record = EditRecord {
                moment: moment.display().to_string(),
                checkpoint: ckpt.display().to_string(),
                source_prompt: &source_prompt,
                edit_prompt: &edit_prompt,
                seed,
                steps_invert,
                steps_sample,
                options: opts,
            };
            write_json(&out.join("provenance.json"), &record).map_err(anyhow::Error::from)?;
            println!("wrote {} frames to {}", edited.len(), out.display());
        }
        Cmd::Curate { cmd } => match cmd {
            CurateCmd::Quant { pool, k, out } => {
                let items: Vec<GeneratedMoment> = read_jsonl(&pool).context("reading pool")?;
                let pool = CandidatePool::new(items, "").map_err(anyhow::Error::from)?;
                emit_pool(&quantitative_select(&pool, k).map_err(anyhow::Error::from)?, out.as_deref())?;
            }
            CurateCmd::Qual { pool, scores, l, out } => {
                let items: Vec<GeneratedMoment> = read_jsonl(&pool).context("reading pool")?;
                let pool = CandidatePool::new(items, "").map_err(anyhow::Error::from)?;
                let scores = read_scores_csv(&scores).context("reading scores")?;
                emit_pool(&qualitative_select(&pool, &scores, l).map_err(anyhow::Error::from)?, out.as_deref())?;
            }
        },
        Cmd::Assemble {
            video,
            moment,
            mode,
            edited,
            query,
            placement,
            out,
        } => {
            let v: Video = read_json(&video).context("reading video")?;
            let frames = read_frames(&edited).context("reading edited frames")?;
            let placement = match placement.as_str() {
                "after" => InjectPlacement::After,
                "before" => InjectPlacement::Before,
                other => return Err(Failure::Validation(anyhow::anyhow!("unknown placement `{other}`"))),
            };
            let e = EditedMoment {
                frame_count: frames.len(),
                query,
                frames: Some(edited.display().to_string()),
            };
            let variant = assemble_variant(&v, moment, &e, mode, placement).map_err(anyhow::Error::from)?;
            emit(&variant.video, out.as_deref())?;
        }
        Cmd::Eval {
            pred,
            gt,
            thresholds,
            n,
            json,
        } => {
            let preds: Vec<RetrievalPrediction> = read_jsonl(&pred).context("reading predictions")?;
            let gt: Vec<MomentAnnotation> = read_jsonl(&gt).context("reading ground truth")?;
            let m = evaluate(&preds, &gt, &thresholds, n).map_err(anyhow::Error::from)?;
            print!("{}", m.table());
            if let Some(p) = json {
                write_json(&p, &m).map_err(anyhow::Error::from)?;
            }
        }
        Cmd::Run { args, until } => {
            let cfg = load_config(&args)?;
            run(&cfg, &args, until)?;
        }
        Cmd::Validate { config } => {
            let cfg = PipelineConfig::load(&config).map_err(|e| Failure::Validation(e.into()))?;
            cfg.validate().map_err(|e: ConfigError| Failure::Validation(e.into()))?;
            println!("{}: ok (config hash {})", config.display(), cfg.hash());
        }
        Cmd::Demo {
            cmd: DemoCmd::Init { dir },
        } => {
            if dir.join("forge.toml").exists() {
                bail_validation(&format!("{} already holds a forge.toml", dir.display()))?;
            }
            demo::write_fixture(&dir).map_err(anyhow::Error::from)?;
            println!("demo fixture written to {}", dir.display());
        }
    }
    Ok(())
}

fn bail_validation(msg: &str) -> Result<(), Failure> {
    let e: anyhow::Result<()> = (|| bail!("{msg}"))();
    e.map_err(Failure::Validation)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
