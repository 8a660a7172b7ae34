use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vidistill::data::{generate_all, Corpus};
use vidistill::distill::TeacherSpec;
use vidistill::error::{Error, Result};
use vidistill::gradsuite;
use vidistill::models::Architecture;
use vidistill::pipeline::{
    distill_pretrain, evaluate, export_features, finetune, inflate_checkpoint, train_teacher, Checkpoint, Init,
    InitKind, MetricsLog, RunConfig, ACTION_HEAD,
};
use vidistill::tensor::gradcheck::DEFAULT_TOLERANCE;

/// Image-teacher to video-student distillation on synthetic moving shapes.
#[derive(Parser)]
#[command(name = "vidistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics file (JSON lines); defaults to `<out_dir>/metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render every corpus into `data.dir`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the 2D image teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distillation pretraining of a video student against image teachers.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoints; replaces `distill.teachers` (unit weights).
        #[arg(long = "teacher")]
        teachers: Vec<PathBuf>,
        /// Overrides `model.student`.
        #[arg(long)]
        student: Option<Architecture>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inflate a teacher checkpoint into a res3d-tiny checkpoint.
    Inflate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune on the labeled target clips and evaluate on the test split.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Overrides `finetune.init`.
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        /// Overrides `finetune.from`.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        student: Option<Architecture>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a finetuned checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Container to score; defaults to the target test split.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        clips_per_video: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value = ACTION_HEAD)]
        head: String,
    },
    /// Write pooled trunk features of every clip to a checkpoint-format file.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every layer and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum InitArg {
    Scratch,
    Inflate,
    Distill,
}

impl From<InitArg> for InitKind {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Scratch => InitKind::Scratch,
            InitArg::Inflate => InitKind::Inflate,
            InitArg::Distill => InitKind::Distill,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    metrics: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let seed = common.seed.unwrap_or(cfg.seed);
        cfg.seed = seed;
        let metrics = common.metrics.clone().unwrap_or_else(|| cfg.out_dir.join("metrics.jsonl"));
        Ok(Ctx { cfg, seed, metrics })
    }

    fn log(&self) -> Result<MetricsLog> {
        create_parent(&self.metrics)?;
        MetricsLog::open(&self.metrics)
    }

    fn out(&self, given: &Option<PathBuf>, default: String) -> PathBuf {
        given.clone().unwrap_or_else(|| self.cfg.out_dir.join(default))
    }

    /// Saves a checkpoint with the effective config beside it.
    fn save(&self, ckpt: &Checkpoint, path: &Path) -> Result<()> {
        create_parent(path)?;
        ckpt.save(path)?;
        self.cfg.write_beside(path)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
        }
        _ => Ok(()),
    }
}

/// Runs one subcommand; `Ok` carries the exit code.
fn run(command: Command) -> Result<u8> {
    match command {
        Command::GenData { common } => {
            let ctx = Ctx::new(&common)?;
            std::fs::create_dir_all(&ctx.cfg.data.dir)
                .map_err(|e| Error::Io { path: ctx.cfg.data.dir.clone(), source: e })?;
            for (corpus, header) in generate_all(&ctx.cfg.data, ctx.seed)? {
                println!("{}: {} clips", ctx.cfg.data.path(corpus).display(), header.n_clips);
            }
        }
        Command::TrainTeacher { common, out } => {
            let ctx = Ctx::new(&common)?;
            let r = train_teacher(&ctx.cfg, ctx.seed, &mut ctx.log()?)?;
            println!("teacher held-out accuracy {:.4}", r.test_accuracy);
            ctx.save(&r.checkpoint, &ctx.out(&out, "teacher.ckpt".into()))?;
        }
        Command::Distill { common, teachers, student, out } => {
            let mut ctx = Ctx::new(&common)?;
            if !teachers.is_empty() {
                ctx.cfg.distill.teachers =
                    teachers.into_iter().map(|checkpoint| TeacherSpec { checkpoint, weight: 1.0 }).collect();
            }
            if let Some(s) = student {
                ctx.cfg.model.student = s;
            }
            ctx.cfg.validate()?;
            let r = distill_pretrain(&ctx.cfg, ctx.seed, &mut ctx.log()?)?;
            println!(
                "distill loss {:.4} -> {:.4}, kept {:.3}",
                r.epoch_losses.first().copied().unwrap_or(f64::NAN),
                r.epoch_losses.last().copied().unwrap_or(f64::NAN),
                r.kept_fraction
            );
            let out = ctx.out(&out, format!("distill-{}.ckpt", ctx.cfg.model.student));
            ctx.save(&r.checkpoint, &out)?;
        }
        Command::Inflate { common, teacher, out } => {
            let mut ctx = Ctx::new(&common)?;
            ctx.cfg.model.student = Architecture::Res3dTiny;
            let s = inflate_checkpoint(&ctx.cfg, &teacher, ctx.seed)?;
            ctx.save(&Checkpoint::from_student(&s, 0, ctx.cfg.hash(), ctx.seed), &out)?;
        }
        Command::Finetune { common, init, from, student, out } => {
            let mut ctx = Ctx::new(&common)?;
            if let Some(i) = init {
                ctx.cfg.finetune.init = i.into();
            }
            if from.is_some() {
                ctx.cfg.finetune.from = from;
            }
            if let Some(s) = student {
                ctx.cfg.model.student = s;
            }
            ctx.cfg.validate()?;
            let init = Init::from_config(&ctx.cfg.finetune)?;
            let r = finetune(&ctx.cfg, &init, ctx.seed, &mut ctx.log()?)?;
            println!(
                "clip {:.4} top1 {:.4} top{} {:.4} over {} videos",
                r.eval.clip_acc, r.eval.top1, r.eval.k, r.eval.topk, r.eval.videos
            );
            let init_name = format!("{:?}", ctx.cfg.finetune.init).to_lowercase();
            let out = ctx.out(&out, format!("finetune-{}-{init_name}.ckpt", ctx.cfg.model.student));
            ctx.save(&r.checkpoint, &out)?;
        }
        Command::Eval { common, checkpoint, corpus, clips_per_video, top_k, head } => {
            let mut ctx = Ctx::new(&common)?;
            if let Some(n) = clips_per_video {
                ctx.cfg.eval.clips_per_video = n;
            }
            if let Some(k) = top_k {
                ctx.cfg.eval.top_k = k;
            }
            ctx.cfg.validate()?;
            let net = Checkpoint::load(&checkpoint)?.to_student(&ctx.cfg.model.trunk)?;
            let corpus = corpus.unwrap_or_else(|| ctx.cfg.data.path(Corpus::TargetTest));
            let batch = ctx.cfg.optim.finetune.batch_size;
            let m = evaluate(&net, &head, &corpus, &ctx.cfg.eval, ctx.cfg.data.frames, batch)?;
            ctx.log()?.log(m.record("eval", 0, 0))?;
            println!("clip {:.4} top1 {:.4} top{} {:.4} over {} videos", m.clip_acc, m.top1, m.k, m.topk, m.videos);
        }
        Command::ExportFeatures { common, checkpoint, corpus, out } => {
            let ctx = Ctx::new(&common)?;
            let net = Checkpoint::load(&checkpoint)?.to_student(&ctx.cfg.model.trunk)?;
            let corpus = corpus.unwrap_or_else(|| ctx.cfg.data.path(Corpus::TargetTest));
            let f = export_features(&net, &corpus, ctx.cfg.optim.finetune.batch_size, ctx.seed)?;
            create_parent(&out)?;
            f.save(&out)?;
            let shape = f.get("features").map(|t| t.shape().to_vec()).unwrap_or_default();
            println!("wrote {} features {shape:?}", out.display());
        }
        Command::Gradcheck { common, instances } => {
            let ctx = Ctx::new(&common)?;
            let mut failed = Vec::new();
            for case in gradsuite::run(instances, ctx.seed)? {
                let ok = case.passes(DEFAULT_TOLERANCE);
                println!(
                    "{:<20} {} max rel error {:.2e} over {} entries ({} instances)",
                    case.name,
                    if ok { "ok  " } else { "FAIL" },
                    case.max_rel_error,
                    case.checked,
                    case.instances
                );
                if !ok {
                    failed.push(case.name);
                }
            }
            if !failed.is_empty() {
                eprintln!("gradient check failed for {}", failed.join(", "));
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
