//! Subcommand implementations. Every artifact-producing run writes a
//! key=value manifest of its full effective configuration next to its
//! output; feeding that manifest back through `--config` reproduces the
//! run.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use mfm_core::ckpt::Checkpoint;
use mfm_core::dataio::{
    load_corpus, synth_labeled_corpus, synth_pretrain_corpus, write_corpus, LabeledSpec,
    PretrainSpec, VideoFeatures, DEFAULT_STRUCT_SEED,
};
use mfm_core::exec::{self, Exec};
use mfm_core::mfm::{
    check_gradients, pretrain, CheckpointSink, GradCheckDims, HeadKind, MaskingConfig,
    PretrainConfig,
};
use mfm_core::opt::StepSchedule;
use mfm_core::tokenizer::Codebook;
use mfm_core::vigat::{
    ablation_grid, evaluate, finetune, init_from_pretrained, BlockMode, VigatConfig, VigatModel,
};
use mfm_core::{Error, Result};

use crate::overlay::{absolute, Overlay};
use crate::{
    mode_name, AblateArgs, Cli, Command, EvaluateArgs, FinetuneArgs, Flavor, GradcheckArgs,
    HeadArg, InitMode, Milestones, PretrainArgs, SynthGenArgs,
};

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut ov = Overlay::load(cli.config.as_deref())?;
    let threads = ov.resolve("threads", cli.threads, 0usize)?;
    let exec = Exec::from_threads(threads);
    let ctx = Ctx {
        exec,
        threads,
        verbose: cli.verbose,
    };
    exec::with_threads(threads, move || match cli.command {
        Command::SynthGen(args) => synth_gen(args, ov, ctx),
        Command::Pretrain(args) => cmd_pretrain(args, ov, ctx),
        Command::Finetune(args) => cmd_finetune(args, ov, ctx),
        Command::Evaluate(args) => cmd_evaluate(args, ov, ctx),
        Command::Gradcheck(args) => cmd_gradcheck(args, ov, ctx),
        Command::Ablate(args) => cmd_ablate(args, ov, ctx),
    })
}

#[derive(Clone, Copy)]
struct Ctx {
    exec: Exec,
    threads: usize,
    verbose: bool,
}

/// Effective configuration of one run, written as key=value lines.
struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &str, ctx: Ctx, seed: u64) -> Self {
        let mut m = Manifest {
            entries: Vec::new(),
        };
        m.put("command", command);
        m.put("git", env!("BUILD_GIT_DESCRIBE"));
        m.put("threads", ctx.threads);
        m.put("seed", seed);
        m
    }

    fn put(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn put_path(&mut self, key: &str, path: &Path) {
        self.put(key, absolute(path).display());
    }

    fn put_opt(&mut self, key: &str, value: Option<impl Display>) {
        if let Some(v) = value {
            self.put(key, v);
        }
    }

    fn render(&self) -> String {
        let mut text = String::new();
        for (k, v) in &self.entries {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        text
    }

    fn save(&self, path: &Path, ctx: Ctx) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))?;
        if ctx.verbose {
            eprint!("{}", self.render());
        }
        Ok(())
    }
}

fn reject_flag<T>(flavor: Flavor, value: &Option<T>, flag: &'static str) -> Result<()> {
    if value.is_some() {
        let other = match flavor {
            Flavor::Pretrain => "labeled",
            Flavor::Labeled => "pretrain",
        };
        return Err(Error::InvalidArgument {
            op: "synth-gen",
            msg: format!("--{flag} only applies to the {other} flavor"),
        });
    }
    Ok(())
}

fn synth_gen(args: SynthGenArgs, mut ov: Overlay, ctx: Ctx) -> Result<()> {
    let flavor = ov.resolve("flavor", Some(args.flavor), args.flavor)?;
    let seed = ov.resolve_seed(args.seed)?;
    let out: PathBuf = ov.require("out", args.out)?;
    let frames = ov.resolve("frames", args.frames, 5usize)?;
    let objects = ov.resolve("objects", args.objects, 8usize)?;
    let feature_dim = ov.resolve("feature-dim", args.feature_dim, 32usize)?;
    let struct_seed = ov.resolve("struct-seed", args.struct_seed, DEFAULT_STRUCT_SEED)?;
    let vocab = ov.resolve("vocab", args.vocab, 64usize)?;

    match flavor {
        Flavor::Pretrain => {
            reject_flag(flavor, &args.classes, "classes")?;
            let videos = ov.resolve("videos", args.videos, 64usize)?;
            let patches = ov.resolve("patches", args.patches, 4usize)?;
            let patch_dim = ov.resolve("patch-dim", args.patch_dim, 16usize)?;
            let codebook_out = ov
                .or_config("codebook-out", args.codebook_out)?
                .unwrap_or_else(|| out.join("codebook.mfmc"));
            ov.finish()?;

            let mut spec = PretrainSpec::new(
                videos,
                frames,
                objects,
                feature_dim,
                patches,
                patch_dim,
                vocab,
                seed,
            );
            spec.struct_seed = struct_seed;
            let (corpus, codebook) = synth_pretrain_corpus(&spec)?;
            write_corpus(&out, &corpus)?;
            codebook.save(&codebook_out)?;

            let mut manifest = Manifest::new("synth-gen", ctx, seed);
            manifest.put("flavor", "pretrain");
            manifest.put_path("out", &out);
            manifest.put("videos", videos);
            manifest.put("frames", frames);
            manifest.put("objects", objects);
            manifest.put("feature-dim", feature_dim);
            manifest.put("patches", patches);
            manifest.put("patch-dim", patch_dim);
            manifest.put("vocab", vocab);
            manifest.put_path("codebook-out", &codebook_out);
            manifest.put("struct-seed", struct_seed);
            manifest.save(&out.join("run.manifest"), ctx)?;
            println!(
                "wrote {videos} pretraining videos to {} (codebook {})",
                out.display(),
                codebook_out.display()
            );
        }
        Flavor::Labeled => {
            for (flag, set) in [
                ("patches", args.patches.is_some()),
                ("patch-dim", args.patch_dim.is_some()),
            ] {
                reject_flag(flavor, &set.then_some(()), flag)?;
            }
            reject_flag(flavor, &args.codebook_out, "codebook-out")?;
            let videos = ov.resolve("videos", args.videos, 120usize)?;
            let classes = ov.resolve("classes", args.classes, 4usize)?;
            ov.finish()?;

            let mut spec = LabeledSpec::new(videos, classes, frames, objects, feature_dim, seed);
            spec.struct_seed = struct_seed;
            spec.l = vocab;
            let corpus = synth_labeled_corpus(&spec)?;
            write_corpus(&out, &corpus)?;

            let mut manifest = Manifest::new("synth-gen", ctx, seed);
            manifest.put("flavor", "labeled");
            manifest.put_path("out", &out);
            manifest.put("videos", videos);
            manifest.put("classes", classes);
            manifest.put("frames", frames);
            manifest.put("objects", objects);
            manifest.put("feature-dim", feature_dim);
            manifest.put("vocab", vocab);
            manifest.put("struct-seed", struct_seed);
            manifest.save(&out.join("run.manifest"), ctx)?;
            println!(
                "wrote {videos} labeled videos ({classes} classes) to {}",
                out.display()
            );
        }
    }
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs, mut ov: Overlay, ctx: Ctx) -> Result<()> {
    let seed = ov.resolve_seed(args.seed)?;
    let corpus_dir: PathBuf = ov.require("corpus", args.corpus)?;
    let codebook_path: PathBuf = ov.require("codebook", args.codebook)?;
    let out: PathBuf = ov.require("out", args.out)?;
    let gamma = ov.resolve("gamma", args.gamma, 0.4)?;
    let top_r = ov.resolve("top-r", args.top_r, 50usize)?;
    let epochs = ov.resolve("epochs", args.epochs, 200usize)?;
    let lr = ov.resolve("lr", args.lr, 1e-3)?;
    let milestones = ov.resolve("milestones", args.milestones, Milestones(vec![50, 100]))?;
    let decay = ov.resolve("decay", args.decay, 0.1)?;
    let batch = ov.resolve("batch", args.batch, 16usize)?;
    let head = ov.resolve("head", args.head, HeadArg(HeadKind::Sigmoid))?;
    let attention_dim = ov.or_config("attention-dim", args.attention_dim)?;
    let every = ov.resolve("checkpoint-every", args.checkpoint_every, 0usize)?;
    ov.finish()?;

    let mut manifest = Manifest::new("pretrain", ctx, seed);
    manifest.put_path("corpus", &corpus_dir);
    manifest.put_path("codebook", &codebook_path);
    manifest.put("gamma", gamma);
    manifest.put("top-r", top_r);
    manifest.put("epochs", epochs);
    manifest.put("lr", lr);
    manifest.put("milestones", &milestones);
    manifest.put("decay", decay);
    manifest.put("batch", batch);
    manifest.put("head", head);
    manifest.put_opt("attention-dim", attention_dim);
    manifest.put("checkpoint-every", every);
    manifest.put_path("out", &out);
    // Written before training so an aborted run still leaves provenance.
    manifest.save(&out.with_extension("manifest"), ctx)?;

    let videos = load_corpus(&corpus_dir)?;
    let codebook = Codebook::load(&codebook_path)?;
    let mut cfg = PretrainConfig::new(seed);
    cfg.epochs = epochs;
    cfg.schedule = StepSchedule::new(lr, milestones.0, decay)?;
    cfg.batch_size = batch;
    cfg.top_r = top_r;
    cfg.head = head.0;
    cfg.attention_dim = attention_dim;
    cfg.checkpoint = Some(CheckpointSink {
        path: out.clone(),
        every,
    });
    let mask = MaskingConfig::new(gamma, seed)?;

    let state = pretrain(&videos, &codebook, &cfg, &mask, ctx.exec)?;
    state.log.save(&out.with_extension("metrics"))?;
    let last = state.log.last().expect("at least one epoch");
    println!(
        "checkpoint={} epochs={} final_loss={}",
        out.display(),
        epochs,
        last.loss
    );
    Ok(())
}

/// Largest label plus one, for when `--classes` is not given.
fn derive_classes(corpora: &[&[VideoFeatures]]) -> Result<usize> {
    let max = corpora
        .iter()
        .flat_map(|vs| vs.iter())
        .filter_map(|v| v.label)
        .max()
        .ok_or_else(|| Error::InvalidArgument {
            op: "finetune",
            msg: "cannot derive --classes: no video carries a label".into(),
        })?;
    Ok(max as usize + 1)
}

fn check_frame_count(videos: &[VideoFeatures], expected: usize) -> Result<()> {
    for v in videos {
        if v.n != expected {
            return Err(Error::DimMismatch {
                op: "finetune",
                lhs: format!("video {} has {} frames", v.id, v.n),
                rhs: format!("--frames {expected}"),
            });
        }
    }
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs, mut ov: Overlay, ctx: Ctx) -> Result<()> {
    let seed = ov.resolve_seed(args.seed)?;
    let train_dir: PathBuf = ov.require("train", args.train)?;
    let val_dir: Option<PathBuf> = ov.or_config("val", args.val)?;
    let out: PathBuf = ov.require("out", args.out)?;
    let ckpt_arg = ov.resolve("ckpt", args.ckpt, "none".to_string())?;
    let init_w2 = ov.resolve("init-w2", args.init_w2, InitMode(BlockMode::GatRandom))?;
    let init_w3 = ov.resolve("init-w3", args.init_w3, InitMode(BlockMode::GatRandom))?;
    let share = ov.resolve("share-23", args.share_23, false)?;
    let global = ov.resolve("global", args.global, false)?;
    let frames = ov.or_config("frames", args.frames)?;
    let classes_given: Option<usize> = ov.or_config("classes", args.classes)?;
    let hidden = ov.or_config("hidden", args.hidden)?;
    let epochs = ov.resolve("epochs", args.epochs, 200usize)?;
    let lr = ov.resolve("lr", args.lr, 1e-4)?;
    let milestones = ov.resolve("milestones", args.milestones, Milestones(vec![60, 110]))?;
    let decay = ov.resolve("decay", args.decay, 0.1)?;
    let batch = ov.resolve("batch", args.batch, 16usize)?;
    let attention_dim = ov.or_config("attention-dim", args.attention_dim)?;
    ov.finish()?;

    let train_videos = load_corpus(&train_dir)?;
    let val_videos = match &val_dir {
        Some(dir) => Some(load_corpus(dir)?),
        None => None,
    };
    if let Some(expected) = frames {
        check_frame_count(&train_videos, expected)?;
        if let Some(val) = &val_videos {
            check_frame_count(val, expected)?;
        }
    }
    let classes = match classes_given {
        Some(c) => c,
        None => derive_classes(&[&train_videos])?,
    };

    let mut manifest = Manifest::new("finetune", ctx, seed);
    manifest.put_path("train", &train_dir);
    if let Some(dir) = &val_dir {
        manifest.put_path("val", dir);
    }
    if ckpt_arg == "none" {
        manifest.put("ckpt", "none");
    } else {
        manifest.put_path("ckpt", Path::new(&ckpt_arg));
    }
    manifest.put("init-w2", mode_name(init_w2.0));
    manifest.put("init-w3", mode_name(init_w3.0));
    manifest.put("share-23", share);
    manifest.put("global", global);
    manifest.put_opt("frames", frames);
    manifest.put("classes", classes);
    manifest.put_opt("hidden", hidden);
    manifest.put("epochs", epochs);
    manifest.put("lr", lr);
    manifest.put("milestones", &milestones);
    manifest.put("decay", decay);
    manifest.put("batch", batch);
    manifest.put_opt("attention-dim", attention_dim);
    manifest.put_path("out", &out);
    manifest.save(&out.with_extension("manifest"), ctx)?;

    let ckpt = if ckpt_arg == "none" {
        None
    } else {
        Some(Checkpoint::load(Path::new(&ckpt_arg))?)
    };
    let mut cfg = VigatConfig::new(classes, seed);
    cfg.use_global = global;
    cfg.omega2_mode = init_w2.0;
    cfg.omega3_mode = init_w3.0;
    cfg.weight_sharing_23 = share;
    cfg.hidden = hidden;
    cfg.epochs = epochs;
    cfg.schedule = StepSchedule::new(lr, milestones.0, decay)?;
    cfg.batch_size = batch;
    cfg.attention_dim = attention_dim;

    let f = train_videos[0].f;
    let mut model = init_from_pretrained(&cfg, f, ckpt.as_ref())?;
    let log = finetune(&mut model, &train_videos, val_videos.as_deref(), ctx.exec)?;
    model.save(&out)?;
    log.save(&out.with_extension("metrics"))?;
    let last = log.last().expect("at least one epoch");
    match last.top1 {
        Some(top1) => println!(
            "model={} epochs={} final_loss={} final_top1={top1:.2}",
            out.display(),
            epochs,
            last.loss
        ),
        None => println!(
            "model={} epochs={} final_loss={}",
            out.display(),
            epochs,
            last.loss
        ),
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, mut ov: Overlay, ctx: Ctx) -> Result<()> {
    let model_path: PathBuf = ov.require("model", args.model)?;
    let test_dir: PathBuf = ov.require("test", args.test)?;
    ov.finish()?;
    let model = VigatModel::load(&model_path)?;
    let test = load_corpus(&test_dir)?;
    let top1 = evaluate(&model, &test, ctx.exec)?;
    println!("top1={top1:.2}");
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs, mut ov: Overlay, _ctx: Ctx) -> Result<()> {
    let seed = ov.resolve_seed(args.seed)?;
    ov.finish()?;
    let reports = check_gradients(&GradCheckDims::default(), HeadKind::Sigmoid, seed)?;
    let mut worst: Option<&str> = None;
    for r in &reports {
        println!(
            "name={} max_rel_err={:.3e} pass={}",
            r.name, r.max_rel_err, r.pass
        );
        if !r.pass && worst.is_none() {
            worst = Some(&r.name);
        }
    }
    match worst {
        None => {
            println!("all gradients within tolerance {}", reports[0].tolerance);
            Ok(())
        }
        Some(name) => Err(Error::NonFinite {
            what: format!("gradient of {name} exceeds tolerance"),
        }),
    }
}

fn cmd_ablate(args: AblateArgs, mut ov: Overlay, ctx: Ctx) -> Result<()> {
    let seed = ov.resolve_seed(args.seed)?;
    let train_dir: PathBuf = ov.require("train", args.train)?;
    let test_dir: PathBuf = ov.require("test", args.test)?;
    let ckpt_path: PathBuf = ov.require("ckpt", args.ckpt)?;
    let classes_given: Option<usize> = ov.or_config("classes", args.classes)?;
    let epochs = ov.resolve("epochs", args.epochs, 200usize)?;
    let lr = ov.resolve("lr", args.lr, 1e-4)?;
    let milestones = ov.resolve("milestones", args.milestones, Milestones(vec![60, 110]))?;
    let decay = ov.resolve("decay", args.decay, 0.1)?;
    let batch = ov.resolve("batch", args.batch, 16usize)?;
    let hidden = ov.or_config("hidden", args.hidden)?;
    let out: Option<PathBuf> = ov.or_config("out", args.out)?;
    ov.finish()?;

    let train_videos = load_corpus(&train_dir)?;
    let test_videos = load_corpus(&test_dir)?;
    let classes = match classes_given {
        Some(c) => c,
        None => derive_classes(&[&train_videos, &test_videos])?,
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let f = train_videos[0].f;

    if let Some(dir) = &out {
        let mut manifest = Manifest::new("ablate", ctx, seed);
        manifest.put_path("train", &train_dir);
        manifest.put_path("test", &test_dir);
        manifest.put_path("ckpt", &ckpt_path);
        manifest.put("classes", classes);
        manifest.put("epochs", epochs);
        manifest.put("lr", lr);
        manifest.put("milestones", &milestones);
        manifest.put("decay", decay);
        manifest.put("batch", batch);
        manifest.put_opt("hidden", hidden);
        manifest.put_path("out", dir);
        manifest.save(&dir.join("run.manifest"), ctx)?;
    }

    println!(
        "{:<12} {:<12} {:<6} {:>6}",
        "omega2", "omega3", "share", "top1"
    );
    for (w2, w3, share) in ablation_grid() {
        let mut cfg = VigatConfig::new(classes, seed);
        cfg.omega2_mode = w2;
        cfg.omega3_mode = w3;
        cfg.weight_sharing_23 = share;
        cfg.hidden = hidden;
        cfg.epochs = epochs;
        cfg.schedule = StepSchedule::new(lr, milestones.0.clone(), decay)?;
        cfg.batch_size = batch;

        let mut model = init_from_pretrained(&cfg, f, Some(&ckpt))?;
        let log = finetune(&mut model, &train_videos, None, ctx.exec)?;
        let top1 = evaluate(&model, &test_videos, ctx.exec)?;
        println!(
            "{:<12} {:<12} {:<6} {:>6.2}",
            mode_name(w2),
            mode_name(w3),
            if share { "yes" } else { "no" },
            top1
        );
        if let Some(dir) = &out {
            let name = format!(
                "{}-{}-{}.metrics",
                mode_name(w2),
                mode_name(w3),
                if share { "shared" } else { "separate" }
            );
            log.save(&dir.join(name))?;
        }
    }
    Ok(())
}
