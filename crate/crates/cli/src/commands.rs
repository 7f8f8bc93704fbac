use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mvdlab::backbone::{ModelConfig, Modality};
use mvdlab::checkpoint::{load_checkpoint, load_teacher, save_checkpoint};
use mvdlab::dataset::{compute_norm_stats, generate, load_corpus, save_corpus, save_norm_stats, Geometry, LabeledVideoSet, Split, Task};
use mvdlab::distill::{distill as run_distill, ema_teacher_distill, per_token_distill, DistillConfig, TeacherBundle};
use mvdlab::eval::{aggregate_similarity, compare_report, EvalTask, FinetuneConfig};
use mvdlab::pretrain::{pretrain_image_teacher, pretrain_video_teacher, PretrainConfig};
use mvdlab::tokenizer::{layout_for, TokenLayout};
use mvdlab::train::{threads_from_env, TrainLog};

use crate::config::{resolve, RunConfig};
use crate::manifest::{corpus_digest, file_digest, RunManifest};
use crate::{AnalyzeArgs, Baseline, ConfigArgs, DistillArgs, EvalArgs, ModalityArg, PretrainArgs, SplitArg, SynthArgs, TaskArg};

pub enum CliError {
    /// bad arguments or settings (exit 2)
    Usage(anyhow::Error),
    /// anything that went wrong while doing the work (exit 1)
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<mvdlab::Error> for CliError {
    fn from(e: mvdlab::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

trait UsageExt<T> {
    fn usage(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| CliError::Usage(e.into()))
    }
}

fn usage_err(msg: impl Into<String>) -> CliError {
    CliError::Usage(anyhow!(msg.into()))
}

fn command_line() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

fn run_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    resolve(args.config.as_deref(), &args.set).usage()
}

pub fn synth(a: &SynthArgs) -> CliResult {
    let geometry: Geometry = a.geometry.parse().usage()?;
    let (task, default_classes) = match a.task {
        TaskArg::Spatial => (Task::Spatial, 3),
        TaskArg::Temporal => (Task::Temporal, 4),
        TaskArg::Static => (Task::Static, 3),
    };
    if a.n == 0 {
        return Err(usage_err("--n must be at least 1"));
    }
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let set = generate(task, a.seed, a.n, geometry, a.classes.unwrap_or(default_classes)).usage()?.with_split(split);
    save_corpus(&set, &a.out).with_context(|| format!("writing corpus to {}", a.out.display()))?;
    save_norm_stats(&compute_norm_stats(&set)?, &a.out.join("norm.txt"))?;
    println!("wrote {} {task} clips ({geometry}, {} classes) to {}", set.len(), set.class_count(), a.out.display());
    Ok(())
}

fn load_pooled(dirs: &[PathBuf]) -> CliResult<LabeledVideoSet> {
    let mut pooled: Option<LabeledVideoSet> = None;
    for d in dirs {
        let set = load_corpus(d).with_context(|| format!("loading corpus {}", d.display()))?;
        pooled = Some(match pooled {
            None => set,
            Some(p) => p.concat(&set).with_context(|| format!("pooling {}", d.display()))?,
        });
    }
    pooled.ok_or_else(|| usage_err("no corpus given"))
}

fn data_layout(cfg: &RunConfig, set: &LabeledVideoSet) -> CliResult<TokenLayout> {
    let geometry = set.geometry().ok_or_else(|| CliError::Runtime(anyhow!("corpus is empty")))?;
    layout_for(geometry, cfg.usize("data", "patch_t"), cfg.usize("data", "patch_s")).usage()
}

fn model_config(cfg: &RunConfig, layout: TokenLayout, modality: Modality) -> CliResult<ModelConfig> {
    let m = ModelConfig {
        embed_dim: cfg.usize("model", "embed_dim"),
        depth: cfg.usize("model", "depth"),
        heads: cfg.usize("model", "heads"),
        mlp_ratio: cfg.usize("model", "mlp_ratio"),
        decoder_dim: cfg.usize("model", "decoder_dim"),
        decoder_depth: cfg.usize("model", "decoder_depth"),
        layout: if modality == Modality::Image { layout.image() } else { layout },
        modality,
    };
    m.validate().usage()?;
    Ok(m)
}

fn stage1_config(cfg: &RunConfig, modality: Modality) -> CliResult<PretrainConfig> {
    let defaults = match modality {
        Modality::Image => PretrainConfig::image(),
        Modality::Video => PretrainConfig::video(),
    };
    let s = "stage1";
    let pc = PretrainConfig {
        mask_ratio: cfg.f64_or_auto(s, "mask_ratio").unwrap_or(defaults.mask_ratio),
        epochs: cfg.usize(s, "epochs"),
        batch_size: cfg.usize(s, "batch_size"),
        base_lr: cfg.f64(s, "lr"),
        weight_decay: cfg.f64(s, "weight_decay"),
        betas: (cfg.f64(s, "beta1"), cfg.f64(s, "beta2")),
        warmup_fraction: cfg.f64(s, "warmup_fraction"),
        seed: cfg.u64(s, "seed"),
        norm_pix_target: cfg.bool(s, "norm_pix_target"),
        threads: threads_from_env(),
    };
    pc.validate().usage()?;
    Ok(pc)
}

fn write_run_files(dir: &Path, cfg: &RunConfig, log: &TrainLog) -> CliResult {
    fs::write(dir.join("run_config.txt"), cfg.to_text()).context("writing run_config.txt")?;
    log.save(&dir.join("train_log.csv"))?;
    Ok(())
}

fn describe_corpora(m: &mut RunManifest, dirs: &[PathBuf]) -> CliResult {
    for (i, d) in dirs.iter().enumerate() {
        m.input(&format!("data.{i}"), format!("{} sha256={}", d.display(), corpus_digest(d)?));
    }
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> CliResult {
    let mut cfg = run_config(&a.cfg)?;
    let modality = match a.modality {
        ModalityArg::Image => Modality::Image,
        ModalityArg::Video => Modality::Video,
    };
    let pc = stage1_config(&cfg, modality)?;
    // record the resolved ratio so the snapshot replays without `auto`
    cfg.set("stage1", "mask_ratio", &pc.mask_ratio.to_string()).usage()?;
    let corpus = load_pooled(&a.data)?;
    let layout = data_layout(&cfg, &corpus)?;
    let model = model_config(&cfg, layout, modality)?;

    let mut manifest = RunManifest::new(a.out.join("run_manifest.txt"), format!("mvdlab {}", command_line()));
    manifest.config(cfg.to_text()).seed("stage1.seed", pc.seed);
    describe_corpora(&mut manifest, &a.data)?;
    manifest.begin()?;
    let trained = match modality {
        Modality::Image => pretrain_image_teacher(&corpus, model, &pc)?,
        Modality::Video => pretrain_video_teacher(&corpus, model, &pc)?,
    };
    save_checkpoint(&trained.encoder, &a.out)?;
    write_run_files(&a.out, &cfg, &trained.log)?;
    manifest
        .output("checkpoint", format!("{} params_sha256={}", a.out.display(), trained.encoder.hash()))
        .output("train_log", a.out.join("train_log.csv").display().to_string())
        .output("run_config", a.out.join("run_config.txt").display().to_string());
    manifest.finish()?;
    let losses = trained.log.losses();
    println!(
        "{modality} teacher: {} epochs, loss {:.4} -> {:.4}, saved to {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn stage2_config(cfg: &RunConfig, lambda_img: f64, lambda_vid: f64) -> CliResult<DistillConfig> {
    let s = "stage2";
    let dc = DistillConfig {
        lambda_img,
        lambda_vid,
        mask_ratio: cfg.f64(s, "mask_ratio"),
        beta: cfg.f64(s, "beta"),
        target_norm: cfg.get(s, "target_norm").parse().usage()?,
        pixel_branch: cfg.bool(s, "pixel_branch"),
        lambda_pixel: cfg.f64(s, "lambda_pixel"),
        norm_pix_target: cfg.bool(s, "norm_pix_target"),
        epochs: cfg.usize(s, "epochs"),
        batch_size: cfg.usize(s, "batch_size"),
        base_lr: cfg.f64(s, "lr"),
        weight_decay: cfg.f64(s, "weight_decay"),
        betas: (cfg.f64(s, "beta1"), cfg.f64(s, "beta2")),
        warmup_fraction: cfg.f64(s, "warmup_fraction"),
        seed: cfg.u64(s, "seed"),
        threads: threads_from_env(),
    };
    dc.validate().usage()?;
    Ok(dc)
}

/// A weight is positive exactly when its teacher is given; `auto` follows
/// the teacher.
fn resolve_lambda(value: Option<f64>, teacher: bool, name: &str) -> CliResult<f64> {
    match (value, teacher) {
        (None, t) => Ok(if t { 1.0 } else { 0.0 }),
        (Some(v), _) if v < 0.0 => Err(usage_err(format!("{name} must be nonnegative, got {v}"))),
        (Some(v), false) if v > 0.0 => Err(usage_err(format!("{name} = {v} but no matching teacher was given"))),
        (Some(v), true) if v == 0.0 => Err(usage_err(format!("{name} = 0 leaves the given teacher unused; drop the teacher instead"))),
        (Some(v), _) => Ok(v),
    }
}

pub fn distill(a: &DistillArgs) -> CliResult {
    let mut cfg = run_config(&a.cfg)?;
    if let Some(v) = a.lambda_img {
        cfg.set("stage2", "lambda_img", &v.to_string()).usage()?;
    }
    if let Some(v) = a.lambda_vid {
        cfg.set("stage2", "lambda_vid", &v.to_string()).usage()?;
    }
    if let Some(m) = a.momentum {
        cfg.set("stage2", "momentum", &m.to_string()).usage()?;
    }
    if a.pixel_branch {
        cfg.set("stage2", "pixel_branch", "true").usage()?;
    }
    let teachers_given = [a.image_teacher.is_some(), a.video_teacher.is_some()];
    let explicit_lambdas = cfg.f64_or_auto("stage2", "lambda_img").is_some() || cfg.f64_or_auto("stage2", "lambda_vid").is_some();
    let (lambda_img, lambda_vid) = match a.baseline {
        None => {
            if !teachers_given.contains(&true) {
                return Err(usage_err("give --image-teacher and/or --video-teacher (or choose a --baseline)"));
            }
            (
                resolve_lambda(cfg.f64_or_auto("stage2", "lambda_img"), teachers_given[0], "lambda_img")?,
                resolve_lambda(cfg.f64_or_auto("stage2", "lambda_vid"), teachers_given[1], "lambda_vid")?,
            )
        }
        Some(Baseline::PerToken) => {
            if teachers_given.iter().filter(|&&t| t).count() != 1 {
                return Err(usage_err("--baseline per-token needs exactly one teacher"));
            }
            if explicit_lambdas {
                return Err(usage_err("loss weights do not apply to --baseline per-token"));
            }
            (if teachers_given[0] { 1.0 } else { 0.0 }, if teachers_given[1] { 1.0 } else { 0.0 })
        }
        Some(Baseline::Ema) => {
            if teachers_given.contains(&true) {
                return Err(usage_err("--baseline ema uses the student's own EMA copy; do not pass teachers"));
            }
            if explicit_lambdas {
                return Err(usage_err("loss weights do not apply to --baseline ema"));
            }
            (0.0, 1.0)
        }
    };
    if a.baseline.is_none() {
        cfg.set("stage2", "lambda_img", &lambda_img.to_string()).usage()?;
        cfg.set("stage2", "lambda_vid", &lambda_vid.to_string()).usage()?;
    }
    let dc = stage2_config(&cfg, lambda_img, lambda_vid)?;
    let momentum = cfg.f64("stage2", "momentum");
    if a.baseline == Some(Baseline::Ema) && !(momentum > 0.0 && momentum < 1.0) {
        return Err(usage_err(format!("momentum {momentum} must lie in (0, 1)")));
    }
    let corpus = load_pooled(&a.data)?;
    let layout = data_layout(&cfg, &corpus)?;
    let student = model_config(&cfg, layout, Modality::Video)?;

    let teachers = TeacherBundle {
        image: a.image_teacher.as_deref().map(|p| load_teacher(p, Modality::Image).with_context(|| format!("image teacher {}", p.display()))).transpose()?,
        video: a.video_teacher.as_deref().map(|p| load_teacher(p, Modality::Video).with_context(|| format!("video teacher {}", p.display()))).transpose()?,
    };
    let mut manifest = RunManifest::new(a.out.join("run_manifest.txt"), format!("mvdlab {}", command_line()));
    manifest.config(cfg.to_text()).seed("stage2.seed", dc.seed);
    describe_corpora(&mut manifest, &a.data)?;
    for (name, path, t) in [("image_teacher", &a.image_teacher, &teachers.image), ("video_teacher", &a.video_teacher, &teachers.video)] {
        if let (Some(p), Some(t)) = (path, t) {
            manifest.input(name, format!("{} params_sha256={}", p.display(), t.hash()));
        }
    }
    let before = teachers.hashes();
    manifest.begin()?;
    let outcome = match a.baseline {
        None => run_distill(student, &teachers, &corpus, &dc)?,
        Some(Baseline::PerToken) => {
            let teacher = teachers.image.as_ref().or(teachers.video.as_ref()).expect("one teacher");
            per_token_distill(student, teacher, &corpus, &dc)?
        }
        Some(Baseline::Ema) => ema_teacher_distill(student, &corpus, &dc, momentum)?,
    };
    if teachers.hashes() != before {
        return Err(CliError::Runtime(anyhow!("teacher parameters changed during distillation")));
    }
    save_checkpoint(&outcome.student, &a.out)?;
    write_run_files(&a.out, &cfg, &outcome.log)?;
    manifest
        .output("checkpoint", format!("{} params_sha256={}", a.out.display(), outcome.student.hash()))
        .output("train_log", a.out.join("train_log.csv").display().to_string())
        .output("run_config", a.out.join("run_config.txt").display().to_string());
    manifest.finish()?;
    let losses = outcome.log.losses();
    println!(
        "student: {} epochs, loss {:.4} -> {:.4}, saved to {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn eval_config(cfg: &RunConfig) -> CliResult<FinetuneConfig> {
    let s = "eval";
    let fc = FinetuneConfig {
        epochs: cfg.usize(s, "epochs"),
        batch_size: cfg.usize(s, "batch_size"),
        base_lr: cfg.f64(s, "lr"),
        weight_decay: cfg.f64(s, "weight_decay"),
        warmup_fraction: cfg.f64(s, "warmup_fraction"),
        linear_probe: cfg.get(s, "mode") == "probe",
        seed: cfg.u64(s, "seed"),
        threads: threads_from_env(),
    };
    fc.validate().usage()?;
    Ok(fc)
}

fn model_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn sidecar(out: &Path) -> PathBuf {
    out.with_extension("manifest.txt")
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let cfg = run_config(&a.cfg)?;
    let fc = eval_config(&cfg)?;
    let mut task_dirs = Vec::new();
    for spec in &a.tasks {
        let (name, train, val) = match spec.split_once('=') {
            Some((name, dirs)) => {
                let (t, v) = dirs.split_once(':').ok_or_else(|| usage_err(format!("task {spec:?} is not NAME=TRAIN_DIR:VAL_DIR")))?;
                (name.to_string(), PathBuf::from(t), PathBuf::from(v))
            }
            None => (spec.clone(), a.data_root.join(spec).join("train"), a.data_root.join(spec).join("val")),
        };
        if name.is_empty() || name.contains(',') {
            return Err(usage_err(format!("bad task name in {spec:?}")));
        }
        task_dirs.push((name, train, val));
    }
    let mut names: Vec<String> = a.models.iter().map(|p| model_name(p)).collect();
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    if dedup.len() != names.len() {
        names = a.models.iter().map(|p| p.display().to_string()).collect();
    }

    let mut manifest = RunManifest::new(sidecar(&a.out), format!("mvdlab {}", command_line()));
    manifest.config(cfg.to_text()).seed("eval.seed", fc.seed);
    let mut models = Vec::new();
    for (path, name) in a.models.iter().zip(&names) {
        let m = load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))?;
        if m.modality() != Modality::Video {
            return Err(CliError::Runtime(anyhow!(
                "{} holds a model of modality {}; evaluation classifies clips and needs a video model",
                path.display(),
                m.modality()
            )));
        }
        manifest.input(&format!("model.{name}"), format!("{} params_sha256={}", path.display(), m.hash()));
        models.push((name.clone(), m));
    }
    let mut sets = Vec::new();
    for (name, train, val) in &task_dirs {
        let tr = load_corpus(train).with_context(|| format!("loading {}", train.display()))?;
        let va = load_corpus(val).with_context(|| format!("loading {}", val.display()))?;
        manifest.input(&format!("task.{name}.train"), format!("{} sha256={}", train.display(), corpus_digest(train)?));
        manifest.input(&format!("task.{name}.val"), format!("{} sha256={}", val.display(), corpus_digest(val)?));
        sets.push((name.clone(), tr, va));
    }
    manifest.begin()?;
    let tasks: Vec<EvalTask<'_>> = sets.iter().map(|(name, tr, va)| EvalTask { name: name.clone(), train: tr, val: va }).collect();
    let students: Vec<(String, &mvdlab::backbone::TransformerModel<f32>)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let report = compare_report(&students, &tasks, &fc)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    report.save(&a.out)?;
    manifest.output("report", format!("{} sha256={}", a.out.display(), file_digest(&a.out)?));
    manifest.finish()?;
    print!("{}", report.summary());
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult {
    let model = load_checkpoint(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let set = load_corpus(&a.data).with_context(|| format!("loading corpus {}", a.data.display()))?;
    if let Some(g) = set.geometry() {
        let want = model.layout().geometry();
        let fits = match model.modality() {
            Modality::Image => (g.h, g.w, g.c) == (want.h, want.w, want.c),
            Modality::Video => g == want,
        };
        if !fits {
            return Err(CliError::Runtime(anyhow!("clips {g} do not fit the {} model layout {}", model.modality(), model.layout())));
        }
    }
    let mut manifest = RunManifest::new(sidecar(&a.out), format!("mvdlab {}", command_line()));
    manifest
        .input("model", format!("{} params_sha256={}", a.model.display(), model.hash()))
        .input("data", format!("{} sha256={}", a.data.display(), corpus_digest(&a.data)?));
    manifest.begin()?;
    let (matrix, summary) = aggregate_similarity(&model, &set, threads_from_env())?;
    let shown = if a.frame_axis && model.modality() == Modality::Video { matrix.expand(model.layout().pt) } else { matrix };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    shown.save(&a.out)?;
    manifest.output("similarity", format!("{} sha256={}", a.out.display(), file_digest(&a.out)?));
    manifest.finish()?;
    println!("{} model, {} clips: mean off-diagonal similarity {summary:.6}", model.modality(), set.len());
    Ok(())
}
