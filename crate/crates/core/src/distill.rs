//! Stage 2: masked feature distillation from frozen teachers, plus the
//! per-token and EMA-teacher baselines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::autograd::{Distance, Graph, Var};
use crate::backbone::{init_decoder, init_model, DecoderConfig, DecoderModel, FrozenModel, ModelConfig, Modality, TransformerModel};
use crate::dataset::{LabeledVideoSet, VideoClip};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::params::{GradStore, LinearIdx, ParamStore, LN_EPS};
use crate::seed::{self, Rng};
use crate::tensor::{Mat, Scalar};
use crate::tokenizer::{patchify_image, patchify_video, pixel_targets, sample_tube_mask, split_visible, TokenLayout, TubeMask};
use crate::train::{epoch_order, ordered_map, steps_per_epoch, EpochRecord, LogKind, TrainLog};

/// Optional normalization applied to teacher features before the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TargetNorm {
    #[default]
    None,
    /// per-token layer norm without affine parameters
    LayerNorm,
}

impl fmt::Display for TargetNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetNorm::None => "none",
            TargetNorm::LayerNorm => "layernorm",
        })
    }
}

impl FromStr for TargetNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TargetNorm::None),
            "layernorm" => Ok(TargetNorm::LayerNorm),
            other => Err(Error::Config(format!("unknown target_norm {other:?} (expected none|layernorm)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub lambda_img: f64,
    pub lambda_vid: f64,
    pub mask_ratio: f64,
    /// smooth-L1 transition point
    pub beta: f64,
    pub target_norm: TargetNorm,
    /// adds a third decoder reconstructing pixels
    pub pixel_branch: bool,
    pub lambda_pixel: f64,
    pub norm_pix_target: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub warmup_fraction: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_img: 1.0,
            lambda_vid: 1.0,
            mask_ratio: 0.9,
            beta: 1.0,
            target_norm: TargetNorm::None,
            pixel_branch: false,
            lambda_pixel: 1.0,
            norm_pix_target: true,
            epochs: 100,
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            warmup_fraction: 0.025,
            seed: 0,
            threads: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_img < 0.0 || self.lambda_vid < 0.0 || self.lambda_pixel < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} must lie in [0, 1)", self.mask_ratio)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("base_lr must be positive and weight_decay nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} must lie in [0, 1)", self.warmup_fraction)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas ({b1}, {b2}) must lie in [0, 1)")));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.betas.0, beta2: self.betas.1, eps: 1e-8, weight_decay: self.weight_decay }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_img: self.lambda_img,
            lambda_vid: self.lambda_vid,
            lambda_pixel: if self.pixel_branch { self.lambda_pixel } else { 0.0 },
            beta: self.beta,
            norm_pix_target: self.norm_pix_target,
        }
    }
}

/// Frozen target generators. Either may be absent.
#[derive(Clone, Debug, Default)]
pub struct TeacherBundle {
    pub image: Option<FrozenModel<f32>>,
    pub video: Option<FrozenModel<f32>>,
}

impl TeacherBundle {
    pub fn hashes(&self) -> (Option<String>, Option<String>) {
        (self.image.as_ref().map(FrozenModel::hash), self.video.as_ref().map(FrozenModel::hash))
    }

    /// Checks the teachers against the student layout and the loss weights.
    pub fn check(&self, student: &ModelConfig, cfg: &DistillConfig) -> Result<()> {
        if self.image.is_none() && self.video.is_none() {
            return Err(Error::Config("distillation needs at least one teacher".into()));
        }
        if self.image.is_none() && cfg.lambda_img > 0.0 {
            return Err(Error::Config(format!("lambda_img = {} but no image teacher was given", cfg.lambda_img)));
        }
        if self.video.is_none() && cfg.lambda_vid > 0.0 {
            return Err(Error::Config(format!("lambda_vid = {} but no video teacher was given", cfg.lambda_vid)));
        }
        if student.modality != Modality::Video {
            return Err(Error::Modality("the student must be a video model".into()));
        }
        if let Some(t) = &self.image {
            if t.modality() != Modality::Image {
                return Err(Error::Modality(format!("image teacher slot holds a {} model", t.modality())));
            }
            if t.config().layout != student.layout.image() {
                return Err(Error::Shape(format!(
                    "image teacher layout {} does not match student frames {}",
                    t.config().layout,
                    student.layout.image()
                )));
            }
        }
        if let Some(t) = &self.video {
            if t.modality() != Modality::Video {
                return Err(Error::Modality(format!("video teacher slot holds a {} model", t.modality())));
            }
            if t.config().layout != student.layout {
                return Err(Error::Shape(format!(
                    "video teacher layout {} does not match student {}",
                    t.config().layout,
                    student.layout
                )));
            }
        }
        Ok(())
    }
}

fn normalize_rows<T: Scalar>(m: &mut Mat<T>) {
    let n = m.cols as f64;
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = T::lit((v.as_f64() - mean) * inv);
        }
    }
}

fn apply_norm<T: Scalar>(mut m: Mat<T>, norm: TargetNorm) -> Mat<T> {
    if norm == TargetNorm::LayerNorm {
        normalize_rows(&mut m);
    }
    m
}

/// Video-teacher features of the unmasked clip, one row per 3D token.
pub fn video_teacher_targets<T: Scalar>(teacher: &FrozenModel<T>, clip: &VideoClip, norm: TargetNorm) -> Result<Mat<T>> {
    let tokens = patchify_video(clip, teacher.model().layout())?;
    Ok(apply_norm(teacher.encode_all(&tokens)?, norm))
}

/// Image-teacher features laid out on the student grid: the target of 3D
/// token `(tau, i, j)` is the 2D-patch feature `(i, j)` of frame `tau * pt`.
pub fn image_teacher_targets<T: Scalar>(
    teacher: &FrozenModel<T>,
    clip: &VideoClip,
    layout: &TokenLayout,
    norm: TargetNorm,
) -> Result<Mat<T>> {
    let img_layout = teacher.model().layout();
    if *img_layout != layout.image() {
        return Err(Error::Shape(format!("image teacher layout {img_layout} does not match {}", layout.image())));
    }
    let spatial = layout.spatial();
    let mut out = Mat::zeros(layout.total(), teacher.model().embed_dim());
    for tau in 0..layout.t_tokens {
        let frame = clip.frame_clip(tau * layout.pt);
        let feats = teacher.encode_all(&patchify_image(&frame, img_layout)?)?;
        for s in 0..spatial {
            out.row_mut(tau * spatial + s).copy_from_slice(feats.row(s));
        }
    }
    Ok(apply_norm(out, norm))
}

/// Precomputed teacher features for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets<T> {
    pub img: Option<Mat<T>>,
    pub vid: Option<Mat<T>>,
}

pub fn teacher_targets(
    teachers: &TeacherBundle,
    clip: &VideoClip,
    layout: &TokenLayout,
    norm: TargetNorm,
) -> Result<DistillTargets<f32>> {
    Ok(DistillTargets {
        img: teachers.image.as_ref().map(|t| image_teacher_targets(t, clip, layout, norm)).transpose()?,
        vid: teachers.video.as_ref().map(|t| video_teacher_targets(t, clip, norm)).transpose()?,
    })
}

/// Mean smooth-L1 distance over `rows` x columns.
pub fn smooth_l1_feature_loss<T: Scalar>(pred: &Mat<T>, target: &Mat<T>, rows: &[usize], beta: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("predictions {:?} vs targets {:?}", pred.shape(), target.shape())));
    }
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let dist = Distance::SmoothL1 { beta };
    let mut total = 0.0;
    for &r in rows {
        total += pred.row(r).iter().zip(target.row(r)).map(|(a, b)| dist.value(*a - *b).as_f64()).sum::<f64>();
    }
    Ok(total / (rows.len() * pred.cols) as f64)
}

/// Term weights of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_img: f64,
    pub lambda_vid: f64,
    pub lambda_pixel: f64,
    pub beta: f64,
    pub norm_pix_target: bool,
}

/// The decoders on top of the student. A term is computed only when its
/// decoder exists and its weight is positive.
#[derive(Clone, Debug)]
pub struct Decoders<T> {
    pub img: Option<DecoderModel<T>>,
    pub vid: Option<DecoderModel<T>>,
    pub pixel: Option<DecoderModel<T>>,
}

impl<T: Scalar> Decoders<T> {
    pub fn init(student: &ModelConfig, teachers: &TeacherBundle, cfg: &DistillConfig) -> Result<Self> {
        let make = |dim: usize, tag: &str| init_decoder(DecoderConfig::for_encoder(student, dim), seed::derive(cfg.seed, tag));
        let active = |t: &Option<FrozenModel<f32>>, lambda: f64| t.as_ref().filter(|_| lambda > 0.0).map(|t| t.model().embed_dim());
        Ok(Self {
            img: active(&teachers.image, cfg.lambda_img).map(|d| make(d, "stage2/decoder_img")).transpose()?,
            vid: active(&teachers.video, cfg.lambda_vid).map(|d| make(d, "stage2/decoder_vid")).transpose()?,
            pixel: if cfg.pixel_branch && cfg.lambda_pixel > 0.0 {
                Some(make(student.layout.patch_dim(), "stage2/decoder_pixel")?)
            } else {
                None
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> Decoders<U> {
        Decoders {
            img: self.img.as_ref().map(DecoderModel::cast),
            vid: self.vid.as_ref().map(DecoderModel::cast),
            pixel: self.pixel.as_ref().map(DecoderModel::cast),
        }
    }
}

/// Unweighted terms and the weighted total of one sample or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub img: Option<f64>,
    pub vid: Option<f64>,
    pub pixel: Option<f64>,
}

impl StepLosses {
    fn add(&mut self, o: &StepLosses) {
        let sum = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
        };
        self.total += o.total;
        self.img = sum(self.img, o.img);
        self.vid = sum(self.vid, o.vid);
        self.pixel = sum(self.pixel, o.pixel);
    }

    fn scaled(&self, c: f64) -> StepLosses {
        StepLosses {
            total: self.total * c,
            img: self.img.map(|v| v * c),
            vid: self.vid.map(|v| v * c),
            pixel: self.pixel.map(|v| v * c),
        }
    }
}

pub struct SampleGrads<T> {
    pub losses: StepLosses,
    pub student: GradStore<T>,
    pub img: Option<GradStore<T>>,
    pub vid: Option<GradStore<T>>,
    pub pixel: Option<GradStore<T>>,
}

/// Loss and gradients of the co-teaching objective on one clip. The
/// student only sees visible tokens; every decoder shares `mask`.
pub fn mvd_sample_grads<T: Scalar>(
    student: &TransformerModel<T>,
    decoders: &Decoders<T>,
    clip: &VideoClip,
    targets: &DistillTargets<T>,
    mask: &TubeMask,
    w: &LossWeights,
) -> Result<SampleGrads<T>> {
    let layout = student.layout();
    let tokens: Mat<T> = patchify_video(clip, layout)?;
    let split = split_visible(&tokens, mask)?;
    if split.masked_indices.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut g = Graph::new();
    let ps = student.params().bind(&mut g, true);
    let feats = student.encode_on(&mut g, &ps, &split.visible, &split.visible_indices)?;

    let pixel_target;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut branch = |g: &mut Graph<T>, dec: Option<&DecoderModel<T>>, target: Option<&Mat<T>>, lambda: f64, dist: Distance, what: &str| {
        if lambda <= 0.0 {
            return Ok(None);
        }
        let dec = dec.ok_or_else(|| Error::Config(format!("{what} weight is {lambda} but there is no {what} decoder")))?;
        let target = target.ok_or_else(|| Error::Config(format!("{what} weight is {lambda} but there are no {what} targets")))?;
        let p = dec.params().bind(g, true);
        let y = dec.decode_on(g, &p, feats, &split.visible_indices, &split.masked_indices)?;
        if g.value(y).shape() != target.shape() {
            return Err(Error::Shape(format!("{what} targets {:?} vs predictions {:?}", target.shape(), g.value(y).shape())));
        }
        let l = g.row_loss(y, target, &split.masked_indices, dist);
        terms.push((l, lambda));
        Ok(Some((l, p)))
    };
    let smooth = Distance::SmoothL1 { beta: w.beta };
    let img = branch(&mut g, decoders.img.as_ref(), targets.img.as_ref(), w.lambda_img, smooth, "image")?;
    let vid = branch(&mut g, decoders.vid.as_ref(), targets.vid.as_ref(), w.lambda_vid, smooth, "video")?;
    let pix = if w.lambda_pixel > 0.0 {
        pixel_target = pixel_targets::<T>(clip, layout, w.norm_pix_target)?.patches;
        branch(&mut g, decoders.pixel.as_ref(), Some(&pixel_target), w.lambda_pixel, Distance::L2, "pixel")?
    } else {
        None
    };
    if terms.is_empty() {
        return Err(Error::Config("every loss weight is zero".into()));
    }
    let mut total: Option<Var> = None;
    for (l, lambda) in terms {
        let t = g.scale(l, T::lit(lambda));
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t),
        });
    }
    let total = total.expect("at least one term");
    let grads = g.backward(total);
    let value = |v: Option<&(Var, _)>| v.map(|(l, _)| g.scalar(*l).as_f64());
    Ok(SampleGrads {
        losses: StepLosses { total: g.scalar(total).as_f64(), img: value(img.as_ref()), vid: value(vid.as_ref()), pixel: value(pix.as_ref()) },
        student: ps.grads(&grads),
        img: img.map(|(_, p)| p.grads(&grads)),
        vid: vid.map(|(_, p)| p.grads(&grads)),
        pixel: pix.map(|(_, p)| p.grads(&grads)),
    })
}

fn optimizer(cfg: &AdamWConfig, dec: &Option<DecoderModel<f32>>) -> Option<AdamW<f32>> {
    dec.as_ref().map(|d| AdamW::new(*cfg, d.params()))
}

fn step_optional(opt: &mut Option<AdamW<f32>>, dec: &mut Option<DecoderModel<f32>>, grads: &GradStore<f32>, lr: f64) -> Result<()> {
    match (opt, dec) {
        (Some(o), Some(d)) => o.step(d.params_mut(), grads, lr),
        _ => Ok(()),
    }
}

/// Student, decoders and optimizer state of a co-teaching run.
pub struct Distiller {
    pub student: TransformerModel<f32>,
    pub decoders: Decoders<f32>,
    opt_student: AdamW<f32>,
    opt_img: Option<AdamW<f32>>,
    opt_vid: Option<AdamW<f32>>,
    opt_pixel: Option<AdamW<f32>>,
    cfg: DistillConfig,
    schedule: Schedule,
    mask_rng: Rng,
    step: usize,
}

impl Distiller {
    /// Fresh student and decoders for a run of `total_steps` updates.
    pub fn new(student: ModelConfig, teachers: &TeacherBundle, cfg: &DistillConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        student.validate()?;
        teachers.check(&student, cfg)?;
        if crate::tokenizer::masked_count(cfg.mask_ratio, student.layout.spatial()) == 0 {
            return Err(Error::EmptyMask);
        }
        let model = init_model::<f32>(student, seed::derive(cfg.seed, "stage2/student"))?;
        let decoders = Decoders::init(&student, teachers, cfg)?;
        let ac = cfg.adamw();
        Ok(Self {
            opt_student: AdamW::new(ac, model.params()),
            opt_img: optimizer(&ac, &decoders.img),
            opt_vid: optimizer(&ac, &decoders.vid),
            opt_pixel: optimizer(&ac, &decoders.pixel),
            student: model,
            decoders,
            cfg: *cfg,
            schedule: Schedule { base_lr: cfg.base_lr, warmup_fraction: cfg.warmup_fraction, total_steps },
            mask_rng: seed::rng(cfg.seed, "stage2/mask"),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One optimizer update on a batch: fresh tube masks, per-sample
    /// gradients averaged over the batch. Returns the batch-mean losses.
    pub fn step(&mut self, clips: &[&VideoClip], targets: &[&DistillTargets<f32>]) -> Result<StepLosses> {
        assert_eq!(clips.len(), targets.len(), "one target set per clip");
        if clips.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let layout = *self.student.layout();
        let masks: Vec<TubeMask> =
            (0..clips.len()).map(|_| sample_tube_mask(&layout, self.cfg.mask_ratio, &mut self.mask_rng)).collect::<Result<_>>()?;
        let jobs: Vec<usize> = (0..clips.len()).collect();
        let w = self.cfg.weights();
        let results = ordered_map(&jobs, self.cfg.threads, |&i| {
            mvd_sample_grads(&self.student, &self.decoders, clips[i], targets[i], &masks[i], &w)
        });
        let sizes = |d: &Option<DecoderModel<f32>>| d.as_ref().map_or(0, |d| d.params().len());
        let mut gs = GradStore::empty(self.student.params().len());
        let mut gi = GradStore::empty(sizes(&self.decoders.img));
        let mut gv = GradStore::empty(sizes(&self.decoders.vid));
        let mut gp = GradStore::empty(sizes(&self.decoders.pixel));
        let mut losses = StepLosses::default();
        for r in results {
            let r = r?;
            losses.add(&r.losses);
            gs.accumulate(&r.student);
            for (acc, g) in [(&mut gi, &r.img), (&mut gv, &r.vid), (&mut gp, &r.pixel)] {
                if let Some(g) = g {
                    acc.accumulate(g);
                }
            }
        }
        let inv = 1.0 / clips.len() as f32;
        for g in [&mut gs, &mut gi, &mut gv, &mut gp] {
            g.scale(inv);
        }
        let lr = self.schedule.lr(self.step);
        self.opt_student.step(self.student.params_mut(), &gs, lr)?;
        step_optional(&mut self.opt_img, &mut self.decoders.img, &gi, lr)?;
        step_optional(&mut self.opt_vid, &mut self.decoders.vid, &gv, lr)?;
        step_optional(&mut self.opt_pixel, &mut self.decoders.pixel, &gp, lr)?;
        self.step += 1;
        Ok(losses.scaled(1.0 / clips.len() as f64))
    }
}

/// Student encoder (decoders discarded) and its log.
pub struct DistillOutcome {
    pub student: TransformerModel<f32>,
    pub log: TrainLog,
}

fn check_clips(corpus: &LabeledVideoSet, layout: &TokenLayout) -> Result<()> {
    let g = corpus.geometry().ok_or_else(|| Error::Config("distillation corpus is empty".into()))?;
    if g != layout.geometry() {
        return Err(Error::Shape(format!("corpus clips {g} do not fit layout {layout}")));
    }
    Ok(())
}

fn record(epoch: usize, sum: &StepLosses, n: usize, lr: f64, start: Instant) -> EpochRecord {
    let mean = sum.scaled(1.0 / n as f64);
    EpochRecord {
        epoch: epoch + 1,
        loss: mean.total,
        loss_img: mean.img,
        loss_vid: mean.vid,
        loss_pixel: mean.pixel,
        lr,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Trains a student from scratch against the frozen teachers.
pub fn distill(student: ModelConfig, teachers: &TeacherBundle, corpus: &LabeledVideoSet, cfg: &DistillConfig) -> Result<DistillOutcome> {
    check_clips(corpus, &student.layout)?;
    let n = corpus.len();
    let mut d = Distiller::new(student, teachers, cfg, cfg.epochs * steps_per_epoch(n, cfg.batch_size))?;
    let targets: Vec<DistillTargets<f32>> = ordered_map(corpus.clips(), cfg.threads, |c| {
        teacher_targets(teachers, c, &student.layout, cfg.target_norm)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut log = TrainLog::new(LogKind::Distill);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = d.lr();
        let mut sum = StepLosses::default();
        for batch in epoch_order(cfg.seed, epoch, n).chunks(cfg.batch_size) {
            let clips: Vec<&VideoClip> = batch.iter().map(|&i| &corpus.clips()[i]).collect();
            let tg: Vec<&DistillTargets<f32>> = batch.iter().map(|&i| &targets[i]).collect();
            sum.add(&d.step(&clips, &tg)?.scaled(batch.len() as f64));
        }
        log.records.push(record(epoch, &sum, n, lr, start));
    }
    Ok(DistillOutcome { student: d.student, log })
}

/// MLP mapping student features to teacher width.
#[derive(Clone, Debug)]
pub struct Projector<T> {
    pub params: ParamStore<T>,
    fc1: LinearIdx,
    fc2: LinearIdx,
}

impl<T: Scalar> Projector<T> {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "init/projector");
        let mut params = ParamStore::new();
        let fc1 = LinearIdx::init(&mut params, &mut rng, "projector.fc1", input, input);
        let fc2 = LinearIdx::init(&mut params, &mut rng, "projector.fc2", input, output);
        Self { params, fc1, fc2 }
    }

    pub fn forward_on(&self, g: &mut Graph<T>, p: &crate::params::Bound, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Per-token baseline loss on one clip: projected student features of the
/// full sequence against teacher features at every token.
pub fn per_token_sample_grads<T: Scalar>(
    student: &TransformerModel<T>,
    projector: &Projector<T>,
    clip: &VideoClip,
    target: &Mat<T>,
    beta: f64,
) -> Result<(f64, GradStore<T>, GradStore<T>)> {
    let tokens: Mat<T> = patchify_video(clip, student.layout())?;
    let all: Vec<usize> = (0..tokens.rows).collect();
    let mut g = Graph::new();
    let ps = student.params().bind(&mut g, true);
    let pp = projector.params.bind(&mut g, true);
    let feats = student.encode_on(&mut g, &ps, &tokens, &all)?;
    let y = projector.forward_on(&mut g, &pp, feats);
    if g.value(y).shape() != target.shape() {
        return Err(Error::Shape(format!("targets {:?} vs projections {:?}", target.shape(), g.value(y).shape())));
    }
    let l = g.row_loss(y, target, &all, Distance::SmoothL1 { beta });
    let grads = g.backward(l);
    Ok((g.scalar(l).as_f64(), ps.grads(&grads), pp.grads(&grads)))
}

/// Per-token feature distillation from one teacher, without masking.
pub fn per_token_distill(
    student: ModelConfig,
    teacher: &FrozenModel<f32>,
    corpus: &LabeledVideoSet,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    student.validate()?;
    check_clips(corpus, &student.layout)?;
    let bundle = match teacher.modality() {
        Modality::Image => TeacherBundle { image: Some(teacher.clone()), video: None },
        Modality::Video => TeacherBundle { image: None, video: Some(teacher.clone()) },
    };
    let relaxed = DistillConfig {
        lambda_img: if bundle.image.is_some() { 1.0 } else { 0.0 },
        lambda_vid: if bundle.video.is_some() { 1.0 } else { 0.0 },
        ..*cfg
    };
    bundle.check(&student, &relaxed)?;
    let targets: Vec<Mat<f32>> = ordered_map(corpus.clips(), cfg.threads, |c| {
        let t = teacher_targets(&bundle, c, &student.layout, cfg.target_norm)?;
        Ok(t.img.or(t.vid).expect("one teacher"))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut model = init_model::<f32>(student, seed::derive(cfg.seed, "stage2/student"))?;
    let mut proj = Projector::<f32>::new(student.embed_dim, teacher.model().embed_dim(), seed::derive(cfg.seed, "stage2/projector"));
    let n = corpus.len();
    let ac = cfg.adamw();
    let mut opt_s = AdamW::new(ac, model.params());
    let mut opt_p = AdamW::new(ac, &proj.params);
    let schedule = Schedule { base_lr: cfg.base_lr, warmup_fraction: cfg.warmup_fraction, total_steps: cfg.epochs * steps_per_epoch(n, cfg.batch_size) };
    let mut log = TrainLog::new(LogKind::Distill);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let first_lr = schedule.lr(step);
        let mut sum = StepLosses::default();
        for batch in epoch_order(cfg.seed, epoch, n).chunks(cfg.batch_size) {
            let results = ordered_map(batch, cfg.threads, |&i| per_token_sample_grads(&model, &proj, &corpus.clips()[i], &targets[i], cfg.beta));
            let mut gs = GradStore::empty(model.params().len());
            let mut gp = GradStore::empty(proj.params.len());
            for r in results {
                let (l, a, b) = r?;
                sum.add(&StepLosses { total: l, ..Default::default() });
                gs.accumulate(&a);
                gp.accumulate(&b);
            }
            gs.scale(1.0 / batch.len() as f32);
            gp.scale(1.0 / batch.len() as f32);
            let lr = schedule.lr(step);
            opt_s.step(model.params_mut(), &gs, lr)?;
            opt_p.step(&mut proj.params, &gp, lr)?;
            step += 1;
        }
        log.records.push(record(epoch, &sum, n, first_lr, start));
    }
    Ok(DistillOutcome { student: model, log })
}

/// `ema <- m * ema + (1 - m) * online` over trainable tensors.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, online: &ParamStore<T>, momentum: f64) -> Result<()> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::Config(format!("EMA momentum {momentum} must lie in (0, 1)")));
    }
    if ema.names() != online.names() {
        return Err(Error::Config("EMA and online parameter stores differ".into()));
    }
    let (m, one_m) = (T::lit(momentum), T::lit(1.0 - momentum));
    for i in 0..ema.len() {
        if !ema.is_trainable(i) {
            continue;
        }
        let src = online.value(i);
        for (e, o) in ema.value_mut(i).data.iter_mut().zip(&src.data) {
            *e = m * *e + one_m * *o;
        }
    }
    Ok(())
}

/// Masked feature modeling against an EMA copy of the student itself.
pub fn ema_teacher_distill(student: ModelConfig, corpus: &LabeledVideoSet, cfg: &DistillConfig, momentum: f64) -> Result<DistillOutcome> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::Config(format!("EMA momentum {momentum} must lie in (0, 1)")));
    }
    cfg.validate()?;
    student.validate()?;
    if student.modality != Modality::Video {
        return Err(Error::Modality("the student must be a video model".into()));
    }
    check_clips(corpus, &student.layout)?;
    let mut model = init_model::<f32>(student, seed::derive(cfg.seed, "stage2/student"))?;
    let mut ema = model.params().clone();
    let dec = init_decoder::<f32>(DecoderConfig::for_encoder(&student, student.embed_dim), seed::derive(cfg.seed, "stage2/decoder_vid"))?;
    let mut decoders = Decoders { img: None, vid: Some(dec), pixel: None };
    let n = corpus.len();
    let ac = cfg.adamw();
    let mut opt_s = AdamW::new(ac, model.params());
    let mut opt_d = AdamW::new(ac, decoders.vid.as_ref().expect("decoder").params());
    let schedule = Schedule { base_lr: cfg.base_lr, warmup_fraction: cfg.warmup_fraction, total_steps: cfg.epochs * steps_per_epoch(n, cfg.batch_size) };
    let mut mask_rng = seed::rng(cfg.seed, "stage2/mask");
    let w = LossWeights { lambda_img: 0.0, lambda_vid: 1.0, lambda_pixel: 0.0, beta: cfg.beta, norm_pix_target: cfg.norm_pix_target };
    let mut log = TrainLog::new(LogKind::Distill);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let first_lr = schedule.lr(step);
        let mut sum = StepLosses::default();
        for batch in epoch_order(cfg.seed, epoch, n).chunks(cfg.batch_size) {
            let masks: Vec<TubeMask> =
                batch.iter().map(|_| sample_tube_mask(&student.layout, cfg.mask_ratio, &mut mask_rng)).collect::<Result<_>>()?;
            let teacher = crate::backbone::freeze(TransformerModel::from_params(student, ema.clone())?);
            let jobs: Vec<usize> = (0..batch.len()).collect();
            let results = ordered_map(&jobs, cfg.threads, |&k| {
                let clip = &corpus.clips()[batch[k]];
                let t = DistillTargets { img: None, vid: Some(video_teacher_targets(&teacher, clip, cfg.target_norm)?) };
                mvd_sample_grads(&model, &decoders, clip, &t, &masks[k], &w)
            });
            let mut gs = GradStore::empty(model.params().len());
            let mut gd = GradStore::empty(opt_len(&decoders));
            for r in results {
                let r = r?;
                sum.add(&r.losses);
                gs.accumulate(&r.student);
                gd.accumulate(r.vid.as_ref().expect("video branch"));
            }
            gs.scale(1.0 / batch.len() as f32);
            gd.scale(1.0 / batch.len() as f32);
            let lr = schedule.lr(step);
            opt_s.step(model.params_mut(), &gs, lr)?;
            opt_d.step(decoders.vid.as_mut().expect("decoder").params_mut(), &gd, lr)?;
            ema_update(&mut ema, model.params(), momentum)?;
            step += 1;
        }
        log.records.push(record(epoch, &sum, n, first_lr, start));
    }
    Ok(DistillOutcome { student: model, log })
}

fn opt_len(d: &Decoders<f32>) -> usize {
    d.vid.as_ref().map_or(0, |d| d.params().len())
}
