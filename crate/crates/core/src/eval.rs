//! Downstream classification on the toy tasks and cross-frame feature
//! similarity analysis.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autograd::Graph;
use crate::backbone::{Modality, TransformerModel};
use crate::dataset::{LabeledVideoSet, VideoClip};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::params::{GradStore, LinearIdx, ParamStore};
use crate::seed;
use crate::tensor::{Mat, Scalar};
use crate::tokenizer::{patchify_image, patchify_video};
use crate::train::{epoch_order, ordered_map, steps_per_epoch};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// train the head only, on frozen standardized features
    pub linear_probe: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.1,
            linear_probe: false,
            seed: 0,
            threads: 1,
        }
    }
}

impl FinetuneConfig {
    /// Linear-probe protocol: more epochs and a larger step on cached features.
    pub fn probe() -> Self {
        Self { epochs: 100, base_lr: 1e-2, weight_decay: 0.0, linear_probe: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("base_lr must be positive and weight_decay nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} must lie in [0, 1)", self.warmup_fraction)));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Linear layer on mean-pooled encoder features. `shift`/`scale`
/// standardize the pooled vector first (identity unless probing).
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub params: ParamStore<f32>,
    pub shift: Vec<f32>,
    pub scale: Vec<f32>,
    linear: LinearIdx,
}

impl ClassifierHead {
    pub fn new(input_dim: usize, class_count: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "init/head");
        let mut params = ParamStore::new();
        let linear = LinearIdx::init(&mut params, &mut rng, "head", input_dim, class_count);
        Self { params, shift: vec![0.0; input_dim], scale: vec![1.0; input_dim], linear }
    }

    pub fn input_dim(&self) -> usize {
        self.shift.len()
    }

    pub fn class_count(&self) -> usize {
        self.params.value(self.linear.weight).cols
    }

    fn standardize(&self, feature: &[f32]) -> Mat<f32> {
        Mat::from_vec(1, feature.len(), feature.iter().zip(&self.shift).zip(&self.scale).map(|((x, m), s)| (x - m) * s).collect())
    }

    pub fn logits(&self, feature: &[f32]) -> Vec<f32> {
        let x = self.standardize(feature);
        let mut y = x.matmul(self.params.value(self.linear.weight));
        y.add_assign(self.params.value(self.linear.bias));
        y.data
    }

    pub fn predict(&self, feature: &[f32]) -> usize {
        argmax(&self.logits(feature))
    }

    /// Cross-entropy and its gradient w.r.t. the head for one sample.
    fn sample_grads(&self, feature: &[f32], label: usize) -> (f64, GradStore<f32>) {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let x = g.constant(self.standardize(feature));
        let y = self.linear.forward(&mut g, &p, x);
        let l = g.cross_entropy(y, label);
        let grads = g.backward(l);
        (g.scalar(l) as f64, p.grads(&grads))
    }
}

fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

/// Mean over every token of the full-sequence encoding.
pub fn pooled_feature<T: Scalar>(model: &TransformerModel<T>, clip: &VideoClip) -> Result<Vec<T>> {
    let tokens = match model.modality() {
        Modality::Video => patchify_video(clip, model.layout())?,
        Modality::Image => patchify_image(clip, model.layout())?,
    };
    let all: Vec<usize> = (0..tokens.rows).collect();
    Ok(model.encode(&tokens, &all)?.mean_rows().data)
}

/// Fits a head on fixed features with minibatch AdamW. Features are
/// standardized with the training statistics.
pub fn train_head(features: &[Vec<f32>], labels: &[usize], class_count: usize, cfg: &FinetuneConfig) -> Result<ClassifierHead> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Config(format!("{} features for {} labels", features.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::LabelOutOfRange { label: bad, class_count });
    }
    let dim = features[0].len();
    let n = features.len() as f64;
    let mut head = ClassifierHead::new(dim, class_count, seed::derive(cfg.seed, "eval/head"));
    for d in 0..dim {
        let mean = features.iter().map(|f| f[d] as f64).sum::<f64>() / n;
        let var = features.iter().map(|f| (f[d] as f64 - mean).powi(2)).sum::<f64>() / n;
        head.shift[d] = mean as f32;
        head.scale[d] = (1.0 / (var + 1e-6).sqrt()) as f32;
    }
    let mut opt = AdamW::new(cfg.adamw(), &head.params);
    let schedule = Schedule {
        base_lr: cfg.base_lr,
        warmup_fraction: cfg.warmup_fraction,
        total_steps: cfg.epochs * steps_per_epoch(features.len(), cfg.batch_size),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_order(seed::derive(cfg.seed, "eval/order"), epoch, features.len()).chunks(cfg.batch_size) {
            let mut grads = GradStore::empty(head.params.len());
            for &i in batch {
                grads.accumulate(&head.sample_grads(&features[i], labels[i]).1);
            }
            grads.scale(1.0 / batch.len() as f32);
            opt.step(&mut head.params, &grads, schedule.lr(step))?;
            step += 1;
        }
    }
    Ok(head)
}

/// Fraction of `features` whose predicted class equals the label.
pub fn head_accuracy(head: &ClassifierHead, features: &[Vec<f32>], labels: &[usize]) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let hits = features.iter().zip(labels).filter(|(f, &l)| head.predict(f) == l).count();
    hits as f64 / features.len() as f64
}

pub struct FinetuneOutcome {
    pub head: ClassifierHead,
    /// the encoder after training (unchanged for a linear probe)
    pub encoder: TransformerModel<f32>,
    pub train_top1: f64,
    pub val_top1: f64,
}

fn pooled_all(model: &TransformerModel<f32>, set: &LabeledVideoSet, threads: usize) -> Result<Vec<Vec<f32>>> {
    ordered_map(set.clips(), threads, |c| pooled_feature(model, c)).into_iter().collect()
}

/// Trains a classifier on `train` and reports top-1 on `val`. Full
/// finetuning updates the encoder too; the probe keeps it fixed.
pub fn finetune(
    encoder: &TransformerModel<f32>,
    train: &LabeledVideoSet,
    val: &LabeledVideoSet,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if encoder.modality() != Modality::Video {
        return Err(Error::Modality(format!("finetuning needs a video encoder, got {}", encoder.modality())));
    }
    if train.class_count() != val.class_count() {
        return Err(Error::Config(format!(
            "train set has {} classes but val set has {}",
            train.class_count(),
            val.class_count()
        )));
    }
    for set in [train, val] {
        match set.geometry() {
            None => return Err(Error::Config("finetuning needs nonempty train and val sets".into())),
            Some(g) if g != encoder.layout().geometry() => {
                return Err(Error::Shape(format!("clips {g} do not fit encoder layout {}", encoder.layout())))
            }
            _ => {}
        }
    }
    if cfg.linear_probe {
        let ftr = pooled_all(encoder, train, cfg.threads)?;
        let head = train_head(&ftr, train.labels(), train.class_count(), cfg)?;
        let fval = pooled_all(encoder, val, cfg.threads)?;
        return Ok(FinetuneOutcome {
            train_top1: head_accuracy(&head, &ftr, train.labels()),
            val_top1: head_accuracy(&head, &fval, val.labels()),
            head,
            encoder: encoder.clone(),
        });
    }
    let mut model = encoder.clone();
    let mut head = ClassifierHead::new(model.embed_dim(), train.class_count(), seed::derive(cfg.seed, "eval/head"));
    let mut opt_e = AdamW::new(cfg.adamw(), model.params());
    let mut opt_h = AdamW::new(cfg.adamw(), &head.params);
    let n = train.len();
    let schedule =
        Schedule { base_lr: cfg.base_lr, warmup_fraction: cfg.warmup_fraction, total_steps: cfg.epochs * steps_per_epoch(n, cfg.batch_size) };
    let all: Vec<usize> = (0..model.layout().total()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_order(seed::derive(cfg.seed, "eval/order"), epoch, n).chunks(cfg.batch_size) {
            let results = ordered_map(batch, cfg.threads, |&i| -> Result<(GradStore<f32>, GradStore<f32>)> {
                let tokens = patchify_video(&train.clips()[i], model.layout())?;
                let mut g = Graph::new();
                let pe = model.params().bind(&mut g, true);
                let ph = head.params.bind(&mut g, true);
                let feats = model.encode_on(&mut g, &pe, &tokens, &all)?;
                let pooled = g.mean_rows(feats);
                let y = head.linear.forward(&mut g, &ph, pooled);
                let l = g.cross_entropy(y, train.labels()[i]);
                let grads = g.backward(l);
                Ok((pe.grads(&grads), ph.grads(&grads)))
            });
            let mut ge = GradStore::empty(model.params().len());
            let mut gh = GradStore::empty(head.params.len());
            for r in results {
                let (a, b) = r?;
                ge.accumulate(&a);
                gh.accumulate(&b);
            }
            ge.scale(1.0 / batch.len() as f32);
            gh.scale(1.0 / batch.len() as f32);
            let lr = schedule.lr(step);
            opt_e.step(model.params_mut(), &ge, lr)?;
            opt_h.step(&mut head.params, &gh, lr)?;
            step += 1;
        }
    }
    let ftr = pooled_all(&model, train, cfg.threads)?;
    let fval = pooled_all(&model, val, cfg.threads)?;
    Ok(FinetuneOutcome {
        train_top1: head_accuracy(&head, &ftr, train.labels()),
        val_top1: head_accuracy(&head, &fval, val.labels()),
        head,
        encoder: model,
    })
}

/// Square matrix of cosine similarities between frame-level features.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mean of the entries off the diagonal (1 for a 1x1 matrix).
    pub fn mean_off_diagonal(&self) -> f64 {
        if self.n < 2 {
            return 1.0;
        }
        let off: f64 = (0..self.n).flat_map(|i| (0..self.n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| self.at(i, j)).sum();
        off / (self.n * (self.n - 1)) as f64
    }

    /// Each index repeated `factor` times along both axes, e.g. to show a
    /// temporal-token matrix on the frame axis.
    pub fn expand(&self, factor: usize) -> SimilarityMatrix {
        let m = self.n * factor;
        let data = (0..m * m).map(|k| self.at(k / m / factor, k % m / factor)).collect();
        SimilarityMatrix { n: m, data }
    }

    /// Symmetric, unit diagonal and within [-1, 1], up to `tol`.
    pub fn check(&self, tol: f64) -> bool {
        (0..self.n).all(|i| {
            (self.at(i, i) - 1.0).abs() <= tol
                && (0..self.n).all(|j| (self.at(i, j) - self.at(j, i)).abs() <= tol && self.at(i, j).abs() <= 1.0 + tol)
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:.6}", self.at(i, j))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(Error::from)
    }
}

/// Cosine similarity between every pair of feature vectors.
pub fn similarity_from_features(features: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let mut unit = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature of frame {i}")));
        }
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::NonFinite(format!("feature of frame {i} has zero norm")));
        }
        unit.push(f.iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    let n = unit.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
            data[i * n + j] = c;
            data[j * n + i] = c;
        }
    }
    Ok(SimilarityMatrix { n, data })
}

fn spatial_means<T: Scalar>(features: &Mat<T>, spatial: usize) -> Vec<Vec<f64>> {
    (0..features.rows / spatial)
        .map(|tau| {
            let mut acc = vec![0.0; features.cols];
            for s in 0..spatial {
                for (a, v) in acc.iter_mut().zip(features.row(tau * spatial + s)) {
                    *a += v.as_f64();
                }
            }
            acc.iter().map(|a| a / spatial as f64).collect()
        })
        .collect()
}

/// Frame-level features of `clip`: an image model encodes each frame on its
/// own (T vectors); a video model encodes the clip once and yields one
/// vector per temporal token. Each vector is the mean over spatial tokens.
pub fn frame_features<T: Scalar>(model: &TransformerModel<T>, clip: &VideoClip) -> Result<Vec<Vec<f64>>> {
    let layout = model.layout();
    let all: Vec<usize> = (0..layout.total()).collect();
    match model.modality() {
        Modality::Image => {
            let mut out = Vec::with_capacity(clip.geometry().t);
            for t in 0..clip.geometry().t {
                let tokens = patchify_image(&clip.frame_clip(t), layout)?;
                out.extend(spatial_means(&model.encode(&tokens, &all)?, layout.spatial()));
            }
            Ok(out)
        }
        Modality::Video => {
            let tokens = patchify_video(clip, layout)?;
            Ok(spatial_means(&model.encode(&tokens, &all)?, layout.spatial()))
        }
    }
}

pub fn frame_similarity<T: Scalar>(model: &TransformerModel<T>, clip: &VideoClip) -> Result<SimilarityMatrix> {
    similarity_from_features(&frame_features(model, clip)?)
}

/// Entrywise mean of per-clip matrices and its mean off-diagonal entry.
pub fn aggregate_similarity(model: &TransformerModel<f32>, set: &LabeledVideoSet, threads: usize) -> Result<(SimilarityMatrix, f64)> {
    if set.is_empty() {
        return Err(Error::Config("similarity analysis needs at least one clip".into()));
    }
    let mats: Vec<SimilarityMatrix> = ordered_map(set.clips(), threads, |c| frame_similarity(model, c)).into_iter().collect::<Result<_>>()?;
    let n = mats[0].n;
    let mut data = vec![0.0; n * n];
    for m in &mats {
        for (a, v) in data.iter_mut().zip(&m.data) {
            *a += v;
        }
    }
    for a in &mut data {
        *a /= mats.len() as f64;
    }
    let agg = SimilarityMatrix { n, data };
    let summary = agg.mean_off_diagonal();
    Ok((agg, summary))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub task: String,
    pub top1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub similarity_summary: Option<f64>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,task,top1\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6}", r.model, r.task, r.top1);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(Error::from)
    }

    pub fn tasks(&self) -> Vec<&str> {
        let mut tasks: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tasks.contains(&r.task.as_str()) {
                tasks.push(&r.task);
            }
        }
        tasks
    }

    pub fn top1(&self, model: &str, task: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.model == model && r.task == task).map(|r| r.top1)
    }

    /// Best row of `task`; ties go to the earlier model.
    pub fn best(&self, task: &str) -> Option<&EvalRow> {
        self.rows.iter().filter(|r| r.task == task).fold(None, |best: Option<&EvalRow>, r| match best {
            Some(b) if b.top1 >= r.top1 => Some(b),
            _ => Some(r),
        })
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for task in self.tasks() {
            let best = self.best(task).expect("task has rows");
            let _ = writeln!(out, "{task}:");
            for r in self.rows.iter().filter(|r| r.task == task) {
                let mark = if r.model == best.model { "  <- best" } else { "" };
                let _ = writeln!(out, "  {:<24} {:.4}{mark}", r.model, r.top1);
            }
        }
        if let Some(s) = self.similarity_summary {
            let _ = writeln!(out, "mean off-diagonal similarity: {s:.6}");
        }
        out
    }
}

/// A named downstream task: train and val splits.
pub struct EvalTask<'a> {
    pub name: String,
    pub train: &'a LabeledVideoSet,
    pub val: &'a LabeledVideoSet,
}

/// Accuracy of every student on every task.
pub fn compare_report(students: &[(String, &TransformerModel<f32>)], tasks: &[EvalTask<'_>], cfg: &FinetuneConfig) -> Result<EvalReport> {
    if students.is_empty() || tasks.is_empty() {
        return Err(Error::Config("a report needs at least one model and one task".into()));
    }
    let mut rows = Vec::with_capacity(students.len() * tasks.len());
    for (name, model) in students {
        for task in tasks {
            let out = finetune(model, task.train, task.val, cfg)?;
            rows.push(EvalRow { model: name.clone(), task: task.name.clone(), top1: out.val_top1 });
        }
    }
    Ok(EvalReport { rows, similarity_summary: None })
}
