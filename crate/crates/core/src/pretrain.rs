//! Stage 1: masked pixel reconstruction for the image teacher (random patch
//! masking on single frames) and the video teacher (tube masking on clips).

use std::time::Instant;

use crate::autograd::{Distance, Graph};
use crate::backbone::{init_decoder, init_model, DecoderConfig, DecoderModel, ModelConfig, Modality, TransformerModel};
use crate::dataset::{LabeledVideoSet, VideoClip};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::params::GradStore;
use crate::seed;
use crate::tensor::{Mat, Scalar};
use crate::tokenizer::{patchify_video, pixel_targets, sample_tube_mask, split_visible, PatchTargets, TokenLayout, TubeMask};
use crate::train::{epoch_order, ordered_map, steps_per_epoch, EpochRecord, LogKind, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub warmup_fraction: f64,
    pub seed: u64,
    /// normalize each target patch to zero mean / unit variance
    pub norm_pix_target: bool,
    pub threads: usize,
}

impl PretrainConfig {
    /// Image MAE defaults (random masking at 75%).
    pub fn image() -> Self {
        Self {
            mask_ratio: 0.75,
            epochs: 50,
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            warmup_fraction: 0.025,
            seed: 0,
            norm_pix_target: true,
            threads: 1,
        }
    }

    /// Video defaults (tube masking at 90%).
    pub fn video() -> Self {
        Self { mask_ratio: 0.9, ..Self::image() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} must lie in [0, 1)", self.mask_ratio)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} must lie in [0, 1)", self.warmup_fraction)));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("base_lr must be positive and weight_decay nonnegative".into()));
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
}

/// Mean over masked tokens of the per-token mean squared error.
pub fn pixel_recon_loss<T: Scalar>(y: &Mat<T>, targets: &PatchTargets<T>, mask: &TubeMask) -> Result<f64> {
    if y.shape() != targets.patches.shape() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs targets {:?}",
            y.shape(),
            targets.patches.shape()
        )));
    }
    let masked = mask.masked_indices();
    if masked.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for &k in &masked {
        let se: f64 = y.row(k).iter().zip(targets.patches.row(k)).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum();
        total += se / y.cols as f64;
    }
    Ok(total / masked.len() as f64)
}

/// Loss and parameter gradients of one masked-reconstruction sample.
pub struct PixelSample<T> {
    pub loss: f64,
    pub encoder: GradStore<T>,
    pub decoder: GradStore<T>,
}

pub fn pixel_sample_grads<T: Scalar>(
    encoder: &TransformerModel<T>,
    decoder: &DecoderModel<T>,
    clip: &VideoClip,
    mask: &TubeMask,
    norm_target: bool,
) -> Result<PixelSample<T>> {
    let layout = encoder.layout();
    let tokens: Mat<T> = patchify_video(clip, layout)?;
    let targets: PatchTargets<T> = pixel_targets(clip, layout, norm_target)?;
    let split = split_visible(&tokens, mask)?;
    if split.masked_indices.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut g = Graph::new();
    let pe = encoder.params().bind(&mut g, true);
    let pd = decoder.params().bind(&mut g, true);
    let feats = encoder.encode_on(&mut g, &pe, &split.visible, &split.visible_indices)?;
    let y = decoder.decode_on(&mut g, &pd, feats, &split.visible_indices, &split.masked_indices)?;
    let loss = g.row_loss(y, &targets.patches, &split.masked_indices, Distance::L2);
    let grads = g.backward(loss);
    Ok(PixelSample { loss: g.scalar(loss).as_f64(), encoder: pe.grads(&grads), decoder: pd.grads(&grads) })
}

/// Trained encoder (decoder discarded) and its log.
pub struct Pretrained {
    pub encoder: TransformerModel<f32>,
    pub log: TrainLog,
}

fn check_corpus(corpus: &LabeledVideoSet, layout: &TokenLayout, image: bool) -> Result<()> {
    let g = corpus.geometry().ok_or_else(|| Error::Config("pretraining corpus is empty".into()))?;
    let want = layout.geometry();
    let ok = if image { g.h == want.h && g.w == want.w && g.c == want.c } else { g == want };
    if !ok {
        return Err(Error::Shape(format!("corpus clips {g} do not fit layout {layout}")));
    }
    Ok(())
}

/// MAE-style image teacher trained on every frame of every clip.
pub fn pretrain_image_teacher(corpus: &LabeledVideoSet, model: ModelConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    if model.modality != Modality::Image {
        return Err(Error::Modality("image teacher needs an image model config".into()));
    }
    check_corpus(corpus, &model.layout, true)?;
    let frames: Vec<VideoClip> =
        corpus.clips().iter().flat_map(|c| (0..c.geometry().t).map(move |t| c.frame_clip(t))).collect();
    pretrain(&frames, model, cfg)
}

/// VideoMAE-style video teacher with tube masking.
pub fn pretrain_video_teacher(corpus: &LabeledVideoSet, model: ModelConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    if model.modality != Modality::Video {
        return Err(Error::Modality("video teacher needs a video model config".into()));
    }
    check_corpus(corpus, &model.layout, false)?;
    pretrain(corpus.clips(), model, cfg)
}

fn pretrain(samples: &[VideoClip], model: ModelConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    cfg.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let layout = model.layout;
    if crate::tokenizer::masked_count(cfg.mask_ratio, layout.spatial()) == 0 {
        return Err(Error::EmptyMask);
    }
    let mut encoder = init_model::<f32>(model, seed::derive(cfg.seed, "stage1/encoder"))?;
    let mut decoder =
        init_decoder::<f32>(DecoderConfig::for_encoder(&model, layout.patch_dim()), seed::derive(cfg.seed, "stage1/decoder"))?;
    let mut opt_enc = AdamW::new(cfg.adamw(), encoder.params());
    let mut opt_dec = AdamW::new(cfg.adamw(), decoder.params());
    let per_epoch = steps_per_epoch(samples.len(), cfg.batch_size);
    let schedule = Schedule { base_lr: cfg.base_lr, warmup_fraction: cfg.warmup_fraction, total_steps: cfg.epochs * per_epoch };
    let mut mask_rng = seed::rng(cfg.seed, "stage1/mask");
    let mut log = TrainLog::new(LogKind::Pretrain);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let first_lr = schedule.lr(step);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, TubeMask)> = batch
                .iter()
                .map(|&i| sample_tube_mask(&layout, cfg.mask_ratio, &mut mask_rng).map(|m| (i, m)))
                .collect::<Result<_>>()?;
            let results = ordered_map(&jobs, cfg.threads, |(i, mask)| {
                pixel_sample_grads(&encoder, &decoder, &samples[*i], mask, cfg.norm_pix_target)
            });
            let mut genc = GradStore::empty(encoder.params().len());
            let mut gdec = GradStore::empty(decoder.params().len());
            for r in results {
                let r = r?;
                loss_sum += r.loss;
                genc.accumulate(&r.encoder);
                gdec.accumulate(&r.decoder);
            }
            let inv = 1.0 / batch.len() as f32;
            genc.scale(inv);
            gdec.scale(inv);
            let lr = schedule.lr(step);
            opt_enc.step(encoder.params_mut(), &genc, lr)?;
            opt_dec.step(decoder.params_mut(), &gdec, lr)?;
            step += 1;
        }
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / samples.len() as f64,
            loss_img: None,
            loss_vid: None,
            loss_pixel: None,
            lr: first_lr,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Pretrained { encoder, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Geometry;
    use crate::tokenizer::{layout_for, make_tube_mask};

    #[test]
    fn closed_form_pixel_loss() {
        let layout = TokenLayout { t_tokens: 1, h_tokens: 1, w_tokens: 2, pt: 1, ps: 1, channels: 4 };
        let mask = TubeMask::from_spatial(layout, vec![true, false]).unwrap();
        let targets = PatchTargets { patches: Mat::<f64>::zeros(2, 4), normalized: false };
        let mut y = Mat::filled(2, 4, 0.5);
        assert_eq!(pixel_recon_loss(&y, &targets, &mask).unwrap(), 0.25);
        // visible row does not matter
        y.row_mut(1).fill(9.0);
        assert_eq!(pixel_recon_loss(&y, &targets, &mask).unwrap(), 0.25);
        let exact = PatchTargets { patches: y.clone(), normalized: false };
        assert_eq!(pixel_recon_loss(&y, &exact, &mask).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let layout = layout_for(Geometry::desk(), 2, 8).unwrap();
        let targets = PatchTargets { patches: Mat::<f64>::zeros(64, 128), normalized: false };
        assert!(matches!(
            pixel_recon_loss(&Mat::zeros(64, 128), &targets, &make_tube_mask(&layout, 0.0, 0).unwrap()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(PretrainConfig::video().validate().is_ok());
        assert!(PretrainConfig { mask_ratio: 1.0, ..PretrainConfig::video() }.validate().is_err());
        assert!(PretrainConfig { epochs: 0, ..PretrainConfig::video() }.validate().is_err());
        assert!(PretrainConfig { warmup_fraction: 1.0, ..PretrainConfig::video() }.validate().is_err());
    }
}
