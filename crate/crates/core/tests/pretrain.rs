use mvdlab::backbone::{init_decoder, init_model, DecoderConfig, Modality, ModelConfig};
use mvdlab::dataset::{gen_spatial_task, Geometry, LabeledVideoSet};
use mvdlab::pretrain::{pixel_recon_loss, pixel_sample_grads, pretrain_image_teacher, pretrain_video_teacher, PretrainConfig};
use mvdlab::tensor::Mat;
use mvdlab::tokenizer::{layout_for, make_tube_mask, patchify_video, pixel_targets, split_visible, TokenLayout};
use mvdlab::Error;

fn desk() -> TokenLayout {
    layout_for(Geometry::desk(), 2, 8).unwrap()
}

fn tiny(layout: TokenLayout, modality: Modality) -> ModelConfig {
    ModelConfig { embed_dim: 16, depth: 1, heads: 2, mlp_ratio: 2, decoder_dim: 8, decoder_depth: 1, layout, modality }
}

fn corpus(n: usize) -> LabeledVideoSet {
    gen_spatial_task(3, n, Geometry::desk(), 3).unwrap()
}

fn short(base: PretrainConfig, epochs: usize) -> PretrainConfig {
    PretrainConfig { epochs, batch_size: 4, base_lr: 3e-3, ..base }
}

#[test]
fn defaults() {
    let img = PretrainConfig::image();
    let vid = PretrainConfig::video();
    assert_eq!(img.mask_ratio, 0.75);
    assert_eq!(vid.mask_ratio, 0.9);
    assert_eq!((vid.epochs, vid.batch_size, vid.base_lr, vid.weight_decay), (50, 32, 1e-3, 0.05));
    assert_eq!(vid.betas, (0.9, 0.95));
    assert!(vid.norm_pix_target);
    assert_eq!(vid.threads, 1);
}

#[test]
fn two_epoch_runs_are_bit_identical() {
    let data = corpus(8);
    let cfg = short(PretrainConfig::video(), 2);
    let a = pretrain_video_teacher(&data, tiny(desk(), Modality::Video), &cfg).unwrap();
    let b = pretrain_video_teacher(&data, tiny(desk(), Modality::Video), &cfg).unwrap();
    assert_eq!(a.encoder.hash(), b.encoder.hash());
    assert_eq!(a.log.losses(), b.log.losses());
    let other = pretrain_video_teacher(&data, tiny(desk(), Modality::Video), &PretrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.encoder.hash(), other.encoder.hash());
}

#[test]
fn video_loss_mostly_decreases() {
    let data = corpus(200);
    let cfg = PretrainConfig { epochs: 20, batch_size: 16, ..PretrainConfig::video() };
    let out = pretrain_video_teacher(&data, ModelConfig::desk(desk(), Modality::Video), &cfg).unwrap();
    let losses = out.log.losses();
    assert_eq!(losses.len(), 20);
    assert!(out.log.non_monotone_steps() <= 2, "{losses:?}");
    assert!(losses[19] < losses[0]);
    assert!(out.log.lrs().iter().all(|&lr| (0.0..=1e-3).contains(&lr)));
}

#[test]
fn image_teacher_trains_on_frames() {
    let data = corpus(2);
    let cfg = short(PretrainConfig::image(), 1);
    let out = pretrain_image_teacher(&data, tiny(desk().image(), Modality::Image), &cfg).unwrap();
    assert_eq!(out.encoder.modality(), Modality::Image);
    assert!(out.log.losses()[0].is_finite());
    assert!(matches!(
        pretrain_image_teacher(&data, tiny(desk(), Modality::Video), &cfg),
        Err(Error::Modality(_))
    ));
    assert!(matches!(
        pretrain_video_teacher(&data, tiny(desk().image(), Modality::Image), &cfg),
        Err(Error::Modality(_))
    ));
}

#[test]
fn invalid_settings_are_rejected() {
    let data = corpus(2);
    let m = tiny(desk(), Modality::Video);
    assert!(pretrain_video_teacher(&data, m, &PretrainConfig { mask_ratio: 1.0, ..PretrainConfig::video() }).is_err());
    // 16 positions at 0.01 mask nothing
    assert!(matches!(
        pretrain_video_teacher(&data, m, &PretrainConfig { mask_ratio: 0.01, epochs: 1, ..PretrainConfig::video() }),
        Err(Error::EmptyMask)
    ));
    let wrong = gen_spatial_task(0, 2, Geometry::new(8, 16, 16, 1), 2).unwrap();
    assert!(matches!(pretrain_video_teacher(&wrong, m, &PretrainConfig::video()), Err(Error::Shape(_))));
}

#[test]
fn sample_loss_matches_reconstruction_oracle() {
    let l = desk();
    let cfg = tiny(l, Modality::Video);
    let enc = init_model::<f64>(cfg, 4).unwrap();
    let dec = init_decoder::<f64>(DecoderConfig::for_encoder(&cfg, l.patch_dim()), 5).unwrap();
    let data = corpus(1);
    let clip = &data.clips()[0];
    let mask = make_tube_mask(&l, 0.9, 6).unwrap();
    let sample = pixel_sample_grads(&enc, &dec, clip, &mask, true).unwrap();

    let split = split_visible(&patchify_video::<f64>(clip, &l).unwrap(), &mask).unwrap();
    let feats = enc.encode(&split.visible, &split.visible_indices).unwrap();
    let y = dec.decode(&feats, &split.visible_indices, &split.masked_indices).unwrap();
    let targets = pixel_targets::<f64>(clip, &l, true).unwrap();
    let oracle = pixel_recon_loss(&y, &targets, &mask).unwrap();
    assert!((sample.loss - oracle).abs() < 1e-12);
    assert!(sample.encoder.all_finite() && sample.decoder.all_finite());
    assert!(!sample.encoder.is_zero());
}

#[test]
fn sample_gradients_match_finite_differences() {
    let l = layout_for(Geometry::new(4, 8, 8, 1), 2, 4).unwrap();
    let cfg = ModelConfig { embed_dim: 8, ..tiny(l, Modality::Video) };
    let mut enc = init_model::<f64>(cfg, 7).unwrap();
    let dec = init_decoder::<f64>(DecoderConfig::for_encoder(&cfg, l.patch_dim()), 8).unwrap();
    let data = gen_spatial_task(1, 1, l.geometry(), 2).unwrap();
    let clip = &data.clips()[0];
    let mask = make_tube_mask(&l, 0.5, 9).unwrap();
    let base = pixel_sample_grads(&enc, &dec, clip, &mask, false).unwrap();
    let h = 1e-5;
    for i in 0..enc.params().len() {
        if !enc.params().is_trainable(i) {
            continue;
        }
        let e = enc.params().value(i).len() / 2;
        enc.params_mut().value_mut(i).data[e] += h;
        let up = pixel_sample_grads(&enc, &dec, clip, &mask, false).unwrap().loss;
        enc.params_mut().value_mut(i).data[e] -= 2.0 * h;
        let down = pixel_sample_grads(&enc, &dec, clip, &mask, false).unwrap().loss;
        enc.params_mut().value_mut(i).data[e] += h;
        let fd = (up - down) / (2.0 * h);
        let an = base.encoder.get(i).map_or(0.0, |m: &Mat<f64>| m.data[e]);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(rel < 1e-4, "{}: fd {fd} analytic {an}", enc.params().name(i));
    }
}
