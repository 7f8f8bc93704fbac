use mvdlab::dataset::{Geometry, VideoClip};
use mvdlab::params::normal;
use mvdlab::seed;
use mvdlab::tensor::Mat;
use mvdlab::tokenizer::{
    layout_for, masked_count, normalize_patches, patchify_video, pixel_targets, sample_tube_mask, split_visible, unpatchify,
    TokenLayout, PATCH_NORM_EPS,
};
use proptest::prelude::*;

fn random_clip(g: Geometry, seed: u64) -> VideoClip {
    let m: Mat<f32> = normal(&mut seed::rng(seed, "test/clip"), 1, g.len(), 1.0);
    VideoClip::new(g, m.data).unwrap()
}

fn desk() -> TokenLayout {
    layout_for(Geometry::desk(), 2, 8).unwrap()
}

#[test]
fn token_counts() {
    assert_eq!(layout_for(Geometry::new(16, 224, 224, 3), 2, 16).unwrap().total(), 1568);
    assert_eq!(desk().total(), 64);
    assert_eq!(desk().spatial(), 16);
    assert_eq!(desk().t_tokens, 4);
}

#[test]
fn mask_count_sweep() {
    for n in [1usize, 5, 16, 196] {
        for r in [0.0, 0.1, 0.25, 0.5, 0.75, 0.9] {
            let exact = r * n as f64;
            let k = masked_count(r, n);
            assert!((k as f64 - exact).abs() <= 0.5, "n={n} r={r} k={k}");
        }
    }
    assert_eq!(masked_count(0.75, 16), 12);
    assert_eq!(masked_count(0.9, 196), 176);
    assert_eq!(masked_count(0.5, 3), 2);
}

#[test]
fn normalized_targets_per_patch() {
    let clip = random_clip(Geometry::desk(), 4);
    let t = pixel_targets::<f64>(&clip, &desk(), true).unwrap();
    assert!(t.normalized);
    for r in 0..t.patches.rows {
        let row = t.patches.row(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4, "row {r}: var {var}");
    }
    let raw = pixel_targets::<f64>(&clip, &desk(), false).unwrap();
    assert_eq!(raw.patches, patchify_video::<f64>(&clip, &desk()).unwrap());
}

#[test]
fn constant_patch_normalizes_to_zero() {
    let mut m = Mat::<f64>::filled(2, 8, 3.0);
    normalize_patches(&mut m, PATCH_NORM_EPS);
    assert!(m.data.iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tube_property(seed in any::<u64>(), ri in 0usize..5) {
        let ratio = [0.0, 0.25, 0.5, 0.75, 0.9][ri];
        let l = desk();
        let mask = sample_tube_mask(&l, ratio, &mut seed::rng(seed, "test/mask")).unwrap();
        prop_assert_eq!(mask.masked_spatial_count(), masked_count(ratio, l.spatial()));
        for s in 0..l.spatial() {
            let first = mask.is_masked(s);
            for tau in 1..l.t_tokens {
                prop_assert_eq!(mask.is_masked(tau * l.spatial() + s), first);
            }
        }
        let mut all = mask.visible_indices();
        all.extend(mask.masked_indices());
        all.sort_unstable();
        prop_assert_eq!(all, (0..l.total()).collect::<Vec<_>>());
    }

    #[test]
    fn patchify_is_a_bijection(seed in any::<u64>(), t in 1usize..4, h in 1usize..4, w in 1usize..4, c in 1usize..3, pt in 1usize..3, ps in 1usize..4) {
        let g = Geometry::new(t * pt, h * ps, w * ps, c);
        let l = layout_for(g, pt, ps).unwrap();
        let clip = random_clip(g, seed);
        let p: Mat<f32> = patchify_video(&clip, &l).unwrap();
        prop_assert_eq!(p.shape(), (l.total(), l.patch_dim()));
        prop_assert_eq!(unpatchify(&p, &l).unwrap(), clip.clone());
        // every pixel lands exactly once
        let mut a = p.data.clone();
        let mut b = clip.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn index_and_coords_agree(t in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let l = layout_for(Geometry::new(t, h, w, 1), 1, 1).unwrap();
        for k in 0..l.total() {
            let (tau, i, j) = l.coords(k);
            prop_assert!(tau < t && i < h && j < w);
            prop_assert_eq!(l.index(tau, i, j), k);
        }
    }

    #[test]
    fn split_keeps_visible_rows(seed in any::<u64>()) {
        let l = desk();
        let mask = sample_tube_mask(&l, 0.75, &mut seed::rng(seed, "test/mask")).unwrap();
        let tokens = Mat::<f64>::from_vec(l.total(), 2, (0..2 * l.total()).map(|v| v as f64).collect());
        let split = split_visible(&tokens, &mask).unwrap();
        prop_assert_eq!(split.visible.rows, split.visible_indices.len());
        for (r, &k) in split.visible_indices.iter().enumerate() {
            prop_assert_eq!(split.visible.row(r), tokens.row(k));
            prop_assert!(!mask.is_masked(k));
        }
    }
}
