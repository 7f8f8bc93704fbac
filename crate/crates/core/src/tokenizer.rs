//! Patch partitioning, token geometry and tube masking.
//!
//! Tokens are flattened time-major, then row, then column: token
//! `(τ, i, j)` has index `(τ * h_tokens + i) * w_tokens + j`. Within a patch
//! the pixel vector is flattened as `(dt, dy, dx, c)`. Both orders are part
//! of checkpoint compatibility since positional embeddings and patch
//! projections are laid out accordingly.

use std::fmt;

use rand::Rng as _;

use crate::dataset::{Geometry, VideoClip};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::tensor::{Mat, Scalar};

/// Token grid induced by 3D (or 2D when `pt == 1` and one frame) patching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenLayout {
    pub t_tokens: usize,
    pub h_tokens: usize,
    pub w_tokens: usize,
    /// temporal patch size
    pub pt: usize,
    /// spatial patch size
    pub ps: usize,
    pub channels: usize,
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        self.t_tokens * self.h_tokens * self.w_tokens
    }

    pub fn spatial(&self) -> usize {
        self.h_tokens * self.w_tokens
    }

    pub fn patch_dim(&self) -> usize {
        self.pt * self.ps * self.ps * self.channels
    }

    pub fn is_image(&self) -> bool {
        self.t_tokens == 1 && self.pt == 1
    }

    /// Pixel geometry covered by this layout.
    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.t_tokens * self.pt, self.h_tokens * self.ps, self.w_tokens * self.ps, self.channels)
    }

    /// Single-frame layout with the same spatial grid.
    pub fn image(&self) -> TokenLayout {
        TokenLayout { t_tokens: 1, pt: 1, ..*self }
    }

    #[inline]
    pub fn index(&self, tau: usize, i: usize, j: usize) -> usize {
        (tau * self.h_tokens + i) * self.w_tokens + j
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let j = index % self.w_tokens;
        let i = (index / self.w_tokens) % self.h_tokens;
        let tau = index / self.spatial();
        (tau, i, j)
    }
}

impl fmt::Display for TokenLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} tokens (patch {}x{}x{}, {} ch)",
            self.t_tokens, self.h_tokens, self.w_tokens, self.pt, self.ps, self.ps, self.channels
        )
    }
}

/// Token layout for `geometry` under temporal patch `pt` and spatial patch `ps`.
pub fn layout_for(geometry: Geometry, pt: usize, ps: usize) -> Result<TokenLayout> {
    if pt == 0 || ps == 0 {
        return Err(Error::Geometry("patch sizes must be positive".into()));
    }
    for (axis, len, patch) in [("T", geometry.t, pt), ("H", geometry.h, ps), ("W", geometry.w, ps)] {
        if len == 0 || len % patch != 0 {
            return Err(Error::Geometry(format!("{axis}={len} is not divisible by patch size {patch}")));
        }
    }
    if geometry.c == 0 {
        return Err(Error::Geometry("C must be positive".into()));
    }
    Ok(TokenLayout {
        t_tokens: geometry.t / pt,
        h_tokens: geometry.h / ps,
        w_tokens: geometry.w / ps,
        pt,
        ps,
        channels: geometry.c,
    })
}

/// Flattened pixel vector of every patch, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTargets<T> {
    pub patches: Mat<T>,
    pub normalized: bool,
}

/// Partitions a clip into non-overlapping patches.
pub fn patchify_video<T: Scalar>(clip: &VideoClip, layout: &TokenLayout) -> Result<Mat<T>> {
    let g = clip.geometry();
    if g != layout.geometry() {
        return Err(Error::Shape(format!("clip {g} does not match layout {}", layout.geometry())));
    }
    let mut out = Mat::zeros(layout.total(), layout.patch_dim());
    for tau in 0..layout.t_tokens {
        for i in 0..layout.h_tokens {
            for j in 0..layout.w_tokens {
                let row = out.row_mut(layout.index(tau, i, j));
                let mut k = 0;
                for dt in 0..layout.pt {
                    for dy in 0..layout.ps {
                        let base = clip.index(tau * layout.pt + dt, i * layout.ps + dy, j * layout.ps, 0);
                        for &v in &clip.data()[base..base + layout.ps * g.c] {
                            row[k] = T::lit(v as f64);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Partitions a single frame (a one-frame clip) into 2D patches.
pub fn patchify_image<T: Scalar>(frame: &VideoClip, layout: &TokenLayout) -> Result<Mat<T>> {
    if !layout.is_image() {
        return Err(Error::Modality(format!("patchify_image needs an image layout, got {layout}")));
    }
    patchify_video(frame, layout)
}

/// Inverse of [`patchify_video`].
pub fn unpatchify<T: Scalar>(patches: &Mat<T>, layout: &TokenLayout) -> Result<VideoClip> {
    if patches.shape() != (layout.total(), layout.patch_dim()) {
        return Err(Error::Shape(format!(
            "patch matrix {:?} does not match layout {layout}",
            patches.shape()
        )));
    }
    let g = layout.geometry();
    let mut clip = VideoClip::zeros(g);
    for tau in 0..layout.t_tokens {
        for i in 0..layout.h_tokens {
            for j in 0..layout.w_tokens {
                let row = patches.row(layout.index(tau, i, j));
                let mut k = 0;
                for dt in 0..layout.pt {
                    for dy in 0..layout.ps {
                        let base = clip.index(tau * layout.pt + dt, i * layout.ps + dy, j * layout.ps, 0);
                        for v in &mut clip.data_mut()[base..base + layout.ps * g.c] {
                            *v = row[k].as_f64() as f32;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(clip)
}

pub const PATCH_NORM_EPS: f64 = 1e-6;

/// Normalizes every patch vector to zero mean and unit variance
/// (`(x - mean) / sqrt(var + eps)`).
pub fn normalize_patches<T: Scalar>(patches: &mut Mat<T>, eps: f64) {
    let n = T::lit(patches.cols as f64);
    for r in 0..patches.rows {
        let row = patches.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::lit(eps)).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
}

/// Pixel reconstruction targets for a clip.
pub fn pixel_targets<T: Scalar>(clip: &VideoClip, layout: &TokenLayout, normalize: bool) -> Result<PatchTargets<T>> {
    let mut patches = patchify_video(clip, layout)?;
    if normalize {
        normalize_patches(&mut patches, PATCH_NORM_EPS);
    }
    Ok(PatchTargets { patches, normalized: normalize })
}

/// A spatial mask replicated along every time slice of the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeMask {
    spatial: Vec<bool>,
    layout: TokenLayout,
    ratio: f64,
}

/// Number of masked spatial positions: `round(ratio * n)`, ties to even.
pub fn masked_count(ratio: f64, spatial: usize) -> usize {
    (ratio * spatial as f64).round_ties_even() as usize
}

impl TubeMask {
    /// Builds a mask from an explicit spatial pattern.
    pub fn from_spatial(layout: TokenLayout, spatial: Vec<bool>) -> Result<Self> {
        if spatial.len() != layout.spatial() {
            return Err(Error::Shape(format!(
                "spatial mask has {} entries, layout has {}",
                spatial.len(),
                layout.spatial()
            )));
        }
        if spatial.iter().all(|&m| m) {
            return Err(Error::Config("mask must leave at least one visible position".into()));
        }
        let ratio = spatial.iter().filter(|&&m| m).count() as f64 / spatial.len() as f64;
        Ok(Self { spatial, layout, ratio })
    }

    /// Mask hiding nothing.
    pub fn none(layout: TokenLayout) -> Self {
        Self { spatial: vec![false; layout.spatial()], layout, ratio: 0.0 }
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn spatial(&self) -> &[bool] {
        &self.spatial
    }

    pub fn is_masked(&self, token: usize) -> bool {
        self.spatial[token % self.layout.spatial()]
    }

    pub fn masked_spatial_count(&self) -> usize {
        self.spatial.iter().filter(|&&m| m).count()
    }

    /// Masked 3D token indices, ascending.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.layout.total()).filter(|&k| self.is_masked(k)).collect()
    }

    /// Visible 3D token indices, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.layout.total()).filter(|&k| !self.is_masked(k)).collect()
    }

    /// Same spatial pattern applied to another layout with the same grid.
    pub fn with_layout(&self, layout: TokenLayout) -> Result<Self> {
        if layout.h_tokens != self.layout.h_tokens || layout.w_tokens != self.layout.w_tokens {
            return Err(Error::Shape(format!("spatial grid of {layout} differs from {}", self.layout)));
        }
        Ok(Self { spatial: self.spatial.clone(), layout, ratio: self.ratio })
    }
}

/// Draws a tube mask from `rng`: exactly `masked_count(ratio, n)` spatial
/// positions chosen uniformly without replacement.
pub fn sample_tube_mask(layout: &TokenLayout, ratio: f64, rng: &mut Rng) -> Result<TubeMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} must lie in [0, 1)")));
    }
    let n = layout.spatial();
    let k = masked_count(ratio, n);
    if k >= n {
        return Err(Error::Config(format!("mask ratio {ratio} hides all {n} spatial positions")));
    }
    // partial Fisher-Yates
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let mut spatial = vec![false; n];
    for &p in &order[..k] {
        spatial[p] = true;
    }
    Ok(TubeMask { spatial, layout: *layout, ratio })
}

pub fn make_tube_mask(layout: &TokenLayout, ratio: f64, rng_seed: u64) -> Result<TubeMask> {
    sample_tube_mask(layout, ratio, &mut seed::rng(rng_seed, "tube-mask"))
}

/// Visible tokens after dropping masked ones.
pub struct VisibleSplit<T> {
    pub visible: Mat<T>,
    pub visible_indices: Vec<usize>,
    pub masked_indices: Vec<usize>,
}

pub fn split_visible<T: Scalar>(tokens: &Mat<T>, mask: &TubeMask) -> Result<VisibleSplit<T>> {
    if tokens.rows != mask.layout.total() {
        return Err(Error::Shape(format!("{} tokens but layout has {}", tokens.rows, mask.layout.total())));
    }
    let visible_indices = mask.visible_indices();
    let masked_indices = mask.masked_indices();
    Ok(VisibleSplit { visible: tokens.gather_rows(&visible_indices), visible_indices, masked_indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_spatial_task;

    fn desk() -> TokenLayout {
        layout_for(Geometry::desk(), 2, 8).unwrap()
    }

    #[test]
    fn layout_token_counts() {
        let big = layout_for(Geometry::new(16, 224, 224, 3), 2, 16).unwrap();
        assert_eq!((big.t_tokens, big.h_tokens, big.w_tokens), (8, 14, 14));
        assert_eq!(big.total(), 1568);
        assert_eq!(desk().total(), 64);
        assert_eq!(desk().patch_dim(), 128);
    }

    #[test]
    fn layout_names_bad_axis() {
        let err = layout_for(Geometry::new(8, 33, 32, 1), 2, 8).unwrap_err();
        assert!(err.to_string().contains("H=33"), "{err}");
        let err = layout_for(Geometry::new(7, 32, 32, 1), 2, 8).unwrap_err();
        assert!(err.to_string().contains("T=7"), "{err}");
    }

    #[test]
    fn coords_invert_index() {
        let l = desk();
        for k in 0..l.total() {
            let (t, i, j) = l.coords(k);
            assert_eq!(l.index(t, i, j), k);
        }
    }

    #[test]
    fn constant_clip_gives_constant_patches() {
        let g = Geometry::desk();
        let clip = VideoClip::new(g, vec![0.25; g.len()]).unwrap();
        let p: Mat<f32> = patchify_video(&clip, &desk()).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_pixel_lands_in_one_patch() {
        let g = Geometry::desk();
        let mut clip = VideoClip::zeros(g);
        clip.set(3, 9, 17, 0, 1.0);
        let l = desk();
        let p: Mat<f64> = patchify_video(&clip, &l).unwrap();
        let hot: Vec<usize> = (0..l.total()).filter(|&r| p.row(r).iter().any(|&v| v != 0.0)).collect();
        assert_eq!(hot, vec![l.index(1, 1, 2)]);
        // within the patch: dt=1, dy=1, dx=1
        let pos = p.row(hot[0]).iter().position(|&v| v != 0.0).unwrap();
        assert_eq!(pos, (8 + 1) * 8 + 1);
    }

    #[test]
    fn patchify_round_trip() {
        let set = gen_spatial_task(0, 1, Geometry::desk(), 2).unwrap();
        let clip = &set.clips()[0];
        let p: Mat<f32> = patchify_video(clip, &desk()).unwrap();
        assert_eq!(&unpatchify(&p, &desk()).unwrap(), clip);
    }

    #[test]
    fn image_patchify_requires_image_layout() {
        let frame = VideoClip::zeros(Geometry::new(1, 32, 32, 1));
        assert!(patchify_image::<f32>(&frame, &desk()).is_err());
        let p = patchify_image::<f32>(&frame, &desk().image()).unwrap();
        assert_eq!(p.shape(), (16, 64));
    }

    #[test]
    fn mask_counts() {
        let l = desk();
        assert_eq!(make_tube_mask(&l, 0.0, 1).unwrap().masked_indices().len(), 0);
        let grid = layout_for(Geometry::new(16, 224, 224, 3), 2, 16).unwrap();
        assert_eq!(make_tube_mask(&grid, 0.9, 5).unwrap().masked_spatial_count(), 176);
        assert!(make_tube_mask(&l, 1.0, 1).is_err());
        // 16 positions at 0.99 would hide everything
        assert!(make_tube_mask(&l, 0.99, 1).is_err());
        assert_eq!(masked_count(0.9, 16), 14);
        // ties to even: 0.5 * 5 = 2.5 -> 2
        assert_eq!(masked_count(0.5, 5), 2);
    }

    #[test]
    fn mask_is_deterministic_per_seed() {
        let l = desk();
        assert_eq!(make_tube_mask(&l, 0.75, 9).unwrap(), make_tube_mask(&l, 0.75, 9).unwrap());
    }

    #[test]
    fn split_with_single_visible_tube() {
        let l = desk();
        let mut spatial = vec![true; 16];
        spatial[5] = false;
        let mask = TubeMask::from_spatial(l, spatial).unwrap();
        let tokens = Mat::<f64>::from_vec(64, 1, (0..64).map(|v| v as f64).collect());
        let split = split_visible(&tokens, &mask).unwrap();
        assert_eq!(split.visible_indices, vec![5, 21, 37, 53]);
        assert_eq!(split.visible.data, vec![5.0, 21.0, 37.0, 53.0]);
        assert_eq!(split.masked_indices.len(), 60);

        let none = split_visible(&tokens, &TubeMask::none(l)).unwrap();
        assert_eq!(none.visible, tokens);
        assert!(split_visible(&Mat::<f64>::zeros(63, 1), &mask).is_err());
    }
}
