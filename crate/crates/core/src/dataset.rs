//! Synthetic sprite-video corpora and their on-disk format.
//!
//! Two labelled tasks share one visual world of antialiased sprites:
//!
//! * **spatial**: the label is the sprite's shape. The sprite sits near the
//!   frame centre and only jitters by a pixel between frames, so any single
//!   frame is enough to classify the clip.
//! * **temporal**: the label is the direction of motion. Shape, colour,
//!   speed and start position are label-independent and the sprite wraps
//!   around the frame edges. Clips are generated in pairs where the second
//!   clip is the first played backwards with the opposite label, so the
//!   pooled frame statistics of every class are identical.
//!
//! A **static** corpus (spatial task without jitter) is also provided for
//! limiting-case analysis.
//!
//! Corpus directory layout:
//!
//! ```text
//! manifest.txt   class_count=<k>
//!                split=<train|val>
//!                clip_<idx> label=<int> shape=<T>x<H>x<W>x<C>
//! clip_<idx>.f32 little-endian f32, T-major then H, W, C
//! norm.txt       mean_<c>=<float> / std_<c>=<float>   (optional)
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

/// Clip dimensions: frames, height, width, channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Geometry {
    pub const fn new(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, h, w, c }
    }

    /// Default desk geometry: 8 frames of 32x32 grey pixels.
    pub const fn desk() -> Self {
        Self::new(8, 32, 32, 1)
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn len(&self) -> usize {
        self.t * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the generator-level constraints. Patch divisibility is checked
    /// separately when a token layout is derived.
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || !self.t.is_multiple_of(2) {
            return Err(Error::Geometry(format!("T={} must be a positive even frame count", self.t)));
        }
        if self.h < 8 || self.w < 8 {
            return Err(Error::Geometry(format!(
                "frames of {}x{} are too small for sprites (need at least 8x8)",
                self.h, self.w
            )));
        }
        if self.c != 1 && self.c != 3 {
            return Err(Error::Geometry(format!("C={} must be 1 or 3", self.c)));
        }
        Ok(())
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.t, self.h, self.w, self.c)
    }
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Geometry(format!("cannot parse shape {s:?}")))?;
        match dims[..] {
            [t, h, w, c] => Ok(Geometry::new(t, h, w, c)),
            _ => Err(Error::Geometry(format!("shape {s:?} must have four dimensions"))),
        }
    }
}

/// A `T x H x W x C` video stored T-major, then rows, columns, channels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    geometry: Geometry,
    data: Vec<f32>,
}

impl VideoClip {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "clip data has {} values, geometry {geometry} needs {}",
                data.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self { geometry, data: vec![0.0; geometry.len()] }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        let g = self.geometry;
        ((t * g.h + y) * g.w + x) * g.c + c
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(t, y, x, c);
        self.data[i] = v;
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.geometry.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Single frame `t` as a one-frame clip.
    pub fn frame_clip(&self, t: usize) -> VideoClip {
        let g = self.geometry;
        VideoClip { geometry: Geometry::new(1, g.h, g.w, g.c), data: self.frame(t).to_vec() }
    }

    /// Same frames in reverse temporal order.
    pub fn reversed(&self) -> VideoClip {
        let mut data = Vec::with_capacity(self.data.len());
        for t in (0..self.geometry.t).rev() {
            data.extend_from_slice(self.frame(t));
        }
        VideoClip { geometry: self.geometry, data }
    }

    /// Frames reordered so that output frame `i` is input frame `order[i]`.
    pub fn permuted_frames(&self, order: &[usize]) -> VideoClip {
        assert_eq!(order.len(), self.geometry.t);
        let mut data = Vec::with_capacity(self.data.len());
        for &t in order {
            data.extend_from_slice(self.frame(t));
        }
        VideoClip { geometry: self.geometry, data }
    }

    /// Frame-wise mean, as a one-frame clip.
    pub fn mean_frame(&self) -> VideoClip {
        let g = self.geometry;
        let mut acc = vec![0.0f64; g.frame_len()];
        for t in 0..g.t {
            for (a, &v) in acc.iter_mut().zip(self.frame(t)) {
                *a += v as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / g.t as f64) as f32).collect();
        VideoClip { geometry: Geometry::new(1, g.h, g.w, g.c), data }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Clips with integer class labels; all clips share one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideoSet {
    clips: Vec<VideoClip>,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

impl LabeledVideoSet {
    pub fn new(clips: Vec<VideoClip>, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::Config("class_count must be positive".into()));
        }
        if clips.len() != labels.len() {
            return Err(Error::Shape(format!("{} clips but {} labels", clips.len(), labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange { label, class_count });
        }
        if let Some(first) = clips.first() {
            let g = first.geometry();
            if let Some(bad) = clips.iter().find(|c| c.geometry() != g) {
                return Err(Error::Shape(format!("clip geometry {} differs from {g}", bad.geometry())));
            }
        }
        Ok(Self { clips, labels, class_count, split })
    }

    pub fn clips(&self) -> &[VideoClip] {
        &self.clips
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn geometry(&self) -> Option<Geometry> {
        self.clips.first().map(VideoClip::geometry)
    }

    /// Concatenation of two sets with equal geometry; labels of `other` are
    /// kept as-is and the class count is the larger of the two.
    pub fn concat(&self, other: &LabeledVideoSet) -> Result<LabeledVideoSet> {
        let mut clips = self.clips.clone();
        clips.extend(other.clips.iter().cloned());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledVideoSet::new(clips, labels, self.class_count.max(other.class_count), self.split)
    }
}

/// Which synthetic task to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Spatial,
    Temporal,
    Static,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Spatial => "spatial",
            Task::Temporal => "temporal",
            Task::Static => "static",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Task::Spatial),
            "temporal" => Ok(Task::Temporal),
            "static" => Ok(Task::Static),
            other => Err(Error::Config(format!("unknown task {other:?} (expected spatial|temporal|static)"))),
        }
    }
}

pub fn generate(task: Task, seed: u64, n: usize, geometry: Geometry, class_count: usize) -> Result<LabeledVideoSet> {
    match task {
        Task::Spatial => gen_spatial_task(seed, n, geometry, class_count),
        Task::Temporal => gen_temporal_task(seed, n, geometry, class_count),
        Task::Static => gen_static_task(seed, n, geometry, class_count),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Square,
    Cross,
    Triangle,
}

const SHAPES: [Shape; 3] = [Shape::Square, Shape::Cross, Shape::Triangle];

impl Shape {
    /// Coverage test in sprite-local coordinates `u, v` in `[-0.5, 0.5]`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 0.4 && v.abs() <= 0.4,
            Shape::Cross => (u.abs() <= 0.5 && v.abs() <= 0.14) || (v.abs() <= 0.5 && u.abs() <= 0.14),
            Shape::Triangle => {
                // Apex at the top, base at the bottom.
                let depth = (v + 0.45) / 0.9;
                (0.0..=1.0).contains(&depth) && u.abs() <= 0.45 * depth
            }
        }
    }
}

const SPRITE_SIZE: f64 = 12.0;
const SUPERSAMPLE: usize = 4;

struct Sprite {
    shape: Shape,
    color: [f32; 3],
}

fn wrap_offset(d: f64, period: f64) -> f64 {
    (d + period / 2.0).rem_euclid(period) - period / 2.0
}

/// Draws `sprite` centred at pixel coordinates `(cx, cy)` on frame `t`.
/// With `wrap` the frame is treated as a torus.
fn render(clip: &mut VideoClip, t: usize, sprite: &Sprite, cx: f64, cy: f64, wrap: bool) {
    let g = clip.geometry();
    let half = SPRITE_SIZE / 2.0;
    let step = 1.0 / SUPERSAMPLE as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..g.h {
        for x in 0..g.w {
            let mut dy = y as f64 + 0.5 - cy;
            let mut dx = x as f64 + 0.5 - cx;
            if wrap {
                dy = wrap_offset(dy, g.h as f64);
                dx = wrap_offset(dx, g.w as f64);
            }
            if dx.abs() > half + 1.0 || dy.abs() > half + 1.0 {
                continue;
            }
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (dx - 0.5 + (sx as f64 + 0.5) * step) / SPRITE_SIZE;
                    let v = (dy - 0.5 + (sy as f64 + 0.5) * step) / SPRITE_SIZE;
                    if sprite.shape.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cover = (hits as f64 * norm) as f32;
            for c in 0..g.c {
                clip.set(t, y, x, c, cover * sprite.color[c]);
            }
        }
    }
}

fn random_color(rng: &mut seed::Rng, channels: usize) -> [f32; 3] {
    if channels == 1 {
        let v = rng.random_range(0.7f32..1.0);
        [v, v, v]
    } else {
        [rng.random_range(0.3f32..1.0), rng.random_range(0.3f32..1.0), rng.random_range(0.3f32..1.0)]
    }
}

fn check_request(geometry: Geometry, class_count: usize, max_classes: usize, task: &str) -> Result<()> {
    geometry.validate()?;
    if class_count < 2 || class_count > max_classes {
        return Err(Error::Config(format!(
            "{task} task supports 2..={max_classes} classes, got {class_count}"
        )));
    }
    Ok(())
}

fn sprite_clips(seed: u64, n: usize, geometry: Geometry, class_count: usize, jitter: bool, tag: &str) -> Result<LabeledVideoSet> {
    check_request(geometry, class_count, SHAPES.len(), tag)?;
    let mut rng = seed::rng(seed, tag);
    let mut clips = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % class_count;
        let sprite = Sprite { shape: SHAPES[label], color: random_color(&mut rng, geometry.c) };
        let cx = geometry.w as f64 / 2.0 + rng.random_range(-3i32..=3) as f64;
        let cy = geometry.h as f64 / 2.0 + rng.random_range(-3i32..=3) as f64;
        let mut clip = VideoClip::zeros(geometry);
        for t in 0..geometry.t {
            let (jx, jy) = if jitter {
                (rng.random_range(-1i32..=1) as f64, rng.random_range(-1i32..=1) as f64)
            } else {
                (0.0, 0.0)
            };
            render(&mut clip, t, &sprite, cx + jx, cy + jy, false);
        }
        clips.push(clip);
        labels.push(label);
    }
    LabeledVideoSet::new(clips, labels, class_count, Split::Train)
}

/// Shape classification; labels cycle through the shapes in order.
pub fn gen_spatial_task(seed: u64, n: usize, geometry: Geometry, class_count: usize) -> Result<LabeledVideoSet> {
    sprite_clips(seed, n, geometry, class_count, true, "spatial")
}

/// Spatial task with every frame identical.
pub fn gen_static_task(seed: u64, n: usize, geometry: Geometry, class_count: usize) -> Result<LabeledVideoSet> {
    sprite_clips(seed, n, geometry, class_count, false, "static")
}

/// Direction classification. Classes: 0 right, 1 left, 2 down, 3 up.
/// Supports 2 (horizontal) or 4 classes.
pub fn gen_temporal_task(seed: u64, n: usize, geometry: Geometry, class_count: usize) -> Result<LabeledVideoSet> {
    geometry.validate()?;
    if class_count != 2 && class_count != 4 {
        return Err(Error::Config(format!("temporal task supports 2 or 4 classes, got {class_count}")));
    }
    let mut rng = seed::rng(seed, "temporal");
    let mut clips = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while clips.len() < n {
        let axis = rng.random_range(0..class_count / 2);
        let label = 2 * axis + rng.random_range(0..2usize);
        let sprite = Sprite { shape: SHAPES[rng.random_range(0..SHAPES.len())], color: random_color(&mut rng, geometry.c) };
        let speed = rng.random_range(1..=2) as f64;
        let x0 = rng.random_range(0..geometry.w) as f64;
        let y0 = rng.random_range(0..geometry.h) as f64;
        let (vx, vy) = match label {
            0 => (speed, 0.0),
            1 => (-speed, 0.0),
            2 => (0.0, speed),
            _ => (0.0, -speed),
        };
        let mut clip = VideoClip::zeros(geometry);
        for t in 0..geometry.t {
            render(&mut clip, t, &sprite, x0 + vx * t as f64, y0 + vy * t as f64, true);
        }
        if clips.len() + 1 < n {
            clips.push(clip.reversed());
            labels.push(label ^ 1);
        }
        clips.push(clip);
        labels.push(label);
    }
    LabeledVideoSet::new(clips, labels, class_count, Split::Train)
}

pub fn save_corpus(set: &LabeledVideoSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("class_count={}\nsplit={}\n", set.class_count, set.split);
    for (i, (clip, label)) in set.clips.iter().zip(&set.labels).enumerate() {
        manifest.push_str(&format!("clip_{i} label={label} shape={}\n", clip.geometry()));
        let mut bytes = Vec::with_capacity(clip.data.len() * 4);
        for v in &clip.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(format!("clip_{i}.f32")), bytes)?;
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn parse_kv<'a>(field: &'a str, key: &str, path: &Path) -> Result<&'a str> {
    field
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| Error::corrupt(path, format!("expected {key}=..., found {field:?}")))
}

pub fn load_corpus(dir: &Path) -> Result<LabeledVideoSet> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let mut class_count = None;
    let mut split = Split::Train;
    let mut entries = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(v) = line.strip_prefix("class_count=") {
            class_count = Some(v.parse::<usize>().map_err(|_| Error::corrupt(&manifest_path, format!("bad class_count {v:?}")))?);
        } else if let Some(v) = line.strip_prefix("split=") {
            split = v.parse().map_err(|_| Error::corrupt(&manifest_path, format!("bad split {v:?}")))?;
        } else {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, label, shape] = fields[..] else {
                return Err(Error::corrupt(&manifest_path, format!("malformed line {line:?}")));
            };
            if !name.starts_with("clip_") {
                return Err(Error::corrupt(&manifest_path, format!("malformed clip name {name:?}")));
            }
            let label: usize = parse_kv(label, "label", &manifest_path)?
                .parse()
                .map_err(|_| Error::corrupt(&manifest_path, format!("bad label in {line:?}")))?;
            let geometry: Geometry = parse_kv(shape, "shape", &manifest_path)?
                .parse()
                .map_err(|_| Error::corrupt(&manifest_path, format!("bad shape in {line:?}")))?;
            entries.push((name.to_string(), label, geometry));
        }
    }
    let class_count = class_count.ok_or_else(|| Error::corrupt(&manifest_path, "missing class_count"))?;
    if let Some(&(_, _, g0)) = entries.first() {
        if let Some((name, _, g)) = entries.iter().find(|(_, _, g)| *g != g0) {
            return Err(Error::Shape(format!("{name} has shape {g}, expected {g0}")));
        }
    }
    let mut clips = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for (name, label, geometry) in entries {
        if label >= class_count {
            return Err(Error::LabelOutOfRange { label, class_count });
        }
        let path = dir.join(format!("{name}.f32"));
        let bytes = fs::read(&path)?;
        if bytes.len() != geometry.len() * 4 {
            return Err(Error::corrupt(
                &path,
                format!("expected {} bytes for shape {geometry}, found {}", geometry.len() * 4, bytes.len()),
            ));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        clips.push(VideoClip::new(geometry, data)?);
        labels.push(label);
    }
    LabeledVideoSet::new(clips, labels, class_count, split)
}

/// Per-channel mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Single-pass (Welford) channel statistics over every pixel of the set.
pub fn compute_norm_stats(set: &LabeledVideoSet) -> Result<NormStats> {
    let g = set.geometry().ok_or_else(|| Error::Config("cannot compute statistics of an empty set".into()))?;
    let mut count = 0u64;
    let mut mean = vec![0.0f64; g.c];
    let mut m2 = vec![0.0f64; g.c];
    for clip in set.clips() {
        for px in clip.data().chunks_exact(g.c) {
            count += 1;
            for c in 0..g.c {
                let x = px[c] as f64;
                let delta = x - mean[c];
                mean[c] += delta / count as f64;
                m2[c] += delta * (x - mean[c]);
            }
        }
    }
    let std: Vec<f64> = m2.iter().map(|m| (m / count as f64).sqrt()).collect();
    if let Some(c) = std.iter().position(|&s| s <= 1e-12) {
        return Err(Error::ZeroVariance(c));
    }
    Ok(NormStats { mean, std })
}

/// `(x - mean) / std` per channel. The result is no longer confined to `[0, 1]`.
pub fn normalize(clip: &VideoClip, stats: &NormStats) -> VideoClip {
    let g = clip.geometry();
    assert_eq!(stats.mean.len(), g.c, "channel count mismatch");
    let mut out = clip.clone();
    for px in out.data.chunks_exact_mut(g.c) {
        for c in 0..g.c {
            px[c] = ((px[c] as f64 - stats.mean[c]) / stats.std[c]) as f32;
        }
    }
    out
}

pub fn save_norm_stats(stats: &NormStats, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (c, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
        text.push_str(&format!("mean_{c}={m:e}\nstd_{c}={s:e}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_norm_stats(path: &Path) -> Result<NormStats> {
    let text = fs::read_to_string(path)?;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| Error::corrupt(path, format!("malformed line {line:?}")))?;
        let value: f64 = value.parse().map_err(|_| Error::corrupt(path, format!("bad number in {line:?}")))?;
        let (kind, idx) = key.split_once('_').ok_or_else(|| Error::corrupt(path, format!("bad key {key:?}")))?;
        let idx: usize = idx.parse().map_err(|_| Error::corrupt(path, format!("bad channel in {key:?}")))?;
        let target = match kind {
            "mean" => &mut mean,
            "std" => &mut std,
            _ => return Err(Error::corrupt(path, format!("unknown key {key:?}"))),
        };
        if target.len() <= idx {
            target.resize(idx + 1, f64::NAN);
        }
        target[idx] = value;
    }
    if mean.len() != std.len() || mean.iter().chain(&std).any(|v| v.is_nan()) {
        return Err(Error::corrupt(path, "incomplete channel statistics"));
    }
    if let Some(c) = std.iter().position(|&s| s <= 0.0) {
        return Err(Error::ZeroVariance(c));
    }
    Ok(NormStats { mean, std })
}
