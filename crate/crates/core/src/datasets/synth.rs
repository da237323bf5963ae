//! Procedural shape scenes with a configurable source-to-target shift.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Category, DetectionDataset, Domain, ImageRecord, ImageSet, Split};
use crate::boxes::{BBox, BoxSet};
use crate::error::{Error, Result};
use crate::image::Image;

/// Target-only appearance changes. Every intensity lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftDescriptor {
    /// Blend between the original colors (0) and the affine remap
    /// `palette_matrix` (1).
    pub palette_remap: f64,
    /// Rows of a 3x4 affine map `rgb' = M[:, :3] rgb + M[:, 3]`.
    pub palette_matrix: [[f64; 4]; 3],
    /// Amplitude of a periodic paint-like overlay.
    pub texture: f64,
    /// Additive Gaussian noise; 1.0 corresponds to a pixel std of 0.25.
    pub noise: f64,
    /// Density of background distractor strokes and blobs.
    pub clutter: f64,
    /// Contrast reduction toward mid-gray; 1.0 keeps 40% of the contrast.
    pub contrast: f64,
}

impl Default for ShiftDescriptor {
    fn default() -> Self {
        ShiftDescriptor::preset(ShiftPreset::None)
    }
}

/// Channel rotation combined with inversion: light scenes become dark ones
/// and every hue moves.
pub const INVERT_ROTATE: [[f64; 4]; 3] = [[0.0, -1.0, 0.0, 1.0], [0.0, 0.0, -1.0, 1.0], [-1.0, 0.0, 0.0, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftPreset {
    None,
    Default,
    Syn2realLike,
    ArtisticLike,
    CameraLike,
}

impl ShiftPreset {
    pub const BENCHMARKS: [ShiftPreset; 3] = [ShiftPreset::Syn2realLike, ShiftPreset::ArtisticLike, ShiftPreset::CameraLike];
    pub const ALL: [ShiftPreset; 5] =
        [ShiftPreset::None, ShiftPreset::Default, ShiftPreset::Syn2realLike, ShiftPreset::ArtisticLike, ShiftPreset::CameraLike];

    pub fn name(self) -> &'static str {
        match self {
            ShiftPreset::None => "none",
            ShiftPreset::Default => "default",
            ShiftPreset::Syn2realLike => "syn2real-like",
            ShiftPreset::ArtisticLike => "artistic-like",
            ShiftPreset::CameraLike => "camera-like",
        }
    }
}

impl ShiftDescriptor {
    pub fn preset(p: ShiftPreset) -> Self {
        let zero = ShiftDescriptor {
            palette_remap: 0.0,
            palette_matrix: INVERT_ROTATE,
            texture: 0.0,
            noise: 0.0,
            clutter: 0.0,
            contrast: 0.0,
        };
        match p {
            ShiftPreset::None => zero,
            ShiftPreset::Default => ShiftDescriptor { palette_remap: 1.0, noise: 0.3, clutter: 0.3, ..zero },
            ShiftPreset::Syn2realLike => ShiftDescriptor { noise: 0.6, contrast: 0.7, ..zero },
            ShiftPreset::ArtisticLike => ShiftDescriptor { palette_remap: 1.0, texture: 0.7, ..zero },
            ShiftPreset::CameraLike => ShiftDescriptor { clutter: 0.8, contrast: 0.6, ..zero },
        }
    }

    pub fn is_null(&self) -> bool {
        self.palette_remap == 0.0 && self.texture == 0.0 && self.noise == 0.0 && self.clutter == 0.0 && self.contrast == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("palette_remap", self.palette_remap),
            ("texture", self.texture),
            ("noise", self.noise),
            ("clutter", self.clutter),
            ("contrast", self.contrast),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("shift.{name} = {v} is outside [0, 1]")));
            }
        }
        if self.palette_matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("shift.palette_matrix has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainPairSpec {
    pub categories: Vec<String>,
    pub train_images: usize,
    pub val_images: usize,
    pub image_side: usize,
    pub objects_per_image: [usize; 2],
    /// Object extent as a fraction of the image side.
    pub object_scale: [f64; 2],
    pub shift: ShiftDescriptor,
    pub seed: u64,
}

impl Default for DomainPairSpec {
    fn default() -> Self {
        DomainPairSpec {
            categories: vec!["circle".into(), "square".into(), "triangle".into()],
            train_images: 256,
            val_images: 64,
            image_side: 96,
            objects_per_image: [1, 6],
            object_scale: [0.15, 0.35],
            shift: ShiftDescriptor::preset(ShiftPreset::Default),
            seed: 0,
        }
    }
}

impl DomainPairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_images == 0 || self.val_images == 0 {
            return Err(Error::Config("every split needs at least one image".into()));
        }
        if self.categories.is_empty() || self.categories.len() > SHAPES.len() {
            return Err(Error::Config(format!("between 1 and {} categories are supported", SHAPES.len())));
        }
        for c in &self.categories {
            shape_of(c)?;
        }
        let [lo, hi] = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("objects_per_image [{lo}, {hi}] is not a valid range")));
        }
        let [a, b] = self.object_scale;
        if !(a > 0.0 && a <= b && b <= 0.9) {
            return Err(Error::Config(format!("object_scale [{a}, {b}] is not a valid range")));
        }
        if self.image_side < 8 {
            return Err(Error::Config("image_side must be at least 8".into()));
        }
        self.shift.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

const SHAPES: [(&str, Shape); 3] = [("circle", Shape::Circle), ("square", Shape::Square), ("triangle", Shape::Triangle)];

fn shape_of(name: &str) -> Result<Shape> {
    SHAPES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, s)| s)
        .ok_or_else(|| Error::Config(format!("unknown category '{name}' (known: circle, square, triangle)")))
}

const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.20],
    [0.15, 0.30, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.20, 0.70],
    [0.10, 0.60, 0.60],
];

struct Placed {
    shape: Shape,
    cx: f64,
    cy: f64,
    r: f64,
}

impl Placed {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.r * self.r,
            Shape::Square => dx.abs() <= self.r && dy.abs() <= self.r,
            Shape::Triangle => {
                let depth = dy + self.r;
                (0.0..=2.0 * self.r).contains(&depth) && dx.abs() <= 0.5 * depth
            }
        }
    }

    /// Pixel-grid bounds of the mask (pixel centers tested), or `None` if
    /// it covers no pixel.
    fn mask_bounds(&self, side: usize) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        let lo = |c: f64| ((c - self.r - 1.0).floor().max(0.0)) as usize;
        let hi = |c: f64| ((c + self.r + 1.0).ceil().max(0.0) as usize).min(side);
        for y in lo(self.cy)..hi(self.cy) {
            for x in lo(self.cx)..hi(self.cx) {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then(|| BBox::from_corners(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }
}

/// A rendered scene plus the per-object pixel masks (for label checks).
pub struct RenderedScene {
    pub image: Image,
    pub boxes: BoxSet,
    pub masks: Vec<Vec<bool>>,
}

/// Renders one scene. Source scenes use `shift = None`.
pub fn render_scene(spec: &DomainPairSpec, shift: Option<&ShiftDescriptor>, seed: u64) -> Result<RenderedScene> {
    let shapes: Vec<Shape> = spec.categories.iter().map(|c| shape_of(c)).collect::<Result<_>>()?;
    let side = spec.image_side;
    let s = side as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let base = rng.gen_range(0.70..0.90f32);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.04..0.04f32));
    let (gx, gy) = (rng.gen_range(-0.06..0.06f32), rng.gen_range(-0.06..0.06f32));
    let mut img = Image::new(side, side, [0.0; 3]);
    for y in 0..side {
        for x in 0..side {
            let g = base + gx * (x as f32 / s as f32 - 0.5) + gy * (y as f32 / s as f32 - 0.5);
            img.set_pixel(x, y, std::array::from_fn(|c| g + tint[c]));
        }
    }

    if let Some(sh) = shift {
        let n = (sh.clutter * 24.0 * (s / 48.0).powi(2)).round() as usize;
        for _ in 0..n {
            let color: [f32; 3] = if rng.gen_bool(0.5) {
                PALETTE[rng.gen_range(0..PALETTE.len())]
            } else {
                let v = rng.gen_range(0.1..0.5f32);
                [v, v, v]
            };
            if rng.gen_bool(0.6) {
                let (x0, y0) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let len = rng.gen_range(0.2..0.6) * s;
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let steps = (len * 2.0) as usize;
                for k in 0..=steps {
                    let t = k as f64 / steps.max(1) as f64 * len;
                    let (x, y) = (x0 + t * ang.cos(), y0 + t * ang.sin());
                    if x >= 0.0 && y >= 0.0 && x < s && y < s {
                        img.set_pixel(x as usize, y as usize, color);
                    }
                }
            } else {
                let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let r = rng.gen_range(0.8..2.2f64);
                for y in 0..side {
                    for x in 0..side {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            img.set_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }

    let [lo, hi] = spec.objects_per_image;
    let want = rng.gen_range(lo..=hi);
    let mut placed: Vec<(Placed, BBox, usize)> = Vec::new();
    for _attempt in 0..want * 20 {
        if placed.len() == want {
            break;
        }
        let label = rng.gen_range(0..shapes.len());
        let r = 0.5 * rng.gen_range(spec.object_scale[0]..=spec.object_scale[1]) * s;
        let cx = rng.gen_range(r..=s - r);
        let cy = rng.gen_range(r..=s - r);
        let p = Placed { shape: shapes[label], cx, cy, r };
        let Some(b) = p.mask_bounds(side) else { continue };
        let margin = BBox::from_corners(b.x - 1.0, b.y - 1.0, b.x2() + 1.0, b.y2() + 1.0);
        if placed.iter().any(|(_, o, _)| o.intersection(&margin) > 0.0) {
            continue;
        }
        placed.push((p, b, label));
    }
    let mut masks = Vec::with_capacity(placed.len());
    for (p, _, _) in &placed {
        let color = PALETTE[rng.gen_range(0..PALETTE.len())];
        let jitter: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05f32));
        let mut mask = vec![false; side * side];
        for y in 0..side {
            for x in 0..side {
                if p.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[y * side + x] = true;
                    img.set_pixel(x, y, std::array::from_fn(|c| color[c] + jitter[c]));
                }
            }
        }
        masks.push(mask);
    }

    if let Some(sh) = shift {
        apply_shift(&mut img, sh, &mut rng);
    }
    img.quantize();

    let boxes = BoxSet::new(placed.iter().map(|(_, b, _)| *b).collect(), placed.iter().map(|(_, _, l)| *l).collect());
    Ok(RenderedScene { image: img, boxes, masks })
}

fn apply_shift(img: &mut Image, sh: &ShiftDescriptor, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.width, img.height);
    if sh.palette_remap > 0.0 {
        let m = sh.palette_matrix;
        let k = sh.palette_remap as f32;
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(x, y);
                let q: [f32; 3] = std::array::from_fn(|r| {
                    let v = m[r][0] * p[0] as f64 + m[r][1] * p[1] as f64 + m[r][2] * p[2] as f64 + m[r][3];
                    (1.0 - k) * p[r] + k * v as f32
                });
                img.set_pixel(x, y, q);
            }
        }
    }
    if sh.texture > 0.0 {
        let period_x = rng.gen_range(3.0..8.0f64);
        let period_y = rng.gen_range(3.0..8.0f64);
        let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
        let amp = 0.3 * sh.texture;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let u = (std::f64::consts::TAU * x as f64 / period_x + phase[c]).sin()
                        * (std::f64::consts::TAU * y as f64 / period_y).cos();
                    let v = img.get(c, x, y) + (amp * u) as f32;
                    img.set(c, x, y, v);
                }
            }
        }
    }
    if sh.contrast > 0.0 {
        let keep = (1.0 - 0.6 * sh.contrast) as f32;
        img.data.iter_mut().for_each(|v| *v = 0.5 + (*v - 0.5) * keep);
    }
    if sh.noise > 0.0 {
        let n = Normal::new(0.0, 0.25 * sh.noise).expect("finite std");
        img.data.iter_mut().for_each(|v| *v += n.sample(rng) as f32);
    }
    img.clamp01();
}

pub(crate) fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Four splits generated from one spec. `target_train` keeps its labels in
/// memory; [`DomainPair::save`] writes them to a separate oracle file.
#[derive(Clone, Debug)]
pub struct DomainPair {
    pub source_train: ImageSet,
    pub source_val: ImageSet,
    pub target_train: ImageSet,
    pub target_val: ImageSet,
}

impl DomainPair {
    /// Writes `source_train.json`, `source_val.json`, `target_train.json`
    /// (no annotations), `target_train_oracle.json` and `target_val.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.source_train.save(dir, "source_train")?;
        self.source_val.save(dir, "source_val")?;
        self.target_train.unlabeled().save(dir, "target_train")?;
        super::write_dataset(&self.target_train.dataset, &dir.join("target_train_oracle.json"))?;
        self.target_val.save(dir, "target_val")?;
        Ok(())
    }

    pub fn splits(&self) -> [(&'static str, &ImageSet); 4] {
        [
            ("source_train", &self.source_train),
            ("source_val", &self.source_val),
            ("target_train", &self.target_train),
            ("target_val", &self.target_val),
        ]
    }

    /// Every image of all four splits, labels discarded.
    pub fn unlabeled_pool(&self) -> Vec<&Image> {
        self.splits().into_iter().flat_map(|(_, s)| s.images.iter()).collect()
    }
}

pub fn generate_domain_pair(spec: &DomainPairSpec) -> Result<DomainPair> {
    spec.validate()?;
    let categories: Vec<Category> =
        spec.categories.iter().enumerate().map(|(i, n)| Category { id: i as u64 + 1, name: n.clone() }).collect();
    let split = |domain: Domain, split: Split, n: usize, stream: u64| -> Result<ImageSet> {
        let shift = (domain == Domain::Target).then_some(&spec.shift);
        let prefix = format!(
            "{}_{}",
            if domain == Domain::Source { "source" } else { "target" },
            if split == Split::Train { "train" } else { "val" }
        );
        let scenes: Vec<RenderedScene> = (0..n)
            .into_par_iter()
            .map(|i| render_scene(spec, shift, mix(spec.seed, stream * 1_000_003 + i as u64)))
            .collect::<Result<_>>()?;
        let mut records = Vec::with_capacity(n);
        let mut images = Vec::with_capacity(n);
        for (i, sc) in scenes.into_iter().enumerate() {
            let id = stream * 100_000 + i as u64 + 1;
            records.push(ImageRecord {
                id,
                file_name: format!("{prefix}/{id:06}.png"),
                width: spec.image_side,
                height: spec.image_side,
                boxes: sc.boxes,
            });
            images.push(sc.image);
        }
        Ok(ImageSet { dataset: DetectionDataset { categories: categories.clone(), records, domain, split }, images })
    };
    Ok(DomainPair {
        source_train: split(Domain::Source, Split::Train, spec.train_images, 1)?,
        source_val: split(Domain::Source, Split::Val, spec.val_images, 2)?,
        target_train: split(Domain::Target, Split::Train, spec.train_images, 3)?,
        target_val: split(Domain::Target, Split::Val, spec.val_images, 4)?,
    })
}
