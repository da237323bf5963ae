//! Weak and strong augmentation with box-consistent geometry.
//!
//! Coordinates are continuous pixels: pixel `i` covers `[i, i + 1)` and has
//! its center at `i + 0.5`. Every geometric op is folded into one affine map
//! and the image is resampled once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, BoxSet};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub kind: AugKind,
    pub crop_p: f64,
    /// Smallest retained fraction of the image area.
    pub crop_min_area: f64,
    pub flip_p: f64,
    pub rotate_p: f64,
    pub max_rotate_deg: f64,
    pub shear_p: f64,
    pub max_shear_deg: f64,
    pub translate_p: f64,
    /// Fraction of the image side.
    pub max_translate: f64,
    pub contrast_p: f64,
    pub equalize_p: f64,
    pub sharpness_p: f64,
    pub posterize_p: f64,
    pub color_jitter_p: f64,
    /// Boxes keeping less than this fraction of their area after clipping
    /// are dropped.
    pub min_box_visible: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy::weak()
    }
}

impl AugmentationPolicy {
    /// Every probability zero: the identity.
    pub fn identity(kind: AugKind) -> Self {
        AugmentationPolicy {
            kind,
            crop_p: 0.0,
            crop_min_area: 0.8,
            flip_p: 0.0,
            rotate_p: 0.0,
            max_rotate_deg: 15.0,
            shear_p: 0.0,
            max_shear_deg: 10.0,
            translate_p: 0.0,
            max_translate: 0.1,
            contrast_p: 0.0,
            equalize_p: 0.0,
            sharpness_p: 0.0,
            posterize_p: 0.0,
            color_jitter_p: 0.0,
            min_box_visible: 0.25,
        }
    }

    pub fn weak() -> Self {
        AugmentationPolicy { crop_p: 1.0, flip_p: 0.5, ..Self::identity(AugKind::Weak) }
    }

    pub fn strong() -> Self {
        let p = 0.3;
        AugmentationPolicy {
            rotate_p: p,
            shear_p: p,
            translate_p: p,
            contrast_p: p,
            equalize_p: p,
            sharpness_p: p,
            posterize_p: p,
            color_jitter_p: p,
            ..Self::identity(AugKind::Strong)
        }
    }

    /// Same policy with the color ops switched off.
    pub fn geometry_only(&self) -> Self {
        AugmentationPolicy {
            contrast_p: 0.0,
            equalize_p: 0.0,
            sharpness_p: 0.0,
            posterize_p: 0.0,
            color_jitter_p: 0.0,
            ..self.clone()
        }
    }

    /// Same policy with the geometric ops switched off.
    pub fn color_only(&self) -> Self {
        AugmentationPolicy { crop_p: 0.0, flip_p: 0.0, rotate_p: 0.0, shear_p: 0.0, translate_p: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let probs = [
            ("crop_p", self.crop_p),
            ("flip_p", self.flip_p),
            ("rotate_p", self.rotate_p),
            ("shear_p", self.shear_p),
            ("translate_p", self.translate_p),
            ("contrast_p", self.contrast_p),
            ("equalize_p", self.equalize_p),
            ("sharpness_p", self.sharpness_p),
            ("posterize_p", self.posterize_p),
            ("color_jitter_p", self.color_jitter_p),
            ("min_box_visible", self.min_box_visible),
        ];
        for (name, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(crate::Error::Config(format!("augmentation.{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.crop_min_area > 0.0 && self.crop_min_area <= 1.0) {
            return Err(crate::Error::Config("augmentation.crop_min_area must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Row-major 2x3 affine map on continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    /// `other` applied after `self`.
    pub fn then(&self, other: &Affine) -> Affine {
        let a = &other.0;
        let b = &self.0;
        Affine([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    pub fn inverse(&self) -> Affine {
        let m = &self.0;
        let det = m[0] * m[4] - m[1] * m[3];
        let (a, b, c, d) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
        Affine([a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])])
    }

    fn translate(tx: f64, ty: f64) -> Affine {
        Affine([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    /// Linear part `[a b; c d]` acting about `(cx, cy)`.
    fn about(a: f64, b: f64, c: f64, d: f64, cx: f64, cy: f64) -> Affine {
        Affine::translate(-cx, -cy).then(&Affine([a, b, 0.0, c, d, 0.0])).then(&Affine::translate(cx, cy))
    }
}

/// The randomly drawn parameters of one augmentation call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppliedOps {
    /// Crop window `[x1, y1, x2, y2]`, resized back to the full image.
    pub crop: Option<[f64; 4]>,
    pub flip: bool,
    pub rotate_deg: Option<f64>,
    pub shear_deg: Option<f64>,
    pub translate: Option<(f64, f64)>,
    pub color: Vec<&'static str>,
}

impl AppliedOps {
    pub fn affine(&self, w: f64, h: f64) -> Affine {
        let (cx, cy) = (0.5 * w, 0.5 * h);
        let mut m = Affine::IDENTITY;
        if let Some([x1, y1, x2, y2]) = self.crop {
            m = m.then(&Affine([w / (x2 - x1), 0.0, -x1 * w / (x2 - x1), 0.0, h / (y2 - y1), -y1 * h / (y2 - y1)]));
        }
        if self.flip {
            m = m.then(&Affine([-1.0, 0.0, w, 0.0, 1.0, 0.0]));
        }
        if let Some(deg) = self.rotate_deg {
            let (s, c) = deg.to_radians().sin_cos();
            m = m.then(&Affine::about(c, -s, s, c, cx, cy));
        }
        if let Some(deg) = self.shear_deg {
            m = m.then(&Affine::about(1.0, deg.to_radians().tan(), 0.0, 1.0, cx, cy));
        }
        if let Some((tx, ty)) = self.translate {
            m = m.then(&Affine::translate(tx, ty));
        }
        m
    }

    pub fn is_geometric(&self) -> bool {
        self.crop.is_some() || self.flip || self.rotate_deg.is_some() || self.shear_deg.is_some() || self.translate.is_some()
    }
}

/// Draws the geometric parameters for a `w x h` image.
pub fn sample_geometry<R: Rng + ?Sized>(policy: &AugmentationPolicy, w: f64, h: f64, rng: &mut R) -> AppliedOps {
    let mut ops = AppliedOps::default();
    if rng.gen_bool(policy.crop_p) && policy.crop_min_area < 1.0 {
        let area = rng.gen_range(policy.crop_min_area..=1.0);
        let ratio: f64 = rng.gen_range(0.9f64.ln()..=1.1f64.ln()).exp();
        let cw = (w * (area * ratio).sqrt()).min(w);
        let ch = (h * (area / ratio).sqrt()).min(h);
        let x1 = rng.gen_range(0.0..=w - cw);
        let y1 = rng.gen_range(0.0..=h - ch);
        ops.crop = Some([x1, y1, x1 + cw, y1 + ch]);
    }
    ops.flip = rng.gen_bool(policy.flip_p);
    if rng.gen_bool(policy.rotate_p) {
        ops.rotate_deg = Some(rng.gen_range(-policy.max_rotate_deg..=policy.max_rotate_deg));
    }
    if rng.gen_bool(policy.shear_p) {
        ops.shear_deg = Some(rng.gen_range(-policy.max_shear_deg..=policy.max_shear_deg));
    }
    if rng.gen_bool(policy.translate_p) {
        let m = policy.max_translate;
        ops.translate = Some((rng.gen_range(-m..=m) * w, rng.gen_range(-m..=m) * h));
    }
    ops
}

/// Axis-aligned bound of the four mapped corners.
pub fn transform_box(b: &BBox, m: &Affine) -> BBox {
    let pts = [(b.x, b.y), (b.x2(), b.y), (b.x, b.y2()), (b.x2(), b.y2())].map(|(x, y)| m.apply(x, y));
    let xs = pts.map(|p| p.0);
    let ys = pts.map(|p| p.1);
    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    BBox::from_corners(min(xs), min(ys), max(xs), max(ys))
}

/// Maps, clips and filters a box set. A box survives when its clipped area
/// is at least `min_visible` times its mapped area.
pub fn transform_boxes(boxes: &BoxSet, m: &Affine, w: f64, h: f64, min_visible: f64) -> BoxSet {
    let mut keep = Vec::new();
    let mut out = Vec::new();
    for (i, b) in boxes.boxes.iter().enumerate() {
        let t = transform_box(b, m);
        let c = t.clip(w, h);
        if c.is_valid() && c.area() >= min_visible * t.area() {
            keep.push(i);
            out.push(c);
        }
    }
    let mut set = boxes.select(&keep);
    set.boxes = out;
    set
}

/// Resamples `img` through `m` (input to output coordinates), bilinear,
/// filling uncovered areas with mid-gray.
pub fn warp(img: &Image, m: &Affine, fill: f32) -> Image {
    let inv = m.inverse();
    let mut out = Image::new(img.width, img.height, [fill; 3]);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            for c in 0..3 {
                out.set(c, x, y, img.sample(c, sx, sy, fill));
            }
        }
    }
    out
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn contrast(img: &mut Image, f: f32) {
    let n = img.plane() as f32;
    let mean = (0..img.height).flat_map(|y| (0..img.width).map(move |x| (x, y))).map(|(x, y)| luma(img.pixel(x, y))).sum::<f32>() / n;
    img.data.iter_mut().for_each(|v| *v = mean + (*v - mean) * f);
}

fn equalize(img: &mut Image) {
    let plane = img.plane();
    for c in 0..3 {
        let ch = &mut img.data[c * plane..(c + 1) * plane];
        let mut hist = [0usize; 256];
        for v in ch.iter() {
            hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, &n) in hist.iter().enumerate() {
            acc += n;
            cdf[i] = acc;
        }
        let first = cdf.iter().copied().find(|&n| n > 0).unwrap_or(0);
        if plane == first {
            continue;
        }
        for v in ch.iter_mut() {
            let k = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
            *v = (cdf[k] - first) as f32 / (plane - first) as f32;
        }
    }
}

fn sharpness(img: &mut Image, f: f32) {
    let src = img.clone();
    let (w, h) = (img.width, img.height);
    for c in 0..3 {
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let mut acc = 4.0 * src.get(c, x, y);
                for yy in y - 1..=y + 1 {
                    for xx in x - 1..=x + 1 {
                        acc += src.get(c, xx, yy);
                    }
                }
                let blur = acc / 13.0;
                img.set(c, x, y, blur + f * (src.get(c, x, y) - blur));
            }
        }
    }
}

fn posterize(img: &mut Image, bits: u32) {
    let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
    img.data.iter_mut().for_each(|v| *v = (((v.clamp(0.0, 1.0) * 255.0).round() as u32) & mask) as f32 / 255.0);
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn color_jitter(img: &mut Image, dh: f32, ds: f32, dv: f32) {
    for y in 0..img.height {
        for x in 0..img.width {
            let [h, s, v] = rgb_to_hsv(img.pixel(x, y));
            img.set_pixel(x, y, hsv_to_rgb([h + dh, (s * ds).clamp(0.0, 1.0), (v * dv).clamp(0.0, 1.0)]));
        }
    }
}

/// Applies the color ops in a fixed order, each with its own probability.
pub fn apply_color<R: Rng + ?Sized>(img: &mut Image, policy: &AugmentationPolicy, rng: &mut R) -> Vec<&'static str> {
    let mut applied = Vec::new();
    if rng.gen_bool(policy.contrast_p) {
        contrast(img, rng.gen_range(0.6..1.4));
        applied.push("contrast");
    }
    if rng.gen_bool(policy.equalize_p) {
        equalize(img);
        applied.push("equalize");
    }
    if rng.gen_bool(policy.sharpness_p) {
        sharpness(img, rng.gen_range(0.5..1.8));
        applied.push("sharpness");
    }
    if rng.gen_bool(policy.posterize_p) {
        posterize(img, rng.gen_range(4..=6));
        applied.push("posterize");
    }
    if rng.gen_bool(policy.color_jitter_p) {
        color_jitter(img, rng.gen_range(-0.05..0.05), rng.gen_range(0.7..1.3), rng.gen_range(0.8..1.2));
        applied.push("color_jitter");
    }
    if !applied.is_empty() {
        img.clamp01();
    }
    applied
}

/// Augments one image and its boxes. Identical RNG state gives identical
/// output.
pub fn augment<R: Rng + ?Sized>(
    img: &Image,
    boxes: &BoxSet,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> (Image, BoxSet, AppliedOps) {
    let (w, h) = (img.width as f64, img.height as f64);
    let mut ops = sample_geometry(policy, w, h, rng);
    let (mut out, out_boxes) = if ops.is_geometric() {
        let m = ops.affine(w, h);
        (warp(img, &m, 0.5), transform_boxes(boxes, &m, w, h, policy.min_box_visible))
    } else {
        (img.clone(), boxes.clone())
    };
    ops.color = apply_color(&mut out, policy, rng);
    (out, out_boxes, ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(rng: &mut ChaCha8Rng) -> (Image, BoxSet) {
        let mut img = Image::new(32, 24, [0.0; 3]);
        img.data.iter_mut().for_each(|v| *v = rng.gen());
        let boxes = BoxSet::new(vec![BBox::new(2.0, 3.0, 10.0, 8.0), BBox::new(20.5, 10.0, 6.0, 12.0)], vec![0, 2]);
        (img, boxes)
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (img, boxes) = scene(&mut rng);
        for kind in [AugKind::Weak, AugKind::Strong] {
            let (o, b, ops) = augment(&img, &boxes, &AugmentationPolicy::identity(kind), &mut rng);
            assert_eq!(o, img);
            assert_eq!(b, boxes);
            assert_eq!(ops, AppliedOps::default());
        }
    }

    #[test]
    fn flip_reflects_boxes_and_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (img, boxes) = scene(&mut rng);
        let policy = AugmentationPolicy { flip_p: 1.0, ..AugmentationPolicy::identity(AugKind::Weak) };
        let (o, b, _) = augment(&img, &boxes, &policy, &mut rng);
        for (orig, got) in boxes.boxes.iter().zip(&b.boxes) {
            let want = BBox::new(32.0 - orig.x - orig.w, orig.y, orig.w, orig.h);
            assert!((got.x - want.x).abs() < 1e-12 && got.w == want.w && got.y == want.y && got.h == want.h);
        }
        assert_eq!(o.get(1, 31, 5), img.get(1, 0, 5));
        assert_eq!(o.get(2, 4, 7), img.get(2, 27, 7));
    }

    #[test]
    fn affine_inverse_round_trips() {
        let ops = AppliedOps {
            crop: Some([2.0, 1.0, 30.0, 22.0]),
            flip: true,
            rotate_deg: Some(12.0),
            shear_deg: Some(-7.0),
            translate: Some((1.5, -2.0)),
            color: vec![],
        };
        let m = ops.affine(32.0, 24.0);
        let (x, y) = m.inverse().apply(m.apply(3.7, 11.2).0, m.apply(3.7, 11.2).1);
        assert!((x - 3.7).abs() < 1e-12 && (y - 11.2).abs() < 1e-12);
    }

    #[test]
    fn color_ops_leave_boxes_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (img, boxes) = scene(&mut rng);
        let policy = AugmentationPolicy::strong().color_only();
        let all = AugmentationPolicy {
            contrast_p: 1.0,
            equalize_p: 1.0,
            sharpness_p: 1.0,
            posterize_p: 1.0,
            color_jitter_p: 1.0,
            ..policy
        };
        let (o, b, ops) = augment(&img, &boxes, &all, &mut rng);
        assert_eq!(b, boxes);
        assert_eq!(ops.color.len(), 5);
        assert_ne!(o, img);
        assert!(o.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hsv_round_trip() {
        for p in [[0.2f32, 0.7, 0.4], [0.9, 0.1, 0.5], [0.3, 0.3, 0.3], [0.0, 0.0, 1.0]] {
            let q = hsv_to_rgb(rgb_to_hsv(p));
            assert!(p.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-6), "{p:?} -> {q:?}");
        }
    }

    #[test]
    fn same_rng_state_same_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (img, boxes) = scene(&mut rng);
        let policy = AugmentationPolicy { rotate_p: 1.0, contrast_p: 1.0, ..AugmentationPolicy::strong() };
        let a = augment(&img, &boxes, &policy, &mut ChaCha8Rng::seed_from_u64(77));
        let b = augment(&img, &boxes, &policy, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    fn geometric() -> AugmentationPolicy {
        AugmentationPolicy { crop_p: 1.0, flip_p: 0.5, rotate_p: 1.0, shear_p: 1.0, translate_p: 1.0, ..AugmentationPolicy::identity(AugKind::Strong) }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn painted_mass_stays_inside_transformed_box(
            seed in any::<u64>(), x in 2usize..20, y in 2usize..14, bw in 3usize..10, bh in 3usize..8
        ) {
            let (w, h) = (32usize, 24usize);
            let mut img = Image::new(w, h, [0.0; 3]);
            for yy in y..y + bh {
                for xx in x..x + bw {
                    img.set_pixel(xx, yy, [1.0; 3]);
                }
            }
            let b = BBox::new(x as f64, y as f64, bw as f64, bh as f64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ops = sample_geometry(&geometric(), w as f64, h as f64, &mut rng);
            let m = ops.affine(w as f64, h as f64);
            let out = warp(&img, &m, 0.0);
            let tb = transform_box(&b, &m);
            for yy in 0..h {
                for xx in 0..w {
                    if out.get(0, xx, yy) >= 0.5 {
                        let (cx, cy) = (xx as f64 + 0.5, yy as f64 + 0.5);
                        prop_assert!(cx >= tb.x - 1e-6 && cx <= tb.x2() + 1e-6 && cy >= tb.y - 1e-6 && cy <= tb.y2() + 1e-6);
                    }
                }
            }
        }
    }
}
