use ddt_core::augmentation::{augment, sample_geometry, transform_box, AugKind, AugmentationPolicy};
use ddt_core::{BBox, BoxSet, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Maps a point through each drawn primitive in turn, without matrices.
fn oracle_point(ops: &ddt_core::augmentation::AppliedOps, w: f64, h: f64, (mut x, mut y): (f64, f64)) -> (f64, f64) {
    let (cx, cy) = (w / 2.0, h / 2.0);
    if let Some([x1, y1, x2, y2]) = ops.crop {
        x = (x - x1) / (x2 - x1) * w;
        y = (y - y1) / (y2 - y1) * h;
    }
    if ops.flip {
        x = w - x;
    }
    if let Some(d) = ops.rotate_deg {
        let a = d * std::f64::consts::PI / 180.0;
        let (dx, dy) = (x - cx, y - cy);
        x = cx + dx * a.cos() - dy * a.sin();
        y = cy + dx * a.sin() + dy * a.cos();
    }
    if let Some(d) = ops.shear_deg {
        x += (y - cy) * (d * std::f64::consts::PI / 180.0).tan();
    }
    if let Some((tx, ty)) = ops.translate {
        x += tx;
        y += ty;
    }
    (x, y)
}

#[test]
fn box_corners_match_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut policy = AugmentationPolicy::weak();
    policy.rotate_p = 0.7;
    policy.shear_p = 0.7;
    policy.translate_p = 0.7;
    let (w, h) = (48.0, 40.0);
    for _ in 0..2000 {
        let ops = sample_geometry(&policy, w, h, &mut rng);
        let m = ops.affine(w, h);
        let b = BBox::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..30.0), rng.gen_range(0.5..20.0), rng.gen_range(0.5..20.0));
        let pts: Vec<(f64, f64)> =
            [(b.x, b.y), (b.x2(), b.y), (b.x, b.y2()), (b.x2(), b.y2())].iter().map(|&p| oracle_point(&ops, w, h, p)).collect();
        let want = [
            pts.iter().map(|p| p.0).fold(f64::MAX, f64::min),
            pts.iter().map(|p| p.1).fold(f64::MAX, f64::min),
            pts.iter().map(|p| p.0).fold(f64::MIN, f64::max),
            pts.iter().map(|p| p.1).fold(f64::MIN, f64::max),
        ];
        let got = transform_box(&b, &m).corners();
        for k in 0..4 {
            assert!((got[k] - want[k]).abs() < 1e-6, "{ops:?}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn boxes_pushed_out_of_frame_are_dropped() {
    let img = Image::new(40, 40, [0.5; 3]);
    let boxes = BoxSet::new(vec![BBox::new(0.0, 10.0, 4.0, 4.0), BBox::new(15.0, 15.0, 10.0, 10.0)], vec![0, 1]);
    let policy = AugmentationPolicy { translate_p: 1.0, max_translate: 0.1, ..AugmentationPolicy::identity(AugKind::Strong) };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut saw_drop = false;
    for _ in 0..200 {
        let (_, out, ops) = augment(&img, &boxes, &policy, &mut rng);
        let (tx, _) = ops.translate.unwrap();
        // The left box keeps (4 + tx) / 4 of its width.
        let visible = ((4.0 + tx) / 4.0).clamp(0.0, 1.0);
        assert_eq!(out.labels.contains(&0), visible >= 0.25, "tx = {tx}");
        assert!(out.labels.contains(&1));
        saw_drop |= visible < 0.25;
        out.validate(40.0, 40.0, 2).unwrap();
    }
    assert!(saw_drop);
}

#[test]
fn weak_crop_keeps_enough_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let policy = AugmentationPolicy::weak();
    for _ in 0..500 {
        let ops = sample_geometry(&policy, 64.0, 48.0, &mut rng);
        let [x1, y1, x2, y2] = ops.crop.unwrap();
        assert!((x2 - x1) * (y2 - y1) >= 0.8 * 64.0 * 48.0 - 1e-9);
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 + 1e-9 && y2 <= 48.0 + 1e-9);
    }
}
