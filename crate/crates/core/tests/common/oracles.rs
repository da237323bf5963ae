#![allow(dead_code)]

use ddt_core::evaluation::{average_precision, mean_ap, Taxonomy};
use ddt_core::{BBox, BoxSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const K: usize = 3;

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0..12) as f64, rng.gen_range(0..12) as f64, rng.gen_range(1..7) as f64, rng.gen_range(1..7) as f64)
}

pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<BoxSet>, Vec<BoxSet>) {
    let images = rng.gen_range(1..=3);
    let mut gts = vec![BoxSet::default(); images];
    let mut dets = vec![BoxSet::scored(vec![], vec![], vec![]); images];
    for _ in 0..rng.gen_range(0..=10) {
        let g = &mut gts[rng.gen_range(0..images)];
        g.boxes.push(random_box(rng));
        g.labels.push(rng.gen_range(0..K));
    }
    for _ in 0..rng.gen_range(0..=20) {
        let im = rng.gen_range(0..images);
        let b = if !gts[im].is_empty() && rng.gen_bool(0.6) {
            let g = gts[im].boxes[rng.gen_range(0..gts[im].len())];
            BBox::new(g.x + rng.gen_range(-1..=1) as f64, g.y + rng.gen_range(-1..=1) as f64, g.w, g.h)
        } else {
            random_box(rng)
        };
        let d = &mut dets[im];
        d.boxes.push(b);
        d.labels.push(rng.gen_range(0..K));
        d.scores.as_mut().unwrap().push(rng.gen_range(1..=9) as f64 / 10.0);
    }
    (dets, gts)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = iw.max(0.0) * ih.max(0.0);
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Detections of `class` in rank order as (image, index).
pub fn oracle_rank(dets: &[BoxSet], class: usize) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for (im, d) in dets.iter().enumerate() {
        for i in 0..d.len() {
            if d.labels[i] == class {
                all.push((im, i));
            }
        }
    }
    // Insertion sort by (score desc, image, index).
    let key = |&(im, i): &(usize, usize)| (-dets[im].scores.as_ref().unwrap()[i], im, i);
    let mut out: Vec<(usize, usize)> = Vec::new();
    for x in all {
        let pos = out.iter().position(|y| key(&x).partial_cmp(&key(y)).unwrap().is_lt()).unwrap_or(out.len());
        out.insert(pos, x);
    }
    out
}

/// True-positive count among the first `k` ranked detections, matching
/// from scratch.
pub fn oracle_tp(dets: &[BoxSet], gts: &[BoxSet], class: usize, k: usize) -> usize {
    let rank = oracle_rank(dets, class);
    let mut used = std::collections::HashSet::new();
    let mut tp = 0;
    for &(im, i) in rank.iter().take(k) {
        let mut best = None;
        let mut best_iou = -1.0;
        for j in 0..gts[im].len() {
            if gts[im].labels[j] == class && !used.contains(&(im, j)) {
                let o = iou(&dets[im].boxes[i], &gts[im].boxes[j]);
                if o >= 0.5 && o > best_iou {
                    best = Some(j);
                    best_iou = o;
                }
            }
        }
        if let Some(j) = best {
            used.insert((im, j));
            tp += 1;
        }
    }
    tp
}

pub fn oracle_ap(dets: &[BoxSet], gts: &[BoxSet], class: usize) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == class).count()).sum();
    let n = oracle_rank(dets, class).len();
    if n_gt == 0 {
        return if n == 0 { None } else { Some(0.0) };
    }
    let pts: Vec<(f64, f64)> = (1..=n)
        .map(|k| {
            let tp = oracle_tp(dets, gts, class, k) as f64;
            (tp / n_gt as f64, tp / k as f64)
        })
        .collect();
    let mut levels: Vec<f64> = pts.iter().map(|p| p.0).collect();
    levels.push(0.0);
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    for w in levels.windows(2) {
        let interp = pts.iter().filter(|p| p.0 >= w[1]).map(|p| p.1).fold(0.0, f64::max);
        ap += (w[1] - w[0]) * interp;
    }
    Some(ap)
}

pub fn oracle_taxonomy(dets: &[BoxSet], gts: &[BoxSet]) -> Taxonomy {
    let mut t = Taxonomy::default();
    for (d, g) in dets.iter().zip(gts) {
        let one_d = [d.clone()];
        let one_g = [g.clone()];
        let mut correct_ids = std::collections::HashSet::new();
        let mut matched_gt = 0;
        for c in 0..K {
            let rank = oracle_rank(&one_d, c);
            for k in 1..=rank.len() {
                if oracle_tp(&one_d, &one_g, c, k) > oracle_tp(&one_d, &one_g, c, k - 1) {
                    correct_ids.insert(rank[k - 1].1);
                }
            }
            matched_gt += oracle_tp(&one_d, &one_g, c, rank.len());
        }
        t.missed_gt += g.len() - matched_gt;
        for i in 0..d.len() {
            if correct_ids.contains(&i) {
                t.correct += 1;
                continue;
            }
            let mut same: f64 = 0.0;
            let mut other: f64 = 0.0;
            for j in 0..g.len() {
                let o = iou(&d.boxes[i], &g.boxes[j]);
                if g.labels[j] == d.labels[i] {
                    same = same.max(o);
                } else {
                    other = other.max(o);
                }
            }
            if same >= 0.5 {
                t.duplicate += 1;
            } else if same >= 0.1 {
                t.localization += 1;
            } else if other >= 0.5 {
                t.class_confusion += 1;
            } else {
                t.background_fp += 1;
            }
        }
    }
    t
}

/// Compares AP, mAP and the taxonomy against the references on `cases`
/// random instances.
pub fn check_metrics(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats: Vec<String> = (0..K).map(|c| format!("c{c}")).collect();
    for case in 0..cases {
        let (dets, gts) = instance(&mut rng);
        let report = mean_ap(&dets, &gts, &cats, 0.5).map_err(|e| e.to_string())?;
        let mut present = Vec::new();
        for c in 0..K {
            let want = oracle_ap(&dets, &gts, c);
            let got = average_precision(&dets, &gts, c, 0.5);
            let ok = match (got, want) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
                (a, b) => a == b,
            };
            if !ok || report.classes[c].ap != got {
                return Err(format!("case {case} class {c}: AP {got:?} vs reference {want:?}"));
            }
            present.extend(want);
        }
        let want_map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        if (report.map - want_map).abs() > 1e-9 {
            return Err(format!("case {case}: mAP {} vs reference {want_map}", report.map));
        }
        let tax = oracle_taxonomy(&dets, &gts);
        if report.taxonomy != tax {
            return Err(format!("case {case}: taxonomy {:?} vs reference {tax:?}", report.taxonomy));
        }
        if report.taxonomy.detections() != report.num_detections
            || report.taxonomy.correct + report.taxonomy.missed_gt != report.num_gt
            || report.confusion.iter().flatten().sum::<usize>() != report.num_detections + report.taxonomy.missed_gt
        {
            return Err(format!("case {case}: taxonomy or confusion totals are inconsistent"));
        }
    }
    Ok(())
}
