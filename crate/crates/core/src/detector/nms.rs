use crate::boxes::BBox;

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (lower index first on ties); a box is kept when its IoU with every
/// previously kept box is below `iou_threshold`. Returns kept indices in
/// visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// NMS applied independently within each label.
pub fn batched_nms(boxes: &[BBox], scores: &[f64], labels: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut keep = Vec::new();
    let max_label = labels.iter().copied().max().map_or(0, |m| m + 1);
    for c in 0..max_label {
        let idx: Vec<usize> = (0..boxes.len()).filter(|&i| labels[i] == c).collect();
        let b: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        keep.extend(nms(&b, &s, iou_threshold).into_iter().map(|k| idx[k]));
    }
    keep.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    keep
}
