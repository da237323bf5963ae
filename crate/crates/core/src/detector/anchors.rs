use serde::{Deserialize, Serialize};

use crate::backbone::PYRAMID_STRIDES;
use crate::boxes::BBox;

/// Per-level anchors. Within a level, anchors are ordered by grid cell
/// (row-major) and then by aspect ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub levels: Vec<Vec<BBox>>,
    pub grids: Vec<(usize, usize)>,
    pub per_cell: usize,
}

impl AnchorSet {
    /// Anchors of side `sizes[k]` at level `k`, one per ratio `h / w`,
    /// centered at `((j + 0.5) * stride, (i + 0.5) * stride)`.
    pub fn generate(height: usize, width: usize, sizes: &[f64; 4], ratios: &[f64]) -> Self {
        let mut levels = Vec::with_capacity(4);
        let mut grids = Vec::with_capacity(4);
        for (k, &stride) in PYRAMID_STRIDES.iter().enumerate() {
            let (gh, gw) = (height.div_ceil(stride), width.div_ceil(stride));
            let s = stride as f64;
            let mut level = Vec::with_capacity(gh * gw * ratios.len());
            for i in 0..gh {
                for j in 0..gw {
                    let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                    for &r in ratios {
                        let w = sizes[k] / r.sqrt();
                        let h = sizes[k] * r.sqrt();
                        level.push(BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h));
                    }
                }
            }
            levels.push(level);
            grids.push((gh, gw));
        }
        AnchorSet { levels, grids, per_cell: ratios.len() }
    }

    pub fn all(&self) -> Vec<BBox> {
        self.levels.concat()
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
