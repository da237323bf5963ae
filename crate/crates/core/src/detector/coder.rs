use crate::boxes::BBox;

/// Largest log-scale change a decoded delta may apply.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Center/size offsets of `target` relative to `reference`, scaled by
/// `weights`.
pub fn encode(target: &BBox, reference: &BBox, weights: [f64; 4]) -> [f64; 4] {
    let (tx, ty) = target.center();
    let (rx, ry) = reference.center();
    [
        weights[0] * (tx - rx) / reference.w,
        weights[1] * (ty - ry) / reference.h,
        weights[2] * (target.w / reference.w).ln(),
        weights[3] * (target.h / reference.h).ln(),
    ]
}

pub fn decode(d: [f64; 4], reference: &BBox, weights: [f64; 4]) -> BBox {
    let (rx, ry) = reference.center();
    let cx = rx + d[0] / weights[0] * reference.w;
    let cy = ry + d[1] / weights[1] * reference.h;
    let w = reference.w * (d[2] / weights[2]).min(MAX_LOG_SCALE).exp();
    let h = reference.h * (d[3] / weights[3]).min(MAX_LOG_SCALE).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_inverts_decode(
            dx in -3.0f64..3.0, dy in -3.0f64..3.0, dw in -2.0f64..2.0, dh in -2.0f64..2.0,
            x in 0.0f64..50.0, y in 0.0f64..50.0, w in 1.0f64..40.0, h in 1.0f64..40.0,
            weighted in any::<bool>(),
        ) {
            let wts = if weighted { [10.0, 10.0, 5.0, 5.0] } else { [1.0; 4] };
            let d = [dx, dy, dw, dh];
            let a = BBox::new(x, y, w, h);
            let back = encode(&decode(d, &a, wts), &a, wts);
            for k in 0..4 {
                prop_assert!((back[k] - d[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identity_encodes_to_zero() {
        let a = BBox::new(3.0, 4.0, 5.0, 6.0);
        assert_eq!(encode(&a, &a, [10.0, 10.0, 5.0, 5.0]), [0.0; 4]);
    }
}
