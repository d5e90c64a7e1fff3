use super::mask::InstanceMask;
use super::nms::PseudoTarget;
use crate::decoder::Prompt;

/// Chessboard distance from every pixel to the nearest non-mask pixel, treating everything
/// outside the image as non-mask. Two-pass chamfer, exact for the L∞ metric.
pub fn chebyshev_distance(mask: &InstanceMask) -> Vec<u32> {
    let (h, w) = (mask.height, mask.width);
    let mut d: Vec<u32> = (0..h * w)
        .map(|i| {
            if !mask.bits[i] {
                return 0;
            }
            let (r, c) = (i / w, i % w);
            (r + 1).min(c + 1).min(h - r).min(w - c) as u32
        })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if d[i] == 0 {
                continue;
            }
            let mut best = d[i];
            if r > 0 {
                best = best.min(d[i - w] + 1);
                if c > 0 {
                    best = best.min(d[i - w - 1] + 1);
                }
                if c + 1 < w {
                    best = best.min(d[i - w + 1] + 1);
                }
            }
            if c > 0 {
                best = best.min(d[i - 1] + 1);
            }
            d[i] = best;
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let i = r * w + c;
            if d[i] == 0 {
                continue;
            }
            let mut best = d[i];
            if r + 1 < h {
                best = best.min(d[i + w] + 1);
                if c > 0 {
                    best = best.min(d[i + w - 1] + 1);
                }
                if c + 1 < w {
                    best = best.min(d[i + w + 1] + 1);
                }
            }
            if c + 1 < w {
                best = best.min(d[i + 1] + 1);
            }
            d[i] = best;
        }
    }
    d
}

/// Deepest interior pixel of a mask; ties go to the first in row-major order.
pub fn interior_point(mask: &InstanceMask) -> (usize, usize) {
    let d = chebyshev_distance(mask);
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    (best / mask.width, best % mask.width)
}

/// Splits a fused target into its retained parts, each paired with an interior point prompt.
pub fn decompose(target: &PseudoTarget) -> Vec<(InstanceMask, Prompt)> {
    target
        .parts
        .iter()
        .map(|m| {
            let (row, col) = interior_point(m);
            (m.clone(), Prompt { row, col })
        })
        .collect()
}
