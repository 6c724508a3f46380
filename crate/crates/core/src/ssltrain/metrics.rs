use crate::error::Result;
use crate::posenet::PoseNet;
use crate::synthpose::{from_heatmap_coords, stack_images, PoseSample};
use crate::tensorgrid::FeatureBatch;

/// Per-keypoint constant of the simplified similarity.
pub const KAPPA: f64 = 0.1;
/// Similarity thresholds 0.50, 0.55, ..., 0.95.
pub fn similarity_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub pck01: f64,
    pub pck02: f64,
    pub map: f64,
}

/// Argmax of each channel of item `n`, mapped back to image pixels.
/// Ties resolve to the first (row-major) position.
pub fn keypoints_from_heatmaps(heatmaps: &FeatureBatch, n: usize, image_size: (usize, usize)) -> Vec<(f64, f64)> {
    let s = heatmaps.shape();
    (0..s.c)
        .map(|k| {
            let plane = heatmaps.plane(n, k);
            let mut best = 0;
            for (i, v) in plane.iter().enumerate() {
                if *v > plane[best] {
                    best = i;
                }
            }
            let (hx, hy) = ((best % s.w) as f64, (best / s.w) as f64);
            from_heatmap_coords((hx, hy), image_size, (s.h, s.w))
        })
        .collect()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Scale `s` of the similarity: diagonal of the visible ground-truth
/// bounding box, floored at one pixel.
pub fn figure_scale(gt: &[(f64, f64)], visible: &[bool]) -> f64 {
    let pts: Vec<(f64, f64)> = gt.iter().zip(visible).filter(|(_, v)| **v).map(|(p, _)| *p).collect();
    if pts.is_empty() {
        return 1.0;
    }
    let (x0, x1, y0, y1) = pts.iter().fold((f64::MAX, f64::MIN, f64::MAX, f64::MIN), |(a, b, c, d), &(x, y)| {
        (a.min(x), b.max(x), c.min(y), d.max(y))
    });
    ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt().max(1.0)
}

pub fn keypoint_similarity(d: f64, s: f64) -> f64 {
    (-(d * d) / (2.0 * s * s * KAPPA * KAPPA)).exp()
}

/// Accumulates PCK and similarity-threshold hits over visible keypoints.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    visible: usize,
    within01: usize,
    within02: usize,
    hits: [usize; 10],
}

impl MetricAccumulator {
    /// `image_size` is (h, w); PCK thresholds are `alpha * max(h, w)`.
    pub fn add(&mut self, pred: &[(f64, f64)], gt: &[(f64, f64)], visible: &[bool], image_size: (usize, usize)) {
        let longest = image_size.0.max(image_size.1) as f64;
        let s = figure_scale(gt, visible);
        let thresholds = similarity_thresholds();
        for k in 0..gt.len() {
            if !visible[k] {
                continue;
            }
            let d = dist(pred[k], gt[k]);
            self.visible += 1;
            self.within01 += (d <= 0.1 * longest) as usize;
            self.within02 += (d <= 0.2 * longest) as usize;
            let sim = keypoint_similarity(d, s);
            for (h, t) in self.hits.iter_mut().zip(thresholds) {
                *h += (sim >= t) as usize;
            }
        }
    }

    /// All zeros when no keypoint was visible.
    pub fn finish(&self) -> EvalResult {
        if self.visible == 0 {
            return EvalResult { pck01: 0.0, pck02: 0.0, map: 0.0 };
        }
        let n = self.visible as f64;
        EvalResult {
            pck01: self.within01 as f64 / n,
            pck02: self.within02 as f64 / n,
            map: self.hits.iter().map(|h| *h as f64 / n).sum::<f64>() / 10.0,
        }
    }
}

/// Eval-mode predictions of `net` over `samples`.
pub fn evaluate(net: &PoseNet, samples: &[PoseSample]) -> Result<EvalResult> {
    let mut acc = MetricAccumulator::default();
    let image_size = net.config().input_size;
    for chunk in samples.chunks(64) {
        let batch = stack_images(chunk.iter().map(|s| &s.image))?;
        let hm = net.infer(&batch)?;
        for (i, s) in chunk.iter().enumerate() {
            let pred = keypoints_from_heatmaps(&hm, i, image_size);
            acc.add(&pred, &s.keypoints, &s.visibility, image_size);
        }
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let gt = vec![(10.0, 12.0), (30.5, 20.25), (50.0, 40.0)];
        let mut acc = MetricAccumulator::default();
        acc.add(&gt, &gt, &[true, true, false], (48, 64));
        assert_eq!(acc.finish(), EvalResult { pck01: 1.0, pck02: 1.0, map: 1.0 });
    }

    #[test]
    fn hand_computed_two_keypoints() {
        // gt box 30 x 40, diagonal 50, so s * kappa = 5
        let gt = vec![(10.0, 10.0), (40.0, 50.0)];
        let pred = vec![(13.0, 14.0), (40.0, 60.0)];
        let mut acc = MetricAccumulator::default();
        acc.add(&pred, &gt, &[true, true], (48, 64));
        let r = acc.finish();
        // d = 5 and 10 against 6.4 and 12.8
        assert_eq!(r.pck01, 0.5);
        assert_eq!(r.pck02, 1.0);
        // similarities exp(-0.5) = 0.607 and exp(-2) = 0.135: only the first
        // clears 0.50, 0.55 and 0.60
        assert!((keypoint_similarity(5.0, 50.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(r.map, (3.0 * 0.5) / 10.0);
    }

    #[test]
    fn zero_heatmaps_point_to_corner() {
        let hm = FeatureBatch::zeros(1, 2, 12, 16);
        let kp = keypoints_from_heatmaps(&hm, 0, (48, 64));
        assert_eq!(kp, vec![(1.5, 1.5); 2]);
        let gt = vec![(32.0, 24.0), (30.0, 20.0)];
        let mut acc = MetricAccumulator::default();
        acc.add(&kp, &gt, &[true, true], (48, 64));
        assert_eq!(acc.finish().pck01, 0.0);
    }

    #[test]
    fn argmax_round_trips_heatmap_pixels() {
        let mut hm = FeatureBatch::zeros(1, 1, 12, 16);
        hm.set(0, 0, 5, 9, 1.0);
        let kp = keypoints_from_heatmaps(&hm, 0, (48, 64));
        assert_eq!(kp, vec![(37.5, 21.5)]);
    }
}
