//! Toy AP at IoU 0.5 with 11-point interpolation.

use serde::{Deserialize, Serialize};

use super::data::{BoxF, Object};
use super::targets::location;
use crate::tensor::Tensor;

pub const SCORE_THRESHOLD: f32 = 0.05;
pub const MAX_DETECTIONS: usize = 100;
pub const NMS_IOU: f32 = 0.5;
pub const MATCH_IOU: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f32,
    pub bbox: BoxF,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap50: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub detections: usize,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes head outputs of image `n` into scored boxes, applies per-class
/// NMS and keeps the best [`MAX_DETECTIONS`].
pub fn decode(class_logits: &Tensor, boxes: &Tensor, centerness: &Tensor, n: usize, stride: usize) -> Vec<Detection> {
    let cs = class_logits.shape();
    let (k, h, w) = (cs.c(), cs.h(), cs.w());
    let plane = h * w;
    let (cl, bx, ct) = (class_logits.data(), boxes.data(), centerness.data());
    let s = stride as f32;
    let mut dets = Vec::new();
    for gy in 0..h {
        for gx in 0..w {
            let i = gy * w + gx;
            let c = sigmoid(ct[n * plane + i]);
            for class in 0..k {
                let score = sigmoid(cl[(n * k + class) * plane + i]) * c;
                if score < SCORE_THRESHOLD {
                    continue;
                }
                let d = |j: usize| bx[(n * 4 + j) * plane + i].min(20.0).exp() * s;
                let (px, py) = (location(gx, stride), location(gy, stride));
                dets.push(Detection {
                    class,
                    score,
                    bbox: BoxF {
                        x1: px - d(0),
                        y1: py - d(1),
                        x2: px + d(2),
                        y2: py + d(3),
                    },
                });
            }
        }
    }
    let mut kept = nms(dets, NMS_IOU);
    kept.truncate(MAX_DETECTIONS);
    kept
}

/// Greedy per-class suppression. Output is sorted by descending score with
/// ties kept in input order.
pub fn nms(mut dets: Vec<Detection>, iou: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.class != d.class || k.bbox.iou(&d.bbox) <= iou) {
            kept.push(d);
        }
    }
    kept
}

/// 11-point interpolated average precision of one ranked list. `hits[i]`
/// marks whether the i-th ranked detection is a true positive.
pub fn eleven_point_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|r| {
            let r = r as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Mean AP@0.5 over the classes that have ground truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<Object>], num_classes: usize) -> Metrics {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let num_gt: usize = gts.iter().map(|g| g.iter().filter(|o| o.class == class).count()).sum();
        if num_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut ranked: Vec<(f32, usize, BoxF)> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, d)| d.iter().filter(|d| d.class == class).map(move |d| (d.score, img, d.bbox)))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|(_, img, b)| {
                let mut best: Option<(f32, usize)> = None;
                for (j, o) in gts[*img].iter().enumerate() {
                    if o.class != class {
                        continue;
                    }
                    let v = o.bbox.iou(b);
                    if v >= MATCH_IOU && best.is_none_or(|(bv, _)| v > bv) {
                        best = Some((v, j));
                    }
                }
                match best {
                    Some((_, j)) if !used[*img][j] => {
                        used[*img][j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_class.push(Some(eleven_point_ap(&hits, num_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let ap50 = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Metrics {
        ap50,
        per_class_ap: per_class,
        detections: dets.iter().map(Vec::len).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BoxF {
        BoxF { x1, y1, x2, y2 }
    }

    #[test]
    fn perfect_ranking_scores_one() {
        assert_eq!(eleven_point_ap(&[true, true, true], 3), 1.0);
        assert_eq!(eleven_point_ap(&[], 3), 0.0);
        assert_eq!(eleven_point_ap(&[false, false], 2), 0.0);
    }

    #[test]
    fn half_recall_hand_computed() {
        // One hit at rank 1 out of two ground truths: precision 1 up to
        // recall 0.5, nothing above, so 6 of 11 points score 1.
        assert!((eleven_point_ap(&[true, false], 2) - 6.0 / 11.0).abs() < 1e-12);
        // Hit at rank 2: precision 0.5 for recall <= 0.5.
        assert!((eleven_point_ap(&[false, true], 2) - 3.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_other_classes_and_disjoint_boxes() {
        let d = |class, score, b| Detection { class, score, bbox: b };
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let near = bx(1.0, 0.0, 11.0, 10.0);
        let far = bx(20.0, 20.0, 30.0, 30.0);
        let kept = nms(vec![d(0, 0.5, near), d(0, 0.9, a), d(1, 0.4, a), d(0, 0.3, far)], 0.5);
        let scores: Vec<f32> = kept.iter().map(|k| k.score).collect();
        assert_eq!(scores, vec![0.9, 0.4, 0.3]);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let gt = vec![vec![Object {
            class: 0,
            bbox: bx(0.0, 0.0, 10.0, 10.0),
        }]];
        let d = Detection {
            class: 0,
            score: 0.9,
            bbox: bx(0.0, 0.0, 10.0, 10.0),
        };
        let m = average_precision(&[vec![d, Detection { score: 0.8, ..d }]], &gt, 2);
        assert_eq!(m.per_class_ap, vec![Some(1.0), None]);
        assert_eq!(m.ap50, 1.0);
        let empty = average_precision(&[vec![]], &gt, 2);
        assert_eq!(empty.ap50, 0.0);
    }
}
