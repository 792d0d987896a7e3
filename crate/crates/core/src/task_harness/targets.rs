use super::data::{BoxF, SyntheticScene};

/// Per-location regression and classification targets on a stride grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTarget {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// `Some(class)` for foreground locations.
    pub labels: Vec<Option<usize>>,
    /// `(l, t, r, b)` in units of the stride; zeros for background.
    pub distances: Vec<[f32; 4]>,
    pub centerness: Vec<f32>,
}

impl DetectionTarget {
    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Image coordinate of the grid cell `i` along one axis.
pub fn location(i: usize, stride: usize) -> f32 {
    (i * stride + stride / 2) as f32
}

pub fn centerness(d: [f32; 4]) -> f32 {
    let [l, t, r, b] = d;
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// A location is foreground when it lies strictly inside a box; where boxes
/// overlap, the smallest-area box wins (ties go to the earlier object).
pub fn assign_fcos_targets(scene: &SyntheticScene, stride: usize) -> DetectionTarget {
    let sh = scene.image.shape();
    assert!(stride > 0 && sh.h().is_multiple_of(stride) && sh.w().is_multiple_of(stride), "stride must divide the image size");
    let (gh, gw) = (sh.h() / stride, sh.w() / stride);
    let n = gh * gw;
    let mut t = DetectionTarget {
        stride,
        height: gh,
        width: gw,
        labels: vec![None; n],
        distances: vec![[0.0; 4]; n],
        centerness: vec![0.0; n],
    };
    for gy in 0..gh {
        for gx in 0..gw {
            let (px, py) = (location(gx, stride), location(gy, stride));
            let mut best: Option<(f32, usize, BoxF)> = None;
            for o in &scene.objects {
                let b = o.bbox;
                if px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2 && best.is_none_or(|(a, _, _)| b.area() < a) {
                    best = Some((b.area(), o.class, b));
                }
            }
            if let Some((_, class, b)) = best {
                let s = stride as f32;
                let d = [(px - b.x1) / s, (py - b.y1) / s, (b.x2 - px) / s, (b.y2 - py) / s];
                let i = gy * gw + gx;
                t.labels[i] = Some(class);
                t.distances[i] = d;
                t.centerness[i] = centerness(d);
            }
        }
    }
    t
}
