//! FCOS-style detection loss with closed-form gradients.

use super::targets::DetectionTarget;
use crate::error::TensorError;
use crate::supernet::ModuleOutput;
use crate::tensor::{Tape, Var};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
/// Box logits are clamped here before `exp` to keep distances finite.
const MAX_BOX_LOGIT: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    pub regression: f64,
    pub centerness: f64,
    pub foreground: usize,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.classification + self.regression + self.centerness
    }
}

/// `ln(sigmoid(z))` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal(x: f64, positive: bool) -> (f64, f64) {
    let s = if positive { 1.0 } else { -1.0 };
    let at = if positive { FOCAL_ALPHA } else { 1.0 - FOCAL_ALPHA };
    let z = s * x;
    let pt = sigmoid(z);
    let log_pt = log_sigmoid(z);
    let q = 1.0 - pt;
    let loss = -at * q.powf(FOCAL_GAMMA) * log_pt;
    let grad = s * at * (FOCAL_GAMMA * q.powf(FOCAL_GAMMA) * pt * log_pt - q.powf(FOCAL_GAMMA + 1.0));
    (loss, grad)
}

/// `1 - IoU` between boxes given as distances from a shared point, and its
/// gradient with respect to the predicted distances.
pub fn iou_loss(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = pred;
    let [lt, tt, rt, bt] = target;
    let wi = l.min(lt) + r.min(rt);
    let hi = t.min(tt) + b.min(bt);
    let inter = wi * hi;
    let ap = (l + r) * (t + b);
    let at = (lt + rt) * (tt + bt);
    let union = ap + at - inter;
    let iou = inter / union;
    let di = [
        if l < lt { hi } else { 0.0 },
        if t < tt { wi } else { 0.0 },
        if r < rt { hi } else { 0.0 },
        if b < bt { wi } else { 0.0 },
    ];
    let dap = [t + b, l + r, t + b, l + r];
    let mut g = [0.0; 4];
    for k in 0..4 {
        let du = dap[k] - di[k];
        g[k] = -(di[k] * union - inter * du) / (union * union);
    }
    (1.0 - iou, g)
}

/// Binary cross-entropy with logits minus the target's own entropy, so a
/// perfect prediction scores zero for soft targets too.
pub fn centerness_bce(x: f64, y: f64) -> (f64, f64) {
    let bce = -(y * log_sigmoid(x) + (1.0 - y) * log_sigmoid(-x));
    let ent = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    (bce - ent(y) - ent(1.0 - y), sigmoid(x) - y)
}

/// Focal loss over all locations and classes, IoU loss on foreground boxes
/// and centerness BCE on foreground, summed and divided by `max(fg, 1)`.
pub fn detection_loss(
    tape: &mut Tape,
    out: &ModuleOutput,
    targets: &[DetectionTarget],
) -> Result<(Var, LossBreakdown), TensorError> {
    let cs = tape.shape(out.class_logits);
    let bs = tape.shape(out.boxes);
    let ts = tape.shape(out.centerness);
    if cs.n() != targets.len() {
        return Err(TensorError::InvalidArgument(format!(
            "batch of {} predictions for {} targets",
            cs.n(),
            targets.len()
        )));
    }
    if bs.c() != 4 || ts.c() != 1 || bs.h() != cs.h() || ts.h() != cs.h() || bs.w() != cs.w() || ts.w() != cs.w() {
        return Err(TensorError::InvalidArgument("head outputs disagree in shape".into()));
    }
    let (k, plane) = (cs.c(), cs.plane());
    for t in targets {
        if t.height * t.width != plane || t.height != cs.h() {
            return Err(TensorError::InvalidArgument(format!(
                "target grid {}x{} does not match predictions {}x{}",
                t.height,
                t.width,
                cs.h(),
                cs.w()
            )));
        }
    }
    let fg: usize = targets.iter().map(|t| t.foreground()).sum();
    let norm = fg.max(1) as f64;

    let cls = tape.value(out.class_logits).data();
    let mut g_cls = vec![0.0f32; cls.len()];
    let mut l_cls = 0.0;
    for (n, t) in targets.iter().enumerate() {
        for c in 0..k {
            for i in 0..plane {
                let idx = (n * k + c) * plane + i;
                let (l, g) = focal(cls[idx] as f64, t.labels[i] == Some(c));
                l_cls += l;
                g_cls[idx] = (g / norm) as f32;
            }
        }
    }

    let boxes = tape.value(out.boxes).data();
    let ctr = tape.value(out.centerness).data();
    let mut g_box = vec![0.0f32; boxes.len()];
    let mut g_ctr = vec![0.0f32; ctr.len()];
    let (mut l_reg, mut l_ctr) = (0.0, 0.0);
    for (n, t) in targets.iter().enumerate() {
        for i in 0..plane {
            if t.labels[i].is_none() {
                continue;
            }
            let mut pred = [0.0f64; 4];
            let mut dpred = [0.0f64; 4];
            for j in 0..4 {
                let raw = boxes[(n * 4 + j) * plane + i] as f64;
                let clamped = raw.min(MAX_BOX_LOGIT);
                pred[j] = clamped.exp();
                dpred[j] = if raw < MAX_BOX_LOGIT { pred[j] } else { 0.0 };
            }
            let target = t.distances[i].map(|v| v as f64);
            let (l, g) = iou_loss(pred, target);
            l_reg += l;
            for j in 0..4 {
                g_box[(n * 4 + j) * plane + i] = (g[j] * dpred[j] / norm) as f32;
            }
            let idx = n * plane + i;
            let (l, g) = centerness_bce(ctr[idx] as f64, t.centerness[i] as f64);
            l_ctr += l;
            g_ctr[idx] = (g / norm) as f32;
        }
    }
    let b = LossBreakdown {
        classification: l_cls / norm,
        regression: l_reg / norm,
        centerness: l_ctr / norm,
        foreground: fg,
    };
    let v = tape.fused_scalar(
        "detection_loss",
        b.total(),
        vec![out.class_logits, out.boxes, out.centerness],
        vec![g_cls, g_box, g_ctr],
    )?;
    Ok((v, b))
}
