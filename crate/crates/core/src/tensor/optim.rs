use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore};
use crate::error::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

fn check_lr(lr: f64) -> Result<(), TensorError> {
    if lr.is_nan() || lr < 0.0 {
        Err(TensorError::InvalidArgument(format!(
            "learning rate must be non-negative, got {lr}"
        )))
    } else {
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v = mu*v + g + wd*w; w -= lr*v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self, TensorError> {
        check_lr(config.lr)?;
        Ok(Sgd {
            config,
            velocity: BTreeMap::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<(), TensorError> {
        check_lr(lr)?;
        self.config.lr = lr;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore, kind: ParamKind) -> Result<(), TensorError> {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for (name, p) in store.iter_mut() {
            if p.kind != kind {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let vel = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = p.tensor.data_mut();
            for ((w, g), v) in data.iter_mut().zip(&grad).zip(vel.iter_mut()) {
                let d = *g as f64 + weight_decay * *w as f64;
                *v = (momentum * *v as f64 + d) as f32;
                *w = (*w as f64 - lr * *v as f64) as f32;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self, TensorError> {
        check_lr(config.lr)?;
        Ok(Adam {
            config,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore, kind: ParamKind) -> Result<(), TensorError> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            if p.kind != kind {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] as f64 + weight_decay * data[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                data[i] = (data[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_const("w", Shape::scalar(), 1.0, ParamKind::Weight)
            .unwrap();
        s.insert_const("a", Shape::scalar(), 1.0, ParamKind::Architecture)
            .unwrap();
        s.get_mut("w").unwrap().set_grad(vec![1.0]).unwrap();
        s.get_mut("a").unwrap().set_grad(vec![1.0]).unwrap();
        s
    }

    #[test]
    fn sgd_plain_step() {
        let mut s = store();
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        opt.step(&mut s, ParamKind::Weight).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(s.get("a").unwrap().data()[0], 1.0);
    }

    #[test]
    fn architecture_step_leaves_weights_bitwise() {
        let mut s = store();
        let before = s.get("w").unwrap().data().to_vec();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        })
        .unwrap();
        opt.step(&mut s, ParamKind::Architecture).unwrap();
        assert_eq!(s.get("w").unwrap().data(), before.as_slice());
        assert_ne!(s.get("a").unwrap().data()[0], 1.0);
    }

    #[test]
    fn negative_lr_rejected() {
        let cfg = SgdConfig {
            lr: -0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        assert!(Sgd::new(cfg).is_err());
        let mut ok = Sgd::new(SgdConfig { lr: 0.1, ..cfg }).unwrap();
        assert!(ok.set_lr(-1.0).is_err());
        assert!(Adam::new(AdamConfig {
            lr: -1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0
        })
        .is_err());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(Shape::scalar(), 1.0), ParamKind::Weight)
            .unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        })
        .unwrap();
        for _ in 0..100 {
            let w = s.get("w").unwrap().data()[0];
            s.get_mut("w").unwrap().set_grad(vec![2.0 * w]).unwrap();
            opt.step(&mut s, ParamKind::Weight).unwrap();
        }
        assert!(s.get("w").unwrap().data()[0].abs() < 1e-2);
    }
}
