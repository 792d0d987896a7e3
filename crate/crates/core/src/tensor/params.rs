use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::TensorError;

/// Which side of the bilevel problem a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Architecture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Named parameters, iterated in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        kind: ParamKind,
    ) -> Result<(), TensorError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.insert(
            name,
            Param {
                tensor: tensor.with_requires_grad(true),
                kind,
            },
        );
        Ok(())
    }

    /// He-normal initialisation over `fan_in = c * h * w` of the weight shape.
    pub fn insert_he(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        rng: &mut impl Rng,
    ) -> Result<(), TensorError> {
        let fan_in = (shape.c() * shape.h() * shape.w()).max(1);
        let std = (2.0 / fan_in as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.insert(name, t, ParamKind::Weight)
    }

    pub fn insert_const(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        value: f32,
        kind: ParamKind,
    ) -> Result<(), TensorError> {
        self.insert(name, Tensor::full(shape, value), kind)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.params.get(name).map(|p| p.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn names_of(&self, kind: ParamKind) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(move |(_, p)| p.kind == kind)
            .map(|(k, _)| k.as_str())
    }

    /// Total scalar count over one partition.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.params
            .values()
            .filter(|p| p.kind == kind)
            .map(|p| p.tensor.shape().numel())
            .sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str, kind: ParamKind) -> usize {
        self.params
            .iter()
            .filter(|(k, p)| p.kind == kind && k.starts_with(prefix))
            .map(|(_, p)| p.tensor.shape().numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            let n = p.tensor.shape().numel();
            p.tensor
                .set_grad(vec![0.0; n])
                .expect("grad sized from shape");
        }
    }

    /// Global L2 norm of gradients in one partition (missing grads count as zero).
    pub fn grad_norm(&self, kind: ParamKind) -> f64 {
        self.params
            .values()
            .filter(|p| p.kind == kind)
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Scales gradients of `kind` so their global norm is at most `max_norm`.
    /// Returns the norm measured before clipping.
    pub fn clip_grad_norm(&mut self, kind: ParamKind, max_norm: f64) -> Result<f64, TensorError> {
        if max_norm.is_nan() || max_norm <= 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "max_norm must be positive, got {max_norm}"
            )));
        }
        let norm = self.grad_norm(kind);
        if norm > max_norm {
            let scale = (max_norm / norm) as f32;
            for p in self.params.values_mut().filter(|p| p.kind == kind) {
                if let Some(g) = p.tensor.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        Ok(norm)
    }

    /// Copies values of every parameter in `other` that exists here.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        for (name, p) in &other.params {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.tensor.shape() != p.tensor.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "load_values_from",
                        left: dst.tensor.shape(),
                        right: p.tensor.shape(),
                    });
                }
                dst.tensor.data_mut().copy_from_slice(p.tensor.data());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_grad(grad: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = grad.len();
        s.insert("w", Tensor::zeros(Shape::vector(n)), ParamKind::Weight)
            .unwrap();
        s.get_mut("w").unwrap().set_grad(grad).unwrap();
        s
    }

    #[test]
    fn clip_below_threshold_is_noop() {
        let mut s = store_with_grad(vec![3.0, 4.0]);
        let pre = s.clip_grad_norm(ParamKind::Weight, 10.0).unwrap();
        assert_eq!(pre, 5.0);
        assert_eq!(s.get("w").unwrap().grad().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = store_with_grad(vec![3.0, 4.0]);
        let pre = s.clip_grad_norm(ParamKind::Weight, 1.0).unwrap();
        assert_eq!(pre, 5.0);
        let g = s.get("w").unwrap().grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn clip_rejects_nonpositive_norm() {
        let mut s = store_with_grad(vec![1.0]);
        assert!(s.clip_grad_norm(ParamKind::Weight, 0.0).is_err());
        assert!(s.clip_grad_norm(ParamKind::Weight, -1.0).is_err());
    }

    #[test]
    fn clip_random_store_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        for i in 0..5 {
            s.insert_he(format!("p{i}"), Shape::new(4, 3, 3, 3), &mut rng)
                .unwrap();
        }
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for name in names {
            let t = s.get_mut(&name).unwrap();
            let g: Vec<f32> = t.data().iter().map(|v| v * 40.0).collect();
            t.set_grad(g).unwrap();
        }
        let pre = s.clip_grad_norm(ParamKind::Weight, 20.0).unwrap();
        assert!(pre > 20.0);
        assert!(s.grad_norm(ParamKind::Weight) <= 20.0 + 1e-6);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert_const("a", Shape::scalar(), 0.0, ParamKind::Weight)
            .unwrap();
        assert!(s
            .insert_const("a", Shape::scalar(), 0.0, ParamKind::Architecture)
            .is_err());
    }

    #[test]
    fn iteration_is_sorted() {
        let mut s = ParamStore::new();
        for n in ["z", "a", "m"] {
            s.insert_const(n, Shape::scalar(), 0.0, ParamKind::Weight)
                .unwrap();
        }
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, ["a", "m", "z"]);
    }
}
