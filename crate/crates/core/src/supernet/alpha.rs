use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{ParamKind, ParamStore, Shape, Tensor};

/// Architecture logits: one row of candidate weights per (group, edge).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    pub groups: usize,
    pub edges: usize,
    pub candidates: usize,
    logits: Vec<f32>,
}

impl AlphaTable {
    pub fn zeros(groups: usize, edges: usize, candidates: usize) -> Self {
        AlphaTable {
            groups,
            edges,
            candidates,
            logits: vec![0.0; groups * edges * candidates],
        }
    }

    pub fn from_rows(groups: usize, edges: usize, candidates: usize, logits: Vec<f32>) -> Result<Self, TensorError> {
        if logits.len() != groups * edges * candidates {
            return Err(TensorError::InvalidArgument(format!(
                "alpha table {groups}x{edges}x{candidates} given {} logits",
                logits.len()
            )));
        }
        Ok(AlphaTable {
            groups,
            edges,
            candidates,
            logits,
        })
    }

    pub fn param_name(group: usize, edge: usize) -> String {
        format!("alpha.g{group}.e{edge}")
    }

    fn offset(&self, group: usize, edge: usize) -> usize {
        assert!(group < self.groups && edge < self.edges, "alpha index out of range");
        (group * self.edges + edge) * self.candidates
    }

    pub fn row(&self, group: usize, edge: usize) -> &[f32] {
        let o = self.offset(group, edge);
        &self.logits[o..o + self.candidates]
    }

    pub fn row_mut(&mut self, group: usize, edge: usize) -> &mut [f32] {
        let o = self.offset(group, edge);
        &mut self.logits[o..o + self.candidates]
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Adds architecture parameters for every row to `store`.
    pub fn register(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        for g in 0..self.groups {
            for e in 0..self.edges {
                let t = Tensor::new(Shape::vector(self.candidates), self.row(g, e).to_vec())?;
                store.insert(Self::param_name(g, e), t, ParamKind::Architecture)?;
            }
        }
        Ok(())
    }

    /// Overwrites the store's architecture parameters with this table.
    pub fn write_to(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        for g in 0..self.groups {
            for e in 0..self.edges {
                let t = store.get_mut(&Self::param_name(g, e))?;
                if t.shape().numel() != self.candidates {
                    return Err(TensorError::DataLength {
                        shape: Shape::vector(self.candidates),
                        len: t.shape().numel(),
                    });
                }
                t.data_mut().copy_from_slice(self.row(g, e));
            }
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, groups: usize, edges: usize, candidates: usize) -> Result<Self, TensorError> {
        let mut table = AlphaTable::zeros(groups, edges, candidates);
        for g in 0..groups {
            for e in 0..edges {
                let t = store.get(&Self::param_name(g, e))?;
                if t.data().len() != candidates {
                    return Err(TensorError::DataLength {
                        shape: Shape::vector(candidates),
                        len: t.data().len(),
                    });
                }
                table.row_mut(g, e).copy_from_slice(t.data());
            }
        }
        Ok(table)
    }

    /// Shannon entropy (nats) of each row's softmax, in row order.
    pub fn entropy_per_edge(&self) -> Vec<f64> {
        self.logits
            .chunks(self.candidates)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|v| *v as f64).collect();
                crate::tensor::softmax(&row)
                    .map(|p| -p.iter().filter(|q| **q > 0.0).map(|q| q * q.ln()).sum::<f64>())
                    .unwrap_or(f64::NAN)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_table_is_uniform() {
        let t = AlphaTable::zeros(2, 6, 13);
        assert_eq!(t.logits().len(), 156);
        let row: Vec<f64> = t.row(1, 5).iter().map(|v| *v as f64).collect();
        let p = crate::tensor::softmax(&row).unwrap();
        assert!(p.iter().all(|q| (q - 1.0 / 13.0).abs() < 1e-12));
        let h = t.entropy_per_edge();
        assert!(h.iter().all(|v| (v - 13f64.ln()).abs() < 1e-9));
    }

    #[test]
    fn store_roundtrip() {
        let mut t = AlphaTable::zeros(2, 6, 13);
        t.row_mut(1, 3)[4] = 2.5;
        let mut store = ParamStore::new();
        t.register(&mut store).unwrap();
        assert_eq!(store.count(ParamKind::Architecture), 156);
        assert_eq!(AlphaTable::from_store(&store, 2, 6, 13).unwrap(), t);
        let z = AlphaTable::zeros(2, 6, 13);
        z.write_to(&mut store).unwrap();
        assert_eq!(AlphaTable::from_store(&store, 2, 6, 13).unwrap(), z);
    }
}
