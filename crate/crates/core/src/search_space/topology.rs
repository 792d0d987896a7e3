//! Wiring of the shared transformation block.
//!
//! Per stream, a stem of three base 3x3 layers produces `p1, p2, p3`.
//! Dilated branches hang off stem representations, and each variant taps
//! one representation as its output.

use super::transform::{stacked_receptive_field, LayerKind, Variant};

/// A conv-produced representation inside one stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rep {
    /// Output of stem layer `i` (`p_{i+1}`).
    Stem(usize),
    /// Output of branch `i`.
    Branch(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Branch {
    pub source: Rep,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockTopology {
    pub stem_len: usize,
    pub branches: Vec<Branch>,
    /// Output representation for each of `t1..t6`.
    pub taps: [Rep; 6],
}

impl Default for BlockTopology {
    fn default() -> Self {
        BlockTopology {
            stem_len: 3,
            branches: vec![
                Branch {
                    source: Rep::Stem(0),
                    dilation: 2,
                },
                Branch {
                    source: Rep::Stem(1),
                    dilation: 2,
                },
                Branch {
                    source: Rep::Stem(0),
                    dilation: 3,
                },
            ],
            taps: [
                Rep::Stem(0),
                Rep::Stem(1),
                Rep::Stem(2),
                Rep::Branch(0),
                Rep::Branch(1),
                Rep::Branch(2),
            ],
        }
    }
}

impl BlockTopology {
    /// Conv-produced representations per stream.
    pub fn representations_per_stream(&self) -> usize {
        self.stem_len + self.branches.len()
    }

    /// Layers from the block input to `rep`, in order.
    pub fn path(&self, rep: Rep) -> Vec<Rep> {
        match rep {
            Rep::Stem(i) => (0..=i).map(Rep::Stem).collect(),
            Rep::Branch(b) => {
                let mut p = self.path(self.branches[b].source);
                p.push(rep);
                p
            }
        }
    }

    pub fn layer_kind(&self, rep: Rep) -> LayerKind {
        match rep {
            Rep::Stem(_) => LayerKind::Base,
            Rep::Branch(b) => LayerKind::Dilated(self.branches[b].dilation),
        }
    }

    pub fn tap(&self, v: Variant) -> Rep {
        self.taps[v.index()]
    }

    /// Variants whose output path passes through `rep`.
    pub fn consumers(&self, rep: Rep) -> Vec<Variant> {
        Variant::ALL
            .into_iter()
            .filter(|v| self.path(self.tap(*v)).contains(&rep))
            .collect()
    }

    pub fn receptive_field(&self, rep: Rep) -> usize {
        let kinds: Vec<LayerKind> = self.path(rep).iter().map(|r| self.layer_kind(*r)).collect();
        stacked_receptive_field(&kinds)
    }

    /// Checks every structural property the sharing scheme relies on.
    pub fn check(&self) -> Result<(), String> {
        if self.stem_len != 3 {
            return Err(format!("stem must hold 3 layers, has {}", self.stem_len));
        }
        for b in &self.branches {
            if let Rep::Stem(i) = b.source {
                if i >= self.stem_len {
                    return Err(format!("branch source p{} does not exist", i + 1));
                }
            } else {
                return Err("branches must hang off stem representations".into());
            }
        }
        for v in Variant::ALL {
            let kinds: Vec<LayerKind> =
                self.path(self.tap(v)).iter().map(|r| self.layer_kind(*r)).collect();
            if kinds != v.recipe() {
                return Err(format!(
                    "{} taps a path {:?} that differs from its recipe {:?}",
                    v.tag(),
                    kinds,
                    v.recipe()
                ));
            }
        }
        if self.consumers(Rep::Stem(0)).len() != 6 {
            return Err("p1 must be shared by all six variants".into());
        }
        let p2 = self.consumers(Rep::Stem(1));
        if p2 != [Variant::T2, Variant::T3, Variant::T5] {
            return Err(format!("p2 must feed exactly t2, t3, t5; feeds {p2:?}"));
        }
        let shared = 2 * self.representations_per_stream();
        let unshared: usize = 2 * Variant::ALL.iter().map(|v| v.recipe().len()).sum::<usize>();
        if (shared, unshared) != (12, 26) {
            return Err(format!("representation counts {shared}/{unshared}, expected 12/26"));
        }
        let mut rfs: Vec<usize> = Variant::ALL
            .iter()
            .map(|v| self.receptive_field(self.tap(*v)))
            .collect();
        rfs.sort_unstable();
        rfs.dedup();
        if rfs != [3, 5, 7, 9] {
            return Err(format!("receptive fields {rfs:?} do not cover 3, 5, 7, 9"));
        }
        Ok(())
    }
}
