use rand::Rng;

use super::alpha::AlphaTable;
use super::cell::{Cell, CellTopology, Edge, EdgeOp, Group};
use super::{SupernetConfig, NUM_GROUPS};
use crate::error::TensorError;
use crate::nn::{Conv1x1, StemConv};
use crate::search_space::{Block, SharedBlock, UnsharedBlock, NUM_CANDIDATES};
use crate::tensor::{ParamKind, ParamStore, Tape, Var};

/// Prior probability behind the classification-head bias, so early
/// training is not swamped by background.
pub const CLS_PRIOR: f32 = 0.01;

/// Total stride of the image stem.
pub const STEM_STRIDE: usize = 4;

/// Everything a detection loss needs from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModuleOutput {
    /// Output of group 1 (regression features).
    pub g1: Var,
    /// Output of group 2 (classification features).
    pub g2: Var,
    /// Raw box logits, 4 per location; distances are `exp` of these.
    pub boxes: Var,
    /// Centerness logits, 1 per location.
    pub centerness: Var,
    /// Class logits, K per location.
    pub class_logits: Var,
}

/// Stem, two cell groups with a shortcut into group 2, and 1x1 heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionNet {
    pub config: SupernetConfig,
    pub stem: [StemConv; 2],
    pub groups: Vec<Group>,
    pub reg_head: Conv1x1,
    pub ctr_head: Conv1x1,
    pub cls_head: Conv1x1,
    /// Adds the module input to the group-1 output before group 2.
    pub shortcut: bool,
}

impl DetectionNet {
    /// Wraps prebuilt groups with the stem and heads.
    pub fn from_groups(config: SupernetConfig, groups: Vec<Group>) -> Result<Self, TensorError> {
        config.validate()?;
        if groups.len() != NUM_GROUPS {
            return Err(TensorError::InvalidArgument(format!(
                "module needs {NUM_GROUPS} groups, got {}",
                groups.len()
            )));
        }
        let c = config.c;
        Ok(DetectionNet {
            stem: [
                StemConv {
                    prefix: "stem.0".into(),
                    cin: config.in_channels,
                    cout: c,
                    stride: 2,
                },
                StemConv {
                    prefix: "stem.1".into(),
                    cin: c,
                    cout: c,
                    stride: 2,
                },
            ],
            groups,
            reg_head: Conv1x1::new("head.reg", c, 4, true),
            ctr_head: Conv1x1::new("head.ctr", c, 1, true),
            cls_head: Conv1x1::new("head.cls", c, config.num_classes, true),
            shortcut: true,
            config,
        })
    }

    /// The relaxed supernet: every edge mixes all candidates, and the `m`
    /// cells of a group alias one set of weights and one row of logits per
    /// edge.
    pub fn supernet(config: SupernetConfig) -> Result<Self, TensorError> {
        config.validate()?;
        let topo = CellTopology { nodes: config.nodes };
        let groups = (0..NUM_GROUPS)
            .map(|g| {
                let prefix = format!("g{g}.cell");
                let edges = topo
                    .edges()
                    .into_iter()
                    .enumerate()
                    .map(|(k, (i, j))| {
                        let ep = format!("{prefix}.e{k}");
                        let block = if config.share {
                            Block::Shared(SharedBlock::new(format!("{ep}.blk"), config.c_prime, config.decouple)?)
                        } else {
                            Block::Unshared(UnsharedBlock::new(format!("{ep}.blk"), config.c_prime)?)
                        };
                        let op = EdgeOp::Mixed {
                            block,
                            alpha: AlphaTable::param_name(g, k),
                        };
                        Ok(Edge::new(&ep, i, j, config.c, config.c_prime, op))
                    })
                    .collect::<Result<Vec<_>, TensorError>>()?;
                let cell = Cell::new(prefix, config.c, topo, edges);
                Ok(Group {
                    cells: vec![cell; config.m],
                })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Self::from_groups(config, groups)
    }

    pub fn is_relaxed(&self) -> bool {
        self.groups
            .iter()
            .flat_map(|g| &g.cells)
            .flat_map(|c| &c.edges)
            .any(|e| matches!(e.op, EdgeOp::Mixed { .. }))
    }

    pub fn init_alphas(&self) -> AlphaTable {
        AlphaTable::zeros(NUM_GROUPS, CellTopology { nodes: self.config.nodes }.num_edges(), NUM_CANDIDATES)
    }

    /// Creates every parameter; architecture logits start at zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        for s in &self.stem {
            s.init(store, rng)?;
        }
        for g in &self.groups {
            g.init(store, rng)?;
        }
        self.reg_head.init(store, rng)?;
        self.ctr_head.init(store, rng)?;
        self.cls_head.init(store, rng)?;
        let bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        store.get_mut(&self.cls_head.bias_name())?.data_mut().fill(bias);
        if self.is_relaxed() {
            self.init_alphas().register(store)?;
        }
        Ok(())
    }

    /// Maps an image to module-input features at stride 4.
    pub fn stem_forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var, TensorError> {
        let h = self.stem[0].forward(tape, store, image)?;
        self.stem[1].forward(tape, store, h)
    }

    /// The searchable module plus heads on `x` (already `c` channels).
    pub fn module_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<ModuleOutput, TensorError> {
        let g1 = self.groups[0].forward(tape, store, x)?;
        let into2 = if self.shortcut { tape.add(g1, x)? } else { g1 };
        let g2 = self.groups[1].forward(tape, store, into2)?;
        Ok(ModuleOutput {
            g1,
            g2,
            boxes: self.reg_head.forward(tape, store, g1)?,
            centerness: self.ctr_head.forward(tape, store, g1)?,
            class_logits: self.cls_head.forward(tape, store, g2)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<ModuleOutput, TensorError> {
        let x = self.stem_forward(tape, store, image)?;
        self.module_forward(tape, store, x)
    }

    /// Weight scalars in the two groups (stem and heads excluded).
    pub fn module_param_count(store: &ParamStore) -> usize {
        (0..NUM_GROUPS)
            .map(|g| store.count_prefix(&format!("g{g}."), ParamKind::Weight))
            .sum()
    }
}
