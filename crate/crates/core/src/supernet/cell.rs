use rand::Rng;

use crate::error::TensorError;
use crate::nn::{Conv1x1, ConvLayer};
use crate::search_space::{Block, NUM_CANDIDATES};
use crate::tensor::{ParamStore, Tape, Var};

/// One input node followed by `nodes` intermediate nodes; node `j` (1-based)
/// receives an edge from every earlier node, including the input node 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellTopology {
    pub nodes: usize,
}

impl Default for CellTopology {
    fn default() -> Self {
        CellTopology { nodes: 3 }
    }
}

impl CellTopology {
    pub fn num_edges(&self) -> usize {
        self.nodes * (self.nodes + 1) / 2
    }

    /// Edge index of `pred -> node`, ordered by destination then source:
    /// `(0,1), (0,2), (1,2), (0,3), (1,3), (2,3), ...`.
    pub fn edge_index(&self, pred: usize, node: usize) -> usize {
        assert!(pred < node && node >= 1 && node <= self.nodes, "edge {pred}->{node}");
        node * (node - 1) / 2 + pred
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (1..=self.nodes)
            .flat_map(|j| (0..j).map(move |i| (i, j)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum EdgeOp {
    /// Softmax-weighted sum of every candidate, weighted by the named logits.
    Mixed { block: Block, alpha: String },
    /// A single discrete transformation.
    Fixed(Vec<ConvLayer>),
}

/// Entry 1x1 conv, a transformation, exit 1x1 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub pred: usize,
    pub node: usize,
    pub entry: Conv1x1,
    pub op: EdgeOp,
    pub exit: Conv1x1,
}

impl Edge {
    pub fn new(prefix: &str, pred: usize, node: usize, c: usize, c_prime: usize, op: EdgeOp) -> Self {
        Edge {
            pred,
            node,
            entry: Conv1x1::new(format!("{prefix}.entry"), c, c_prime, true),
            op,
            exit: Conv1x1::new(format!("{prefix}.exit"), c_prime, c, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        self.entry.init(store, rng)?;
        match &self.op {
            EdgeOp::Mixed { block, .. } => block.init(store, rng)?,
            EdgeOp::Fixed(layers) => {
                for l in layers {
                    l.init(store, rng)?;
                }
            }
        }
        self.exit.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let h = self.entry.forward(tape, store, x)?;
        let t = match &self.op {
            EdgeOp::Mixed { block, alpha } => {
                let a = tape.param(store, alpha)?;
                mixed(tape, store, block, a, h)?
            }
            EdgeOp::Fixed(layers) => {
                let mut h = h;
                for l in layers {
                    h = l.forward(tape, store, h)?;
                }
                h
            }
        };
        self.exit.forward(tape, store, t)
    }
}

/// `sum_p softmax(alpha)_p * p` over the block's candidate outputs.
pub fn mixed(tape: &mut Tape, store: &ParamStore, block: &Block, alpha: Var, x: Var) -> Result<Var, TensorError> {
    let n = tape.shape(alpha).numel();
    if n != NUM_CANDIDATES {
        return Err(TensorError::InvalidArgument(format!(
            "edge needs {NUM_CANDIDATES} architecture logits, got {n}"
        )));
    }
    let outs = block.candidate_outputs(tape, store, x)?;
    let w = tape.softmax(alpha)?;
    tape.mix(&outs.outputs, w)
}

/// A DAG of edges whose node outputs are concatenated and reduced back to
/// `c` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub prefix: String,
    pub c: usize,
    pub topology: CellTopology,
    pub edges: Vec<Edge>,
    pub out: Conv1x1,
}

impl Cell {
    pub fn new(prefix: impl Into<String>, c: usize, topology: CellTopology, edges: Vec<Edge>) -> Self {
        let prefix = prefix.into();
        Cell {
            out: Conv1x1::new(format!("{prefix}.out"), topology.nodes * c, c, true),
            prefix,
            c,
            topology,
            edges,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        for e in &self.edges {
            e.init(store, rng)?;
        }
        self.out.init(store, rng)
    }

    /// Node outputs `x_1..x_n` followed by the cell output.
    pub fn forward_nodes(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Vec<Var>, Var), TensorError> {
        let c = tape.shape(x).c();
        if c != self.c {
            return Err(TensorError::InvalidArgument(format!(
                "{}: input has {c} channels, cell expects {}",
                self.prefix, self.c
            )));
        }
        let mut nodes = vec![x];
        for j in 1..=self.topology.nodes {
            let mut acc: Option<Var> = None;
            for e in self.edges.iter().filter(|e| e.node == j) {
                let y = e.forward(tape, store, nodes[e.pred])?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, y)?,
                    None => y,
                });
            }
            let v = acc.ok_or_else(|| {
                TensorError::InvalidArgument(format!("{}: node {j} has no input edges", self.prefix))
            })?;
            nodes.push(v);
        }
        let cat = tape.concat(&nodes[1..])?;
        let out = self.out.forward(tape, store, cat)?;
        Ok((nodes.split_off(1), out))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        Ok(self.forward_nodes(tape, store, x)?.1)
    }
}

/// `cells` applied in sequence. Cells that share a prefix share weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub cells: Vec<Cell>,
}

impl Group {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        let mut seen: Vec<&str> = Vec::new();
        for cell in &self.cells {
            if !seen.contains(&cell.prefix.as_str()) {
                cell.init(store, rng)?;
                seen.push(&cell.prefix);
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for cell in &self.cells {
            h = cell.forward(tape, store, h)?;
        }
        Ok(h)
    }
}
