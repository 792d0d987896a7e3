use super::genotype::Genotype;
use crate::error::TensorError;
use crate::nn::ConvLayer;
use crate::supernet::{Cell, CellTopology, DetectionNet, Edge, EdgeOp, Group, SupernetConfig, NUM_GROUPS};

/// Discrete network for `g`: each group repeats its cell `config.m` times
/// with independent weights, and every edge runs exactly its chosen
/// transformation.
pub fn build_derived_network(g: &Genotype, config: &SupernetConfig) -> Result<DetectionNet, TensorError> {
    config.validate()?;
    g.validate()
        .map_err(|e| TensorError::InvalidArgument(format!("genotype: {e}")))?;
    if g.groups.len() != NUM_GROUPS {
        return Err(TensorError::InvalidArgument(format!(
            "genotype has {} groups, module needs {NUM_GROUPS}",
            g.groups.len()
        )));
    }
    let topo = CellTopology { nodes: config.nodes };
    let mut groups = Vec::with_capacity(NUM_GROUPS);
    for (gi, gene) in g.groups.iter().enumerate() {
        if gene.nodes.len() != config.nodes {
            return Err(TensorError::InvalidArgument(format!(
                "genotype group {gi} has {} nodes, config expects {}",
                gene.nodes.len(),
                config.nodes
            )));
        }
        let cells = (0..config.m)
            .map(|m| {
                let prefix = format!("g{gi}.cell{m}");
                let mut edges = Vec::new();
                for (k, node) in gene.nodes.iter().enumerate() {
                    let j = k + 1;
                    for inp in &node.inputs {
                        let (stream, variant) = match (inp.trans.stream(), inp.trans.variant()) {
                            (Some(s), Some(v)) => (s, v),
                            _ => unreachable!("validated genotypes hold no none"),
                        };
                        let ep = format!("{prefix}.n{j}.i{}", inp.from);
                        let layers = variant
                            .recipe()
                            .iter()
                            .enumerate()
                            .map(|(l, kind)| ConvLayer::new(format!("{ep}.t.l{l}"), stream, *kind, config.c_prime))
                            .collect();
                        edges.push(Edge::new(&ep, inp.from, j, config.c, config.c_prime, EdgeOp::Fixed(layers)));
                    }
                }
                Cell::new(prefix, config.c, topo, edges)
            })
            .collect();
        groups.push(Group { cells });
    }
    DetectionNet::from_groups(config.clone(), groups)
}
