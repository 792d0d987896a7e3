//! From architecture logits to a discrete genotype, and counting how many
//! distinct genotypes the rule can produce.

use std::collections::BTreeSet;

use num_bigint::BigUint;

use super::genotype::{Genotype, GroupGene, Input, NodeGene};
use crate::search_space::{TransformationId, NONE_INDEX};
use crate::supernet::{AlphaTable, CellTopology};

/// Retained `(predecessor, candidate index)` pairs for each node of a cell.
pub type CellChoice = Vec<Vec<(usize, usize)>>;

/// Best allowed candidate on one edge (ties go to the lowest index) and its
/// softmax weight over the whole row, `excluded` entries included in the
/// normaliser. The weight is computed from differences to the best logit,
/// so adding a constant to the row cannot change it.
pub fn edge_choice(row: &[f32], excluded: &[usize]) -> (usize, f64) {
    let mut best: Option<usize> = None;
    for (k, v) in row.iter().enumerate() {
        if excluded.contains(&k) {
            continue;
        }
        if best.is_none_or(|b| *v > row[b]) {
            best = Some(k);
        }
    }
    let best = best.expect("at least one candidate is allowed");
    let top = row[best] as f64;
    let z: f64 = row.iter().map(|v| (*v as f64 - top).exp()).sum();
    (best, 1.0 / z)
}

/// Derives one cell: per edge pick its best candidate, then per node keep
/// the `min(2, j)` edges with the largest best-candidate weight (ties go to
/// the lower predecessor). `rows` are indexed in [`CellTopology`] edge order.
pub fn derive_cell(topo: CellTopology, rows: &[&[f32]], excluded: &[usize]) -> CellChoice {
    assert_eq!(rows.len(), topo.num_edges(), "one logit row per edge");
    (1..=topo.nodes)
        .map(|j| {
            let mut scored: Vec<(usize, usize, f64)> = (0..j)
                .map(|i| {
                    let (c, s) = edge_choice(rows[topo.edge_index(i, j)], excluded);
                    (i, c, s)
                })
                .collect();
            // Stable sort keeps lower predecessors first among equal scores.
            scored.sort_by(|a, b| b.2.total_cmp(&a.2));
            let mut kept: Vec<(usize, usize)> = scored.into_iter().take(j.min(2)).map(|(i, c, _)| (i, c)).collect();
            kept.sort_unstable();
            kept
        })
        .collect()
}

/// The discrete architecture implied by `alphas`; `none` never wins an edge.
pub fn derive_genotype(alphas: &AlphaTable) -> Genotype {
    let nodes = nodes_for_edges(alphas.edges);
    let topo = CellTopology { nodes };
    let groups = (0..alphas.groups)
        .map(|g| {
            let rows: Vec<&[f32]> = (0..alphas.edges).map(|e| alphas.row(g, e)).collect();
            let choice = derive_cell(topo, &rows, &[NONE_INDEX]);
            GroupGene {
                nodes: choice
                    .into_iter()
                    .map(|inputs| NodeGene {
                        inputs: inputs
                            .into_iter()
                            .map(|(from, c)| Input {
                                from,
                                trans: TransformationId::from_index(c).expect("candidate index"),
                            })
                            .collect(),
                    })
                    .collect(),
            }
        })
        .collect();
    Genotype { groups }
}

/// Inverse of `n (n + 1) / 2`.
pub fn nodes_for_edges(edges: usize) -> usize {
    let mut n = 0;
    while n * (n + 1) / 2 < edges {
        n += 1;
    }
    assert_eq!(n * (n + 1) / 2, edges, "edge count {edges} is not triangular");
    n
}

/// True once the two most recent derivations agree.
pub fn should_terminate<G: PartialEq>(history: &[G]) -> bool {
    matches!(history, [.., a, b] if a == b)
}

fn binomial(n: usize, k: usize) -> BigUint {
    (0..k).fold(BigUint::from(1u32), |acc, i| acc * BigUint::from(n - i) / BigUint::from(i + 1))
}

/// Closed-form number of distinct genotypes the derivation can produce:
/// per group, node `j` chooses `min(2, j)` of its `j` predecessors and one
/// of `candidates` transformations on each, and groups are independent.
pub fn count_discrete_paths(topo: CellTopology, candidates: usize, groups: usize) -> BigUint {
    let per_group = (1..=topo.nodes).fold(BigUint::from(1u32), |acc, j| {
        let keep = j.min(2);
        acc * binomial(j, keep) * BigUint::from(candidates).pow(keep as u32)
    });
    per_group.pow(groups as u32)
}

/// Every distinct cell derivation reachable by [`derive_cell`], found by
/// running it over a grid of logit tables. Each edge row puts one of
/// `levels` magnitudes on one allowed candidate, which is enough to realise
/// every argmax and every edge ranking. Only practical for tiny spaces.
pub fn enumerate_derivations(topo: CellTopology, candidates: usize, levels: usize) -> BTreeSet<CellChoice> {
    let edges = topo.num_edges();
    // One extra column plays the role of `none`, excluded from selection.
    let width = candidates + 1;
    let excluded = [candidates];
    let per_edge = candidates * levels;
    let total = per_edge.pow(edges as u32);
    let mut rows = vec![vec![0.0f32; width]; edges];
    let mut seen = BTreeSet::new();
    for code in 0..total {
        let mut rest = code;
        for row in rows.iter_mut() {
            let pick = rest % per_edge;
            rest /= per_edge;
            row.fill(0.0);
            row[pick % candidates] = (1 + pick / candidates) as f32;
        }
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        seen.insert(derive_cell(topo, &refs, &excluded));
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::NUM_CANDIDATES;

    #[test]
    fn zero_alphas_pick_first_candidate_and_lowest_predecessors() {
        let g = derive_genotype(&AlphaTable::zeros(2, 6, NUM_CANDIDATES));
        for group in &g.groups {
            let froms: Vec<Vec<usize>> = group.nodes.iter().map(|n| n.inputs.iter().map(|i| i.from).collect()).collect();
            assert_eq!(froms, vec![vec![0], vec![0, 1], vec![0, 1]]);
        }
        assert!(g.selections().all(|t| t.to_string() == "std_t1"));
        g.validate().unwrap();
    }

    #[test]
    fn dominant_none_is_never_selected() {
        let mut a = AlphaTable::zeros(2, 6, NUM_CANDIDATES);
        for g in 0..2 {
            for e in 0..6 {
                a.row_mut(g, e)[NONE_INDEX] = 50.0;
                a.row_mut(g, e)[(e + 3) % 12] = 1.0;
            }
        }
        let g = derive_genotype(&a);
        assert!(g.selections().all(|t| !t.is_none()));
    }

    #[test]
    fn hand_built_table() {
        let mut a = AlphaTable::zeros(1, 6, NUM_CANDIDATES);
        // edge order: (0,1) (0,2) (1,2) (0,3) (1,3) (2,3)
        let picks = [(4, 2.0), (7, 1.0), (9, 3.0), (2, 0.5), (11, 2.5), (5, 1.5)];
        for (e, (c, v)) in picks.iter().enumerate() {
            a.row_mut(0, e)[*c] = *v;
        }
        let g = derive_genotype(&a);
        let got: Vec<Vec<(usize, String)>> = g.groups[0]
            .nodes
            .iter()
            .map(|n| n.inputs.iter().map(|i| (i.from, i.trans.to_string())).collect())
            .collect();
        assert_eq!(
            got,
            vec![
                vec![(0, "std_t5".to_string())],
                vec![(0, "sep_t2".to_string()), (1, "sep_t4".to_string())],
                vec![(1, "sep_t6".to_string()), (2, "std_t6".to_string())],
            ]
        );
    }

    #[test]
    fn termination_rule() {
        let a = derive_genotype(&AlphaTable::zeros(2, 6, NUM_CANDIDATES));
        let mut t = AlphaTable::zeros(2, 6, NUM_CANDIDATES);
        t.row_mut(0, 0)[3] = 1.0;
        let b = derive_genotype(&t);
        assert!(!should_terminate::<Genotype>(&[]));
        assert!(!should_terminate(std::slice::from_ref(&a)));
        assert!(should_terminate(&[a.clone(), a.clone()]));
        assert!(!should_terminate(&[a.clone(), b.clone()]));
        assert!(should_terminate(&[b.clone(), a.clone(), a.clone()]));
        assert!(!should_terminate(&[a.clone(), a.clone(), b]));
    }

    #[test]
    fn closed_form_counts() {
        let one = count_discrete_paths(CellTopology { nodes: 3 }, 12, 1);
        assert_eq!(one, BigUint::from(746_496u32));
        let two = count_discrete_paths(CellTopology { nodes: 3 }, 12, 2);
        assert_eq!(two, BigUint::from(746_496u64 * 746_496u64));
    }

    #[test]
    fn enumeration_matches_closed_form_on_small_spaces() {
        for (nodes, k) in [(1, 4), (2, 3), (3, 2)] {
            let topo = CellTopology { nodes };
            let found = enumerate_derivations(topo, k, 3);
            assert_eq!(BigUint::from(found.len()), count_discrete_paths(topo, k, 1), "{nodes} nodes");
        }
    }
}
