//! Discrete architectures and their JSON form.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::GenotypeError;
use crate::search_space::TransformationId;

pub const GENOTYPE_VERSION: i64 = 1;

/// A retained edge: output of node `from` passed through `trans`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Input {
    pub from: usize,
    pub trans: TransformationId,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeGene {
    pub inputs: Vec<Input>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupGene {
    /// `nodes[k]` describes intermediate node `k + 1`.
    pub nodes: Vec<NodeGene>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub groups: Vec<GroupGene>,
}

#[derive(Serialize)]
struct Document<'a> {
    version: i64,
    groups: &'a [GroupGene],
}

impl Genotype {
    /// Checks the structural invariants: predecessors precede their node,
    /// inputs are sorted and distinct, `none` never appears, node 1 keeps
    /// one input and later nodes keep two.
    pub fn validate(&self) -> Result<(), GenotypeError> {
        if self.groups.is_empty() {
            return Err(invalid("groups", "at least one group is required"));
        }
        for (g, group) in self.groups.iter().enumerate() {
            if group.nodes.is_empty() {
                return Err(invalid(format!("groups[{g}].nodes"), "at least one node is required"));
            }
            for (k, node) in group.nodes.iter().enumerate() {
                let j = k + 1;
                let ctx = format!("groups[{g}].nodes[{k}].inputs");
                let want = j.min(2);
                if node.inputs.len() != want {
                    return Err(invalid(
                        ctx,
                        format!("node {j} must keep {want} input(s), found {}", node.inputs.len()),
                    ));
                }
                for (i, inp) in node.inputs.iter().enumerate() {
                    if inp.from >= j {
                        return Err(invalid(
                            format!("{ctx}[{i}].from"),
                            format!("predecessor {} out of range for node {j}", inp.from),
                        ));
                    }
                    if inp.trans.is_none() {
                        return Err(invalid(format!("{ctx}[{i}].trans"), "`none` cannot be retained"));
                    }
                }
                if node.inputs.windows(2).any(|w| w[0].from >= w[1].from) {
                    return Err(invalid(ctx, "inputs must have distinct predecessors in ascending order"));
                }
            }
        }
        Ok(())
    }

    /// Every retained transformation, in file order.
    pub fn selections(&self) -> impl Iterator<Item = TransformationId> + '_ {
        self.groups
            .iter()
            .flat_map(|g| &g.nodes)
            .flat_map(|n| &n.inputs)
            .map(|i| i.trans)
    }

    pub fn to_json(&self) -> String {
        let doc = Document {
            version: GENOTYPE_VERSION,
            groups: &self.groups,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("genotype serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, GenotypeError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GenotypeError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let obj = value
            .as_object()
            .ok_or_else(|| invalid("document", "expected a JSON object"))?;
        for key in obj.keys() {
            if key != "version" && key != "groups" {
                return Err(invalid(key.clone(), "unknown field"));
            }
        }
        let version = obj
            .get("version")
            .ok_or_else(|| invalid("version", "missing version tag"))?
            .as_i64()
            .ok_or_else(|| invalid("version", "version must be an integer"))?;
        if version != GENOTYPE_VERSION {
            return Err(GenotypeError::UnsupportedVersion {
                context: "version".into(),
                version,
            });
        }
        let groups = obj
            .get("groups")
            .ok_or_else(|| invalid("groups", "missing field"))?
            .as_array()
            .ok_or_else(|| invalid("groups", "expected an array"))?;
        let mut out = Vec::with_capacity(groups.len());
        for (g, group) in groups.iter().enumerate() {
            let gctx = format!("groups[{g}]");
            let nodes = field_array(group, "nodes", &gctx)?;
            let mut genes = Vec::with_capacity(nodes.len());
            for (k, node) in nodes.iter().enumerate() {
                let nctx = format!("{gctx}.nodes[{k}]");
                let inputs = field_array(node, "inputs", &nctx)?;
                let mut parsed = Vec::with_capacity(inputs.len());
                for (i, inp) in inputs.iter().enumerate() {
                    let ictx = format!("{nctx}.inputs[{i}]");
                    let o = inp
                        .as_object()
                        .ok_or_else(|| invalid(ictx.clone(), "expected an object"))?;
                    for key in o.keys() {
                        if key != "from" && key != "trans" {
                            return Err(invalid(format!("{ictx}.{key}"), "unknown field"));
                        }
                    }
                    let from = o
                        .get("from")
                        .and_then(|v| v.as_u64())
                        .ok_or_else(|| invalid(format!("{ictx}.from"), "expected a non-negative integer"))?;
                    let name = o
                        .get("trans")
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| invalid(format!("{ictx}.trans"), "expected a string"))?;
                    let trans: TransformationId = name
                        .parse()
                        .map_err(|e: crate::search_space::transform::UnknownTransformation| {
                            invalid(format!("{ictx}.trans"), e.to_string())
                        })?;
                    parsed.push(Input {
                        from: usize::try_from(from).unwrap_or(usize::MAX),
                        trans,
                    });
                }
                genes.push(NodeGene { inputs: parsed });
            }
            out.push(GroupGene { nodes: genes });
        }
        let g = Genotype { groups: out };
        g.validate()?;
        Ok(g)
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (g, group) in self.groups.iter().enumerate() {
            if g > 0 {
                f.write_str(" | ")?;
            }
            for (k, node) in group.nodes.iter().enumerate() {
                if k > 0 {
                    f.write_str("; ")?;
                }
                let parts: Vec<String> = node.inputs.iter().map(|i| format!("{}<-{}", i.trans, i.from)).collect();
                write!(f, "n{}: {}", k + 1, parts.join(", "))?;
            }
        }
        Ok(())
    }
}

fn invalid(context: impl Into<String>, message: impl Into<String>) -> GenotypeError {
    GenotypeError::Invalid {
        context: context.into(),
        message: message.into(),
    }
}

fn field_array<'a>(v: &'a serde_json::Value, key: &str, ctx: &str) -> Result<&'a Vec<serde_json::Value>, GenotypeError> {
    v.as_object()
        .ok_or_else(|| invalid(ctx, "expected an object"))?
        .get(key)
        .ok_or_else(|| invalid(format!("{ctx}.{key}"), "missing field"))?
        .as_array()
        .ok_or_else(|| invalid(format!("{ctx}.{key}"), "expected an array"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Genotype {
        let t = |s: &str| s.parse::<TransformationId>().unwrap();
        let group = GroupGene {
            nodes: vec![
                NodeGene {
                    inputs: vec![Input { from: 0, trans: t("std_t1") }],
                },
                NodeGene {
                    inputs: vec![Input { from: 0, trans: t("sep_t4") }, Input { from: 1, trans: t("std_t6") }],
                },
                NodeGene {
                    inputs: vec![Input { from: 1, trans: t("sep_t2") }, Input { from: 2, trans: t("std_t3") }],
                },
            ],
        };
        Genotype {
            groups: vec![group.clone(), group],
        }
    }

    #[test]
    fn roundtrip() {
        let g = sample();
        let text = g.to_json();
        assert!(text.contains("\"version\": 1"));
        assert_eq!(Genotype::parse(&text).unwrap(), g);
    }

    #[test]
    fn unknown_transformation_names_its_field() {
        let text = sample().to_json().replace("sep_t4", "sep_t9");
        match Genotype::parse(&text) {
            Err(GenotypeError::Invalid { context, message }) => {
                assert_eq!(context, "groups[0].nodes[1].inputs[0].trans");
                assert!(message.contains("sep_t9"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_errors() {
        let text = sample().to_json().replace("\"version\": 1", "\"version\": 0");
        assert!(matches!(
            Genotype::parse(&text),
            Err(GenotypeError::UnsupportedVersion { version: 0, .. })
        ));
        let text = sample().to_json().replace("\"version\": 1,", "");
        assert!(matches!(Genotype::parse(&text), Err(GenotypeError::Invalid { context, .. }) if context == "version"));
    }

    #[test]
    fn syntax_errors_carry_position() {
        match Genotype::parse("{\n  \"version\": 1,\n  \"groups\": [\n}") {
            Err(GenotypeError::Syntax { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structural_violations() {
        let mut g = sample();
        g.groups[0].nodes[1].inputs[1].from = 2;
        assert!(g.validate().is_err());
        let mut g = sample();
        g.groups[0].nodes[2].inputs[0].trans = TransformationId::None;
        assert!(g.validate().is_err());
        let mut g = sample();
        g.groups[0].nodes[2].inputs.swap(0, 1);
        assert!(g.validate().is_err());
        let mut g = sample();
        g.groups[1].nodes[0].inputs.clear();
        assert!(g.validate().is_err());
        let text = sample().to_json().replace("\"from\": 2", "\"from\": 7");
        assert!(Genotype::parse(&text).is_err());
    }
}
