use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::TieError;
use crate::search_space::{SharedBlock, TransformationId, UnsharedBlock};
use crate::tensor::{ParamStore, Tensor};

/// One unshared layer and the shared layer it copies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerBinding {
    pub transformation: TransformationId,
    /// Position of the layer in the unshared pipeline.
    pub depth: usize,
    pub target: String,
    pub source: String,
}

/// Parameter-level copy plan from a shared block into an unshared one.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TieMap {
    pub layers: Vec<LayerBinding>,
    /// Unshared parameter path to shared parameter path.
    pub params: BTreeMap<String, String>,
}

impl TieMap {
    /// Number of layer bindings.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// How many unshared layers copy the shared layer `source`.
    pub fn fan_out(&self, source: &str) -> usize {
        self.layers.iter().filter(|b| b.source == source).count()
    }
}

/// Builds the map that makes each unshared pipeline compute exactly what
/// the shared block computes along that candidate's path.
pub fn tie_map(shared: &SharedBlock, unshared: &UnsharedBlock) -> Result<TieMap, TieError> {
    let mut map = TieMap::default();
    for (t, layers) in &unshared.pipelines {
        let (stream, variant) = match t {
            TransformationId::Conv(s, v) => (*s, *v),
            TransformationId::None => continue,
        };
        let s = shared.stream(stream);
        let path = s.topology.path(s.topology.tap(variant));
        if path.len() != layers.len() {
            return Err(TieError::MissingLayer(format!(
                "{t}: shared path has {} layers, unshared pipeline {}",
                path.len(),
                layers.len()
            )));
        }
        for (depth, (rep, target)) in path.iter().zip(layers).enumerate() {
            let source = s
                .layer(*rep)
                .ok_or_else(|| TieError::MissingLayer(format!("{t} layer {depth}")))?;
            for (tp, sp) in target.param_names().into_iter().zip(source.param_names()) {
                map.params.insert(tp, sp);
            }
            map.layers.push(LayerBinding {
                transformation: *t,
                depth,
                target: target.prefix.clone(),
                source: source.prefix.clone(),
            });
        }
    }
    Ok(map)
}

/// Overwrites the unshared block's parameters in `store` from the shared
/// block's and returns the map that was applied. Adapters of a decoupled
/// shared block have no counterpart and are left out.
pub fn tie_weights(shared: &SharedBlock, unshared: &UnsharedBlock, store: &mut ParamStore) -> Result<TieMap, TieError> {
    let map = tie_map(shared, unshared)?;
    for (target, source) in &map.params {
        let src = store.get(source)?.clone();
        copy_into(store, target, source, &src)?;
    }
    Ok(map)
}

/// [`tie_weights`] across two stores: sources are read from `from`.
pub fn tie_weights_between(
    shared: &SharedBlock,
    from: &ParamStore,
    unshared: &UnsharedBlock,
    to: &mut ParamStore,
) -> Result<TieMap, TieError> {
    let map = tie_map(shared, unshared)?;
    for (target, source) in &map.params {
        copy_into(to, target, source, from.get(source)?)?;
    }
    Ok(map)
}

fn copy_into(store: &mut ParamStore, target: &str, source: &str, src: &Tensor) -> Result<(), TieError> {
    let dst = store.get_mut(target)?;
    if dst.shape() != src.shape() {
        return Err(TieError::ShapeMismatch {
            target: target.to_string(),
            source_path: source.to_string(),
            target_shape: dst.shape(),
            source_shape: src.shape(),
        });
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}
