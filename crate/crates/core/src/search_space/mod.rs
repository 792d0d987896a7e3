//! Candidate transformations and the blocks that compute them.

pub mod block;
pub mod topology;
pub mod transform;

pub use block::{Block, CandidateOutputs, SharedBlock, SharedStream, UnsharedBlock};
pub use topology::{BlockTopology, Rep};
pub use transform::{
    receptive_field, LayerKind, Stream, TransformationId, Variant, NONE_INDEX, NUM_CANDIDATES,
};
