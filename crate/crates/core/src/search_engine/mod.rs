//! Bilevel search over architecture logits and weights, genotype derivation
//! and the discrete networks built from genotypes.

pub mod derive;
pub mod derived;
pub mod genotype;
pub mod search;

pub use derive::{count_discrete_paths, derive_cell, derive_genotype, enumerate_derivations, should_terminate};
pub use derived::build_derived_network;
pub use genotype::{Genotype, GroupGene, Input, NodeGene, GENOTYPE_VERSION};
pub use search::{
    run_detection_search, run_search, search_step, AlphaShape, Objective, ScheduleConfig, SearchOutcome, SearchState,
    StepRecord,
};
