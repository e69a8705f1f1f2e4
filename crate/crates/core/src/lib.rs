//! Tooling for long-context language-model training: RoPE precision and
//! theta planning, ring-attention simulation, chunk memory planning, a
//! needle-in-a-haystack harness and phased training-recipe manifests.

pub mod cli;
pub mod memplan;
pub mod niah;
pub mod recipe;
pub mod ringsim;
pub mod rope;
pub mod softnum;
