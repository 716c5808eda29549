//! Axiomatic checker for software isolation of μASM programs under
//! speculative-execution semantics described as CAT models.

pub mod catlang;
pub mod engine;
pub mod events;
pub mod masm;
pub mod speculation;
