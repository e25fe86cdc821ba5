//! Pieces of the `avt` binary that are useful on their own.

pub mod plot;
