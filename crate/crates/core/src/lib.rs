//! Updating a copy-action semantic parser when a small amount of new data
//! conflicts with a large, partially out-of-date training set.
//!
//! * [`parsetree`]: bracketed intent/slot trees and their action sequences.
//! * [`dataset`]: V1/V2 corpora, partitions, splits and the toy grammar.
//! * [`model`]: a small transformer encoder-decoder with swappable heads.
//! * [`strategies`]: training recipes and the selection classifier.
//! * [`eval`]: per-partition exact match and summary metrics.

pub mod dataset;
pub mod eval;
pub mod model;
pub mod parsetree;
pub mod strategies;
