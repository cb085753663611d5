//! Span transduction: nested labeled spans are linearized into pointer,
//! CopyNext and label decisions, predicted by a BiLSTM encoder and LSTM
//! decoder, and decoded under a well-formedness automaton.

pub mod automaton;
pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod linearize;
pub mod lstm;
pub mod model;
pub mod selfcheck;
pub mod synth;
pub mod train;

pub use error::{CheckpointError, Error, Result};
