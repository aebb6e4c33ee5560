//! Speech anti-spoofing countermeasure toolkit.
//!
//! Front-end feature extraction, varied-length back ends trained with
//! margin-softmax, sigmoid or P2SGrad-MSE criteria, and the evaluation stack
//! (EER, legacy min t-DCF, pairwise z-tests with Holm-Bonferroni correction).

// Negated float comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio_io;
pub mod backend;
pub mod bench;
pub mod cli_io;
pub mod frontend;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod selftest;
pub mod stats;
pub mod training;
