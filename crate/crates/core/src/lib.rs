//! Joint activity detection and channel estimation for IRS-assisted IoT uplinks.
//!
//! The estimator runs in three stages:
//!
//! 1. [`bigamp`]: sparse matrix factorization `Y ≈ G W`;
//! 2. [`svt`]: completion of `Q` from the masked, phase-rotated `W`;
//! 3. [`vamp`]: joint-sparse recovery of `Theta` from `Q = Theta X`, then
//!    activity detection and channel extraction.
//!
//! [`model`] generates synthetic scenes, [`disambig`] removes the
//! permutation/scale ambiguity of stage 1 against ground truth, [`pipeline`]
//! wires everything together and [`cli`] runs Monte-Carlo experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bigamp;
pub mod cli;
pub mod disambig;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod svt;
pub mod vamp;

pub use linalg::ComplexMatrix;
