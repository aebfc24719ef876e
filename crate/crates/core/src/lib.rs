//! Chained cross-modal synthetic view generation, loss-based teacher
//! filtering and set-attention students, with exact information-theoretic
//! and diversity diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channels;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod diversity;
pub mod info;
pub mod linalg;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod selection;
pub mod verify;
