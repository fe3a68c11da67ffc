//! Composable graph-to-graph computation blocks.
//!
//! The central object is an attributed directed multigraph ([`graph::Graph`])
//! carrying a global attribute, per-node attributes, and per-edge attributes.
//! A block ([`block`]) maps such a graph to another with the same structure by
//! running configurable per-edge, per-node, and global update functions glued
//! together by permutation-invariant aggregations. Blocks compose into
//! encode-process-decode pipelines ([`compose`]), train with reverse-mode
//! differentiation ([`tape`], [`nn`]), and come with three demo task
//! generators ([`tasks`]) plus a small training harness ([`train`]).

pub mod block;
pub mod compose;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tape;
pub mod tasks;
pub mod train;
pub mod tensor;
pub mod variants;
