//! Repository-level code completion with retrieval over a structured code
//! knowledge base.
//!
//! The pipeline: [`kb`] extracts functions, global variables, class
//! variables and methods from a Python repository; [`query`] builds a
//! retrieval query by probing which chunks of the unfinished file help a
//! model most; [`sparse`], [`dense`] and [`dataflow`] each retrieve
//! candidates, merged by [`retriever`]; [`rerank`] orders them with a
//! window tournament; [`pipeline`] assembles the prompt and generates.
//! [`distill`] emits picker training data and [`eval`] scores completions.
//!
//! Every model call goes through a client trait with a deterministic
//! in-process stub and a remote implementation in [`wire`].

pub mod config;
pub mod dataflow;
pub mod dense;
pub mod distill;
pub mod eval;
pub mod kb;
pub mod lexer;
pub mod pipeline;
pub mod query;
pub mod rank;
pub mod rerank;
pub mod retriever;
pub mod sparse;
pub mod wire;
