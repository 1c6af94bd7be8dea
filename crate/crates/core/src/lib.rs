pub mod allocator;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod federation;
pub mod harness;
pub mod inference;
pub mod oracle;
pub mod retrieval;
pub mod seed;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/retrieval.md")]
    pub struct Retrieval;
    #[doc = include_str!("../../../book/src/budgets.md")]
    pub struct Budgets;
    #[doc = include_str!("../../../book/src/allocator.md")]
    pub struct Allocator;
    #[doc = include_str!("../../../book/src/federation.md")]
    pub struct Federation;
    #[doc = include_str!("../../../book/src/inference.md")]
    pub struct Inference;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}
