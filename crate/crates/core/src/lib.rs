//! Traffic-flow forecasting with a criss-crossed dual-stream rectified
//! transformer, built on a small reverse-mode autodiff engine over `f64`
//! tensors.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod fsutil;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod series;
pub mod tensor;
pub mod train;

/// Guide chapters compiled as doc-tests so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/attention.md")]
    struct Attention;
    #[doc = include_str!("../../../book/src/graph.md")]
    struct Graph;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
