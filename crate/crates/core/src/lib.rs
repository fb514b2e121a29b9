pub mod analysis;
pub mod config;
pub mod dataset;
pub mod error;
pub mod executor;
pub mod model;
pub mod sim;
pub mod trainer;

pub use error::{CoaError, Result};

// The guide's chapters, compiled so their listings run as doctests.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    pub mod simulator {}
    #[doc = include_str!("../../../book/src/chains.md")]
    pub mod chains {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    pub mod ensemble {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
