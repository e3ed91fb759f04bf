//! Learning unknown ODE vector fields from noisy time series with a
//! Gaussian-process field on inducing points and sensitivity-based MAP
//! fitting. The guide in `book/` walks through the pieces.

pub mod bench;
pub mod error;
pub mod field;
pub mod io;
pub mod kernel;
pub mod odeint;
pub mod model;
pub mod optim;

pub use error::{Error, Result};

// The guide's snippets run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/vector-field.md")]
    mod vector_field {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
