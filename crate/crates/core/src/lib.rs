//! Bayesian decision-theoretic subgroup detection.
//!
//! The crate fits regularized Bayesian models of heterogeneous treatment
//! effects, scores candidate subgroup partitions and treatment policies by
//! posterior expected utility, searches shallow decision trees for the best
//! ones, and summarizes the selected subgroups from the same posterior.
//!
//! The risk parameter `λ` of the utility interpolates between preferring
//! partitions whose subgroup effects are uncertain (`λ < 1`), caring only
//! about how well the partition tracks the effects (`λ = 1`), and preferring
//! partitions whose effects are well determined (`λ > 1`).
//!
//! ```
//! use braids::draws::PosteriorDraws;
//! use braids::tree::Partition;
//! use braids::utility::expected_utility;
//!
//! let draws = PosteriorDraws::from_rows(&[vec![1.0, 1.0, -1.0, -1.0], vec![1.0, 1.0, -1.0, -1.0]]).unwrap();
//! let split = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
//! let report = expected_utility(&draws, &split, 1.0).unwrap();
//! assert_eq!(report.value, 0.0);
//! ```

pub mod cutpoints;
pub mod data;
pub mod draws;
pub mod error;
pub mod inference;
pub mod prior;
pub mod ridge;
pub mod rng;
pub mod rules;
pub mod search;
pub mod sim;
pub mod tree;
pub mod utility;

pub use error::{Error, Result};

// The guide's code blocks run as doc tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/utility.md")]
    mod utility {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/prior.md")]
    mod prior {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
