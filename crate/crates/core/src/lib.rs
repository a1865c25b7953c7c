//! Multi-task reinforcement learning over a finite set of MDPs.
//!
//! A sequence of tasks is drawn from an unknown distribution over a small,
//! unknown set of tabular MDPs that share states, actions and discount.
//! The learner explores the first tasks from scratch with E3, clusters
//! their empirical models into groups, and on every later task runs a
//! model-elimination learner that identifies which group the task belongs
//! to and reuses that group's samples.
//!
//! ```
//! use mtrl::envs::gridworld_suite;
//! use mtrl::mdp::value_iteration;
//!
//! let family = gridworld_suite(0.95).unwrap();
//! let (values, _policy) = value_iteration(family.member(0), 1e-8);
//! assert!(values.0[family.start_state()] > 0.0);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod e3;
pub mod envs;
pub mod error;
pub mod estimation;
pub mod finite_model;
pub mod harness;
pub mod mdp;
pub mod multitask;
mod text;

pub use error::{Error, Result};

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mdps.md")]
    mod mdps {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/e3.md")]
    mod e3 {}
    #[doc = include_str!("../../../book/src/elimination.md")]
    mod elimination {}
    #[doc = include_str!("../../../book/src/multitask.md")]
    mod multitask {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
