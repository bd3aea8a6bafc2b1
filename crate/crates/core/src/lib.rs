//! Feature-graph attention networks for online class-incremental learning.
//!
//! Multi-scale CNN feature maps ([`featio`]) become spatial k-NN graphs
//! ([`graphbuild`]), processed by a GATv2 network ([`model`]) trained task by
//! task with rehearsal and distillation ([`harness`]) and scored by
//! [`metrics`]. Everything differentiates through the small reverse-mode
//! engine in [`diffcore`], verified by [`gradcheck`].

pub mod diffcore;
pub mod error;
pub mod featio;
pub mod gradcheck;
pub mod graphbuild;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod parallel;

pub use error::{Error, Result};
