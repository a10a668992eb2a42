//! Annotator-specific dimensional emotion models with enrollment-based
//! cross-corpus head mapping.
//!
//! A shared trunk feeds one prediction head per source annotator (plus an
//! aggregate head) for activation and valence, trained with CCC loss. A new
//! target annotator is served by the source head that scores the best CCC on
//! a small enrollment set.

pub mod corpus;
pub mod error;
pub mod harness;
pub mod mapper;
pub mod metrics;
pub mod net;
pub mod seeding;
pub mod sim;

pub use error::{Error, Result};
