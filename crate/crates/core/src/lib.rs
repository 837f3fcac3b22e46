//! Online few-shot continual learning over streams of shifting environments.
//!
//! - [`stream`]: frames, episodes and the event iteration contract.
//! - [`world`]: seeded synthetic environments and the DBENCH1 file format.
//! - [`diff`]: a small reverse-mode tape used to train embeddings.
//! - [`learners`]: Base, LwF, OAP, CPM-lite, Proto-OML and Upper bound.
//! - [`eval`]: predict-then-update evaluation, online accuracy and forgetting.

pub mod diff;
pub mod error;
pub mod eval;
pub mod learners;
pub mod stream;
pub mod world;

pub use error::{Error, Result};
