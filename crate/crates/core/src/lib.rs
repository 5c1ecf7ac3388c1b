//! Continual knowledge learning on toy language models.
//!
//! A synthetic fact world stands in for the pretraining and continual
//! corpora. Toy transformers are pretrained on it, continually trained with
//! one of several method families, probed with cloze tasks, and the
//! retention/acquisition trade-off is summarized with FUAR.

pub mod error;
pub mod eval;
pub mod fuar;
pub mod io;
pub mod methods;
pub mod model;
pub mod optim;
pub mod runner;
pub mod vocab;
pub mod world;

pub use error::{CklError, Result};
