//! False-negative-aware mini-batch scheduling for contrastive image–text
//! pretraining, plus a deterministic toy training simulator whose
//! ground-truth compatibility relation is known.

pub mod batcher;
pub mod beta;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalbench;
pub mod linalg;
pub mod manifest;
pub mod npy;
pub mod optim;
pub mod rng;
pub mod runlog;
pub mod scheduler;
pub mod simgrid;
pub mod synthworld;
pub mod towers;
pub mod trainloop;

pub use error::{Error, Result};
