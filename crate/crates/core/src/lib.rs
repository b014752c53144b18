//! Quality-aware gated fusion of appearance and temporal-difference views
//! for new-lesion prediction on paired longitudinal CT volumes.

pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod nifti;
pub mod quality;
pub mod rng;
pub mod synth;
pub mod topology;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{CasePair, Volume};
