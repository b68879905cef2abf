pub mod coarsediff;
pub mod error;
pub mod finediff;
pub mod metrics;
pub mod nnet;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod projector;
pub mod schedules;
pub mod srnet;
pub mod voxcore;

pub use error::{Error, Result};
pub use voxcore::{DomainTag, Projection, SeededRng, ViewTag, Volume};
