//! HTTP service and command line for browsing mined associations, managing
//! cell regions and verifying biomarkers.

pub mod api;
pub mod cli;
pub mod error;
pub mod store;

pub use api::{router, AppState, JobState, JobStatus};
pub use error::{AppError, AppResult};
pub use store::{Dataset, Store};
