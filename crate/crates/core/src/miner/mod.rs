//! Mixture-of-experts association mining.

pub mod associations;
pub mod config;
pub mod gumbel;
pub mod loss;
pub mod model;
pub mod train;

pub use associations::{
    extract_associations, informativeness, select_k, AssociationRelationship, KSweepReport,
};
pub use config::MinerConfig;
pub use loss::LossBreakdown;
pub use model::{Dims, MoEModel, Mode};
pub use train::{gradient_check, train, train_with_progress, TrainedModel};
