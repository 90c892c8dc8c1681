//! Federated recommendation lab: an NCF recommender trained with FedAvg,
//! contrastive view augmentation with server-side synthetic users, a
//! popularity-based item regularizer, targeted poisoning attacks and robust
//! aggregation rules.
//!
//! Module layering, bottom up: [`numeric`] → [`data`] → [`model`] →
//! [`contrastive`] / [`defense`] / [`adversary`] → [`federation`] →
//! [`metrics`] / [`experiment`].

pub mod adversary;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod numeric;

pub use config::{ExperimentConfig, Variant};
pub use error::{Error, Result};
pub use federation::{run_training, ClientId, GradientUpdate, TrainingRun};
pub use model::{ClientState, PublicParams};
