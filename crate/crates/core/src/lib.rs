//! Curriculum-guided preference learning for multi-hop retrieval agents.
//!
//! A synthetic multi-hop QA world, seven step-level rewards mixed by a
//! time-dependent weight schedule, a seven-head linear reward model and a
//! linear-softmax policy trained with DPO across two curriculum stages.

pub mod cli;
pub mod config;
pub mod dpo;
pub mod embed;
pub mod env;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod policy;
pub mod preference;
pub mod reward;
pub mod reward_model;
pub mod scalar;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Weights = schedule::WeightVector<f64>;
pub type Anchors = schedule::WeightAnchors<f64>;
pub type Schedule = schedule::ScheduleConfig<f64>;
pub type Rewards = reward::RewardVector<f64>;
pub type RewardModel = reward_model::RmParams<f64>;
pub type Embedding = embed::Embedding<f64>;
