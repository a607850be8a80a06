//! Deterministic simulator for federated identity/style LoRA personalization.
//!
//! Each client keeps a private identity adapter and trains a shared style
//! adapter; the server builds a personalized style adapter per client by
//! softmax-weighting peers' uploads by cosine similarity.

pub mod accounting;
pub mod aggregation;
pub mod cli;
pub mod client;
pub mod config;
pub mod error;
pub mod lora;
pub mod model;
pub mod optim;
pub mod output;
pub mod rng;
pub mod server;
pub mod synth;

pub use accounting::{CostLedger, CostScope, Direction};
pub use aggregation::{attention_weights, fedavg_aggregate, personalized_aggregate, AttentionMatrix, RoundPlan};
pub use client::{ClientState, StyleUpdate, TrainSchedule};
pub use config::{ExperimentConfig, Strategy};
pub use error::{Error, Result};
pub use lora::{cosine_similarity, flatten, AdapterRole, AdapterSet, LoraAdapter, Matrix};
pub use server::{run_experiment, ResultsBundle, Simulation};
pub use synth::{generate_world, MetricsRecord, World, WorldSpec};
