//! Relational federated learning.
//!
//! Trains models over the join of tables owned by different organizations,
//! where each organization's table is itself a union of horizontal partitions
//! held by separate clients. The joined table is never materialized: the
//! server only sees `(join_key, row_id)` columns and builds index mappings,
//! then pushes learning down through the join (to each vertical table) and
//! through the union (to each horizontal partition).
//!
//! Module map:
//!
//! - [`relational`]: schemas, partitions, CSV ingestion, key extraction and
//!   the join mapping `p_i` with its reverse groups `G_i`.
//! - [`model`]: linear and one-hidden-layer models, losses, and the
//!   centralized baseline trainer.
//! - [`loj`]: server-side learning over the join (SGD partial derivatives,
//!   sharing-ADMM `z`/`λ` updates, duplicate aggregation into `Y_i`, `G_i`).
//! - [`lou`]: learning over the union (gradient aggregation and consensus ADMM).
//! - [`privacy`]: label perturbation, clipping + Gaussian noise, and an RDP
//!   accountant for the subsampled Gaussian mechanism.
//! - [`netsim`]: exact byte/round accounting with a latency + bandwidth model.
//! - [`orchestrator`]: run configuration, the training loop for every
//!   algorithm variant, synthetic data and evaluation.

pub mod error;
pub mod loj;
pub mod lou;
pub mod model;
pub mod netsim;
pub mod orchestrator;
pub mod privacy;
pub mod relational;
pub mod rng;

pub use error::{Error, Result};
