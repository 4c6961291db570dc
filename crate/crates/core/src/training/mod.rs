//! Loss assembly, R1 regularization, the three-phase adversarial loop and
//! checkpoints.

mod checkpoint;
mod losses;
mod models;
mod r1;
mod probe;
pub(crate) mod trainer;

pub use checkpoint::{
    list_checkpoints, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, MANIFEST_FILE, PARAMS_FILE,
};
pub use losses::{l1_loss, mixed_embeddings, total_g_loss, GLossParts, Lambdas};
pub use models::Models;
pub use r1::{next_r1, r1_due, r1_penalty, r1_penalty_with_grads, R1Result};
pub use probe::{Probe, ProbeResult};
pub use trainer::{generator_objective, given_items_exact, IterationBatch, LossRecord, Phase, Trainer, LOG_FILE, LOG_HEADER};
