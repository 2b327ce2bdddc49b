//! Orchestration and I/O: run configuration, the S2T1 container and
//! checkpoints, phantom datasets on disk, the two training stages and PGM
//! output.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod pgm;
pub mod train;

pub use checkpoint::{
    ae_checkpoint, ae_digest, ae_from_checkpoint, diff_checkpoint, diff_from_checkpoint, load_checkpoint,
    save_checkpoint, Checkpoint, DiffBundle, MetaValue, Stage,
};
pub use config::{RunConfig, CONFIG_KEYS};
pub use container::{Container, Entry, TensorData};
pub use pgm::{emit_pgm, pgm_bytes, GrayGrid};
pub use train::{
    epoch_mask_mean, evaluate_images, latent_pairs, mean_latent_cosine, prepare_pairs, similarity_inside_outside,
    train_stage1, train_stage2, translate_all, EpochLog, Stage1Outcome, Stage2Outcome,
};
