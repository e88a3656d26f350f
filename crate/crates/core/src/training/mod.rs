//! Composite loss, optimizer, training loop and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, ModelSpec};
pub use loss::{diffusion_loss, recon_loss, total_loss, total_loss_grad};
pub use optim::{clip_grad_norm, cosine_lr, Adam};
pub use trainer::{epoch_batches, step_noise, total_steps, train, validation_loss, StepRecord, TrainOutcome, Trainer};
