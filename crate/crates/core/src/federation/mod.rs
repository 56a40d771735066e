//! Federated split fine-tuning.
//!
//! Each client keeps the transmitter half of the model and its labels; the
//! edge server keeps the receiver half. A training step exchanges symbols
//! forward and gradients backward across the split, and at the end of every
//! round the trainable tensors of all clients are averaged and redistributed.

mod aggregate;
mod messages;
mod protocol;
mod train;

pub use aggregate::{aggregate, validate_weights, weights_from_counts};
pub use messages::{
    encode_tensors, read_trace, ActivationMessage, GradientMessage, MessageKind,
    RepresentationMessage, TraceRecord, UpdateMessage,
};
pub use protocol::{Client, ServerReplica, StepLosses};
pub use train::{
    client_streams, run_training, BatchSampler, LinkSampler, RoundConfig, RoundLog, TrainLog,
};
