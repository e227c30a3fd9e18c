//! CPU-only pipeline for binary classification of chest CT volumes.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: flat-storage tensors and a tape-based reverse-mode autodiff
//!   engine providing exactly the operations the network needs,
//! * [`volume`]: CT volume ingestion (PGM stacks, raw caches), intensity
//!   normalization, lung-slice pruning, and trilinear resizing,
//! * [`augment`]: seeded train-time augmentation and the deterministic
//!   eval-time center crop,
//! * [`model`]: a 3D split-attention residual network (ResNeSt-style bottleneck
//!   blocks) built on the tape engine,
//! * [`checkpoint`]: binary weight serialization and transfer initialization,
//! * [`optim`], [`metrics`], [`train`]: Adam, macro-F1 reporting, and the
//!   training/evaluation loops,
//! * [`dataset`], [`synth`]: JSONL manifests and the synthetic scan generator
//!   used by the self-contained end-to-end tests.
//!
//! All randomness flows through explicit seeds; identical inputs and seeds
//! produce bit-identical outputs.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod element;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use checkpoint::{Checkpoint, CheckpointError, LoadReport, TransferPolicy};
pub use element::Element;
pub use model::{Model, ModelConfig, ModelError};
pub use tensor::{Tape, Tensor, TensorError, TensorId};
pub use volume::{IntensityDomain, PruneParams, PruneReport, Volume};

