//! Training machinery: OHEM cross-entropy, SGD with momentum, cosine schedule,
//! EMA of weights, augmentation and the deterministic training loop.

mod augment;
mod data;
mod ohem;
mod optim;
mod runner;

pub use augment::{augment, AugmentConfig};
pub use data::{argmax_labels, image_to_tensor, softmax_channels};
pub use ohem::{cross_entropy_ohem, OhemConfig, OhemOutput};
pub use optim::{cosine_lr, sgd_step, sgd_update, EmaState, SgdState};
pub use runner::{evaluate, predict, train_loop, write_trace_csv, TraceRow, TrainConfig, TrainOutput};
