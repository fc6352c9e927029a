//! Efficient channels for the channelized Hotelling observer.
//!
//! The crate simulates binary signal-detection tasks on lumpy backgrounds
//! imaged through an idealized parallel-hole collimator, learns channel
//! matrices (task-specific and traditional tied-weight linear autoencoders,
//! partial least squares, Laguerre-Gauss, convolutional Laguerre-Gauss and
//! the matched filter), builds Hotelling observers over them and scores the
//! result with ROC/AUC figures of merit.
//!
//! Module map:
//!
//! * [`object_models`]: lumpy backgrounds and elliptical Gaussian signals
//! * [`imaging`]: collimator projection, noise and labelled datasets
//! * [`channels`]: the channel learners and [`ChannelMatrix`]
//! * [`observers`]: HO-Direct, HO-CMD and the CHO
//! * [`evaluation`]: empirical and binormal AUC, ROC curves and SNR
//! * [`harness`]: experiment configs and the train/validate/test sweep

pub mod channels;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod imaging;
pub mod linalg;
pub mod object_models;
pub mod observers;
pub mod persist;
pub mod rng;

/// An image flattened row-major to length `side²`.
pub type ImageVector = Vec<f64>;

pub use channels::{ChannelMatrix, ChannelMethod};
pub use error::{Error, Result};
pub use evaluation::RocSummary;
pub use imaging::{Label, LabeledDataset, SignalEstimate, SimulationParams, Split};
pub use object_models::{GaussianBlob, LumpyParams, SignalParams};
pub use observers::ObserverModel;
