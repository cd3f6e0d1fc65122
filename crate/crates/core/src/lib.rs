//! Indoor localization from WiFi channel state information.
//!
//! The pipeline turns 3-antenna × 30-subcarrier CSI packets into
//! three-channel fingerprint images (average amplitude, estimated angle of
//! arrival, inter-antenna phase difference), trains a squeeze-and-excitation
//! CNN over the training locations, and estimates positions with a greedy
//! top-H frequency vote over the network's softmax outputs.
//!
//! Module map:
//! - [`csi`]: per-packet feature mathematics.
//! - [`bfee`]: Intel 5300 CSI Tool `.dat` capture reader/writer.
//! - [`channel`]: synthetic multipath channel and phase-error simulator.
//! - [`imaging`]: fingerprint images, datasets and their container file.
//! - [`net`]: the CNN (layers, AdamW training, checkpoints).
//! - [`locator`]: prediction matrix and greedy position estimate.
//! - [`harness`]: metrics, experiments and parameter sweeps.

pub mod bfee;
pub mod channel;
pub mod csi;
pub mod harness;
pub mod imaging;
pub mod locator;
pub mod net;
pub mod rng;

pub use csi::{AntennaGeometry, CsiPacket, FeatureVector};
pub use imaging::{CsiImage, Dataset, LabeledImage, NormalizationSpec};
pub use locator::{GreedyConfig, PositionEstimate, PredictionMatrix};
pub use net::{ModelCheckpoint, NetworkConfig, TrainConfig};
