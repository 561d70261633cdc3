//! Shallow dual-encoder U-Net with a minimal reverse-mode gradient engine.

pub mod loss;
pub mod model;
pub mod tape;
pub mod train;

pub use loss::{argmax_labels, loss_and_grad, LossParts};
pub use model::{expected_layout, EncodedCase, EncoderKind, SunetConfig, SunetModel};
pub use tape::{ParamSet, Tape};
pub use train::{loss_and_gradients, loss_value, train, Adam, EpochRecord, LossCurve, Regime, TrainCase, TrainConfig};
