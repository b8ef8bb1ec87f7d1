//! Desk-scale spatio-temporal graph attention forecaster.
//!
//! Encoder layers apply directed graph attention across upstream roads (with
//! a per-road sentinel key whose value is the road's own projection) followed
//! by temporal self-attention. The decoder runs causal self-attention over the
//! 12 output slots and then attends onto the encoder steps of the same road.
//! That cross-attention reads the per-head outputs of the last encoder's
//! spatial attention as its values, so for every head the decoder readout is
//! exactly `(TA ⊙ SA) X`: the spatio-temporal attention product applied to the
//! last encoder layer's value-projected inputs. This is what makes the
//! extracted ST matrices faithful and what attention enforcement overrides.

mod attention;
mod checkpoint;
mod config;
mod features;
mod net;
mod predict;
mod tape;
mod train;

pub use attention::{
    extract_st_attention, AttentionBundle, AttentionOverrides, Horizon, StEntry, StMatrix,
    StRows, StSource, HORIZONS,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use features::{position_encoding, Normalization, DECODER_FEATURES, ENCODER_FEATURES};
pub use net::{ModelState, ParamTensor};
pub use predict::{window_starts, PatchFn, PredictionPanel};
pub use train::{train, EpochStats};
