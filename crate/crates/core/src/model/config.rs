use serde::{Deserialize, Serialize};

use crate::data::WINDOW;
use crate::{Error, Result};

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_steps: usize,
    pub output_steps: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Cap on training windows drawn per epoch (all windows when `None`).
    pub windows_per_epoch: Option<usize>,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_steps: WINDOW,
            output_steps: WINDOW,
            heads: 4,
            width: 32,
            ffn_width: 64,
            encoder_layers: 1,
            decoder_layers: 1,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            patience: 5,
            windows_per_epoch: None,
            grad_clip: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_steps != WINDOW || self.output_steps != WINDOW {
            return Err(Error::invalid("input and output windows must both be 12 steps"));
        }
        let counts = [
            ("heads", self.heads),
            ("width", self.width),
            ("ffn_width", self.ffn_width),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid("width must be divisible by heads"));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("learning rate and grad clip must be positive"));
        }
        Ok(())
    }
}
