use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::toydata::CONDITION_WIDTH;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub n_tokens: usize,
    pub d_model: usize,
    /// Width of the sinusoidal timestep features.
    pub time_embed_dim: usize,
    /// Width of the timestep MLP output fed to every residual block.
    pub time_hidden_dim: usize,
    pub t_clip_max: usize,
    /// Latent height.
    pub height: usize,
    /// Latent width.
    pub width: usize,
    pub norm_groups: usize,
    pub cond_width: usize,
    /// Largest timestep accepted by the network.
    pub timesteps: usize,
    /// Ablation switch: `false` removes the temporal blocks from the forward
    /// pass, making every frame an independent image.
    pub temporal_enabled: bool,
    /// Learned per-frame position embedding before temporal attention.
    pub frame_position_encoding: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            n_res_blocks: 2,
            n_tokens: 4,
            d_model: 32,
            time_embed_dim: 32,
            time_hidden_dim: 64,
            t_clip_max: 16,
            height: 16,
            width: 16,
            norm_groups: 8,
            cond_width: CONDITION_WIDTH,
            timesteps: 1000,
            temporal_enabled: true,
            frame_position_encoding: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("n_res_blocks", self.n_res_blocks),
            ("n_tokens", self.n_tokens),
            ("d_model", self.d_model),
            ("time_embed_dim", self.time_embed_dim),
            ("time_hidden_dim", self.time_hidden_dim),
            ("t_clip_max", self.t_clip_max),
            ("height", self.height),
            ("width", self.width),
            ("norm_groups", self.norm_groups),
            ("cond_width", self.cond_width),
            ("timesteps", self.timesteps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("denoiser {name} must be positive"));
        }
        if self.base_channels % self.norm_groups != 0 {
            return Err(config_err!(
                "base_channels {} not divisible by norm_groups {}",
                self.base_channels,
                self.norm_groups
            ));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(config_err!("time_embed_dim must be even, got {}", self.time_embed_dim));
        }
        Ok(())
    }
}
