use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the generator, discriminator and classifier.
///
/// Filter widths are part of the profile so every preset states its layer
/// widths explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub image_size: usize,
    pub channels: usize,
    pub generator_filters: usize,
    pub generator_residual_blocks: usize,
    pub discriminator_filters: usize,
    pub discriminator_layers: usize,
    pub classifier_fc_sizes: (usize, usize),
    pub dropout_rate: f64,
    pub init_std: f64,
}

impl ModelProfile {
    /// Full-scale configuration: 256 px, 9 residual blocks, 5-layer PatchGAN.
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            image_size: 256,
            channels: 3,
            generator_filters: 64,
            generator_residual_blocks: 9,
            discriminator_filters: 64,
            discriminator_layers: 5,
            classifier_fc_sizes: (1024, 256),
            dropout_rate: 0.5,
            init_std: 0.02,
        }
    }

    /// CPU-scale configuration used for desk experiments (32 or 64 px).
    pub fn desk(image_size: usize) -> Self {
        Self {
            name: "desk".into(),
            image_size,
            channels: 3,
            generator_filters: 8,
            generator_residual_blocks: 3,
            discriminator_filters: 16,
            discriminator_layers: 3,
            classifier_fc_sizes: (128, 64),
            dropout_rate: 0.5,
            init_std: 0.02,
        }
    }

    /// Named preset lookup (`paper`, `desk`).
    pub fn preset(name: &str, image_size: Option<usize>) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk(image_size.unwrap_or(32))),
            other => Err(Error::config(
                "profile",
                format!("unknown profile `{other}` (expected `paper` or `desk`)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("profile.dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.init_std > 0.0) || !self.init_std.is_finite() {
            return Err(Error::config("profile.init_std", "must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::config("profile.image_size", "must be positive"));
        }
        if self.channels == 0 || self.generator_filters == 0 || self.discriminator_filters == 0 {
            return Err(Error::config("profile", "channel and filter counts must be positive"));
        }
        if self.image_size % 4 != 0 {
            return Err(Error::config(
                "profile.image_size",
                format!(
                    "{} is not divisible by 4, required by the two stride-2 generator stages",
                    self.image_size
                ),
            ));
        }
        if self.discriminator_layers < 3 {
            return Err(Error::config(
                "profile.discriminator_layers",
                "need at least 3 layers (strided trunk, stride-1 layer, score layer)",
            ));
        }
        if self.discriminator_grid().is_none() {
            return Err(Error::config(
                "profile.discriminator_layers",
                format!(
                    "{} layers reduce a {} px image below one patch",
                    self.discriminator_layers, self.image_size
                ),
            ));
        }
        if self.classifier_fc_sizes.0 == 0 || self.classifier_fc_sizes.1 == 0 {
            return Err(Error::config("profile.classifier_fc_sizes", "must be positive"));
        }
        Ok(())
    }

    /// Number of stride-2 layers at the start of the discriminator.
    pub fn discriminator_strided_layers(&self) -> usize {
        self.discriminator_layers.saturating_sub(2)
    }

    /// Spatial side after the strided layers and the stride-1 layer (classifier feature map).
    pub fn discriminator_trunk_side(&self) -> Option<usize> {
        let mut side = self.image_size;
        for _ in 0..self.discriminator_strided_layers() {
            // kernel 4, stride 2, pad 1
            if side < 2 {
                return None;
            }
            side = (side + 2 - 4) / 2 + 1;
        }
        // kernel 4, stride 1, pad 1
        if side < 2 {
            return None;
        }
        Some(side - 1)
    }

    /// Side of the patch-score grid.
    pub fn discriminator_grid(&self) -> Option<usize> {
        let side = self.discriminator_trunk_side()?;
        if side < 2 {
            return None;
        }
        Some(side - 1)
    }

    /// Channel width of discriminator layer `i` (0-based, excluding the score layer).
    pub fn discriminator_width(&self, i: usize) -> usize {
        self.discriminator_filters * (1usize << i.min(3))
    }
}
