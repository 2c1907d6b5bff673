use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Non-Local encoder/decoder with widened (3/5/9) Refine-net kernels.
    ExtendNlNet,
    /// CsiNet-style baseline: no Non-Local blocks, all-3×3 Refine-net kernels.
    CsiNet,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::ExtendNlNet => "extendnlnet",
            Architecture::CsiNet => "csinet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "extendnlnet" | "extend-nlnet" | "extendnl" => Ok(Architecture::ExtendNlNet),
            "csinet" => Ok(Architecture::CsiNet),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub compression_ratio: usize,
    /// Spatial size of each image plane; `L = 2·height·width`.
    pub height: usize,
    pub width: usize,
    pub leaky_slope: f64,
    pub nl_downsampled_channels: usize,
    pub nl_embed_channels: usize,
    pub encoder_nonlocal_blocks: usize,
    pub decoder_nonlocal_blocks: usize,
    pub refine_blocks: usize,
    pub refine_kernels: [usize; 3],
    pub refine_channels: [usize; 2],
}

impl ModelConfig {
    pub fn new(architecture: Architecture, compression_ratio: usize) -> Self {
        let (nl_blocks, refine_kernels) = match architecture {
            Architecture::ExtendNlNet => (1, [3, 5, 9]),
            Architecture::CsiNet => (0, [3, 3, 3]),
        };
        ModelConfig {
            architecture,
            compression_ratio,
            height: 32,
            width: 32,
            leaky_slope: 0.3,
            nl_downsampled_channels: 16,
            nl_embed_channels: 8,
            encoder_nonlocal_blocks: nl_blocks,
            decoder_nonlocal_blocks: nl_blocks,
            refine_blocks: 2,
            refine_kernels,
            refine_channels: [8, 16],
        }
    }

    pub fn extend_nlnet(compression_ratio: usize) -> Self {
        Self::new(Architecture::ExtendNlNet, compression_ratio)
    }

    pub fn csinet(compression_ratio: usize) -> Self {
        Self::new(Architecture::CsiNet, compression_ratio)
    }

    /// Same layer schedule on a smaller spatial grid.
    pub fn with_spatial(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn flattened_length(&self) -> usize {
        2 * self.height * self.width
    }

    pub fn codeword_length(&self) -> usize {
        self.flattened_length() / self.compression_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.flattened_length();
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.compression_ratio == 0 || !l.is_multiple_of(self.compression_ratio) {
            return Err(Error::Config(format!(
                "compression ratio {} does not divide L = {l}",
                self.compression_ratio
            )));
        }
        let has_nl = self.encoder_nonlocal_blocks + self.decoder_nonlocal_blocks > 0;
        if has_nl && (!self.height.is_multiple_of(2) || !self.width.is_multiple_of(2)) {
            return Err(Error::Config("Non-Local downsampling needs even spatial sizes".into()));
        }
        let counts = [self.nl_downsampled_channels, self.nl_embed_channels, self.refine_channels[0], self.refine_channels[1]];
        if counts.contains(&0) {
            return Err(Error::Config("channel counts must be at least 1".into()));
        }
        if self.refine_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("Refine-net kernels must be odd to preserve the spatial size".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky slope must be finite and non-negative".into()));
        }
        Ok(())
    }
}
