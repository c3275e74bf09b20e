//! Stage configuration shared by model building, training and checkpoints.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dct::DctConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, BilinearConfig};
use crate::stain::StainInit;

/// Pipeline variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// OD → SD → basic network.
    S1,
    /// OD → SD → DCT → basic network.
    S2,
    /// OD → SD → [identity ∥ DCT] → six-channel basic network.
    S2C,
    /// Frozen S1 and S2 features → linear layer.
    S3,
    /// Frozen S1 and S2C features → linear layer.
    S3C,
}

impl Stage {
    pub fn is_hybrid(self) -> bool {
        matches!(self, Stage::S3 | Stage::S3C)
    }

    /// Component stages a hybrid is fused from.
    pub fn components(self) -> Option<(Stage, Stage)> {
        match self {
            Stage::S3 => Some((Stage::S1, Stage::S2)),
            Stage::S3C => Some((Stage::S1, Stage::S2C)),
            _ => None,
        }
    }

    /// Input channels of the basic network, `None` for hybrids.
    pub fn in_channels(self) -> Option<usize> {
        match self {
            Stage::S1 | Stage::S2 => Some(3),
            Stage::S2C => Some(6),
            Stage::S3 | Stage::S3C => None,
        }
    }

    pub fn uses_dct(self) -> bool {
        matches!(self, Stage::S2 | Stage::S2C)
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_', ' '], "");
        match key.trim_start_matches("stage") {
            "1" | "s1" => Ok(Stage::S1),
            "2" | "s2" => Ok(Stage::S2),
            "2c" | "s2c" => Ok(Stage::S2C),
            "3" | "s3" => Ok(Stage::S3),
            "3c" | "s3c" => Ok(Stage::S3C),
            _ => Err(Error::Config(format!("unknown stage '{s}'"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Which samples are augmented during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    #[default]
    None,
    Full,
    /// Augment Normal only and oversample it up to the Cancer count.
    NormalOnly,
}

impl std::str::FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(AugmentMode::None),
            "full" => Ok(AugmentMode::Full),
            "normal_only" => Ok(AugmentMode::NormalOnly),
            other => Err(Error::Config(format!(
                "unknown augmentation mode '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub activation: Activation,
    pub augmentation: AugmentMode,
    pub bilinear_signed_sqrt: bool,
    pub bilinear_l2: bool,
    /// Side of the square input canvas in pixels.
    pub input_size: usize,
    pub stain_init: StainInit,
    pub freeze_stain: bool,
    pub dct: DctConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: Stage::S1,
            activation: Activation::Relu,
            augmentation: AugmentMode::None,
            bilinear_signed_sqrt: true,
            bilinear_l2: true,
            input_size: 350,
            stain_init: StainInit::Standard,
            freeze_stain: false,
            dct: DctConfig::default(),
        }
    }
}

/// Smallest canvas that survives the stem and four 2×2 pools.
pub const MIN_INPUT_SIZE: usize = 32;

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    pub fn bilinear(&self) -> BilinearConfig {
        BilinearConfig {
            signed_sqrt: self.bilinear_signed_sqrt,
            l2: self.bilinear_l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < MIN_INPUT_SIZE {
            return Err(Error::Config(format!(
                "input_size {} is below the minimum of {MIN_INPUT_SIZE}",
                self.input_size
            )));
        }
        self.dct.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialising stage config: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(short_hash(self.to_toml()?.as_bytes()))
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
