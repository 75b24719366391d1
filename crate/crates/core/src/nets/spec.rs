use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Hed3d,
    I2i3d,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "hed3d" => Ok(Variant::Hed3d),
            "i2i3d" => Ok(Variant::I2i3d),
            other => Err(Error::InvalidSpec(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Hed3d => "hed3d",
            Variant::I2i3d => "i2i3d",
        })
    }
}

/// Where HED-3D side outputs are supervised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SideSupervision {
    /// At each stage's own resolution against downsampled labels.
    #[default]
    Native,
    /// After trilinear upsampling to input resolution.
    Upsampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub variant: Variant,
    /// Channel counts of each 3×3×3 convolution, per resolution stage.
    pub stage_channels: Vec<Vec<usize>>,
    pub width_multiplier: f64,
    /// Number of supervised outputs `M`.
    pub outputs: usize,
    pub input_channels: usize,
    pub side_supervision: SideSupervision,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            variant: Variant::I2i3d,
            stage_channels: vec![vec![32, 32], vec![128, 128], vec![256; 3], vec![512; 3]],
            width_multiplier: 1.0,
            outputs: STAGES,
            input_channels: 1,
            side_supervision: SideSupervision::Native,
        }
    }
}

impl NetworkSpec {
    pub fn new(variant: Variant, width_multiplier: f64) -> Self {
        NetworkSpec {
            variant,
            width_multiplier,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != STAGES {
            return Err(Error::InvalidSpec(format!(
                "exactly {STAGES} stages required, got {}",
                self.stage_channels.len()
            )));
        }
        if let Some(i) = self.stage_channels.iter().position(|s| s.is_empty()) {
            return Err(Error::InvalidSpec(format!("stage {} has no convolutions", i + 1)));
        }
        if self.stage_channels.iter().flatten().any(|&c| c == 0) {
            return Err(Error::InvalidSpec("channel counts must be positive".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "width_multiplier must lie in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        if self.outputs != STAGES {
            return Err(Error::InvalidSpec(format!(
                "outputs (M) must equal the stage count {STAGES}, got {}",
                self.outputs
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidSpec("input_channels must be positive".into()));
        }
        Ok(())
    }

    /// Channel counts after applying the width multiplier (rounded, at least 1).
    pub fn channels(&self) -> Vec<Vec<usize>> {
        self.stage_channels
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|&c| ((c as f64 * self.width_multiplier).round() as usize).max(1))
                    .collect()
            })
            .collect()
    }

    /// Inputs must have extents divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (STAGES - 1)
    }
}
