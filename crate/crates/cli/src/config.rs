//! Run configuration. Every field has a default; a TOML file overrides the
//! defaults and command-line flags override the file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vesselnet::bench::Matcher;
use vesselnet::nets::NetworkSpec;
use vesselnet::phantom::{Blend, PhantomSpec, SegmentConfig};
use vesselnet::train::{default_phases, CurriculumPhase, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub phantom: PhantomSection,
    pub network: NetworkSpec,
    pub train: TrainSection,
    pub predict: PredictSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            threads: 0,
            phantom: PhantomSection::default(),
            network: NetworkSpec::default(),
            train: TrainSection::default(),
            predict: PredictSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub count: usize,
    /// Per-case seeds are split from the master seed; `spec.seed` is ignored.
    pub spec: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            count: 20,
            spec: PhantomSpec {
                extents: [48, 96, 96],
                vessels: 3,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub data: PathBuf,
    /// Phase-B base learning rate; phase A runs at 100×, phase C at a tenth.
    pub base_lr: f64,
    /// Iteration budgets of phases A, B and C.
    pub budgets: [u64; 3],
    /// Explicit phase table; replaces the default A/B/C table when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phases: Option<Vec<CurriculumPhase>>,
    pub optimizer: TrainConfig,
    pub segments: SegmentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    /// Checkpoint whose fine-to-coarse layers seed the new network, e.g. a
    /// trained HED-3D under a fresh I2I-3D.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            data: PathBuf::from("data"),
            base_lr: 2e-6,
            budgets: [200, 1000, 1000],
            phases: None,
            optimizer: TrainConfig::default(),
            segments: SegmentConfig::default(),
            resume: None,
            init_from: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub checkpoint: PathBuf,
    /// A `.vvol` image or a dataset directory.
    pub input: PathBuf,
    pub segments: SegmentConfig,
    pub blend: Blend,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            checkpoint: PathBuf::from("out/model.ckpt"),
            input: PathBuf::from("data"),
            segments: SegmentConfig::default(),
            blend: Blend::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Directory of `{case}/prob.vvol` files.
    pub predictions: PathBuf,
    /// Dataset holding `{case}/wall.vvol` and `{case}/vessel.vvol`.
    pub data: PathBuf,
    /// Matching tolerance in voxels; defaults to 0.75 % of the diagonal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_dist: Option<f64>,
    pub mask_radius: f64,
    pub matcher: Matcher,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            predictions: PathBuf::from("out"),
            data: PathBuf::from("data"),
            max_dist: None,
            mask_radius: 20.0,
            matcher: Matcher::Optimal,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The phase table training will run.
    pub fn phases(&self) -> Vec<CurriculumPhase> {
        self.train.phases.clone().unwrap_or_else(|| {
            default_phases(
                self.network.variant,
                self.network.outputs,
                self.train.base_lr,
                self.train.budgets,
            )
        })
    }

    /// Writes the configuration as TOML.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing config")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.train.phases = Some(c.phases());
        let text = toml::to_string_pretty(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 5\n[phantom]\ncount = 2\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.phantom.count, 2);
        assert_eq!(c.phantom.spec, PhantomSection::default().spec);
        assert_eq!(c.train, TrainSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 5\n").is_err());
    }
}
