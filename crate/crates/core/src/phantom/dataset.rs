use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::train::TrainingSample;

use super::{
    filter_training_segments, generate_phantom, read_vvol, whiten, write_vvol, PhantomSample,
    PhantomSpec, Tiling, VoxelType,
};

const SPACING: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case: String,
    /// The spec the case was generated from, including its derived seed.
    pub spec: PhantomSpec,
}

/// `manifest.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub cases: Vec<String>,
    /// Shared spec; each case's own seed is in its `meta.json`.
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub meta: CaseMeta,
    pub sample: PhantomSample,
}

/// Writes `image.vvol`, `wall.vvol`, `vessel.vvol` and `meta.json` under
/// `root/case`.
pub fn write_case(root: impl AsRef<Path>, meta: &CaseMeta, sample: &PhantomSample) -> Result<PathBuf> {
    let dir = root.as_ref().join(&meta.case);
    fs::create_dir_all(&dir)?;
    write_vvol(dir.join("image.vvol"), &sample.volume, VoxelType::F32, SPACING)?;
    write_vvol(dir.join("wall.vvol"), &sample.wall_labels, VoxelType::U8, SPACING)?;
    write_vvol(dir.join("vessel.vvol"), &sample.vessel_labels, VoxelType::U8, SPACING)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(dir)
}

/// Reads a case directory. Centerlines are not stored and come back empty.
pub fn read_case(dir: impl AsRef<Path>) -> Result<Case> {
    let dir = dir.as_ref();
    let meta: CaseMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let volume = read_vvol(dir.join("image.vvol"))?.data;
    let wall_labels = read_vvol(dir.join("wall.vvol"))?.data;
    let vessel_labels = read_vvol(dir.join("vessel.vvol"))?.data;
    if wall_labels.shape() != volume.shape() || vessel_labels.shape() != volume.shape() {
        return Err(Error::Format(format!(
            "{}: label and image extents differ",
            dir.display()
        )));
    }
    Ok(Case {
        meta,
        sample: PhantomSample {
            volume,
            wall_labels,
            vessel_labels,
            centerlines: Vec::new(),
        },
    })
}

/// Case directories under `root` (those holding a `meta.json`), sorted by name.
pub fn list_cases(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut cases: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    cases.sort();
    Ok(cases)
}

/// Generates `count` cases plus `manifest.json`; case `i` uses seed
/// `split(seed, "phantom", i)`.
pub fn generate_dataset(
    root: impl AsRef<Path>,
    spec: &PhantomSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let width = count.saturating_sub(1).to_string().len().max(3);
    let names: Vec<String> = (0..count).map(|i| format!("case{i:0width$}")).collect();
    let paths = names
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let meta = CaseMeta {
                case: name.clone(),
                spec: PhantomSpec {
                    seed: seed::split(seed, "phantom", i as u64),
                    ..spec.clone()
                },
            };
            let sample = generate_phantom(&meta.spec)?;
            write_case(root, &meta, &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        seed,
        cases: names,
        spec: spec.clone(),
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(paths)
}

/// Segment grid and filter threshold used to cut training segments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub extents: [usize; 3],
    pub overlap: [usize; 3],
    pub min_fraction: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            extents: [48, 96, 96],
            overlap: [8, 12, 12],
            min_fraction: 0.0025,
        }
    }
}

/// Whitens the image, cuts the segment grid and keeps segments whose wall
/// fraction passes the filter.
pub fn training_samples(sample: &PhantomSample, cfg: &SegmentConfig) -> Result<Vec<TrainingSample<f32>>> {
    let image = whiten(&sample.volume)?;
    let tiling = Tiling::new(image.shape().spatial(), cfg.extents, cfg.overlap)?;
    let x = tiling.crop(&image)?;
    let wall = tiling.crop(&sample.wall_labels)?;
    let vessel = tiling.crop(&sample.vessel_labels)?;
    filter_training_segments(&wall, cfg.min_fraction)
        .into_iter()
        .map(|i| TrainingSample::new(x[i].clone(), wall[i].clone(), vessel[i].clone()))
        .collect()
}
