use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// A box inside a volume, in (D, H, W) voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub origin: [usize; 3],
    pub extents: [usize; 3],
}

/// How overlapping segment predictions are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    #[default]
    Mean,
    /// Weights fall off linearly across each overlap band.
    Feather,
}

/// Segment origins along one axis: stride `extent - overlap`, with the last
/// segment shifted to end exactly at `len`.
pub fn axis_origins(len: usize, extent: usize, overlap: usize) -> Result<Vec<usize>> {
    if extent == 0 || overlap >= extent {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} must be smaller than segment extent {extent}"
        )));
    }
    if len <= extent {
        return Ok(vec![0]);
    }
    let stride = extent - overlap;
    let mut origins: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| o + extent < len).collect();
    origins.push(len - extent);
    origins.dedup();
    Ok(origins)
}

/// Segment grid over a volume, padded by edge replication where the volume
/// is smaller than a segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub volume: [usize; 3],
    pub overlap: [usize; 3],
    pub padded: [usize; 3],
    pub segments: Vec<Segment>,
}

impl Tiling {
    pub fn new(volume: [usize; 3], extents: [usize; 3], overlap: [usize; 3]) -> Result<Self> {
        if volume.contains(&0) {
            return Err(Error::InvalidArgument(format!("empty volume {volume:?}")));
        }
        let padded = [0, 1, 2].map(|k| volume[k].max(extents[k]));
        let per_axis = [0, 1, 2]
            .map(|k| axis_origins(padded[k], extents[k], overlap[k]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut segments = Vec::new();
        for &z in &per_axis[0] {
            for &y in &per_axis[1] {
                for &x in &per_axis[2] {
                    segments.push(Segment {
                        origin: [z, y, x],
                        extents,
                    });
                }
            }
        }
        Ok(Tiling {
            volume,
            overlap,
            padded,
            segments,
        })
    }

    pub fn crop(&self, volume: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let [_, _, d, h, w] = volume.shape().0;
        if [d, h, w] != self.volume {
            return Err(Error::InvalidShape {
                op: "crop",
                shape: volume.shape(),
                reason: format!("tiling was built for extents {:?}", self.volume),
            });
        }
        let padded = pad_edge(volume, self.padded);
        Ok(self.segments.iter().map(|s| extract(&padded, s)).collect())
    }

    /// Recombines per-segment predictions and removes any padding.
    pub fn stitch(&self, predictions: &[Tensor<f32>], blend: Blend) -> Result<Tensor<f32>> {
        let ramp = match blend {
            Blend::Mean => None,
            Blend::Feather => Some(self.overlap),
        };
        let full = accumulate(&self.segments, predictions, self.padded, ramp)?;
        let [d, h, w] = self.volume;
        Ok(extract(
            &full,
            &Segment {
                origin: [0; 3],
                extents: [d, h, w],
            },
        ))
    }
}

/// Replicates edge voxels so the volume reaches at least `extents`.
pub fn pad_edge(volume: &Tensor<f32>, extents: [usize; 3]) -> Tensor<f32> {
    let [_, _, d, h, w] = volume.shape().0;
    if [d, h, w] == extents {
        return volume.clone();
    }
    let [pd, ph, pw] = extents;
    Tensor::from_fn(Shape::volume(pd, ph, pw), |[_, _, z, y, x]| {
        volume.get([0, 0, z.min(d - 1), y.min(h - 1), x.min(w - 1)])
    })
}

fn extract(volume: &Tensor<f32>, s: &Segment) -> Tensor<f32> {
    let [d, h, w] = s.extents;
    let [oz, oy, ox] = s.origin;
    Tensor::from_fn(Shape::volume(d, h, w), |[_, _, z, y, x]| {
        volume.get([0, 0, oz + z, oy + y, ox + x])
    })
}

fn feather_weight(i: usize, extent: usize, ramp: usize) -> f64 {
    let r = (ramp + 1) as f64;
    (((i + 1) as f64) / r).min(((extent - i) as f64) / r).min(1.0)
}

/// Per-voxel mean over every segment covering it.
pub fn stitch_predictions(
    segments: &[Segment],
    predictions: &[Tensor<f32>],
    extents: [usize; 3],
) -> Result<Tensor<f32>> {
    accumulate(segments, predictions, extents, None)
}

/// Weighted mean; with `ramp`, weights rise linearly over that many voxels
/// from each segment face.
fn accumulate(
    segments: &[Segment],
    predictions: &[Tensor<f32>],
    extents: [usize; 3],
    ramp: Option<[usize; 3]>,
) -> Result<Tensor<f32>> {
    if segments.len() != predictions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} segments",
            predictions.len(),
            segments.len()
        )));
    }
    let [d, h, w] = extents;
    let mut sum = vec![0.0f64; d * h * w];
    let mut weight = vec![0.0f64; d * h * w];
    for (s, p) in segments.iter().zip(predictions) {
        let [sd, sh, sw] = s.extents;
        if p.shape() != Shape::volume(sd, sh, sw) {
            return Err(Error::ShapeMismatch {
                op: "stitch",
                left: Shape::volume(sd, sh, sw),
                right: p.shape(),
            });
        }
        if (0..3).any(|k| s.origin[k] + s.extents[k] > extents[k]) {
            return Err(Error::InvalidArgument(format!(
                "segment at {:?} extends past the volume {extents:?}",
                s.origin
            )));
        }
        for z in 0..sd {
            for y in 0..sh {
                for x in 0..sw {
                    let wt = match ramp {
                        None => 1.0,
                        Some(r) => {
                            feather_weight(z, sd, r[0])
                                * feather_weight(y, sh, r[1])
                                * feather_weight(x, sw, r[2])
                        }
                    };
                    let i = ((s.origin[0] + z) * h + s.origin[1] + y) * w + s.origin[2] + x;
                    sum[i] += wt * p.get([0, 0, z, y, x]) as f64;
                    weight[i] += wt;
                }
            }
        }
    }
    if let Some(i) = weight.iter().position(|&wt| wt == 0.0) {
        return Err(Error::Uncovered([i / (h * w), (i / w) % h, i % w]));
    }
    let data = sum.iter().zip(&weight).map(|(s, wt)| (s / wt) as f32).collect();
    Tensor::new(Shape::volume(d, h, w), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins_examples() {
        assert_eq!(axis_origins(180, 96, 12).unwrap(), vec![0, 84]);
        assert_eq!(axis_origins(96, 96, 12).unwrap(), vec![0]);
        assert_eq!(axis_origins(200, 96, 12).unwrap(), vec![0, 84, 104]);
        assert!(axis_origins(100, 12, 12).is_err());
    }
}
