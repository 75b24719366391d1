use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shifts and scales a volume to zero mean and unit standard deviation.
pub fn whiten(volume: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = volume.len() as f64;
    let mean = volume.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if !(var > 0.0) {
        return Err(Error::InvalidArgument(
            "cannot whiten a constant volume (zero variance)".into(),
        ));
    }
    let std = var.sqrt();
    Ok(volume.map(|v| ((v as f64 - mean) / std) as f32))
}

/// Fraction of voxels equal to 1.
pub fn positive_fraction(labels: &Tensor<f32>) -> f64 {
    let pos = labels.data().iter().filter(|&&v| v == 1.0).count();
    pos as f64 / labels.len() as f64
}

/// Indices of label volumes whose positive fraction is strictly above
/// `min_fraction`.
pub fn filter_training_segments(labels: &[Tensor<f32>], min_fraction: f64) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| positive_fraction(l) > min_fraction)
        .map(|(i, _)| i)
        .collect()
}
