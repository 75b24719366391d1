use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 1-D squared distance transform by lower envelope of parabolas.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            if f[p].is_infinite() {
                // Replace an empty envelope outright.
                v[k] = q;
                z[k + 1] = f64::INFINITY;
                break;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            (q as f64 - p as f64).powi(2) + f[p]
        };
    }
}

/// Squared Euclidean distance from every voxel to the nearest voxel equal to 1.
pub fn squared_distance_transform(binary: &Tensor<f32>) -> Vec<f64> {
    let [_, _, d, h, w] = binary.shape().0;
    let dims = [d, h, w];
    let strides = [h * w, w, 1];
    let mut g: Vec<f64> = binary
        .data()
        .iter()
        .map(|&v| if v == 1.0 { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = d.max(h).max(w);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let n = dims[axis];
        let s = strides[axis];
        for start in 0..g.len() {
            if (start / s) % n != 0 {
                continue;
            }
            for i in 0..n {
                f[i] = g[start + i * s];
            }
            edt_1d(&f[..n], &mut out[..n], &mut v, &mut z);
            for i in 0..n {
                g[start + i * s] = out[i];
            }
        }
    }
    g
}

/// Voxels within `radius` (Euclidean) of a positive voxel.
pub fn evaluation_mask(vessel_gt: &Tensor<f32>, radius: f64) -> Result<Tensor<f32>> {
    if vessel_gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryLabels);
    }
    if !vessel_gt.data().contains(&1.0) {
        return Err(Error::InvalidArgument(
            "ground truth is empty; nothing to evaluate".into(),
        ));
    }
    let r2 = radius * radius;
    let d2 = squared_distance_transform(vessel_gt);
    Tensor::new(
        vessel_gt.shape(),
        d2.iter().map(|&d| if d <= r2 { 1.0 } else { 0.0 }).collect(),
    )
}
