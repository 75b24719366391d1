use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Binary labels at every output resolution; `levels[m - 1]` matches output
/// `m`, so the last level is the original label volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPyramid<T: Scalar = f32> {
    pub levels: Vec<Tensor<T>>,
}

/// Coarsens labels by 2×2×2 max-pooling so any positive voxel survives.
pub fn build_label_pyramid<T: Scalar>(labels: &Tensor<T>, m: usize) -> Result<LabelPyramid<T>> {
    if m == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let shape = labels.shape();
    let div = 1usize << (m - 1);
    if shape.spatial().iter().any(|e| e % div != 0) {
        return Err(Error::InvalidShape {
            op: "build_label_pyramid",
            shape,
            reason: format!("spatial extents must be divisible by {div}"),
        });
    }
    if labels.data().iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::NonBinaryLabels);
    }
    let mut levels = vec![labels.clone()];
    for _ in 1..m {
        let prev = levels.last().expect("non-empty");
        let [n, c, d, h, w] = prev.shape().0;
        let next = Tensor::from_fn(
            crate::tensor::Shape::new(n, c, d / 2, h / 2, w / 2),
            |[b, ch, z, y, x]| {
                let mut v = T::zero();
                for (dz, dy, dx) in (0..8).map(|k| (k >> 2, (k >> 1) & 1, k & 1)) {
                    v = v.max(prev.get([b, ch, 2 * z + dz, 2 * y + dy, 2 * x + dx]));
                }
                v
            },
        );
        levels.push(next);
    }
    levels.reverse();
    Ok(LabelPyramid { levels })
}
