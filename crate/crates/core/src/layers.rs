//! Composite layers: mixing layers, side outputs and weighted fusion.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// Kernel `(C_out, C_in, k_d, k_h, k_w)` and one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let p = ConvParams { weight, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(Shape::new(c_out, c_in, k, k, k)),
            bias: Tensor::zeros(Shape::new(1, c_out, 1, 1, 1)),
        }
    }

    /// Zero-mean normal weights with standard deviation `sqrt(2 / fan_in)`,
    /// zero bias.
    pub fn random(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (c_in * k * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let mut p = Self::zeros(c_out, c_in, k);
        for v in p.weight.data_mut() {
            *v = T::from_f64(normal.sample(rng));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.spatial().iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidShape {
                op: "conv params",
                shape: ws,
                reason: "kernel extents must be odd".into(),
            });
        }
        if self.bias.len() != ws.n() {
            return Err(Error::ShapeMismatch {
                op: "conv params (bias vs kernel)",
                left: self.bias.shape(),
                right: ws,
            });
        }
        Ok(())
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n()
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c()
    }

    pub fn kernel(&self) -> [usize; 3] {
        self.weight.shape().spatial()
    }

    /// Records both tensors as learnable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> ConvVars {
        ConvVars {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    /// Records both tensors as constants.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> ConvVars {
        ConvVars {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
        }
    }
}

/// Tape handles of a bound [`ConvParams`].
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Mixing-layer initialisation: the 1×1×1 kernel copies the fine block
/// through and ignores the coarse block.
pub fn init_passthrough<T: Scalar>(c_fine: usize, c_coarse: usize) -> ConvParams<T> {
    let mut p = ConvParams::zeros(c_fine, c_fine + c_coarse, 1);
    for o in 0..c_fine {
        p.weight.set([o, o, 0, 0, 0], T::one());
    }
    p
}

/// Identity convolution: unit centre tap on the channel diagonal.
pub fn init_identity_conv<T: Scalar>(k: usize, channels: usize) -> ConvParams<T> {
    assert!(k % 2 == 1, "kernel extent must be odd");
    let mut p = ConvParams::zeros(channels, channels, k);
    for c in 0..channels {
        p.weight.set([c, c, k / 2, k / 2, k / 2], T::one());
    }
    p
}

/// A 1×1×1 classifier from stage features to a single activation channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SideOutputParams<T: Scalar = f32> {
    pub classifier: ConvParams<T>,
}

impl<T: Scalar> SideOutputParams<T> {
    pub fn zeros(c_in: usize) -> Self {
        SideOutputParams {
            classifier: ConvParams::zeros(1, c_in, 1),
        }
    }

    pub fn new(classifier: ConvParams<T>) -> Result<Self> {
        if classifier.c_out() != 1 || classifier.kernel() != [1, 1, 1] {
            return Err(Error::InvalidShape {
                op: "side output",
                shape: classifier.weight.shape(),
                reason: "classifier must be 1x1x1 with one output channel".into(),
            });
        }
        Ok(SideOutputParams { classifier })
    }
}

/// One scalar weight per fused output plus a bias, stored as a 1×1×1
/// kernel over the stacked activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T: Scalar = f32> {
    pub params: ConvParams<T>,
}

impl<T: Scalar> FusionWeights<T> {
    /// Weights `1/M`, bias 0.
    pub fn uniform(m: usize) -> Self {
        let mut params = ConvParams::zeros(1, m, 1);
        let w = T::one() / T::from_usize(m);
        params.weight.data_mut().fill(w);
        FusionWeights { params }
    }

    pub fn from_weights(weights: &[T], bias: T) -> Self {
        let mut params = ConvParams::zeros(1, weights.len(), 1);
        params.weight.data_mut().copy_from_slice(weights);
        params.bias.data_mut()[0] = bias;
        FusionWeights { params }
    }

    pub fn len(&self) -> usize {
        self.params.c_in()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn conv(tape: &mut Tape<impl Scalar>, x: Var, p: ConvVars) -> Result<Var> {
    tape.conv3d(x, p.weight, p.bias)
}

/// Concatenates fine and upsampled coarse features and blends them with a
/// 1×1×1 convolution.
pub fn mixing_layer<T: Scalar>(
    tape: &mut Tape<T>,
    fine: Var,
    coarse_upsampled: Var,
    params: ConvVars,
) -> Result<Var> {
    let (fs, cs) = (tape.shape(fine), tape.shape(coarse_upsampled));
    if fs.n() != cs.n() || fs.spatial() != cs.spatial() {
        return Err(Error::ShapeMismatch {
            op: "mixing_layer (fine vs upsampled coarse)",
            left: fs,
            right: cs,
        });
    }
    let ws = tape.shape(params.weight);
    if ws.spatial() != [1, 1, 1] || ws.c() != fs.c() + cs.c() {
        return Err(Error::InvalidShape {
            op: "mixing_layer",
            shape: ws,
            reason: format!(
                "expected a 1x1x1 kernel over {} + {} channels",
                fs.c(),
                cs.c()
            ),
        });
    }
    let cat = tape.concat_channels(fine, coarse_upsampled)?;
    tape.conv3d(cat, params.weight, params.bias)
}

/// One-channel activation volume at the features' own resolution.
pub fn side_output<T: Scalar>(tape: &mut Tape<T>, features: Var, params: ConvVars) -> Result<Var> {
    let (fs, ws) = (tape.shape(features), tape.shape(params.weight));
    if ws.c() != fs.c() {
        return Err(Error::ShapeMismatch {
            op: "side_output (classifier vs features)",
            left: ws,
            right: fs,
        });
    }
    tape.conv3d(features, params.weight, params.bias)
}

/// Weighted sum of equally sized activations plus bias.
pub fn fuse_side_outputs<T: Scalar>(
    tape: &mut Tape<T>,
    activations: &[Var],
    weights: ConvVars,
) -> Result<Var> {
    let first = *activations
        .first()
        .ok_or_else(|| Error::InvalidArgument("fusion needs at least one input".into()))?;
    let s0 = tape.shape(first);
    let ws = tape.shape(weights.weight);
    if ws.c() != activations.len() {
        return Err(Error::InvalidArgument(format!(
            "{} fusion weights for {} activations",
            ws.c(),
            activations.len()
        )));
    }
    let mut stacked = first;
    for &a in &activations[1..] {
        let s = tape.shape(a);
        if s != s0 {
            return Err(Error::ShapeMismatch {
                op: "fuse_side_outputs",
                left: s0,
                right: s,
            });
        }
        stacked = tape.concat_channels(stacked, a)?;
    }
    tape.conv3d(stacked, weights.weight, weights.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn passthrough_matrix() {
        let p = init_passthrough::<f32>(2, 3);
        assert_eq!(p.weight.shape(), Shape::new(2, 5, 1, 1, 1));
        assert_eq!(
            p.weight.data(),
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
        assert!(p.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn passthrough_mixing_reproduces_fine_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for c_fine in 1..=8 {
            for c_coarse in 1..=8 {
                let fine = random(&mut rng, Shape::new(1, c_fine, 2, 3, 2));
                let coarse = random(&mut rng, Shape::new(1, c_coarse, 2, 3, 2));
                let mut tape = Tape::new();
                let (f, c) = (tape.constant(fine.clone()), tape.constant(coarse));
                let p = init_passthrough(c_fine, c_coarse).bind(&mut tape);
                let out = mixing_layer(&mut tape, f, c, p).unwrap();
                let same = tape
                    .value(out)
                    .data()
                    .iter()
                    .zip(fine.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits() || a == b);
                assert!(same, "c_fine={c_fine} c_coarse={c_coarse}");
            }
        }
    }

    #[test]
    fn zero_mixing_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let f = tape.constant(random(&mut rng, Shape::new(1, 2, 2, 2, 2)));
        let c = tape.constant(random(&mut rng, Shape::new(1, 3, 2, 2, 2)));
        let mut p = ConvParams::<f64>::zeros(4, 5, 1);
        p.bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        let vars = p.bind(&mut tape);
        let out = mixing_layer(&mut tape, f, c, vars).unwrap();
        for (ch, b) in [0.5, -1.0, 2.0, 0.0].into_iter().enumerate() {
            assert!(tape.value(out).channel(0, ch).iter().all(|&v| v == b));
        }
    }

    #[test]
    fn mixing_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4, 4)));
        let c = tape.constant(Tensor::zeros(Shape::new(1, 2, 2, 2, 2)));
        let p = init_passthrough(2, 2).bind(&mut tape);
        let err = mixing_layer(&mut tape, f, c, p).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn identity_conv_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, Shape::new(1, 3, 3, 4, 5));
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = init_identity_conv(3, 3).bind(&mut tape);
        let once = conv(&mut tape, v, p).unwrap();
        let twice = conv(&mut tape, once, p).unwrap();
        assert_eq!(tape.value(once), &x);
        assert_eq!(tape.value(twice), &x);
    }

    #[test]
    fn zero_side_output_is_half_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut tape = Tape::new();
        let f = tape.constant(random(&mut rng, Shape::new(1, 4, 2, 2, 2)));
        let p = SideOutputParams::<f64>::zeros(4).classifier.bind(&mut tape);
        let a = side_output(&mut tape, f, p).unwrap();
        let prob = tape.sigmoid(a).unwrap();
        assert_eq!(tape.shape(a), Shape::new(1, 1, 2, 2, 2));
        assert!(tape.value(prob).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn unit_side_output_copies_single_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(&mut rng, Shape::new(1, 1, 2, 4, 2));
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let mut params = SideOutputParams::<f64>::zeros(1);
        params.classifier.weight.data_mut()[0] = 1.0;
        let p = params.classifier.bind(&mut tape);
        let a = side_output(&mut tape, f, p).unwrap();
        assert_eq!(tape.value(a), &x);
    }

    #[test]
    fn side_output_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::zeros(Shape::new(1, 3, 2, 2, 2)));
        let p = SideOutputParams::<f32>::zeros(4).classifier.bind(&mut tape);
        assert!(side_output(&mut tape, f, p).is_err());
        assert!(SideOutputParams::new(ConvParams::<f32>::zeros(2, 4, 1)).is_err());
    }

    #[test]
    fn fusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let xs: Vec<_> = (0..4)
            .map(|_| random(&mut rng, Shape::volume(2, 2, 2)))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let first = FusionWeights::from_weights(&[1.0, 0.0, 0.0, 0.0], 0.0)
            .params
            .bind(&mut tape);
        let out = fuse_side_outputs(&mut tape, &vars, first).unwrap();
        assert_eq!(tape.value(out), &xs[0]);

        let same = vec![vars[1]; 4];
        let avg = FusionWeights::uniform(4).params.bind(&mut tape);
        let out = fuse_side_outputs(&mut tape, &same, avg).unwrap();
        assert!(tape.value(out).max_abs_diff(&xs[1]) <= 1e-15);
    }

    #[test]
    fn fusion_rejects_resolution_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(Shape::volume(4, 4, 4)));
        let b = tape.constant(Tensor::zeros(Shape::volume(2, 2, 2)));
        let w = FusionWeights::uniform(2).params.bind(&mut tape);
        assert!(fuse_side_outputs(&mut tape, &[a, b], w).is_err());
    }
}
