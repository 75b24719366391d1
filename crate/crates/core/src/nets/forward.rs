use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{self, ConvVars};
use crate::tensor::{Scalar, Tape, Tensor, UpsampleMode, Var};

use super::{Network, NetworkParams, PathGroup, Variant, STAGES};

/// Network parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, ConvVars>,
}

impl BoundParams {
    /// Binds every layer; layers whose group fails `trainable` become
    /// constants and receive no gradient.
    pub fn bind<T: Scalar>(
        tape: &mut Tape<T>,
        net: &Network,
        params: &NetworkParams<T>,
        trainable: impl Fn(PathGroup) -> bool,
    ) -> Result<Self> {
        net.check_params(params)?;
        let vars = net
            .layers()
            .iter()
            .map(|l| {
                let p = &params.layers[&l.name];
                let v = if trainable(l.group) {
                    p.bind(tape)
                } else {
                    p.bind_frozen(tape)
                };
                (l.name.clone(), v)
            })
            .collect();
        Ok(BoundParams { vars })
    }

    pub fn get(&self, name: &str) -> ConvVars {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ConvVars)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Supervised outputs of one forward pass. Index `m - 1` holds output `m`;
/// `m = 1` is the coarsest (1/8 resolution), `m = M` the finest.
#[derive(Clone, Debug)]
pub struct MultiScaleOutputs {
    /// Activations at their native resolution.
    pub activations: Vec<Var>,
    pub probabilities: Vec<Var>,
    /// HED-3D only: activations trilinearly upsampled to input resolution.
    pub upsampled: Option<Vec<Var>>,
    /// HED-3D only: weighted fusion of the upsampled activations.
    pub fused: Option<Var>,
    pub fused_probability: Option<Var>,
    /// Final probability map at input resolution: the finest output for
    /// I2I-3D, the fused output for HED-3D.
    pub top: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub outputs: MultiScaleOutputs,
    /// Last feature map of each fine-to-coarse stage (stage 1 first).
    pub f2c_features: Vec<Var>,
    /// I2I-3D only: coarse-to-fine feature map at each stage's resolution
    /// (stage 1 first). Stage 4 is shared with the fine-to-coarse path.
    pub c2f_features: Vec<Var>,
}

impl Network {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
    ) -> Result<ForwardPass> {
        let spec = self.spec();
        let xs = tape.shape(x);
        if xs.c() != spec.input_channels {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: xs,
                reason: format!("expected {} input channel(s)", spec.input_channels),
            });
        }
        let div = spec.divisor();
        if xs.spatial().iter().any(|e| e % div != 0) {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: xs,
                reason: format!("spatial extents must be divisible by {div}"),
            });
        }

        let channels = spec.channels();
        let mut f2c = Vec::with_capacity(STAGES);
        let mut h = x;
        for (s, stage) in channels.iter().enumerate() {
            if s > 0 {
                h = tape.avg_pool3d(h)?;
            }
            for j in 0..stage.len() {
                let conv = bound.get(&format!("f2c/stage{}/conv{}", s + 1, j + 1));
                h = layers::conv(tape, h, conv)?;
                h = tape.relu(h)?;
            }
            f2c.push(h);
        }

        match spec.variant {
            Variant::Hed3d => self.hed_head(tape, bound, f2c),
            Variant::I2i3d => self.i2i_head(tape, bound, f2c),
        }
    }

    fn hed_head<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        f2c: Vec<Var>,
    ) -> Result<ForwardPass> {
        let mut activations = Vec::with_capacity(STAGES);
        let mut upsampled = Vec::with_capacity(STAGES);
        // Output m = 1 is the coarsest stage.
        for s in (0..STAGES).rev() {
            let side = bound.get(&format!("f2c/stage{}/side", s + 1));
            let a = layers::side_output(tape, f2c[s], side)?;
            let mut up = a;
            for _ in 0..s {
                up = tape.upsample3d(up, UpsampleMode::Trilinear)?;
            }
            activations.push(a);
            upsampled.push(up);
        }
        let fused = layers::fuse_side_outputs(tape, &upsampled, bound.get("fuse"))?;
        let fused_probability = tape.sigmoid(fused)?;
        let probabilities = activations
            .iter()
            .map(|&a| tape.sigmoid(a))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardPass {
            outputs: MultiScaleOutputs {
                activations,
                probabilities,
                upsampled: Some(upsampled),
                fused: Some(fused),
                fused_probability: Some(fused_probability),
                top: fused_probability,
            },
            f2c_features: f2c,
            c2f_features: Vec::new(),
        })
    }

    fn i2i_head<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        f2c: Vec<Var>,
    ) -> Result<ForwardPass> {
        let coarsest = STAGES - 1;
        let mut c2f = vec![f2c[coarsest]; STAGES];
        let mut activations = Vec::with_capacity(STAGES);
        let side = bound.get(&format!("c2f/stage{}/side", coarsest + 1));
        activations.push(layers::side_output(tape, f2c[coarsest], side)?);

        let mut h = f2c[coarsest];
        for s in (0..coarsest).rev() {
            let stage = s + 1;
            let up = tape.upsample3d(h, UpsampleMode::Trilinear)?;
            h = layers::mixing_layer(tape, f2c[s], up, bound.get(&format!("c2f/stage{stage}/mix")))?;
            for j in 1..=2 {
                h = layers::conv(tape, h, bound.get(&format!("c2f/stage{stage}/conv{j}")))?;
                h = tape.relu(h)?;
            }
            c2f[s] = h;
            let side = bound.get(&format!("c2f/stage{stage}/side"));
            activations.push(layers::side_output(tape, h, side)?);
        }
        let probabilities = activations
            .iter()
            .map(|&a| tape.sigmoid(a))
            .collect::<Result<Vec<_>>>()?;
        let top = *probabilities.last().expect("four outputs");
        Ok(ForwardPass {
            outputs: MultiScaleOutputs {
                activations,
                probabilities,
                upsampled: None,
                fused: None,
                fused_probability: None,
                top,
            },
            f2c_features: f2c,
            c2f_features: c2f,
        })
    }

    /// Top probability map for a single input volume.
    pub fn predict<T: Scalar>(&self, params: &NetworkParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, self, params, |_| false)?;
        let xv = tape.constant(x.clone());
        let pass = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(pass.outputs.top).clone())
    }
}
