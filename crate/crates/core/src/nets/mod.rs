//! HED-3D and I2I-3D assembly.
//!
//! Layer paths follow `<path>/stage<s>/<layer>`: `f2c/...` for the
//! fine-to-coarse path, `c2f/...` for the coarse-to-fine path, and `fuse` for
//! the HED-3D fusion layer. Stage 1 is full resolution, stage 4 is 1/8.

mod checkpoint;
mod forward;
mod spec;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{BoundParams, ForwardPass, MultiScaleOutputs};
pub use spec::{NetworkSpec, SideSupervision, Variant, STAGES};

use crate::error::{Error, Result};
use crate::layers::{init_identity_conv, init_passthrough, ConvParams, FusionWeights, SideOutputParams};
use crate::seed;
use crate::tensor::{Scalar, Shape};

/// Parameter groups with separate learning-rate multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathGroup {
    FineToCoarse,
    CoarseToFine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3×3 convolution followed by ReLU.
    Conv,
    Mixing,
    SideOutput,
    Fusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Random,
    Zero,
    Passthrough { c_fine: usize, c_coarse: usize },
    Identity,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
    pub group: PathGroup,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    init: Init,
}

impl LayerDef {
    pub fn weight_shape(&self) -> Shape {
        let k = self.kernel;
        Shape::new(self.c_out, self.c_in, k, k, k)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.c_out, 1, 1, 1)
    }
}

/// Named layer parameters. Side outputs and fusion weights are stored in
/// their 1×1×1 convolution form.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T: Scalar = f32> {
    pub layers: BTreeMap<String, ConvParams<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn get(&self, name: &str) -> Option<&ConvParams<T>> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ConvParams<T>> {
        self.layers.get_mut(name)
    }

    pub fn side(&self, name: &str) -> Option<SideOutputParams<T>> {
        self.get(name)
            .and_then(|c| SideOutputParams::new(c.clone()).ok())
    }

    pub fn fusion(&self) -> Option<FusionWeights<T>> {
        self.get("fuse").map(|c| FusionWeights { params: c.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        ConvParams {
                            weight: p.weight.cast(),
                            bias: p.bias.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.layers
            .values()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Copies every layer of `from` whose name starts with `prefix` and that
    /// also exists here, e.g. the `f2c/` convolutions of a trained HED-3D into
    /// a fresh I2I-3D. Returns the number of layers copied.
    pub fn adopt(&mut self, from: &NetworkParams<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, src) in from.layers.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let Some(dst) = self.layers.get_mut(name) else { continue };
            if dst.weight.shape() != src.weight.shape() || dst.bias.shape() != src.bias.shape() {
                return Err(Error::LayerMismatch {
                    layer: name.clone(),
                    reason: format!("shape {} vs {}", src.weight.shape(), dst.weight.shape()),
                });
            }
            *dst = src.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// Architecture description: the validated spec plus its layer table.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerDef>,
}

pub fn build_hed3d<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<(Network, NetworkParams<T>)> {
    if spec.variant != Variant::Hed3d {
        return Err(Error::InvalidSpec("build_hed3d needs variant hed3d".into()));
    }
    let net = Network::new(spec.clone())?;
    let params = net.init_params(seed);
    Ok((net, params))
}

pub fn build_i2i3d<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<(Network, NetworkParams<T>)> {
    if spec.variant != Variant::I2i3d {
        return Err(Error::InvalidSpec("build_i2i3d needs variant i2i3d".into()));
    }
    let net = Network::new(spec.clone())?;
    let params = net.init_params(seed);
    Ok((net, params))
}

/// Builds whichever variant the spec names.
pub fn build<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<(Network, NetworkParams<T>)> {
    match spec.variant {
        Variant::Hed3d => build_hed3d(spec, seed),
        Variant::I2i3d => build_i2i3d(spec, seed),
    }
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let ch = spec.channels();
        let mut layers = Vec::new();
        let mut push = |name: String, kind, group, c_out, c_in, kernel, init| {
            layers.push(LayerDef {
                name,
                kind,
                group,
                c_out,
                c_in,
                kernel,
                init,
            })
        };
        use LayerKind::*;
        use PathGroup::*;

        let mut c_prev = spec.input_channels;
        for (s, stage) in ch.iter().enumerate() {
            for (j, &c) in stage.iter().enumerate() {
                let name = format!("f2c/stage{}/conv{}", s + 1, j + 1);
                push(name, Conv, FineToCoarse, c, c_prev, 3, Init::Random);
                c_prev = c;
            }
        }
        let last = |s: usize| *ch[s].last().expect("validated non-empty");

        match spec.variant {
            Variant::Hed3d => {
                for s in 0..STAGES {
                    let name = format!("f2c/stage{}/side", s + 1);
                    push(name, SideOutput, FineToCoarse, 1, last(s), 1, Init::Zero);
                }
                push("fuse".into(), Fusion, FineToCoarse, 1, STAGES, 1, Init::Uniform);
            }
            Variant::I2i3d => {
                let coarsest = STAGES - 1;
                let side = format!("c2f/stage{}/side", coarsest + 1);
                push(side, SideOutput, CoarseToFine, 1, last(coarsest), 1, Init::Zero);
                let mut c_coarse = last(coarsest);
                for s in (0..coarsest).rev() {
                    let c = last(s);
                    let init = Init::Passthrough {
                        c_fine: c,
                        c_coarse,
                    };
                    push(format!("c2f/stage{}/mix", s + 1), Mixing, CoarseToFine, c, c + c_coarse, 1, init);
                    for j in 1..=2 {
                        let name = format!("c2f/stage{}/conv{j}", s + 1);
                        push(name, Conv, CoarseToFine, c, c, 3, Init::Identity);
                    }
                    push(format!("c2f/stage{}/side", s + 1), SideOutput, CoarseToFine, 1, c, 1, Init::Zero);
                    c_coarse = c;
                }
            }
        }
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDef> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn count(&self, kind: LayerKind, group: Option<PathGroup>) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == kind && group.is_none_or(|g| l.group == g))
            .count()
    }

    /// Average-pooling layers between fine-to-coarse stages.
    pub fn pooling_layers(&self) -> usize {
        STAGES - 1
    }

    /// Fresh parameters: random layers draw from `split(seed, "init", i)` in
    /// layer-table order.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> NetworkParams<T> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = match l.init {
                    Init::Random => {
                        let mut rng = seed::rng(seed, "init", i as u64);
                        ConvParams::random(l.c_out, l.c_in, l.kernel, &mut rng)
                    }
                    Init::Zero => ConvParams::zeros(l.c_out, l.c_in, l.kernel),
                    Init::Passthrough { c_fine, c_coarse } => init_passthrough(c_fine, c_coarse),
                    Init::Identity => init_identity_conv(l.kernel, l.c_out),
                    Init::Uniform => FusionWeights::uniform(l.c_in).params,
                };
                (l.name.clone(), p)
            })
            .collect();
        NetworkParams { layers }
    }

    /// Checks that `params` holds exactly this network's layers with the
    /// right shapes; the first offending layer (in table order) is named.
    pub fn check_params<T: Scalar>(&self, params: &NetworkParams<T>) -> Result<()> {
        for l in &self.layers {
            let p = params.get(&l.name).ok_or_else(|| Error::LayerMismatch {
                layer: l.name.clone(),
                reason: "missing".into(),
            })?;
            if p.weight.shape() != l.weight_shape() || p.bias.shape() != l.bias_shape() {
                return Err(Error::LayerMismatch {
                    layer: l.name.clone(),
                    reason: format!(
                        "shape mismatch: expected weight {} / bias {}, found {} / {}",
                        l.weight_shape(),
                        l.bias_shape(),
                        p.weight.shape(),
                        p.bias.shape()
                    ),
                });
            }
        }
        if let Some(extra) = params.layers.keys().find(|k| self.layer(k).is_none()) {
            return Err(Error::LayerMismatch {
                layer: extra.clone(),
                reason: "not part of this network".into(),
            });
        }
        Ok(())
    }

    pub fn group_of(&self, name: &str) -> Option<PathGroup> {
        self.layer(name).map(|l| l.group)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hed3d_default_layer_counts() {
        let net = Network::new(NetworkSpec::new(Variant::Hed3d, 1.0)).unwrap();
        assert_eq!(net.count(LayerKind::Conv, Some(PathGroup::FineToCoarse)), 10);
        assert_eq!(net.pooling_layers(), 3);
        assert_eq!(net.count(LayerKind::SideOutput, None), 4);
        assert_eq!(net.count(LayerKind::Fusion, None), 1);
        assert_eq!(net.count(LayerKind::Mixing, None), 0);
    }

    #[test]
    fn i2i3d_layer_table() {
        let net = Network::new(NetworkSpec::new(Variant::I2i3d, 1.0 / 16.0)).unwrap();
        assert_eq!(net.count(LayerKind::Conv, Some(PathGroup::FineToCoarse)), 10);
        assert_eq!(net.count(LayerKind::Conv, Some(PathGroup::CoarseToFine)), 6);
        assert_eq!(net.count(LayerKind::Mixing, None), 3);
        assert_eq!(net.count(LayerKind::SideOutput, None), 4);
        assert_eq!(net.count(LayerKind::Fusion, None), 0);
        let mix = net.layer("c2f/stage3/mix").unwrap();
        assert_eq!((mix.c_out, mix.c_in), (16, 48));
        let mix = net.layer("c2f/stage1/mix").unwrap();
        assert_eq!((mix.c_out, mix.c_in), (2, 10));
    }

    #[test]
    fn builders_check_variant() {
        let spec = NetworkSpec::new(Variant::I2i3d, 0.0625);
        assert!(build_hed3d::<f32>(&spec, 0).is_err());
        assert!(build_i2i3d::<f32>(&spec, 0).is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let net = Network::new(NetworkSpec::new(Variant::I2i3d, 0.0625)).unwrap();
        let a: NetworkParams<f32> = net.init_params(3);
        let b: NetworkParams<f32> = net.init_params(3);
        let c: NetworkParams<f32> = net.init_params(4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        net.check_params(&a).unwrap();
        let side = a.side("c2f/stage1/side").unwrap();
        assert!(side.classifier.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn check_params_names_first_bad_layer() {
        let wide = Network::new(NetworkSpec::new(Variant::I2i3d, 1.0)).unwrap();
        let narrow = Network::new(NetworkSpec::new(Variant::I2i3d, 0.0625)).unwrap();
        let p: NetworkParams<f32> = wide.init_params(0);
        let err = narrow.check_params(&p).unwrap_err().to_string();
        assert!(err.starts_with("layer f2c/stage1/conv1: shape mismatch"), "{err}");
    }
}
