use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ConvParams;
use crate::nets::{BoundParams, Network, NetworkParams, PathGroup};
use crate::tensor::{Gradients, Scalar, Tensor};

/// Learning-rate multiplier per parameter path. A multiplier of zero
/// freezes the path exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathMultipliers {
    pub fine_to_coarse: f64,
    pub coarse_to_fine: f64,
}

impl PathMultipliers {
    pub const ONE: PathMultipliers = PathMultipliers {
        fine_to_coarse: 1.0,
        coarse_to_fine: 1.0,
    };

    pub fn get(&self, group: PathGroup) -> f64 {
        match group {
            PathGroup::FineToCoarse => self.fine_to_coarse,
            PathGroup::CoarseToFine => self.coarse_to_fine,
        }
    }

    pub fn is_frozen(&self, group: PathGroup) -> bool {
        self.get(group) == 0.0
    }
}

impl Default for PathMultipliers {
    fn default() -> Self {
        Self::ONE
    }
}

/// Gradients shaped like the parameters they belong to.
pub type ParamGrads<T> = NetworkParams<T>;

/// Reads the gradient of every bound layer; frozen layers read as zero.
pub fn collect_grads<T: Scalar>(bound: &BoundParams, grads: &Gradients<T>) -> ParamGrads<T> {
    NetworkParams {
        layers: bound
            .iter()
            .map(|(name, v)| {
                (
                    name.to_string(),
                    ConvParams {
                        weight: grads.wrt(v.weight),
                        bias: grads.wrt(v.bias),
                    },
                )
            })
            .collect(),
    }
}

/// SGD with momentum: `v ← μ·v − lr·mult·g`, `p ← p + v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    velocity: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        net: &Network,
        params: &mut NetworkParams<T>,
        grads: &ParamGrads<T>,
        lr: f64,
        multipliers: PathMultipliers,
    ) -> Result<()> {
        self.step_by(params, grads, lr, |name| {
            net.group_of(name)
                .map(|g| multipliers.get(g))
                .ok_or_else(|| Error::GradientMismatch(format!("{name} is not in the network")))
        })
    }

    /// Update with a per-layer multiplier lookup.
    pub fn step_by(
        &mut self,
        params: &mut NetworkParams<T>,
        grads: &ParamGrads<T>,
        lr: f64,
        multiplier: impl Fn(&str) -> Result<f64>,
    ) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::GradientMismatch(format!(
                "{} gradient entries for {} layers",
                grads.layers.len(),
                params.layers.len()
            )));
        }
        for (name, g) in &grads.layers {
            let p = params
                .layers
                .get(name)
                .ok_or_else(|| Error::GradientMismatch(format!("no parameter named {name}")))?;
            if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
                return Err(Error::GradientMismatch(format!("shape differs for {name}")));
            }
        }
        let mu = T::from_f64(self.momentum);
        for (name, p) in params.layers.iter_mut() {
            let mult = multiplier(name)?;
            if mult == 0.0 {
                continue;
            }
            let scale = T::from_f64(lr * mult);
            let g = &grads.layers[name];
            let (vw, vb) = self.velocity.entry(name.clone()).or_insert_with(|| {
                (Tensor::zeros(p.weight.shape()), Tensor::zeros(p.bias.shape()))
            });
            for (param, vel, grad) in [
                (&mut p.weight, vw, &g.weight),
                (&mut p.bias, vb, &g.bias),
            ] {
                for ((x, v), &gv) in param
                    .data_mut()
                    .iter_mut()
                    .zip(vel.data_mut())
                    .zip(grad.data())
                {
                    *v = mu * *v - scale * gv;
                    *x = *x + *v;
                }
            }
        }
        Ok(())
    }

    /// Drops the velocity, as after a resume.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// `base_lr × 0.1^⌊iteration / interval⌋`.
pub fn lr_schedule(iteration: u64, base_lr: f64, decimation_interval: u64) -> f64 {
    let k = (iteration / decimation_interval.max(1)) as i32;
    base_lr / 10f64.powi(k)
}
