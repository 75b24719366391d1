use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{MultiScaleOutputs, SideSupervision};
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::LabelPyramid;

/// Which outputs contribute to the loss. Output indices are 1-based, `1`
/// being the coarsest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supervision {
    pub outputs: Vec<usize>,
    #[serde(default)]
    pub fused: bool,
}

impl Supervision {
    pub fn all(m: usize) -> Self {
        Supervision {
            outputs: (1..=m).collect(),
            fused: false,
        }
    }

    pub fn all_with_fused(m: usize) -> Self {
        Supervision {
            fused: true,
            ..Self::all(m)
        }
    }

    pub fn top_only(m: usize) -> Self {
        Supervision {
            outputs: vec![m],
            fused: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty() && !self.fused
    }

    /// Rejects empty sets and references to outputs the network lacks.
    pub fn validate(&self, m: usize, has_fused: bool) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("supervision set is empty".into()));
        }
        if let Some(&bad) = self.outputs.iter().find(|&&o| o == 0 || o > m) {
            return Err(Error::InvalidArgument(format!(
                "supervision references output {bad}, but the network has outputs 1..={m}"
            )));
        }
        if self.fused && !has_fused {
            return Err(Error::InvalidArgument(
                "supervision references the fused output, which this network lacks".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    /// Weight positives by `|Y-|/|Y|` and negatives by `|Y+|/|Y|`.
    pub balance: bool,
    pub side_supervision: SideSupervision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Sum of the supervised terms, in the order output 1..M then fused.
    pub total: f64,
    /// `per_output[m - 1]` is set when output `m` was supervised.
    pub per_output: Vec<Option<f64>>,
    pub fused: Option<f64>,
}

/// Summed cross-entropy of one activation volume against binary labels.
pub fn output_loss<T: Scalar>(
    tape: &mut Tape<T>,
    activations: Var,
    labels: &Tensor<T>,
    balance: bool,
) -> Result<Var> {
    let (pos, neg) = if balance {
        let n = labels.len() as f64;
        let positives = labels.data().iter().filter(|&&y| y == T::one()).count() as f64;
        (T::from_f64((n - positives) / n), T::from_f64(positives / n))
    } else {
        (T::one(), T::one())
    };
    tape.bce_with_logits(activations, labels.clone(), pos, neg)
}

/// Multi-scale loss over the active outputs. Returns the tape scalar for
/// backpropagation and the per-term report.
pub fn multiscale_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &MultiScaleOutputs,
    pyramid: &LabelPyramid<T>,
    active: &Supervision,
    opts: LossOptions,
) -> Result<(Var, LossReport)> {
    let m = outputs.activations.len();
    active.validate(m, outputs.fused.is_some())?;
    if pyramid.levels.len() != m {
        return Err(Error::InvalidArgument(format!(
            "pyramid has {} levels for {m} outputs",
            pyramid.levels.len()
        )));
    }
    let finest = &pyramid.levels[m - 1];
    let mut per_output = vec![None; m];
    let mut terms = Vec::new();
    let mut ordered: Vec<usize> = active.outputs.clone();
    ordered.sort_unstable();
    ordered.dedup();
    for o in ordered {
        let upsampled = match (&outputs.upsampled, opts.side_supervision) {
            (Some(up), SideSupervision::Upsampled) => Some(up[o - 1]),
            _ => None,
        };
        let (act, labels) = match upsampled {
            Some(a) => (a, finest),
            None => (outputs.activations[o - 1], &pyramid.levels[o - 1]),
        };
        let l = output_loss(tape, act, labels, opts.balance)?;
        per_output[o - 1] = Some(tape.value(l).data()[0].as_f64());
        terms.push(l);
    }
    let mut fused = None;
    if active.fused {
        let a = outputs.fused.expect("validated");
        let l = output_loss(tape, a, finest, opts.balance)?;
        fused = Some(tape.value(l).data()[0].as_f64());
        terms.push(l);
    }
    let mut total_var = terms[0];
    for &t in &terms[1..] {
        total_var = tape.add(total_var, t)?;
    }
    let total = per_output.iter().flatten().chain(fused.iter()).sum();
    Ok((
        total_var,
        LossReport {
            total,
            per_output,
            fused,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn zero_activations_cost_ln2_per_voxel() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(Shape::volume(4, 5, 6)));
        let y = Tensor::from_fn(Shape::volume(4, 5, 6), |i| (i[4] % 2) as f64);
        let l = output_loss(&mut tape, a, &y, false).unwrap();
        let v = tape.value(l).data()[0];
        let expected = 120.0 * std::f64::consts::LN_2;
        assert!((v - expected).abs() / expected <= 1e-12);
    }

    #[test]
    fn saturated_correct_logits_cost_nothing() {
        let y = Tensor::from_fn(Shape::volume(3, 3, 3), |i| ((i[2] + i[4]) % 2) as f64);
        let mut tape = Tape::new();
        let a = tape.param(y.map(|v| if v == 1.0 { 40.0 } else { -40.0 }));
        let l = output_loss(&mut tape, a, &y, false).unwrap();
        assert!(tape.value(l).data()[0] <= 1e-10);
    }

    #[test]
    fn rejects_shape_mismatch_and_soft_labels() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::zeros(Shape::volume(2, 2, 2)));
        assert!(output_loss(&mut tape, a, &Tensor::zeros(Shape::volume(2, 2, 4)), false).is_err());
        let soft = Tensor::full(Shape::volume(2, 2, 2), 0.5);
        assert!(matches!(
            output_loss(&mut tape, a, &soft, false),
            Err(Error::NonBinaryLabels)
        ));
    }

    #[test]
    fn balancing_weights_by_opposite_class_fraction() {
        let y = Tensor::from_fn(Shape::volume(1, 1, 4), |i| (i[4] == 0) as u8 as f64);
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(Shape::volume(1, 1, 4)));
        let l = output_loss(&mut tape, a, &y, true).unwrap();
        // One positive weighted 3/4, three negatives weighted 1/4.
        let expected = (0.75 + 3.0 * 0.25) * std::f64::consts::LN_2;
        assert!((tape.value(l).data()[0] - expected).abs() <= 1e-12);
    }

    #[test]
    fn supervision_validation() {
        assert!(Supervision::all(4).validate(4, false).is_ok());
        assert!(Supervision::all_with_fused(4).validate(4, false).is_err());
        assert!(Supervision { outputs: vec![5], fused: false }.validate(4, true).is_err());
        assert!(Supervision { outputs: vec![], fused: false }.validate(4, true).is_err());
    }
}
