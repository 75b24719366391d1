use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{BoundParams, Network, NetworkParams, Variant};
use crate::seed;
use crate::tensor::{Scalar, Tape, Tensor};

use super::{
    build_label_pyramid, collect_grads, lr_schedule, multiscale_loss, LabelPyramid, LossOptions,
    LossReport, PathMultipliers, Sgd, Supervision,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelTarget {
    Vessel,
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPhase {
    pub name: String,
    pub iterations: u64,
    pub base_lr: f64,
    #[serde(default)]
    pub multipliers: PathMultipliers,
    pub supervision: Supervision,
    pub target: LabelTarget,
    /// End the phase early once the windowed loss stops improving.
    #[serde(default)]
    pub stop_on_plateau: bool,
}

impl CurriculumPhase {
    pub fn validate(&self, m: usize, has_fused: bool) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(format!("phase {}: {what}", self.name)));
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr must be finite and non-negative, got {}", self.base_lr));
        }
        for (path, v) in [
            ("fine_to_coarse", self.multipliers.fine_to_coarse),
            ("coarse_to_fine", self.multipliers.coarse_to_fine),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{path} multiplier must be finite and non-negative, got {v}"));
            }
        }
        self.supervision
            .validate(m, has_fused)
            .or_else(|e| bad(e.to_string()))
    }
}

/// Default A/B/C table. Phase A pretrains on vessel labels at 100× the
/// base rate. For I2I-3D, B trains all outputs on walls with the
/// fine-to-coarse path slowed 100× and C keeps only the top output. C runs at
/// a tenth of the base rate, so restoring the fine-to-coarse multiplier
/// raises that path's step 10× rather than 100×. HED-3D
/// has no coarse-to-fine path to integrate, so B and C both train every side
/// output and the fusion at full rate; C is then a continuation of B.
pub fn default_phases(variant: Variant, m: usize, base_lr: f64, budgets: [u64; 3]) -> Vec<CurriculumPhase> {
    let (all, b_multipliers, top) = match variant {
        Variant::Hed3d => (Supervision::all_with_fused(m), PathMultipliers::ONE, Supervision::all_with_fused(m)),
        Variant::I2i3d => (
            Supervision::all(m),
            PathMultipliers {
                fine_to_coarse: 0.01,
                coarse_to_fine: 1.0,
            },
            Supervision::top_only(m),
        ),
    };
    vec![
        CurriculumPhase {
            name: "A".into(),
            iterations: budgets[0],
            base_lr: 100.0 * base_lr,
            multipliers: PathMultipliers::ONE,
            supervision: all.clone(),
            target: LabelTarget::Vessel,
            stop_on_plateau: false,
        },
        CurriculumPhase {
            name: "B".into(),
            iterations: budgets[1],
            base_lr,
            multipliers: b_multipliers,
            supervision: all,
            target: LabelTarget::Wall,
            stop_on_plateau: true,
        },
        CurriculumPhase {
            name: "C".into(),
            iterations: budgets[2],
            base_lr: base_lr / 10.0,
            multipliers: PathMultipliers::ONE,
            supervision: top,
            target: LabelTarget::Wall,
            stop_on_plateau: false,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample<T: Scalar = f32> {
    pub x: Tensor<T>,
    pub y_wall: Tensor<T>,
    pub y_vessel: Tensor<T>,
}

impl<T: Scalar> TrainingSample<T> {
    pub fn new(x: Tensor<T>, y_wall: Tensor<T>, y_vessel: Tensor<T>) -> Result<Self> {
        for y in [&y_wall, &y_vessel] {
            if y.shape().spatial() != x.shape().spatial() || y.shape().c() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "training_sample",
                    left: x.shape(),
                    right: y.shape(),
                });
            }
        }
        Ok(TrainingSample { x, y_wall, y_vessel })
    }

    fn labels(&self, target: LabelTarget) -> &Tensor<T> {
        match target {
            LabelTarget::Vessel => &self.y_vessel,
            LabelTarget::Wall => &self.y_wall,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub momentum: f64,
    pub decimation_interval: u64,
    pub loss: LossOptions,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            momentum: 0.9,
            decimation_interval: 30_000,
            loss: LossOptions::default(),
            plateau_window: 200,
            plateau_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Global iteration number, continued across phases and resumes.
    pub iteration: u64,
    pub phase: String,
    pub lr: f64,
    pub sample: usize,
    pub report: LossReport,
}

/// True once the mean of the last `window` losses improves on the mean of
/// the window before it by less than `tol` (relative).
pub fn plateaued(losses: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || losses.len() < 2 * window {
        return false;
    }
    let n = losses.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&losses[n - 2 * window..n - window]);
    let last = mean(&losses[n - window..]);
    (prev - last) < tol * prev.abs()
}

/// Owns the parameters and optimizer state across phases.
pub struct Trainer<'n, T: Scalar = f32> {
    pub net: &'n Network,
    pub params: NetworkParams<T>,
    pub config: TrainConfig,
    pub seed: u64,
    /// Next global iteration number.
    pub iteration: u64,
    sgd: Sgd<T>,
}

impl<'n, T: Scalar> Trainer<'n, T> {
    pub fn new(net: &'n Network, params: NetworkParams<T>, config: TrainConfig, seed: u64) -> Result<Self> {
        net.check_params(&params)?;
        Ok(Trainer {
            net,
            params,
            config,
            seed,
            iteration: 0,
            sgd: Sgd::new(config.momentum),
        })
    }

    /// One forward/backward/update step; returns the loss before the update.
    pub fn step(
        &mut self,
        x: &Tensor<T>,
        pyramid: &LabelPyramid<T>,
        phase: &CurriculumPhase,
        lr: f64,
    ) -> Result<LossReport> {
        let mut tape = Tape::new();
        let mult = phase.multipliers;
        let bound = BoundParams::bind(&mut tape, self.net, &self.params, |g| !mult.is_frozen(g))?;
        let xv = tape.constant(x.clone());
        let pass = self.net.forward(&mut tape, &bound, xv)?;
        let opts = LossOptions {
            side_supervision: self.net.spec().side_supervision,
            ..self.config.loss
        };
        let (loss, report) = multiscale_loss(&mut tape, &pass.outputs, pyramid, &phase.supervision, opts)?;
        let grads = tape.backward(loss)?;
        let grads = collect_grads(&bound, &grads);
        self.sgd.step(self.net, &mut self.params, &grads, lr, mult)?;
        Ok(report)
    }

    /// Runs one phase. `on_iter` sees every record as it is produced.
    pub fn run_phase(
        &mut self,
        samples: &[TrainingSample<T>],
        phase: &CurriculumPhase,
        mut on_iter: impl FnMut(&IterationRecord),
    ) -> Result<Vec<IterationRecord>> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let m = self.net.spec().outputs;
        phase.validate(m, self.net.spec().variant == Variant::Hed3d)?;
        let pyramids = samples
            .iter()
            .map(|s| build_label_pyramid(s.labels(phase.target), m))
            .collect::<Result<Vec<_>>>()?;

        let mut records = Vec::new();
        let mut losses = Vec::new();
        let mut order: Vec<usize> = Vec::new();
        for local in 0..phase.iterations {
            let pos = (local % samples.len() as u64) as usize;
            if pos == 0 {
                let epoch = local / samples.len() as u64;
                order = (0..samples.len()).collect();
                let mut rng = seed::rng(self.seed, &format!("order/{}", phase.name), epoch);
                order.shuffle(&mut rng);
            }
            let k = order[pos];
            let lr = lr_schedule(local, phase.base_lr, self.config.decimation_interval);
            let report = self.step(&samples[k].x, &pyramids[k], phase, lr)?;
            if !report.total.is_finite() {
                return Err(Error::Diverged(self.iteration));
            }
            losses.push(report.total);
            let rec = IterationRecord {
                iteration: self.iteration,
                phase: phase.name.clone(),
                lr,
                sample: k,
                report,
            };
            self.iteration += 1;
            on_iter(&rec);
            records.push(rec);
            if phase.stop_on_plateau
                && plateaued(&losses, self.config.plateau_window, self.config.plateau_tolerance)
            {
                break;
            }
        }
        Ok(records)
    }
}

/// Runs the phases in order and returns the final parameters and history.
pub fn run_curriculum<T: Scalar>(
    net: &Network,
    params: NetworkParams<T>,
    samples: &[TrainingSample<T>],
    phases: &[CurriculumPhase],
    config: TrainConfig,
    seed: u64,
) -> Result<(NetworkParams<T>, Vec<IterationRecord>)> {
    if phases.is_empty() {
        return Err(Error::InvalidArgument("no curriculum phases".into()));
    }
    let m = net.spec().outputs;
    for p in phases {
        p.validate(m, net.spec().variant == Variant::Hed3d)?;
    }
    let mut trainer = Trainer::new(net, params, config, seed)?;
    let mut history = Vec::new();
    for p in phases {
        history.extend(trainer.run_phase(samples, p, |_| {})?);
    }
    Ok((trainer.params, history))
}

/// Header for `m` outputs: `iteration,phase,lr,total,l1..lM[,fused]`.
pub fn loss_csv_header(m: usize, fused: bool) -> String {
    let mut cols = vec!["iteration".to_string(), "phase".into(), "lr".into(), "total".into()];
    cols.extend((1..=m).map(|i| format!("l{i}")));
    if fused {
        cols.push("fused".into());
    }
    cols.join(",")
}

/// One CSV row; unsupervised terms are left empty.
pub fn loss_csv_row(rec: &IterationRecord, fused: bool) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    let mut cols = vec![
        rec.iteration.to_string(),
        rec.phase.clone(),
        format!("{:e}", rec.lr),
        format!("{:.9e}", rec.report.total),
    ];
    cols.extend(rec.report.per_output.iter().map(|&v| opt(v)));
    if fused {
        cols.push(opt(rec.report.fused));
    }
    cols.join(",")
}

pub fn write_loss_csv(mut w: impl Write, records: &[IterationRecord], m: usize, fused: bool) -> Result<()> {
    writeln!(w, "{}", loss_csv_header(m, fused))?;
    for r in records {
        writeln!(w, "{}", loss_csv_row(r, fused))?;
    }
    Ok(())
}
