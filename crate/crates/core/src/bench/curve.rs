use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{match_boundaries, Matcher};

/// `0.99, 0.98, …, 0.01`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=99).rev().map(|k| k as f64 / 100.0).collect()
}

/// Matching tolerance of 0.75 % of the volume diagonal.
pub fn default_max_dist(extents: [usize; 3]) -> f64 {
    0.0075 * extents.iter().map(|&e| (e * e) as f64).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Counts per threshold, thresholds in descending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub counts: Vec<Counts>,
}

impl PrCurve {
    pub fn precision(&self) -> Vec<f64> {
        self.counts.iter().map(Counts::precision).collect()
    }

    pub fn recall(&self) -> Vec<f64> {
        self.counts.iter().map(Counts::recall).collect()
    }

    pub fn f_measure(&self) -> Vec<f64> {
        self.counts.iter().map(Counts::f_measure).collect()
    }
}

/// Thresholds `prob >= t` inside `mask` and matches against `gt` inside
/// `mask`, once per threshold.
pub fn pr_curve(
    prob: &Tensor<f32>,
    gt: &Tensor<f32>,
    mask: Option<&Tensor<f32>>,
    thresholds: &[f64],
    max_dist: f64,
    matcher: Matcher,
) -> Result<PrCurve> {
    if prob.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
    }
    if let Some(m) = mask {
        if m.shape() != gt.shape() {
            return Err(Error::ShapeMismatch {
                op: "pr_curve",
                left: gt.shape(),
                right: m.shape(),
            });
        }
    }
    let inside = |i: usize| mask.is_none_or(|m| m.data()[i] != 0.0);
    let gt_masked = Tensor::new(
        gt.shape(),
        gt.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v != 0.0 && inside(i) { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let counts = thresholds
        .par_iter()
        .map(|&t| {
            let pred = Tensor::new(
                prob.shape(),
                prob.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| if p as f64 >= t && inside(i) { 1.0 } else { 0.0 })
                    .collect(),
            )?;
            let m = match_boundaries(&pred, &gt_masked, max_dist, matcher)?;
            Ok(Counts {
                tp: m.tp,
                fp: m.fp,
                fn_: m.fn_,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrCurve {
        thresholds: thresholds.to_vec(),
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub ods: f64,
    pub ods_threshold: f64,
    /// Best pooled F over every choice of one threshold per volume.
    pub ois: f64,
    /// Threshold each volume uses to reach `ois`.
    pub per_volume_thresholds: Vec<f64>,
    /// Pooled F with each volume at its own best-F threshold, chosen
    /// independently. Can fall below `ods`.
    pub ois_independent: f64,
    pub ap: f64,
    /// Dataset-aggregated counts per threshold.
    pub aggregate: PrCurve,
}

/// Area under the interpolated precision–recall curve, anchored at recall 0.
pub fn average_precision(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    // Interpolated precision: best precision at this recall or beyond.
    for i in (0..pts.len().saturating_sub(1)).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    let Some(&(_, p0)) = pts.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let mut prev = (0.0, p0);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

/// Per-volume threshold indices maximizing pooled F = Σ2tp / Σ(2tp + fp + fn)
/// by Dinkelbach iteration; each step is a separate argmax per volume and
/// the ratio never decreases from `start`.
fn best_selection(curves: &[PrCurve], start: Vec<usize>) -> Vec<usize> {
    let ratio = |sel: &[usize]| {
        let (a, b) = curves.iter().zip(sel).fold((0usize, 0usize), |(a, b), (c, &k)| {
            let n = c.counts[k];
            (a + 2 * n.tp, b + 2 * n.tp + n.fp + n.fn_)
        });
        if b == 0 {
            1.0
        } else {
            a as f64 / b as f64
        }
    };
    let mut sel = start;
    let mut lambda = ratio(&sel);
    for _ in 0..1000 {
        let next: Vec<usize> = curves
            .iter()
            .zip(&sel)
            .map(|(c, &cur)| {
                let score = |k: usize| {
                    let n = c.counts[k];
                    2.0 * n.tp as f64 - lambda * (2 * n.tp + n.fp + n.fn_) as f64
                };
                (0..c.counts.len()).fold(cur, |best, k| if score(k) > score(best) { k } else { best })
            })
            .collect();
        let l = ratio(&next);
        if l <= lambda {
            break;
        }
        sel = next;
        lambda = l;
    }
    sel
}

pub fn summarize(curves: &[PrCurve]) -> Result<BenchmarkSummary> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidArgument("no curves to summarize".into()))?;
    if curves.iter().any(|c| c.thresholds != first.thresholds) {
        return Err(Error::InvalidArgument("curves use different thresholds".into()));
    }
    if first.thresholds.is_empty() {
        return Err(Error::InvalidArgument("curves have no thresholds".into()));
    }
    let n = first.thresholds.len();
    let aggregate = PrCurve {
        thresholds: first.thresholds.clone(),
        counts: (0..n)
            .map(|k| curves.iter().fold(Counts::default(), |acc, c| acc.add(c.counts[k])))
            .collect(),
    };
    let argmax = |f: &[f64]| {
        (0..f.len()).fold(0, |best, k| if f[k] > f[best] { k } else { best })
    };
    let agg_f = aggregate.f_measure();
    let k_ods = argmax(&agg_f);

    let independent: Vec<usize> = curves.iter().map(|c| argmax(&c.f_measure())).collect();
    let pooled = |sel: &[usize]| {
        curves
            .iter()
            .zip(sel)
            .fold(Counts::default(), |acc, (c, &k)| acc.add(c.counts[k]))
    };
    let ois_independent = pooled(&independent).f_measure();
    let shared = vec![k_ods; curves.len()];
    let start = if ois_independent >= agg_f[k_ods] { independent } else { shared };
    let selection = best_selection(curves, start);
    let ois = pooled(&selection).f_measure();
    let per_volume_thresholds = curves.iter().zip(&selection).map(|(c, &k)| c.thresholds[k]).collect();

    let points: Vec<_> = aggregate.recall().into_iter().zip(aggregate.precision()).collect();
    Ok(BenchmarkSummary {
        ods: agg_f[k_ods],
        ods_threshold: aggregate.thresholds[k_ods],
        ois,
        per_volume_thresholds,
        ois_independent,
        ap: average_precision(&points),
        aggregate,
    })
}
