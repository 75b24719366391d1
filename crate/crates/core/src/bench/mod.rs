//! Boundary benchmark: evaluation masking, one-to-one correspondence
//! matching, precision–recall sweeps and ODS / OIS / AP.

mod curve;
mod mask;
mod matching;
mod report;

pub use curve::{
    average_precision, default_max_dist, default_thresholds, f_measure, pr_curve, summarize,
    BenchmarkSummary, Counts, PrCurve,
};
pub use mask::{evaluation_mask, squared_distance_transform};
pub use matching::{match_boundaries, MatchResult, Matcher};
pub use report::{pr_curve_svg, write_benchmark_csv};
