use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use vesselnet::bench::Matcher;
use vesselnet::nets::Variant;
use vesselnet::phantom::Blend;

mod commands;
mod config;

use config::RunConfig;

/// Volumetric vessel-wall detection with HED-3D and I2I-3D.
#[derive(Debug, Parser)]
#[command(name = "vesselnet", version)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic vessel dataset.
    Phantom(PhantomArgs),
    /// Train a network with the phased curriculum.
    Train(TrainArgs),
    /// Predict wall probabilities with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against wall labels (ODS / OIS / AP).
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Number of cases.
    #[arg(long)]
    count: Option<usize>,
    /// Volume extents as D,H,W.
    #[arg(long, value_parser = parse_list::<usize, 3>)]
    extents: Option<[usize; 3]>,
    /// Vessels per case.
    #[arg(long)]
    vessels: Option<usize>,
    /// Radius range as MIN,MAX voxels.
    #[arg(long, value_parser = parse_list::<f64, 2>)]
    radius: Option<[f64; 2]>,
    /// Gaussian noise sigma after blurring.
    #[arg(long)]
    noise: Option<f64>,
    /// Branching probability per centerline step.
    #[arg(long)]
    bifurcation: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `phantom`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Architecture: hed3d or i2i3d.
    #[arg(long)]
    variant: Option<Variant>,
    /// Channel width multiplier in (0, 1].
    #[arg(long)]
    width: Option<f64>,
    /// Phase-B learning rate; phase A uses 100x, phase C a tenth.
    #[arg(long)]
    base_lr: Option<f64>,
    /// Iteration budgets of phases A,B,C.
    #[arg(long, value_parser = parse_list::<u64, 3>)]
    iterations: Option<[u64; 3]>,
    /// Segment extents as D,H,W.
    #[arg(long, value_parser = parse_list::<usize, 3>)]
    segment: Option<[usize; 3]>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with = "init_from")]
    resume: Option<PathBuf>,
    /// Start from the fine-to-coarse layers of another checkpoint.
    #[arg(long)]
    init_from: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// A `.vvol` image or a dataset directory.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Segment extents as D,H,W.
    #[arg(long, value_parser = parse_list::<usize, 3>)]
    segment: Option<[usize; 3]>,
    /// Overlap blending: mean or feather.
    #[arg(long, value_parser = parse_blend)]
    blend: Option<Blend>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory holding `<case>/prob.vvol`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Dataset directory with the wall labels.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Matching tolerance in voxels (default 0.75 % of the diagonal).
    #[arg(long)]
    max_dist: Option<f64>,
    /// Evaluate only within this distance of a vessel.
    #[arg(long)]
    mask_radius: Option<f64>,
    /// Correspondence: optimal or greedy.
    #[arg(long, value_parser = parse_matcher)]
    matcher: Option<Matcher>,
}

fn parse_blend(s: &str) -> Result<Blend, String> {
    match s {
        "mean" => Ok(Blend::Mean),
        "feather" => Ok(Blend::Feather),
        _ => Err(format!("unknown blend {s:?} (mean | feather)")),
    }
}

fn parse_matcher(s: &str) -> Result<Matcher, String> {
    match s {
        "optimal" => Ok(Matcher::Optimal),
        "greedy" => Ok(Matcher::Greedy),
        _ => Err(format!("unknown matcher {s:?} (optimal | greedy)")),
    }
}

/// Parses `a,b,c` into a fixed-length array.
fn parse_list<T, const N: usize>(s: &str) -> Result<[T; N], String>
where
    T: std::str::FromStr + Copy + Default,
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated values, got {}", parts.len()));
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(out)
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut c = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.out = o.clone();
    }
    if let Some(t) = cli.threads {
        c.threads = t;
    }
    match &cli.command {
        Command::Phantom(a) => {
            let s = &mut c.phantom.spec;
            if let Some(n) = a.count {
                c.phantom.count = n;
            }
            if let Some(e) = &a.extents {
                s.extents = *e;
            }
            if let Some(v) = a.vessels {
                s.vessels = v;
            }
            if let Some(r) = &a.radius {
                s.radius = *r;
            }
            if let Some(n) = a.noise {
                s.noise_sigma = n;
            }
            if let Some(b) = a.bifurcation {
                s.bifurcation_probability = b;
            }
        }
        Command::Train(a) => {
            if let Some(d) = &a.data {
                c.train.data = d.clone();
            }
            if let Some(v) = a.variant {
                c.network.variant = v;
            }
            if let Some(w) = a.width {
                c.network.width_multiplier = w;
            }
            if let Some(lr) = a.base_lr {
                c.train.base_lr = lr;
            }
            if let Some(i) = &a.iterations {
                c.train.budgets = *i;
            }
            if let Some(s) = &a.segment {
                c.train.segments.extents = *s;
            }
            if let Some(p) = &a.init_from {
                c.train.init_from = Some(p.clone());
            }
            if let Some(r) = &a.resume {
                c.train.resume = Some(r.clone());
            }
        }
        Command::Predict(a) => {
            if let Some(p) = &a.checkpoint {
                c.predict.checkpoint = p.clone();
            }
            if let Some(p) = &a.input {
                c.predict.input = p.clone();
            }
            if let Some(s) = &a.segment {
                c.predict.segments.extents = *s;
            }
            if let Some(b) = a.blend {
                c.predict.blend = b;
            }
        }
        Command::Eval(a) => {
            if let Some(p) = &a.predictions {
                c.eval.predictions = p.clone();
            }
            if let Some(p) = &a.data {
                c.eval.data = p.clone();
            }
            if let Some(d) = a.max_dist {
                c.eval.max_dist = Some(d);
            }
            if let Some(r) = a.mask_radius {
                c.eval.mask_radius = r;
            }
            if let Some(m) = a.matcher {
                c.eval.matcher = m;
            }
        }
    }
    Ok(c)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = resolve(&cli)?;
    if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global()?;
    }
    match cli.command {
        Command::Phantom(_) => commands::phantom(config),
        Command::Train(_) => commands::train(config),
        Command::Predict(_) => commands::predict(config),
        Command::Eval(_) => commands::eval(config),
    }
}
