use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vesselnet::bench::{
    default_max_dist, default_thresholds, evaluation_mask, pr_curve, pr_curve_svg, summarize,
    write_benchmark_csv,
};
use vesselnet::nets::{build, load_checkpoint, save_checkpoint, Network, NetworkSpec};
use vesselnet::phantom::{
    generate_dataset, list_cases, read_case, read_vvol, training_samples, whiten, write_vvol,
    Tiling, VoxelType,
};
use vesselnet::train::{loss_csv_header, loss_csv_row, Trainer, TrainingSample};

use crate::config::RunConfig;

/// Progress saved beside every checkpoint so a resumed run continues the
/// iteration count and skips finished phases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub completed_phases: Vec<String>,
}

fn state_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("state.json")
}

fn spec_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("network.json")
}

fn write_config(config: &RunConfig, dir: &Path) -> Result<()> {
    config.save(&dir.join("config.toml"))
}

pub fn phantom(config: RunConfig) -> Result<()> {
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    let paths = generate_dataset(&config.out, &config.phantom.spec, config.phantom.count, config.seed)?;
    write_config(&config, &config.out)?;
    println!("wrote {} cases to {}", paths.len(), config.out.display());
    Ok(())
}

fn load_samples(config: &RunConfig) -> Result<Vec<TrainingSample<f32>>> {
    let data = &config.train.data;
    let cases = list_cases(data).with_context(|| format!("listing dataset {}", data.display()))?;
    if cases.is_empty() {
        bail!("no cases found in {}", data.display());
    }
    let mut samples = Vec::new();
    for dir in &cases {
        let case = read_case(dir).with_context(|| format!("reading {}", dir.display()))?;
        samples.extend(training_samples(&case.sample, &config.train.segments)?);
    }
    if samples.is_empty() {
        bail!(
            "no segment passes the {} wall-fraction filter",
            config.train.segments.min_fraction
        );
    }
    Ok(samples)
}

fn save_with_state(
    net: &Network,
    params: &vesselnet::nets::NetworkParams<f32>,
    state: &TrainState,
    path: &Path,
) -> Result<()> {
    save_checkpoint(params, path)?;
    fs::write(state_path(path), serde_json::to_string_pretty(state)?)?;
    fs::write(spec_path(path), serde_json::to_string_pretty(net.spec())?)?;
    Ok(())
}

pub fn train(mut config: RunConfig) -> Result<()> {
    let out = config.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let phases = config.phases();
    config.train.phases = Some(phases.clone());

    let (net, mut params) = build::<f32>(&config.network, config.seed)?;
    let mut state = TrainState::default();
    if let (Some(_), Some(_)) = (&config.train.resume, &config.train.init_from) {
        bail!("resume and init_from are mutually exclusive");
    }
    if let Some(ckpt) = &config.train.init_from {
        let source = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let copied = params.adopt(&source, "f2c/")?;
        if copied == 0 {
            bail!("{} has no fine-to-coarse layers", ckpt.display());
        }
        println!("initialized {copied} fine-to-coarse layers from {}", ckpt.display());
    }
    if let Some(ckpt) = &config.train.resume {
        params = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        net.check_params(&params)?;
        let sp = state_path(ckpt);
        if sp.is_file() {
            state = serde_json::from_str(&fs::read_to_string(&sp)?)?;
        }
    }
    let samples = load_samples(&config)?;
    write_config(&config, &out)?;

    let m = net.spec().outputs;
    let fused = net.spec().variant == vesselnet::nets::Variant::Hed3d;
    let mut csv = BufWriter::new(File::create(out.join("loss.csv"))?);
    writeln!(csv, "{}", loss_csv_header(m, fused))?;

    let mut trainer = Trainer::new(&net, params, config.train.optimizer, config.seed)?;
    trainer.iteration = state.iteration;
    println!("training {} on {} segment(s)", net.spec().variant, samples.len());
    for phase in &phases {
        if state.completed_phases.contains(&phase.name) {
            continue;
        }
        let mut io_err = None;
        let records = trainer.run_phase(&samples, phase, |r| {
            if let Err(e) = writeln!(csv, "{}", loss_csv_row(r, fused)) {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        state.iteration = trainer.iteration;
        state.completed_phases.push(phase.name.clone());
        save_with_state(&net, &trainer.params, &state, &out.join(format!("phase-{}.ckpt", phase.name)))?;
        match (records.first(), records.last()) {
            (Some(a), Some(b)) => println!(
                "phase {}: {} iterations, loss {:.4e} -> {:.4e}",
                phase.name,
                records.len(),
                a.report.total,
                b.report.total
            ),
            _ => println!("phase {}: 0 iterations", phase.name),
        }
    }
    csv.flush()?;
    save_with_state(&net, &trainer.params, &state, &out.join("model.ckpt"))?;
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

/// Network spec saved by `train` beside the checkpoint, else the configured one.
fn network_for(config: &RunConfig) -> Result<Network> {
    let sp = spec_path(&config.predict.checkpoint);
    let spec: NetworkSpec = if sp.is_file() {
        serde_json::from_str(&fs::read_to_string(&sp)?)?
    } else {
        config.network.clone()
    };
    Ok(Network::new(spec)?)
}

pub fn predict(config: RunConfig) -> Result<()> {
    let net = network_for(&config)?;
    let ckpt = &config.predict.checkpoint;
    let params = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    net.check_params(&params)?;

    let input = &config.predict.input;
    let jobs: Vec<(String, PathBuf)> = if input.is_dir() {
        list_cases(input)?
            .into_iter()
            .map(|d| {
                let name = d.file_name().unwrap().to_string_lossy().into_owned();
                (name, d.join("image.vvol"))
            })
            .collect()
    } else {
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume".into());
        vec![(stem, input.clone())]
    };
    if jobs.is_empty() {
        bail!("no input volumes found at {}", input.display());
    }
    fs::create_dir_all(&config.out)?;
    write_config(&config, &config.out)?;
    let seg = &config.predict.segments;
    for (name, path) in jobs {
        let vol = read_vvol(&path).with_context(|| format!("reading {}", path.display()))?;
        let image = whiten(&vol.data)?;
        let tiling = Tiling::new(image.shape().spatial(), seg.extents, seg.overlap)?;
        let preds = tiling
            .crop(&image)?
            .iter()
            .map(|x| net.predict(&params, x))
            .collect::<vesselnet::Result<Vec<_>>>()?;
        let prob = tiling.stitch(&preds, config.predict.blend)?;
        let dir = config.out.join(&name);
        fs::create_dir_all(&dir)?;
        write_vvol(dir.join("prob.vvol"), &prob, VoxelType::F32, vol.spacing)?;
        println!("{name}: {} segment(s)", tiling.segments.len());
    }
    Ok(())
}

pub fn eval(config: RunConfig) -> Result<()> {
    let e = &config.eval;
    let cases = list_cases(&e.data).with_context(|| format!("listing {}", e.data.display()))?;
    let thresholds = default_thresholds();
    if cases.is_empty() {
        bail!("no cases found in {}", e.data.display());
    }
    let pred_path = |dir: &Path| e.predictions.join(dir.file_name().unwrap()).join("prob.vvol");
    let missing: Vec<String> = cases
        .iter()
        .filter(|d| !pred_path(d).is_file())
        .map(|d| pred_path(d).display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("{} prediction(s) missing:\n  {}", missing.len(), missing.join("\n  "));
    }
    let mut names = Vec::new();
    let mut curves = Vec::new();
    for dir in cases {
        let case = read_case(&dir).with_context(|| format!("reading {}", dir.display()))?;
        let prob = read_vvol(pred_path(&dir))?.data;
        let mask = evaluation_mask(&case.sample.vessel_labels, e.mask_radius)?;
        let max_dist = e
            .max_dist
            .unwrap_or_else(|| default_max_dist(prob.shape().spatial()));
        curves.push(pr_curve(&prob, &case.sample.wall_labels, Some(&mask), &thresholds, max_dist, e.matcher)?);
        names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
    }
    let summary = summarize(&curves)?;
    fs::create_dir_all(&config.out)?;
    write_config(&config, &config.out)?;
    let mut csv = BufWriter::new(File::create(config.out.join("eval.csv"))?);
    write_benchmark_csv(&mut csv, &names, &curves, &summary)?;
    csv.flush()?;
    fs::write(config.out.join("pr.svg"), pr_curve_svg(&[("model".into(), &summary)]))?;
    fs::write(config.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{} volume(s): ODS {:.4} (t = {:.2})  OIS {:.4}  AP {:.4}",
        names.len(),
        summary.ods,
        summary.ods_threshold,
        summary.ois,
        summary.ap
    );
    Ok(())
}
