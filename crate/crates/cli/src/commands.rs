use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use stan_core::io::{atomic_write, read_string};
use stan_core::manifest::{base_dir, load_clip, Manifest};
use stan_core::model::{load_checkpoint, write_checkpoint, AnyModel, VideoModel};
use stan_core::saliency::{
    classify_frames, extend_scores, frame_scores, render_overlay, ExplainConfig, GradTarget, Method,
    Sidecar, SmoothGradParams,
};
use stan_core::synth::{write_dataset, SynthConfig};
use stan_core::tensor::serialize::encode_tensor;
use stan_core::train::{
    argmax, cell_csv, check_fits, evaluate_holdout, metrics_report, model_config, prepare_clip, render_tables,
    run_experiment_grid, to_csv, train_holdout, GridConfig, MetricsReport, TrainConfig, TrainRecord,
};
use stan_core::{Error, Result};

use crate::{Cli, Command, EvalArgs, ExplainArgs, ExplainOpts, GenDataArgs, ReportArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
}

fn json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Where `train` puts the record belonging to a checkpoint.
pub fn record_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.json")
}

fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    Ok((Manifest::read(path)?, base_dir(path)))
}

fn load_trained(path: &Path) -> Result<(AnyModel, TrainRecord)> {
    let model = load_checkpoint(path)?;
    let record: TrainRecord = read_json(&record_path(path))?;
    if record.train.model != model.kind() {
        return Err(Error::Checkpoint(format!(
            "record says {} model, checkpoint holds {}",
            record.train.model,
            model.kind()
        )));
    }
    Ok((model, record))
}

fn explain_config(o: &ExplainOpts) -> Result<ExplainConfig> {
    if o.n_samples == 0 || !(o.sigma >= 0.0) {
        return Err(Error::Argument("SmoothGrad needs n_samples >= 1 and sigma >= 0".into()));
    }
    Ok(ExplainConfig {
        target: o.target.parse::<GradTarget>()?,
        smoothgrad: SmoothGradParams {
            n_samples: o.n_samples,
            sigma: o.sigma,
            seed: o.noise_seed,
        },
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let m = write_dataset(&cfg, &a.out)?;
    log::info!("wrote {} clips to {}", m.clips.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (manifest, base) = load_manifest(&a.manifest)?;
    let mut cfg: TrainConfig = match &a.train_config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    cfg.model = a.model.parse()?;
    cfg.view = a.view.parse()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (model, record) = train_holdout(&manifest, &base, &cfg)?;
    log::info!("final training loss {:.4}", record.log.final_loss());
    atomic_write(&a.out, &write_checkpoint(&model)?)?;
    atomic_write(&record_path(&a.out), &json(&record))
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let cfg = explain_config(&a.opts)?;
    let (manifest, base) = load_manifest(&a.manifest)?;
    let (model, record) = load_trained(&a.checkpoint)?;
    let config = model.config();
    check_fits(&config, &manifest)?;
    let entry = manifest.find(&a.clip)?;
    let p = prepare_clip(entry, &load_clip(&base, entry)?, &config, record.train.view, &record.train)?;
    let class = match a.class {
        Some(c) if c >= model.num_classes() => {
            return Err(Error::Argument(format!("class {c} out of range for {} classes", model.num_classes())))
        }
        Some(c) => c,
        None => argmax(&model.predict(&p.input)?),
    };
    let volume = p.explain(&model, class, method, &cfg)?;
    let series = frame_scores(&volume)?;
    let scores = match &p.sampled {
        Some(m) => extend_scores(&series.scores, &m.indices, m.length)?,
        None => series.scores,
    };
    let important = a.threshold.map(|t| classify_frames(&scores, t));
    let sidecar = Sidecar {
        method,
        class,
        threshold: a.threshold,
        sampled_indices: p.sampled.as_ref().map(|m| m.indices.clone()),
        important_frames: important
            .as_ref()
            .map(|v| v.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()),
    };
    let mut csv = String::from("frame,score\n");
    for (i, s) in scores.iter().enumerate() {
        csv.push_str(&format!("{i},{s}\n"));
    }
    let stem = format!("{}.{}", a.clip, method);
    let tensor = encode_tensor(&volume.values)?;
    let overlay = render_overlay(&p.input, &volume)?;
    atomic_write(&a.out.join(format!("{stem}.saliency.stnt")), &tensor)?;
    atomic_write(&a.out.join(format!("{stem}.scores.csv")), csv.as_bytes())?;
    atomic_write(&a.out.join(format!("{stem}.overlay.ppm")), &overlay)?;
    atomic_write(&a.out.join(format!("{stem}.json")), &json(&sidecar))
}

/// Every file of an evaluation run, written only once all are computed.
struct EvalFiles {
    report: MetricsReport,
    video: Vec<u8>,
    frames: Vec<u8>,
    extra: Vec<(String, Vec<u8>)>,
}

fn write_eval(out: &Path, f: EvalFiles) -> Result<()> {
    for cell in &f.report.cells {
        atomic_write(&out.join(format!("metrics_{}_{}.csv", cell.model, cell.view)), &cell_csv(cell)?)?;
    }
    for (name, bytes) in &f.extra {
        atomic_write(&out.join(name), bytes)?;
    }
    atomic_write(&out.join("video_predictions.csv"), &f.video)?;
    atomic_write(&out.join("frame_predictions.csv"), &f.frames)?;
    atomic_write(&out.join("tables.txt"), render_tables(std::slice::from_ref(&f.report)).as_bytes())?;
    atomic_write(&out.join("report.json"), f.report.to_json().as_bytes())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (manifest, base) = load_manifest(&a.manifest)?;
    let files = match &a.grid {
        Some(g) => {
            let grid: GridConfig = read_toml(g)?;
            grid.validate()?;
            for &kind in &grid.models {
                let frames = manifest.clips.first().map_or(0, |c| c.frames);
                check_fits(&model_config(kind, &manifest, frames, &grid.train)?, &manifest)?;
            }
            let out = run_experiment_grid(&manifest, &base, &grid)?;
            let logs: Vec<serde_json::Value> = out
                .logs
                .iter()
                .map(|(m, v, f, l)| serde_json::json!({"model": m, "view": v, "fold": f, "log": l}))
                .collect();
            EvalFiles {
                video: to_csv(&out.video)?,
                frames: to_csv(&out.frames)?,
                extra: vec![("train_logs.json".into(), json(&logs))],
                report: out.report,
            }
        }
        None => {
            let methods = a
                .methods
                .split(',')
                .map(|m| m.trim().parse::<Method>())
                .collect::<Result<Vec<_>>>()?;
            let cfg = explain_config(&a.opts)?;
            let trained = a
                .checkpoint
                .iter()
                .map(|p| load_trained(p))
                .collect::<Result<Vec<_>>>()?;
            for (m, _) in &trained {
                check_fits(&m.config(), &manifest)?;
            }
            let (mut cells, mut video, mut frames) = (Vec::new(), Vec::new(), Vec::new());
            for (model, record) in &trained {
                let (cell, out) = evaluate_holdout(model, record, &manifest, &base, &methods, &cfg)?;
                cells.push(cell);
                video.extend(out.video);
                frames.extend(out.frames);
            }
            let seq = manifest.clips.first().map_or(0, |c| c.frames);
            EvalFiles {
                report: metrics_report(&manifest, seq, "train/test split".into(), cells),
                video: to_csv(&video)?,
                frames: to_csv(&frames)?,
                extra: Vec::new(),
            }
        }
    };
    write_eval(&a.out, files)
}

fn report(a: ReportArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(&a.runs)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "report.json")
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!("no report.json under {}", a.runs.display())));
    }
    let reports = paths
        .iter()
        .map(|p| MetricsReport::from_json(&read_string(p)?))
        .collect::<Result<Vec<_>>>()?;
    atomic_write(&a.out, render_tables(&reports).as_bytes())
}
