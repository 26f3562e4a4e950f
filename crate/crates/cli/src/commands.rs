use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use eoslab::decoding::{decode_batch, DecodeConfig, Strategy};
use eoslab::metrics::{evaluate, EvalReport, SystemReport};
use eoslab::model::{load_checkpoint, CaptionerParams, ModelDims};
use eoslab::rng::{substream, Stream};
use eoslab::synthworld::{generate_scene, read_dataset, render_features, write_dataset, Caption, Sample};
use eoslab::training::{run_stage, Prepared, StageKind, StageOutput, TrainConfig};
use eoslab::{Error, Result};
use rand::Rng;

use crate::config::{ExperimentConfig, Split};

/// Scene seeds for one split, drawn from the global seed's data stream.
pub fn split_seeds(cfg: &ExperimentConfig, split: Split, n: usize) -> Vec<u64> {
    let mut rng = substream(cfg.seed, Stream::Data, split.stream_index());
    (0..n).map(|_| rng.random()).collect()
}

pub fn gen_data(cfg: &ExperimentConfig, out: &mut impl Write) -> Result<()> {
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir, source: e })?;
    let sizes = [cfg.data.train_size, cfg.data.val_size, cfg.data.probe_size];
    for (split, n) in Split::ALL.into_iter().zip(sizes) {
        let samples = split_seeds(cfg, split, n)
            .into_iter()
            .map(|seed| generate_scene(seed, &cfg.scene).map(Sample::from_scene))
            .collect::<Result<Vec<_>>>()?;
        let path = cfg.split_path(split);
        write_dataset(&path, &samples)?;
        writeln!(out, "{}: {} scenes -> {}", split.name(), n, path.display()).map_err(stdout_err)?;
    }
    Ok(())
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Prepared> {
    let path = cfg.split_path(split);
    if !path.exists() {
        return Err(Error::Precondition(format!(
            "{} does not exist; run `eoslab gen-data` first",
            path.display()
        )));
    }
    Ok(Prepared::new(read_dataset(&path)?, cfg.scene.noise_sigma))
}

/// Loads a checkpoint and checks it against the configured model.
pub fn load_compatible(path: &Path, dims: &ModelDims) -> Result<CaptionerParams> {
    let params = load_checkpoint(path)?;
    if params.dims != *dims {
        return Err(Error::Checkpoint(format!(
            "{}: incompatible model version, checkpoint dims {:?} but the config says {:?}",
            path.display(),
            params.dims,
            dims
        )));
    }
    Ok(params)
}

fn latest(cfg: &ExperimentConfig, kind: StageKind) -> Result<Option<PathBuf>> {
    Ok(StageOutput::new(cfg.stage_dir(kind)).latest_checkpoint()?.map(|(_, p)| p))
}

/// Parses `lr=a,b,c`.
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let values = spec
        .strip_prefix("lr=")
        .ok_or_else(|| Error::Config(format!("sweep `{spec}`: expected lr=a,b,c")))?;
    let lrs = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("sweep: `{v}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if lrs.is_empty() {
        return Err(Error::Config("sweep: no learning rates".into()));
    }
    Ok(lrs)
}

pub struct TrainArgs {
    pub stage: StageKind,
    pub resume: bool,
    pub bridge_only: bool,
    pub sweep: Option<Vec<f64>>,
}

pub fn train(cfg: &ExperimentConfig, args: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let mut stage_cfg = cfg.stage(args.stage).clone();
    stage_cfg.bridge_only |= args.bridge_only;
    let dims = cfg.dims();
    let start = match args.stage {
        StageKind::Xent => CaptionerParams::init(cfg.seed, dims)?,
        StageKind::Debias | StageKind::Reinforce => {
            let path = latest(cfg, StageKind::Xent)?.ok_or_else(|| {
                Error::Precondition(format!(
                    "{} training needs a stage-1 checkpoint in {}; run `eoslab train --stage xent` first",
                    args.stage.name(),
                    cfg.stage_dir(StageKind::Xent).display()
                ))
            })?;
            log::info!("starting from {}", path.display());
            load_compatible(&path, &dims)?
        }
    };
    let train_set = load_split(cfg, Split::Train)?;
    let probe_set = load_split(cfg, Split::Probe)?;

    let runs: Vec<(TrainConfig, PathBuf)> = match &args.sweep {
        None => vec![(stage_cfg, cfg.stage_dir(args.stage))],
        Some(lrs) => lrs
            .iter()
            .map(|&lr| {
                let c = TrainConfig {
                    learning_rate: lr,
                    ..stage_cfg.clone()
                };
                (c, cfg.output_dir.join(format!("{}-lr{lr}", args.stage.name())))
            })
            .collect(),
    };
    for (c, _) in &runs {
        c.validate(dims.vocab_size, eoslab::model::MAX_DECODE_LENGTH)?;
    }
    for (c, dir) in runs {
        let output = StageOutput::new(&dir);
        let done = run_stage(&c, start.clone(), &train_set, &probe_set, Some(&output), args.resume)?;
        let last = done.trace.last().expect("at least the step-0 probe");
        writeln!(
            out,
            "{} lr={} stopped at step {} ({:?}): length {:.2}, object recall {:.3}, chair {:.3}, capture f1 {:.3}, p_eos {:.3} -> {}",
            c.stage.name(),
            c.learning_rate,
            done.last_step,
            done.stop,
            last.mean_length,
            last.object_recall,
            last.chair,
            last.capture_f1,
            last.p_eos,
            dir.display()
        )
        .map_err(stdout_err)?;
    }
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub trivial: bool,
    pub decoding: Option<Strategy>,
    pub output: Option<PathBuf>,
}

fn system(
    name: &str,
    checkpoint: &Path,
    decoding: DecodeConfig,
    dims: &ModelDims,
    set: &Prepared,
) -> Result<SystemReport> {
    let params = load_compatible(checkpoint, dims)?;
    let captions: Vec<Caption> = decode_batch(&params, &set.features, &decoding)?
        .into_iter()
        .map(|d| d.caption)
        .collect();
    let (summary, samples) = evaluate(&captions, &set.samples)?;
    Ok(SystemReport {
        name: name.to_string(),
        checkpoint: Some(checkpoint.display().to_string()),
        decoding,
        summary,
        samples,
    })
}

/// Without `--checkpoint`, evaluates the base (latest stage-1), trivial
/// (base with EOS blocked) and debiased (latest debias) systems.
pub fn eval(cfg: &ExperimentConfig, args: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let mut decoding = cfg.eval_decoding.clone();
    if let Some(s) = args.decoding {
        decoding.strategy = s;
    }
    let trivial = DecodeConfig {
        block_eos: true,
        ..decoding.clone()
    };
    let mut plan: Vec<(&str, PathBuf, DecodeConfig)> = Vec::new();
    match &args.checkpoint {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Precondition(format!("checkpoint {} does not exist", p.display())));
            }
            let d = if args.trivial { trivial } else { decoding };
            plan.push((if args.trivial { "trivial" } else { "checkpoint" }, p.clone(), d));
        }
        None => {
            let base = latest(cfg, StageKind::Xent)?.ok_or_else(|| {
                Error::Precondition(format!(
                    "no stage-1 checkpoint in {}; pass --checkpoint or train first",
                    cfg.stage_dir(StageKind::Xent).display()
                ))
            })?;
            plan.push(("base", base.clone(), decoding.clone()));
            plan.push(("trivial", base, trivial));
            if let Some(d) = latest(cfg, StageKind::Debias)? {
                plan.push(("debiased", d, decoding));
            }
        }
    }
    let set = load_split(cfg, args.split)?;
    let dims = cfg.dims();
    let mut report = EvalReport::new(args.split.name());
    for (name, path, d) in plan {
        report.systems.push(system(name, &path, d, &dims, &set)?);
    }
    let json = report.to_json()?;
    match &args.output {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            fs::write(path, json + "\n").map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            for s in &report.systems {
                let m = &s.summary;
                writeln!(
                    out,
                    "{:<10} length {:6.2}  cider {:.3}  chair {:.3}  recall {:.3}  capture f1 {:.3}  coherence {:.3}",
                    s.name, m.mean_length, m.cider, m.chair, m.object_recall, m.capture_f1, m.coherence_proxy
                )
                .map_err(stdout_err)?;
            }
        }
        None => writeln!(out, "{json}").map_err(stdout_err)?,
    }
    Ok(())
}

/// Decodes one scene under each checkpoint in order. Missing checkpoints
/// are reported and skipped. With no checkpoints listed, uses every
/// stage-1 then every debias checkpoint in the output directory.
pub fn probe_captions(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    scene_seed: u64,
    out: &mut impl Write,
) -> Result<()> {
    let list: Vec<PathBuf> = if checkpoints.is_empty() {
        let mut all = Vec::new();
        for kind in [StageKind::Xent, StageKind::Debias] {
            all.extend(StageOutput::new(cfg.stage_dir(kind)).checkpoints()?.into_iter().map(|(_, p)| p));
        }
        all
    } else {
        checkpoints.to_vec()
    };
    let sample = Sample::from_scene(generate_scene(scene_seed, &cfg.scene)?);
    let features = render_features(&sample.scene, cfg.scene.noise_sigma);
    let dims = cfg.dims();
    writeln!(out, "scene {scene_seed}: {}", sample.full.render()).map_err(stdout_err)?;
    for path in &list {
        if !path.exists() {
            writeln!(out, "{}\tmissing, skipped", path.display()).map_err(stdout_err)?;
            continue;
        }
        let params = load_compatible(path, &dims)?;
        let d = decode_batch(&params, std::slice::from_ref(&features), &cfg.eval_decoding)?;
        writeln!(out, "{}\t{}", path.display(), d[0].caption.render()).map_err(stdout_err)?;
    }
    Ok(())
}
