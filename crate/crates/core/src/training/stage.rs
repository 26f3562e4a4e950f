use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{StageKind, TrainConfig};
use super::steps::{eos_debias_step, eos_ros, reinforce_step, xent_step, Pair};
use crate::autodiff::Array;
use crate::decoding::{decode_batch, DecodeConfig, Decoded};
use crate::error::{Error, Result};
use crate::metrics::{caption_length, cider, evaluate, CorpusStats, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, CaptionerParams, FrozenMask};
use crate::rng::{substream, Stream};
use crate::synthworld::{render_features, Caption, Sample};

pub const TRACE_HEADER: &str =
    "step,mean_length,unigram_recall,object_recall,chair,capture_f1,cider,coherence_proxy,p_eos,p_ros";

/// Samples with their rendered features.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub samples: Vec<Sample>,
    pub features: Vec<Array>,
}

impl Prepared {
    pub fn new(samples: Vec<Sample>, noise_sigma: f64) -> Self {
        let features = samples.iter().map(|s| render_features(&s.scene, noise_sigma)).collect();
        Self { samples, features }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_full_length(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| caption_length(&s.full) as f64).sum::<f64>() / self.len() as f64
    }

    pub fn mean_short_length(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| caption_length(&s.short) as f64).sum::<f64>() / self.len() as f64
    }
}

/// One probe row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub mean_length: f64,
    pub unigram_recall: f64,
    pub object_recall: f64,
    pub chair: f64,
    pub capture_f1: f64,
    pub cider: f64,
    pub coherence_proxy: f64,
    pub p_eos: f64,
    pub p_ros: f64,
}

impl TraceRecord {
    pub fn from_report(step: usize, report: &MetricsReport, p_eos: f64, p_ros: f64) -> Self {
        Self {
            step,
            mean_length: report.mean_length,
            unigram_recall: report.unigram_recall,
            object_recall: report.object_recall,
            chair: report.chair,
            capture_f1: report.capture_f1,
            cider: report.cider,
            coherence_proxy: report.coherence_proxy,
            p_eos,
            p_ros,
        }
    }

    /// Shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_length,
            self.unigram_recall,
            self.object_recall,
            self.chair,
            self.capture_f1,
            self.cider,
            self.coherence_proxy,
            self.p_eos,
            self.p_ros
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Data(format!("trace row has {} fields: `{line}`", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Data(format!("bad number `{}` in trace row", f[i])))
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad step `{}` in trace row", f[0])))?,
            mean_length: num(1)?,
            unigram_recall: num(2)?,
            object_recall: num(3)?,
            chair: num(4)?,
            capture_f1: num(5)?,
            cider: num(6)?,
            coherence_proxy: num(7)?,
            p_eos: num(8)?,
            p_ros: num(9)?,
        })
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line.trim() != TRACE_HEADER {
                return Err(Error::Data(format!("{}: unexpected trace header", path.display())));
            }
            continue;
        }
        if !line.trim().is_empty() {
            out.push(TraceRecord::from_csv(&line)?);
        }
    }
    Ok(out)
}

fn write_trace(path: &Path, rows: &[TraceRecord]) -> Result<()> {
    let mut text = String::from(TRACE_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_trace(path: &Path, row: &TraceRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path, e))
}

/// A probe decode plus its metrics.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub record: TraceRecord,
    pub decoded: Vec<Decoded>,
}

/// Decodes the probe set and summarises it.
pub fn probe(step: usize, params: &CaptionerParams, set: &Prepared, decode: &DecodeConfig) -> Result<ProbeResult> {
    let decoded = decode_batch(params, &set.features, decode)?;
    let captions: Vec<Caption> = decoded.iter().map(|d| d.caption.clone()).collect();
    let (report, _) = evaluate(&captions, &set.samples)?;
    let (p_eos, p_ros) = eos_ros(&decoded);
    Ok(ProbeResult {
        record: TraceRecord::from_report(step, &report, p_eos, p_ros),
        decoded,
    })
}

/// Where a stage writes checkpoints and its trace.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub dir: PathBuf,
}

impl StageOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn trace_path(&self) -> PathBuf {
        self.dir.join("trace.csv")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step-{step:06}.ckpt"))
    }

    /// Checkpoints present, sorted by step.
    pub fn checkpoints(&self) -> Result<Vec<(usize, PathBuf)>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.dir, e)),
        };
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(step) = name
                .strip_prefix("step-")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse().ok())
            {
                out.push((step, path));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn latest_checkpoint(&self) -> Result<Option<(usize, PathBuf)>> {
        Ok(self.checkpoints()?.pop())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    TargetLength,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub params: CaptionerParams,
    pub trace: Vec<TraceRecord>,
    pub stop: StopReason,
    pub last_step: usize,
}

/// Deterministic sample order: epoch `e` is a fresh shuffle under
/// `(seed, Shuffle, e)`, so any step's batch can be recomputed from the
/// step number alone.
struct Batcher {
    seed: u64,
    n: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Batcher {
    fn new(seed: u64, n: usize) -> Self {
        Self { seed, n, epoch: None }
    }

    fn index(&mut self, global: usize) -> usize {
        let epoch = (global / self.n) as u64;
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut substream(self.seed, Stream::Shuffle, epoch));
            self.epoch = Some((epoch, order));
        }
        self.epoch.as_ref().expect("set above").1[global % self.n]
    }

    /// Sample indices for optimizer step `step` (1-based).
    fn step_indices(&mut self, step: usize, per_step: usize) -> Vec<usize> {
        let start = (step - 1) * per_step;
        (start..start + per_step).map(|g| self.index(g)).collect()
    }
}

fn rollout_seed(seed: u64, step: usize) -> u64 {
    substream(seed, Stream::Rollout, step as u64).random()
}

/// Resolved stop length: explicit, or 2x the mean full-reference length
/// capped by the eval decoder's max length.
pub fn stop_length(config: &TrainConfig, train: &Prepared) -> f64 {
    config
        .stop_mean_length
        .unwrap_or_else(|| (2.0 * train.mean_full_length()).min(config.decode_config_eval.max_length as f64))
}

/// Runs a stage to `max_steps` or until the probe mean length reaches the
/// stop length, probing (and checkpointing, when `output` is set) at step
/// 0 and every `probe_every` steps. With `resume`, continues from the
/// latest checkpoint in `output`.
pub fn run_stage(
    config: &TrainConfig,
    mut params: CaptionerParams,
    train: &Prepared,
    probe_set: &Prepared,
    output: Option<&StageOutput>,
    resume: bool,
) -> Result<StageOutcome> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if probe_set.is_empty() {
        return Err(Error::Data("probe set is empty".into()));
    }
    config.validate(params.dims.vocab_size, crate::model::MAX_DECODE_LENGTH)?;
    params.frozen = if config.bridge_only {
        FrozenMask::bridge_only()
    } else {
        FrozenMask::default()
    };
    let target = stop_length(config, train);
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut start_step = 0usize;

    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        let latest = if resume { out.latest_checkpoint()? } else { None };
        if let Some((step, path)) = latest {
            let loaded = load_checkpoint(&path)?;
            if loaded.dims != params.dims {
                return Err(Error::Checkpoint(format!(
                    "{}: dims {:?} do not match the configured {:?}",
                    path.display(),
                    loaded.dims,
                    params.dims
                )));
            }
            let frozen = params.frozen;
            params = loaded;
            params.frozen = frozen;
            trace = read_trace(&out.trace_path())?
                .into_iter()
                .filter(|r| r.step <= step)
                .collect();
            if trace.last().map(|r| r.step) != Some(step) {
                return Err(Error::Checkpoint(format!(
                    "trace has no row for checkpoint step {step}; cannot resume"
                )));
            }
            write_trace(&out.trace_path(), &trace)?;
            log::info!("resuming {} stage from step {step}", config.stage.name());
            let last = trace.last().expect("checked");
            if step >= config.max_steps || last.mean_length >= target {
                let stop = if last.mean_length >= target {
                    StopReason::TargetLength
                } else {
                    StopReason::MaxSteps
                };
                return Ok(StageOutcome {
                    params,
                    trace,
                    stop,
                    last_step: step,
                });
            }
            start_step = step;
        } else {
            for (_, stale) in out.checkpoints()? {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
            write_trace(&out.trace_path(), &[])?;
        }
    }

    let record = |step: usize, params: &CaptionerParams, trace: &mut Vec<TraceRecord>| -> Result<f64> {
        let r = probe(step, params, probe_set, &config.decode_config_eval)?.record;
        log::info!(
            "{} step {step}: length {:.2}, object recall {:.3}, chair {:.3}, p_eos {:.3}",
            config.stage.name(),
            r.mean_length,
            r.object_recall,
            r.chair,
            r.p_eos
        );
        if let Some(out) = output {
            save_checkpoint(&out.checkpoint_path(step), params)?;
            append_trace(&out.trace_path(), &r)?;
        }
        let len = r.mean_length;
        trace.push(r);
        Ok(len)
    };

    if start_step == 0 {
        let len = record(0, &params, &mut trace)?;
        if len >= target || config.max_steps == 0 {
            let stop = if len >= target {
                StopReason::TargetLength
            } else {
                StopReason::MaxSteps
            };
            return Ok(StageOutcome {
                params,
                trace,
                stop,
                last_step: 0,
            });
        }
    }

    let reward_stats = (config.stage == StageKind::Reinforce).then(|| {
        let refs: Vec<[Caption; 1]> = train.samples.iter().map(|s| [s.full.clone()]).collect();
        (CorpusStats::from_references(refs.iter().map(|r| &r[..])), refs)
    });

    let mut batcher = Batcher::new(config.seed, train.len());
    let per_step = config.samples_per_step();
    for step in start_step + 1..=config.max_steps {
        let idx = batcher.step_indices(step, per_step);
        match config.stage {
            StageKind::Xent => {
                let micro: Vec<Vec<Pair>> = idx
                    .chunks(config.batch_size)
                    .map(|c| {
                        c.iter()
                            .map(|&i| (&train.features[i], &train.samples[i].short))
                            .collect()
                    })
                    .collect();
                xent_step(&mut params, &micro, config.learning_rate)?;
            }
            StageKind::Debias => {
                let feats: Vec<&Array> = idx.iter().map(|&i| &train.features[i]).collect();
                let decode = DecodeConfig {
                    rng_seed: rollout_seed(config.seed, step),
                    ..config.decode_config_train.clone()
                };
                eos_debias_step(&mut params, &feats, &decode, config.eos_target, config.learning_rate)?;
            }
            StageKind::Reinforce => {
                let (stats, refs) = reward_stats.as_ref().expect("built for reinforce");
                let feats: Vec<&Array> = idx.iter().map(|&i| &train.features[i]).collect();
                let decode = DecodeConfig {
                    rng_seed: rollout_seed(config.seed, step),
                    ..config.decode_config_train.clone()
                };
                let reward = |k: usize, c: &Caption| cider(c, &refs[idx[k]], stats);
                reinforce_step(&mut params, &feats, reward, &decode, config.learning_rate)?;
            }
        }
        if step % config.probe_every == 0 || step == config.max_steps {
            let len = record(step, &params, &mut trace)?;
            if len >= target {
                return Ok(StageOutcome {
                    params,
                    trace,
                    stop: StopReason::TargetLength,
                    last_step: step,
                });
            }
        }
    }
    Ok(StageOutcome {
        params,
        trace,
        stop: StopReason::MaxSteps,
        last_step: config.max_steps,
    })
}
