//! Pretraining runs, downstream evaluation and the modality ablation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trimodal_core::diffmath::Tensor;
use trimodal_core::dsp::LogMelFrontend;
use trimodal_core::evaluate::{
    extract_frozen_features, run_protocol, ClassifierKind, FrozenEncoder, LabeledClips, MetricsReport, ProtocolConfig,
};
use trimodal_core::modality::{Modality, ModalitySet};
use trimodal_core::model::ModelParams;
use trimodal_core::trainer::{BatchMap, Clip, Sequential, StepReport, TrainConfig, TrainState, Trainer};

use crate::blob;
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{write_json, Dataset, Split};
use crate::error::{CliError, Result};

/// Worker pool for per-sample work. Results come back in index order, so
/// gradients are summed in the same order whatever the thread count.
pub enum Workers {
    Single(Sequential),
    Pool(rayon::ThreadPool),
}

impl Workers {
    pub fn new(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Workers::Single(Sequential));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map(Workers::Pool)
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))
    }
}

impl BatchMap for Workers {
    fn map<T, F>(&self, n: usize, f: F) -> trimodal_core::Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> trimodal_core::Result<T> + Sync + Send,
    {
        match self {
            Workers::Single(s) => s.map(n, f),
            Workers::Pool(p) => p.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Stop after this many completed steps without touching the schedule.
    pub until: Option<u64>,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub state: TrainState,
    pub reports: Vec<StepReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs (or resumes) pretraining, writing `config.json`, `loss.jsonl` and
/// `checkpoints/step_*.ckpt` under `out`. A fresh run always writes the
/// step-0 checkpoint.
pub fn run_pretraining<M: BatchMap>(
    cfg: &ExperimentConfig,
    data: &[Clip],
    out: &Path,
    opts: &PretrainOptions,
    mapper: &M,
) -> Result<PretrainSummary> {
    cfg.validate()?;
    let first = data.first().ok_or_else(|| CliError::Data("no training clips".into()))?;
    let trainer = Trainer::new(cfg.train.clone(), first.waveform.sample_rate)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let log_path = out.join("loss.jsonl");

    let mut checkpoints = Vec::new();
    let mut state = match &opts.resume {
        Some(p) => {
            let (saved, st) = checkpoint::load(p)?;
            if saved != cfg.train {
                return Err(CliError::Config(format!("{} was written by a different training config", p.display())));
            }
            truncate_log(&log_path, st.step())?;
            st
        }
        None => {
            let st = TrainState::init(&cfg.train)?;
            let _ = fs::remove_file(&log_path);
            let p = checkpoint::path_for(&ckpt_dir, 0);
            checkpoint::save(&p, &cfg.train, &st)?;
            checkpoints.push(p);
            st
        }
    };
    let total = cfg.train.schedule.total_steps;
    let end = opts.until.map_or(total, |u| u.min(total));
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut reports = Vec::new();
    while state.step() < end {
        let r = trainer.train_step(data, &mut state, mapper)?;
        let done = state.step();
        if done % cfg.run.log_every == 0 || done == end {
            let line = serde_json::to_string(&r).map_err(|e| CliError::Data(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| CliError::io(&log_path, e))?;
        }
        if done % cfg.run.checkpoint_every == 0 || done == end {
            let p = checkpoint::path_for(&ckpt_dir, done);
            checkpoint::save(&p, &cfg.train, &state)?;
            checkpoints.push(p);
        }
        reports.push(r);
    }
    Ok(PretrainSummary { state, reports, checkpoints })
}

/// Drops log lines for steps at or after `step` so a resumed run does not
/// repeat them.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let kept: String = text
        .lines()
        .filter(|l| serde_json::from_str::<StepReport>(l).is_ok_and(|r| r.step < step))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| CliError::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// MLP head, on-the-fly augmentation, ten-way sub-clip averaging.
    Audioset,
    /// Linear head on frozen 1 s sub-clip features.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub protocol: Protocol,
    pub head: ClassifierKind,
    pub modality: Modality,
    pub checksum: String,
    pub report: MetricsReport,
}

pub fn protocol_config(cfg: &ExperimentConfig, protocol: Protocol, modality: Modality, data: &Dataset, seed: u64) -> ProtocolConfig {
    let c = data.num_classes;
    let mut pc = match protocol {
        Protocol::Linear => ProtocolConfig::linear(modality, c, seed),
        Protocol::Audioset => {
            let mut pc = ProtocolConfig::audioset(modality, c, seed);
            let multi = data.is_multi_label();
            pc.classifier.multi_label = multi;
            pc.classifier.class_balanced = multi;
            pc
        }
    };
    if let Some(cl) = &cfg.eval.classifier {
        pc.classifier = cl.clone();
    }
    pc.mixup = cfg.eval.mixup.clone();
    pc.shift = cfg.eval.shift.clone();
    pc
}

/// Trains a downstream head on the frozen encoder and scores the test
/// split. The upstream checksum is verified to be unchanged.
pub fn evaluate<M: BatchMap>(
    params: &ModelParams,
    train_cfg: &TrainConfig,
    pc: &ProtocolConfig,
    data: &Dataset,
    mapper: &M,
) -> Result<MetricsReport> {
    let before = params.checksum();
    let sr = data.items[0].clip.waveform.sample_rate;
    let frontend = LogMelFrontend::new(&train_cfg.dsp, sr)?;
    let enc = FrozenEncoder::new(params, &train_cfg.model, &frontend, pc.modality)?;
    let (trw, trl) = (data.waveforms(Split::Train), data.labels(Split::Train));
    let (tew, tel) = (data.waveforms(Split::Test), data.labels(Split::Test));
    if trw.is_empty() || tew.is_empty() {
        return Err(CliError::Data("evaluation needs both train and test clips".into()));
    }
    let (_, report) = run_protocol(
        &enc,
        pc,
        &LabeledClips { clips: &trw, labels: &trl },
        &LabeledClips { clips: &tew, labels: &tel },
        mapper,
    )?;
    if params.checksum() != before {
        return Err(CliError::Integrity("upstream parameters changed during downstream training".into()));
    }
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    shape: [usize; 2],
    dtype: String,
    modality: Modality,
    clip_ids: Vec<String>,
    windows_per_clip: Vec<usize>,
}

/// Frozen features of every test-split sub-clip window as an f32 blob.
pub fn write_feature_cache<M: BatchMap>(
    path: &Path,
    params: &ModelParams,
    train_cfg: &TrainConfig,
    pc: &ProtocolConfig,
    data: &Dataset,
    mapper: &M,
) -> Result<()> {
    let sr = data.items[0].clip.waveform.sample_rate;
    let frontend = LogMelFrontend::new(&train_cfg.dsp, sr)?;
    let enc = FrozenEncoder::new(params, &train_cfg.model, &frontend, pc.modality)?;
    let items: Vec<_> = data.split(Split::Test).collect();
    let feats: Vec<Vec<Tensor>> = mapper.map(items.len(), |i| extract_frozen_features(&enc, &items[i].clip.waveform, pc.protocol))?;
    let dim = feats.iter().flatten().next().map_or(0, Tensor::numel);
    let header = FeatureHeader {
        shape: [feats.iter().map(Vec::len).sum(), dim],
        dtype: "f32".into(),
        modality: pc.modality,
        clip_ids: items.iter().map(|i| i.id.clone()).collect(),
        windows_per_clip: feats.iter().map(Vec::len).collect(),
    };
    let payload = blob::f32_bytes(feats.iter().flatten().flat_map(|t| t.data().iter().map(|&v| v as f32)));
    blob::write(path, &header, &payload)
}

/// Writes `metrics.json` and a one-row `metrics.csv`.
pub fn write_metrics(out: &Path, run: &EvalRun) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_json(&out.join("metrics.json"), run)?;
    let mut w = csv::Writer::from_path(out.join("metrics.csv")).map_err(|e| CliError::Data(e.to_string()))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let r = &run.report;
    let rows = [
        ["protocol", "modality", "mAP", "AUC", "d_prime", "accuracy", "num_eval_clips"].map(String::from),
        [
            format!("{:?}", run.protocol).to_lowercase(),
            run.modality.letter().to_string(),
            opt(r.map),
            opt(r.auc),
            opt(r.d_prime),
            r.accuracy.to_string(),
            r.num_eval_clips.to_string(),
        ],
    ];
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(out, e))
}

/// One row of the modality study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modalities: String,
    pub seed: u64,
    pub steps: u64,
    /// Mean loss per modality pair over the last tenth of training.
    pub final_pair_loss: f64,
    pub s_accuracy: Option<f64>,
    pub w_accuracy: Option<f64>,
}

pub const ABLATION_SUBSETS: [&str; 4] = ["SW", "SV", "WV", "SVW"];

/// Pretrains once per modality subset and linear-probes every audio
/// encoder the subset trained. Each subset's run lands in `out/<subset>/`.
pub fn ablate<M: BatchMap>(cfg: &ExperimentConfig, data: &Dataset, out: &Path, mapper: &M) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for name in ABLATION_SUBSETS {
        let set: ModalitySet = name.parse()?;
        let mut c = cfg.clone();
        c.train.modalities = set;
        c.run.checkpoint_every = c.train.schedule.total_steps.max(1);
        let clips: Vec<Clip> = data
            .split(Split::Train)
            .map(|i| Clip { waveform: i.clip.waveform.clone(), video: if set.v { i.clip.video.clone() } else { None } })
            .collect();
        let summary = run_pretraining(&c, &clips, &out.join(name), &PretrainOptions::default(), mapper)?;
        let tail = (summary.reports.len() / 10).max(1).min(summary.reports.len());
        let pairs = (set.len() * (set.len() - 1) / 2) as f64;
        let final_pair_loss = if summary.reports.is_empty() {
            f64::NAN
        } else {
            summary.reports[summary.reports.len() - tail..].iter().map(|r| r.loss.total).sum::<f64>() / tail as f64 / pairs
        };
        let acc = |m: Modality| -> Result<Option<f64>> {
            if !set.contains(m) {
                return Ok(None);
            }
            let pc = protocol_config(&c, Protocol::Linear, m, data, c.train.seed);
            Ok(Some(evaluate(&summary.state.params, &c.train, &pc, data, mapper)?.accuracy))
        };
        let (s_accuracy, w_accuracy) = (acc(Modality::S)?, acc(Modality::W)?);
        rows.push(AblationRow {
            modalities: name.into(),
            seed: c.train.seed,
            steps: c.train.schedule.total_steps,
            final_pair_loss,
            s_accuracy,
            w_accuracy,
        });
    }
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
