use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trimodal::checkpoint;
use trimodal::config::ExperimentConfig;
use trimodal::dataset::{self, write_json};
use trimodal::run::{self, EvalRun, PretrainOptions, Protocol, Workers};
use trimodal::{blob, wav, CliError, Result};
use trimodal_core::dsp::{DspConfig, LogMelFrontend};
use trimodal_core::modality::{Modality, ModalitySet};
use trimodal_core::synthdata::LatentSpec;

#[derive(Parser)]
#[command(name = "trimodal", version, about = "Contrastive audio representation learning from video, spectrograms and waveforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory
    #[arg(long, env = "TRIMODAL_OUT")]
    out: PathBuf,
    /// Worker threads; results do not depend on the count
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled trimodal dataset
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings as JSON; the flags below override it
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training clips
        #[arg(long, default_value_t = 400)]
        n: usize,
        /// Test clips, drawn from indices after the training ones
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        audio_cue: Option<f64>,
        #[arg(long)]
        video_cue: Option<f64>,
        #[arg(long)]
        shared_cue: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        clip_len: Option<f64>,
    },
    /// Compute the log-mel spectrogram of a WAV file
    Dsp {
        #[arg(long)]
        input: PathBuf,
        /// Output file
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::A)]
        preset: Preset,
        /// Take the front-end settings from an experiment config instead
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Blob)]
        format: Format,
    },
    /// Contrastive pretraining
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Total schedule length
        #[arg(long)]
        steps: Option<u64>,
        /// Stop early after this many steps, keeping the schedule
        #[arg(long)]
        until: Option<u64>,
        /// Modalities to train, e.g. `--modality s w`
        #[arg(long, num_args = 2..=3)]
        modality: Option<Vec<String>>,
        /// Continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a downstream head on a frozen encoder and report metrics
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Protocol::Linear)]
        protocol: Protocol,
        /// Audio encoder to evaluate: s or w
        #[arg(long, default_value = "s")]
        modality: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment config supplying the eval block
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain on every modality pair and on all three, then probe
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    A,
    B,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Blob,
    Csv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trimodal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_or_default(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common, seed, config, n, n_test, classes, audio_cue, video_cue, shared_cue, noise, clip_len } => {
            let mut spec = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                }
                None => LatentSpec::default(),
            };
            if let Some(v) = classes {
                spec.num_classes = v;
            }
            for (slot, v) in [
                (&mut spec.audio_cue, audio_cue),
                (&mut spec.video_cue, video_cue),
                (&mut spec.shared_cue, shared_cue),
                (&mut spec.noise_level, noise),
                (&mut spec.clip_len, clip_len),
            ] {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            dataset::write_synthetic(&common.out, &spec, seed, n, n_test)?;
            eprintln!("wrote {n} + {n_test} clips to {}", common.out.display());
            Ok(())
        }
        Command::Dsp { input, out, preset, config, format } => {
            let dsp = match config {
                Some(p) => ExperimentConfig::load(&p)?.train.dsp,
                None => match preset {
                    Preset::A => DspConfig::preset_a(),
                    Preset::B => DspConfig::preset_b(),
                    Preset::Desk => DspConfig::desk(),
                },
            };
            let w = wav::read(&input)?;
            let s = LogMelFrontend::new(&dsp, w.sample_rate)?.compute(&w)?;
            match format {
                Format::Blob => {
                    let header = serde_json::json!({ "shape": [s.frames, s.n_mels], "dtype": "f32", "hop": s.frame_hop });
                    blob::write(&out, &header, &blob::f32_bytes(s.data.iter().map(|&v| v as f32)))
                }
                Format::Csv => {
                    let mut w = csv::Writer::from_path(&out).map_err(|e| CliError::Data(e.to_string()))?;
                    for f in 0..s.frames {
                        w.write_record(s.frame(f).iter().map(|v| v.to_string())).map_err(|e| CliError::Data(e.to_string()))?;
                    }
                    w.flush().map_err(|e| CliError::io(&out, e))
                }
            }
        }
        Command::Pretrain { common, config, data, seed, steps, until, modality, resume } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(t) = steps {
                cfg.train.schedule.total_steps = t;
                cfg.train.schedule.warmup_steps = cfg.train.schedule.warmup_steps.min(t.saturating_sub(1));
            }
            if let Some(ms) = modality {
                cfg.train.modalities = ms.concat().parse::<ModalitySet>()?;
            }
            cfg.validate()?;
            let ds = dataset::load(&data, cfg.train.modalities.v)?;
            let clips = ds.clips(dataset::Split::Train);
            let workers = Workers::new(common.threads)?;
            let summary = run::run_pretraining(&cfg, &clips, &common.out, &PretrainOptions { until, resume }, &workers)?;
            if let Some(r) = summary.reports.last() {
                eprintln!("step {} loss {:.4}", summary.state.step(), r.loss.total);
            }
            eprintln!("{} checkpoint(s) in {}", summary.checkpoints.len(), common.out.join("checkpoints").display());
            Ok(())
        }
        Command::Eval { common, checkpoint: ckpt, data, protocol, modality, seed, config } => {
            let cfg = load_or_default(config.as_deref())?;
            let modality: Modality = modality.parse()?;
            let (train_cfg, state) = checkpoint::load(&ckpt)?;
            let ds = dataset::load(&data, false)?;
            let workers = Workers::new(common.threads)?;
            let pc = run::protocol_config(&cfg, protocol, modality, &ds, seed);
            let report = run::evaluate(&state.params, &train_cfg, &pc, &ds, &workers)?;
            for c in &report.skipped_classes {
                eprintln!("warning: class {c} has no positives or no negatives in the test split; left out of the means");
            }
            let out = &common.out;
            let run = EvalRun { protocol, head: pc.classifier.kind, modality, checksum: state.params.checksum(), report };
            run::write_metrics(out, &run)?;
            run::write_feature_cache(&out.join("features.f32"), &state.params, &train_cfg, &pc, &ds, &workers)?;
            eprintln!("accuracy {:.4}, mAP {:?}", run.report.accuracy, run.report.map);
            Ok(())
        }
        Command::Ablate { common, config, data, seed, steps } => {
            let mut cfg = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(t) = steps {
                cfg.train.schedule.total_steps = t;
                cfg.train.schedule.warmup_steps = cfg.train.schedule.warmup_steps.min(t.saturating_sub(1));
            }
            cfg.validate()?;
            let ds = dataset::load(&data, true)?;
            let workers = Workers::new(common.threads)?;
            let rows = run::ablate(&cfg, &ds, &common.out, &workers)?;
            write_json(&common.out.join("ablation.json"), &rows)?;
            for r in rows {
                eprintln!("{:>4}  S {:?}  W {:?}", r.modalities, r.s_accuracy, r.w_accuracy);
            }
            Ok(())
        }
    }
}
