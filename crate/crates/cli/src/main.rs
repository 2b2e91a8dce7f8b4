//! `mixsep` command line.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 runtime fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use log::info;

use mixsep::dataset::{load_dataset, Split, SplitRatio};
use mixsep::diffusion::{SamplerConfig, SamplerKind};
use mixsep::eval::{comparison_table, evaluate, DiffusionSeparator, MetricsReport, Separator};
use mixsep::export::{export_midi, midi_mixture, separate_song};
use mixsep::ingest::{dataset_file_name, ingest};
use mixsep::midi::parse_midi;
use mixsep::model::{Checkpoint, FinalDecoder, ModelKind};
use mixsep::phrase::quantize_to_roll;
use mixsep::render::{render_png, RenderSpec};
use mixsep::roll::{Pianoroll, RollDims, STEPS_PER_BAR, TIME_STEPS};
use mixsep::training::{train, TrainConfig, TrainedModel};
use mixsep::{DType, Device, Error};

const USAGE: u8 = 2;
const FAULT: u8 = 3;

#[derive(Parser)]
#[command(name = "mixsep", version, about = "Assign instruments to the notes of a MIDI mixture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a directory of MIDI files into train/valid/test dataset files.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "90/5/5")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a denoiser, final decoder or VAE.
    Train {
        #[arg(long)]
        model: String,
        /// Directory written by `ingest`.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Separate the notes of a MIDI file into five instruments.
    Separate {
        #[arg(long)]
        mixture: PathBuf,
        /// Denoiser or VAE checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        decoder_checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "ddim")]
        sampler: String,
        #[arg(long, default_value_t = 50)]
        ddim_steps: usize,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints on a dataset file.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        decoder_checkpoint: Option<PathBuf>,
        /// Samplers used for each denoiser checkpoint.
        #[arg(long, num_args = 1.., default_value = "ddim")]
        sampler: Vec<String>,
        #[arg(long, default_value_t = 50)]
        ddim_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a generated phrase above its original as a PNG.
    Render {
        /// MIDI file or dataset file.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        original: PathBuf,
        /// Phrase index, for dataset files.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// First bar of the window, for MIDI files.
        #[arg(long, default_value_t = 0)]
        start_bar: usize,
        #[arg(long, default_value_t = 2)]
        scale: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: USAGE,
        error: error.into(),
    }
}

/// Runtime faults exit 3, everything else 2.
fn classify(error: anyhow::Error) -> Failure {
    let code = match error.downcast_ref::<Error>() {
        Some(
            Error::TrainingFault { .. } | Error::SamplingFault { .. } | Error::Numeric(_) | Error::Tensor(_),
        ) => FAULT,
        _ => USAGE,
    };
    Failure { code, error }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Ingest { input, out, split, seed } => cmd_ingest(&input, &out, &split, seed),
        Command::Train { model, data, config, out } => cmd_train(&model, &data, config.as_deref(), &out),
        Command::Separate {
            mixture,
            checkpoint,
            decoder_checkpoint,
            sampler,
            ddim_steps,
            eta,
            seed,
            out,
        } => sampler_config(&sampler, ddim_steps, eta, seed)
            .and_then(|cfg| cmd_separate(&mixture, &checkpoint, decoder_checkpoint.as_deref(), cfg, &out)),
        Command::Evaluate {
            data,
            checkpoints,
            decoder_checkpoint,
            sampler,
            ddim_steps,
            seed,
            batch_size,
            out,
        } => cmd_evaluate(
            &data,
            &checkpoints,
            decoder_checkpoint.as_deref(),
            &sampler,
            ddim_steps,
            seed,
            batch_size,
            &out,
        ),
        Command::Render {
            sample,
            original,
            index,
            start_bar,
            scale,
            out,
        } => cmd_render(&sample, &original, index, start_bar, scale, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_ingest(input: &Path, out: &Path, split: &str, seed: u64) -> CmdResult {
    let ratio: SplitRatio = split.parse().map_err(usage)?;
    if !input.is_dir() {
        return Err(usage(anyhow!("{} is not a directory", input.display())));
    }
    let report = ingest(input, out, ratio, seed).map_err(|e| classify(e.into()))?;
    print!("{}", report.to_text());
    if report.eligible == 0 {
        return Err(usage(anyhow!(
            "no eligible MIDI files among {} in {}",
            report.files_seen,
            input.display()
        )));
    }
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> anyhow::Result<Vec<mixsep::phrase::Phrase>> {
    let path = dir.join(dataset_file_name(split));
    let (_, phrases) = load_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(phrases)
}

fn cmd_train(model: &str, data: &Path, config: Option<&Path>, out: &Path) -> CmdResult {
    let kind: ModelKind = model.parse().map_err(usage)?;
    let text = match config {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(usage)?,
        None => String::new(),
    };
    let cfg = TrainConfig::parse(kind, &text)
        .with_context(|| format!("bad training config{}", config.map(|p| format!(" {}", p.display())).unwrap_or_default()))
        .map_err(usage)?;
    let train_set = load_split(data, Split::Train).map_err(usage)?;
    let valid_set = load_split(data, Split::Valid).map_err(usage)?;
    std::fs::create_dir_all(out).map_err(usage)?;
    info!("training {kind} on {} phrases, validating on {}", train_set.len(), valid_set.len());
    let outcome = match train(&train_set, &valid_set, &cfg, Some(out)) {
        Ok(o) => o,
        Err(Error::TrainingFault {
            epoch,
            message,
            last_checkpoint,
        }) => {
            let kept = last_checkpoint
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into());
            return Err(Failure {
                code: FAULT,
                error: anyhow!("training fault in epoch {epoch}: {message}; last checkpoint: {kept}"),
            });
        }
        Err(e) => return Err(classify(e.into())),
    };
    for path in &outcome.report.checkpoints {
        println!("checkpoint {}", path.display());
    }
    println!(
        "best epoch {} valid loss {}",
        outcome.report.best_epoch, outcome.report.best_valid_loss
    );
    Ok(())
}

fn sampler_config(kind: &str, ddim_steps: usize, eta: f64, seed: u64) -> std::result::Result<SamplerConfig, Failure> {
    let kind: SamplerKind = kind.parse().map_err(usage)?;
    Ok(SamplerConfig {
        kind,
        ddim_steps,
        eta,
        seed,
    })
}

fn load_model(path: &Path) -> std::result::Result<TrainedModel, Failure> {
    let ck = Checkpoint::load(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))
        .map_err(usage)?;
    TrainedModel::from_checkpoint(&ck, DType::F32, &Device::Cpu)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(usage)
}

fn load_decoder(path: Option<&Path>) -> std::result::Result<FinalDecoder, Failure> {
    let path = path.ok_or_else(|| usage(anyhow!("denoiser checkpoints need --decoder-checkpoint")))?;
    match load_model(path)? {
        TrainedModel::Decoder(d) => Ok(d),
        other => Err(usage(anyhow!(
            "{} is a {} checkpoint, expected a decoder",
            path.display(),
            other.kind()
        ))),
    }
}

fn cmd_separate(
    mixture: &Path,
    checkpoint: &Path,
    decoder: Option<&Path>,
    sampler: SamplerConfig,
    out: &Path,
) -> CmdResult {
    let bytes = std::fs::read(mixture)
        .with_context(|| format!("reading {}", mixture.display()))
        .map_err(usage)?;
    let mix = midi_mixture(&bytes).map_err(|e| usage(anyhow::Error::from(e)))?;
    if mix.time() < STEPS_PER_BAR || mix.is_silent() {
        return Err(usage(anyhow!("{} has no notes in the pitch range", mixture.display())));
    }
    let model = load_model(checkpoint)?;
    let song = match &model {
        TrainedModel::Ddpm(den) => {
            let dec = load_decoder(decoder)?;
            let sep = DiffusionSeparator {
                denoiser: den,
                decoder: &dec,
                schedule: den.schedule.clone(),
                sampler,
            };
            separate_song(&sep, &mix, den.net.config().channels, sampler.seed)
        }
        TrainedModel::Vae(vae) => separate_song(vae, &mix, vae.net.config().channels, sampler.seed),
        TrainedModel::Decoder(_) => {
            return Err(usage(anyhow!("{} is a decoder checkpoint", checkpoint.display())));
        }
    }
    .map_err(|e| classify(e.into()))?;
    std::fs::write(out, export_midi(&song))
        .with_context(|| format!("writing {}", out.display()))
        .map_err(usage)?;
    println!("separated {} steps into {}", song.dims().time, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    data: &Path,
    checkpoints: &[PathBuf],
    decoder: Option<&Path>,
    samplers: &[String],
    ddim_steps: usize,
    seed: u64,
    batch_size: usize,
    out: &Path,
) -> CmdResult {
    let (_, phrases) = load_dataset(data)
        .with_context(|| format!("reading {}", data.display()))
        .map_err(usage)?;
    if phrases.is_empty() {
        return Err(usage(anyhow!("{} holds no phrases", data.display())));
    }
    let mut reports: Vec<MetricsReport> = Vec::new();
    for path in checkpoints {
        match load_model(path)? {
            TrainedModel::Ddpm(den) => {
                let dec = load_decoder(decoder)?;
                for name in samplers {
                    let sampler = sampler_config(name, ddim_steps, 0.0, seed)?;
                    let sep = DiffusionSeparator {
                        denoiser: &den,
                        decoder: &dec,
                        schedule: den.schedule.clone(),
                        sampler,
                    };
                    info!("evaluating {} with {}", path.display(), sep.name());
                    reports.push(evaluate(&sep, &phrases, seed, batch_size).map_err(|e| classify(e.into()))?);
                }
            }
            TrainedModel::Vae(vae) => {
                info!("evaluating {}", path.display());
                reports.push(evaluate(&vae, &phrases, seed, batch_size).map_err(|e| classify(e.into()))?);
            }
            TrainedModel::Decoder(_) => {
                return Err(usage(anyhow!(
                    "{} is a decoder checkpoint; pass it with --decoder-checkpoint",
                    path.display()
                )));
            }
        }
    }
    let table = comparison_table(&reports);
    let mut text = table.clone();
    for r in &reports {
        text.push('\n');
        text.push_str(&r.to_text());
    }
    std::fs::write(out, text)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(usage)?;
    print!("{table}");
    Ok(())
}

/// Phrase from a dataset file (by index) or a MIDI file (64-step window at
/// `start_bar`, zero-padded past the end of the song).
fn read_phrase(path: &Path, index: usize, start_bar: usize) -> anyhow::Result<Pianoroll> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"M2M1") {
        let (_, phrases) = mixsep::dataset::decode_dataset(&bytes)?;
        let n = phrases.len();
        return phrases
            .into_iter()
            .nth(index)
            .map(|p| p.roll)
            .ok_or_else(|| anyhow!("{} has {n} phrases, no index {index}", path.display()));
    }
    let parsed = parse_midi(&bytes)?;
    let (song, _) = quantize_to_roll(&parsed.events, parsed.ticks_per_quarter)?;
    let d = song.dims();
    let start = start_bar * STEPS_PER_BAR;
    let mut out = Pianoroll::zeros(RollDims::new(TIME_STEPS, d.pitch, d.channels));
    for t in 0..TIME_STEPS {
        if start + t >= d.time {
            break;
        }
        for p in 0..d.pitch {
            for c in 0..d.channels {
                if song.get(start + t, p, c) {
                    out.set(t, p, c, true);
                }
            }
        }
    }
    Ok(out)
}

fn cmd_render(sample: &Path, original: &Path, index: usize, start_bar: usize, scale: u32, out: &Path) -> CmdResult {
    let generated = read_phrase(sample, index, start_bar).map_err(usage)?;
    let reference = read_phrase(original, index, start_bar).map_err(usage)?;
    let spec = RenderSpec {
        scale,
        ..RenderSpec::default()
    };
    let png = render_png(&generated, &reference, &spec).map_err(|e| usage(anyhow::Error::from(e)))?;
    std::fs::write(out, png)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(usage)?;
    Ok(())
}
