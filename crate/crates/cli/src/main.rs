//! `veco` command-line driver. Every command takes an optional TOML config
//! (`--config`), a seed (`--seed`, else the file, else `VECO_SEED`, else 0)
//! and writes into `--out` together with `config.resolved.toml`.

mod commands;
mod config;
mod error;
mod out;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use veco::finetune::ClsMode;
use veco::objective::AttnStream;
use veco::seq2seq::Selection;

use crate::commands::*;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Kind, Result};
use crate::out::OutDir;

#[derive(Parser)]
#[command(
    name = "veco",
    version,
    about = "Cross-attention MLM pre-training and fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Run {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic language pair, monolingual documents and a classification task.
    SynthData {
        #[command(flatten)]
        run: Run,
    },
    /// Two-phase pre-training.
    Pretrain {
        #[command(flatten)]
        run: Run,
        /// Directory written by synth-data (or with the same layout).
        #[arg(long)]
        data: PathBuf,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total steps; phase 1 keeps its length up to this budget.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train a sequence classifier (plug-out or plug-in).
    FinetuneCls {
        #[command(flatten)]
        run: Run,
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained checkpoint; random init when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        mode: Option<ClsMode>,
    },
    /// Assemble an encoder-decoder from a checkpoint and train it on the parallel data.
    FinetuneMt {
        #[command(flatten)]
        run: Run,
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained checkpoint; random init when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Decoder depth.
        #[arg(long)]
        layers: Option<usize>,
        /// first, last or full.
        #[arg(long)]
        selection: Option<Selection>,
    },
    /// Decode one sentence per input line.
    Translate {
        #[command(flatten)]
        run: Run,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Corpus BLEU of line-aligned hypothesis and reference files.
    EvalBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        smooth: bool,
        /// Also write bleu.tsv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Head-averaged attention of one layer as TSV.
    ExportAttn {
        #[command(flatten)]
        run: Run,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Space-separated tokens.
        #[arg(long)]
        x: String,
        /// Paired sequence, needed by the s-self and s-cross streams.
        #[arg(long)]
        y: Option<String>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// h-self, s-self or s-cross.
        #[arg(long, default_value = "h-self")]
        stream: AttnStream,
    },
    /// List tensor names, shapes and hashes.
    InspectCkpt {
        ckpt: PathBuf,
        /// Also write inspect.tsv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Element-wise parameter mean of several checkpoints.
    AvgCkpt {
        #[command(flatten)]
        run: Run,
        #[arg(required = true)]
        ckpts: Vec<PathBuf>,
    },
}

/// Runs `body` against a fresh output directory, removing what it wrote on
/// failure.
fn with_out(
    run: &Run,
    body: impl FnOnce(&mut ExperimentConfig, &mut OutDir) -> Result<()>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(run.config.as_deref())?;
    if run.seed.is_some() {
        cfg.seed = run.seed;
    }
    let mut out = OutDir::create(&run.out)?;
    match body(&mut cfg, &mut out) {
        Ok(()) => Ok(()),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

/// Writes a report produced without a config to an optional directory.
fn report(text: &str, out: Option<&Path>, name: &str) -> Result<()> {
    print!("{text}");
    if let Some(dir) = out {
        let mut o = OutDir::create(dir)?;
        if let Err(e) = o.write(name, text) {
            o.discard();
            return Err(e);
        }
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData { run } => with_out(&run, synth_data),
        Command::Pretrain {
            run,
            data,
            resume,
            steps,
            lr,
        } => with_out(&run, |cfg, out| {
            pretrain(
                PretrainArgs {
                    data,
                    resume,
                    steps,
                    lr,
                },
                cfg,
                out,
            )
        }),
        Command::FinetuneCls {
            run,
            data,
            ckpt,
            steps,
            lr,
            mode,
        } => with_out(&run, |cfg, out| {
            finetune_cls(
                FinetuneClsArgs {
                    data,
                    ckpt,
                    steps,
                    lr,
                    mode,
                },
                cfg,
                out,
            )
        }),
        Command::FinetuneMt {
            run,
            data,
            ckpt,
            steps,
            lr,
            layers,
            selection,
        } => with_out(&run, |cfg, out| {
            let args = FinetuneMtArgs {
                data,
                ckpt,
                steps,
                lr,
                layers,
                selection,
            };
            finetune_mt_cmd(args, cfg, out)
        }),
        Command::Translate {
            run,
            ckpt,
            vocab,
            input,
            beam,
            max_len,
        } => with_out(&run, |cfg, out| {
            let args = TranslateArgs {
                ckpt,
                vocab,
                input,
                beam,
                max_len,
            };
            translate(args, cfg, out)
        }),
        Command::EvalBleu {
            hyp,
            reference,
            smooth,
            out,
        } => report(
            &eval_bleu(&hyp, &reference, smooth)?,
            out.as_deref(),
            "bleu.tsv",
        ),
        Command::ExportAttn {
            run,
            ckpt,
            vocab,
            x,
            y,
            layer,
            stream,
        } => with_out(&run, |cfg, out| {
            let args = ExportArgs {
                ckpt,
                vocab,
                x,
                y,
                layer,
                stream,
            };
            export_attn(args, cfg, out)
        }),
        Command::InspectCkpt { ckpt, out } => {
            report(&inspect_ckpt(&ckpt)?, out.as_deref(), "inspect.tsv")
        }
        Command::AvgCkpt { run, ckpts } => with_out(&run, |cfg, out| avg_ckpt(&ckpts, cfg, out)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")));
            return ExitCode::from(Kind::Usage.code());
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.code())
        }
    }
}
