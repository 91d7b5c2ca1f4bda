//! Command-line entry point: `gen-data`, `train`, `eval`, `viz`, `ablate`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::glyph::{generate_samples, load_corpus, make_corpus, Alphabet, Canvas, CorpusConfig};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::eval::{eval_model, ModelSource, AttentionSource};
use crate::harness::records::Record;
use crate::harness::run::{self, ablation_matrix, ablation_rows, format_table, held_out_config};
use crate::harness::viz::render_attention_overlay;
use crate::maskops::masks_from_mean;
use crate::trainer::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "charmask", version, about = "Attention-mask supervised toy denoiser")]
pub struct Cli {
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic glyph corpus.
    GenData(GenData),
    /// Train a model on a corpus.
    Train(Train),
    /// Score a checkpoint's attention masks against ground truth.
    Eval(Eval),
    /// Write attention or mask overlays for one sample.
    Viz(Viz),
    /// Run an ablation preset and print the result table.
    Ablate(Ablate),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    n_max: usize,
    #[arg(long, default_value = "ABCDEFGHIJKLMNOP")]
    alphabet: String,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long, default_value_t = 4)]
    max_len: usize,
}

/// Training settings shared by `train` and `ablate`.
#[derive(Debug, Args)]
struct TrainOpts {
    #[arg(long)]
    corpus: PathBuf,
    /// Line-record config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Defaults to a quarter of the steps when only --steps is given.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Evaluate on this many held-out samples instead of the corpus itself.
    #[arg(long)]
    held_out: Option<usize>,
}

#[derive(Debug, Args)]
struct Viz {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    /// Draw binary latent masks instead of aggregated attention.
    #[arg(long)]
    masks: bool,
}

#[derive(Debug, Args)]
struct Ablate {
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, value_parser = ["losses", "warmup"])]
    preset: String,
}

fn build_config(o: &TrainOpts, canvas: Canvas, alphabet: usize) -> Result<TrainConfig> {
    let mut c = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_record(&Record::parse_document(&text)?)?
        }
        None => {
            let mut c = TrainConfig::default();
            c.dims.channels = canvas.channels;
            c.dims.height = canvas.height;
            c.dims.width = canvas.width;
            c.dims.n_max = canvas.n_max;
            c.dims.alphabet = alphabet;
            c
        }
    };
    if let Some(s) = o.steps {
        c.total_steps = s;
        if o.warmup.is_none() {
            c.warmup_steps = s / 4;
        }
    }
    if let Some(w) = o.warmup {
        c.warmup_steps = w;
    }
    if let Some(v) = o.lr {
        c.lr = v;
    }
    if let Some(v) = o.batch {
        c.batch_size = v;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.eval_every {
        c.eval_every = v;
    }
    if let Some(v) = o.eval_samples {
        c.eval_samples = v;
    }
    c.validate()?;
    Ok(c)
}

fn corpus_header(dir: &Path) -> Result<CorpusConfig> {
    let path = dir.join(crate::glyph::corpus::MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(crate::glyph::CorpusManifest::parse(&text)?.config)
}

fn run(cli: Cli) -> Result<String> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::available()
    };
    match cli.command {
        Command::GenData(g) => {
            let cfg = CorpusConfig {
                count: g.count,
                canvas: Canvas {
                    channels: 1,
                    height: g.height,
                    width: g.width,
                    n_max: g.n_max,
                },
                alphabet: Alphabet::new(&g.alphabet)?,
                min_len: g.min_len,
                max_len: g.max_len,
                seed: g.seed,
                ..CorpusConfig::default()
            };
            let m = make_corpus(&cfg, &g.out, exec)?;
            Ok(format!("wrote {} samples to {}", m.entries.len(), g.out.display()))
        }
        Command::Train(t) => {
            let header = corpus_header(&t.opts.corpus)?;
            let cfg = build_config(&t.opts, header.canvas, header.alphabet.len())?;
            let s = run::train(&cfg, &t.opts.corpus, &t.out, t.resume.as_deref(), exec)?;
            let last = s.output.records.last();
            let total = last.and_then(|r| r.report).map_or("-".to_string(), |r| format!("{:.6}", r.total));
            Ok(format!(
                "step={} total={} mIoU={:.6} checkpoint={}",
                s.output.state.step,
                total,
                s.output.final_eval.mean_miou,
                s.checkpoint.display()
            ))
        }
        Command::Eval(e) => {
            let ck = Checkpoint::load(&e.checkpoint)?;
            let (manifest, corpus) = load_corpus(&e.corpus)?;
            let samples = match e.held_out {
                Some(n) => generate_samples(&held_out_config(&manifest.config, n), exec)?,
                None => corpus,
            };
            crate::trainer::check_corpus(&ck.config, &samples)?;
            let r = eval_model(&ck.state.model, &ck.config, &samples, exec)?;
            Ok(format!(
                "mIoU={} median={} mse={} samples={}",
                r.mean_miou,
                r.median_miou,
                r.mse.unwrap_or(f64::NAN),
                r.per_sample.len()
            ))
        }
        Command::Viz(v) => {
            let ck = Checkpoint::load(&v.checkpoint)?;
            let (_, corpus) = load_corpus(&v.corpus)?;
            let sample = corpus
                .get(v.index)
                .ok_or_else(|| Error::invalid(format!("sample index {} outside 0..{}", v.index, corpus.len())))?;
            crate::trainer::check_corpus(&ck.config, std::slice::from_ref(sample))?;
            let source = ModelSource::new(&ck.state.model, &ck.config)?;
            let probe = source.probe(sample, v.index)?;
            let active = sample.active_tokens();
            let maps = if v.masks {
                masks_from_mean(&probe.mean_attention, &active, ck.config.blur_sigma)?.masks
            } else {
                probe.mean_attention
            };
            render_attention_overlay(sample, &maps, &active, &v.out)?;
            Ok(format!("wrote {} ({} tokens)", v.out.display(), active.len()))
        }
        Command::Ablate(a) => {
            let header = corpus_header(&a.opts.corpus)?;
            let cfg = build_config(&a.opts, header.canvas, header.alphabet.len())?;
            let rows = ablation_rows(&a.preset, &cfg)?;
            let (corpus, eval_set) = run::load_data(&cfg, &a.opts.corpus, exec)?;
            let results = ablation_matrix(&rows, &corpus, &eval_set, exec, |r| {
                log::info!("{}: mIoU={:.4}", r.label, r.final_miou)
            })?;
            Ok(format_table(&results).trim_end().to_string())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
///
/// Usage errors exit with 2, runtime failures with 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with_args(["charmask", "frobnicate"]), 2);
        assert_eq!(main_with_args(["charmask", "eval", "--bogus"]), 2);
        assert_eq!(main_with_args(["charmask", "train", "--help"]), 0);
    }

    #[test]
    fn steps_only_scales_warmup() {
        let o = TrainOpts {
            corpus: PathBuf::from("x"),
            config: None,
            steps: Some(0),
            warmup: None,
            lr: None,
            batch: None,
            seed: None,
            eval_every: None,
            eval_samples: None,
        };
        let c = build_config(&o, Canvas::default(), 16).unwrap();
        assert_eq!((c.total_steps, c.warmup_steps), (0, 0));
    }
}
