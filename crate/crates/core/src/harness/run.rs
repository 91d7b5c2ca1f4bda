//! Training runs with periodic evaluation, on disk or in memory, and ablation sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::glyph::{generate_samples, load_corpus, CorpusConfig, GlyphSample};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::eval::{eval_model, EvalReport};
use crate::harness::metrics::{read_log, MetricsRecord, MetricsWriter, METRICS_FILE};
use crate::losses::{LossReport, LossTerms, LossWeights};
use crate::trainer::{check_corpus, run_steps, TrainConfig, TrainState};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";

/// Steps averaged for the "final" losses of an ablation row.
pub const FINAL_WINDOW: usize = 100;

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint_{step:06}.bin")
}

/// Generator settings for evaluation samples that never appear in training.
pub fn held_out_config(corpus: &CorpusConfig, count: usize) -> CorpusConfig {
    CorpusConfig {
        count,
        seed: corpus.seed ^ 0x005e_ed0f_e7a1,
        ..corpus.clone()
    }
}

pub fn is_eval_step(config: &TrainConfig, step: usize) -> bool {
    step == 0 || step == config.total_steps || (config.eval_every > 0 && step.is_multiple_of(config.eval_every))
}

pub struct RunOutput {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    /// Evaluation at the first record, when the run started from step 0.
    pub initial_eval: Option<EvalReport>,
    pub final_eval: EvalReport,
}

/// Trains from `start` to `config.total_steps`, evaluating on `eval_set` at
/// step 0, every `eval_every` steps and at the end.
///
/// `on_record` sees every metrics record with the state it describes; the
/// flag marks evaluation points.
pub fn run_training(
    config: &TrainConfig,
    corpus: &[GlyphSample],
    eval_set: &[GlyphSample],
    start: TrainState,
    exec: Execution,
    mut on_record: impl FnMut(&MetricsRecord, &TrainState, bool) -> Result<()>,
) -> Result<RunOutput> {
    config.validate()?;
    check_corpus(config, corpus)?;
    check_corpus(config, eval_set)?;
    if start.step > config.total_steps {
        return Err(Error::invalid(format!(
            "start step {} is past total_steps {}",
            start.step, config.total_steps
        )));
    }
    let clock = Instant::now();
    let mut state = start;
    let mut records = Vec::new();
    let mut initial_eval = None;
    let mut last_eval = None;
    if state.step == 0 {
        let ev = eval_model(&state.model, config, eval_set, exec)?;
        let rec = MetricsRecord {
            step: 0,
            report: None,
            miou: Some(ev.mean_miou),
            wall_ms: clock.elapsed().as_millis() as u64,
        };
        on_record(&rec, &state, true)?;
        records.push(rec);
        initial_eval = Some(ev.clone());
        last_eval = Some(ev);
    }
    run_steps(&mut state, config, corpus, config.total_steps, exec, |s, trace| {
        let eval_point = is_eval_step(config, s.step);
        let miou = if eval_point {
            let ev = eval_model(&s.model, config, eval_set, exec)?;
            let m = ev.mean_miou;
            last_eval = Some(ev);
            Some(m)
        } else {
            None
        };
        let rec = MetricsRecord {
            step: s.step,
            report: Some(trace.report),
            miou,
            wall_ms: clock.elapsed().as_millis() as u64,
        };
        on_record(&rec, s, eval_point)?;
        records.push(rec);
        Ok(())
    })?;
    let final_eval = match last_eval {
        Some(ev) => ev,
        None => eval_model(&state.model, config, eval_set, exec)?,
    };
    Ok(RunOutput {
        state,
        records,
        initial_eval,
        final_eval,
    })
}

pub struct TrainSummary {
    pub output: RunOutput,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Loads the training corpus and generates the matching held-out evaluation set.
pub fn load_data(config: &TrainConfig, corpus_dir: &Path, exec: Execution) -> Result<(Vec<GlyphSample>, Vec<GlyphSample>)> {
    let (manifest, samples) = load_corpus(corpus_dir)?;
    check_corpus(config, &samples)?;
    let eval_set = if config.eval_samples == 0 {
        Vec::new()
    } else {
        generate_samples(&held_out_config(&manifest.config, config.eval_samples), exec)?
    };
    Ok((samples, eval_set))
}

/// Full on-disk run: checkpoints, metrics log and config echo under `out_dir`.
///
/// With `resume`, training continues from that checkpoint and the metrics log
/// is truncated to the records it covers.
pub fn train(
    config: &TrainConfig,
    corpus_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    exec: Execution,
) -> Result<TrainSummary> {
    config.validate()?;
    if config.eval_samples == 0 {
        return Err(Error::invalid("eval_samples must be at least 1"));
    }
    let (corpus, eval_set) = load_data(config, corpus_dir, exec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let (start, keep) = match resume {
        Some(p) => {
            let ck = Checkpoint::load_matching(p, config)?;
            let keep: Vec<MetricsRecord> = if metrics.exists() {
                read_log(&metrics)?.into_iter().filter(|r| r.step <= ck.state.step).collect()
            } else {
                Vec::new()
            };
            (ck.state, keep)
        }
        None => (TrainState::new(config)?, Vec::new()),
    };
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_record().to_line() + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    let mut writer = MetricsWriter::create(&metrics, &keep)?;
    let latest = out_dir.join(CHECKPOINT_FILE);
    let output = run_training(config, &corpus, &eval_set, start, exec, |rec, state, eval_point| {
        writer.append(rec)?;
        if eval_point {
            let ck = Checkpoint {
                config: config.clone(),
                state: state.clone(),
            };
            ck.save(&out_dir.join(checkpoint_name(state.step)))?;
            ck.save(&latest)?;
        }
        Ok(())
    })?;
    if resume.is_some() && output.state.step == config.total_steps && output.records.is_empty() {
        // Resumed at the end: still leave a latest checkpoint behind.
        Checkpoint {
            config: config.clone(),
            state: output.state.clone(),
        }
        .save(&latest)?;
    }
    Ok(TrainSummary {
        output,
        checkpoint: latest,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: TrainConfig,
}

/// Row configurations for a named preset.
///
/// `losses` adds terms cumulatively on top of a plain-MSE base; `warmup`
/// sweeps the warm-up length at 10, 20, 25 and 30 % of the run.
pub fn ablation_rows(preset: &str, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let row = |label: &str, config: TrainConfig| AblationRow {
        label: label.to_string(),
        config,
    };
    match preset {
        "losses" => {
            let plain = TrainConfig {
                weights: LossWeights {
                    alpha: 0.0,
                    beta: 0.0,
                    gamma: 0.0,
                    ..base.weights
                },
                terms: LossTerms::NONE,
                warmup_steps: 0,
                ..base.clone()
            };
            let mask = TrainConfig {
                weights: LossWeights {
                    gamma: base.weights.gamma,
                    ..plain.weights
                },
                warmup_steps: base.warmup_steps,
                ..plain.clone()
            };
            let attn = TrainConfig {
                weights: LossWeights {
                    alpha: base.weights.alpha,
                    ..mask.weights
                },
                terms: LossTerms {
                    attn: true,
                    ..LossTerms::NONE
                },
                ..mask.clone()
            };
            let align = TrainConfig {
                weights: base.weights,
                terms: LossTerms {
                    align: true,
                    ..attn.terms
                },
                ..attn.clone()
            };
            let id = TrainConfig {
                terms: LossTerms {
                    id: true,
                    ..align.terms
                },
                ..align.clone()
            };
            Ok(vec![
                row("Base", plain),
                row("+L_mask", mask),
                row("+L_attn", attn),
                row("+L_align", align),
                row("+L_id", id),
            ])
        }
        "warmup" => Ok([10usize, 20, 25, 30]
            .iter()
            .map(|&pct| {
                let steps = base.total_steps * pct / 100;
                row(
                    &format!("warmup {pct}% ({steps})"),
                    TrainConfig {
                        warmup_steps: steps,
                        ..base.clone()
                    },
                )
            })
            .collect()),
        other => Err(Error::invalid(format!("unknown ablation preset `{other}` (expected losses or warmup)"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub label: String,
    pub final_miou: f64,
    pub median_miou: f64,
    /// Plain noise-prediction MSE of the final model on the evaluation set.
    pub eval_mse: f64,
    /// Step losses averaged over the last [`FINAL_WINDOW`] steps.
    pub losses: LossReport,
}

pub fn trailing_mean(records: &[MetricsRecord], window: usize) -> LossReport {
    let reports: Vec<LossReport> = records.iter().filter_map(|r| r.report).collect();
    let tail = &reports[reports.len().saturating_sub(window)..];
    let mut m = LossReport::default();
    if tail.is_empty() {
        return m;
    }
    let k = tail.len() as f64;
    for r in tail {
        m.l_mask += r.l_mask / k;
        m.l_attn += r.l_attn / k;
        m.l_align += r.l_align / k;
        m.l_id += r.l_id / k;
        m.l_warmup += r.l_warmup / k;
        m.total += r.total / k;
    }
    m
}

/// One training run per row, all on the same corpus and evaluation set.
pub fn ablation_matrix(
    rows: &[AblationRow],
    corpus: &[GlyphSample],
    eval_set: &[GlyphSample],
    exec: Execution,
    mut progress: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let start = TrainState::new(&row.config)?;
        let run = run_training(&row.config, corpus, eval_set, start, exec, |_, _, _| Ok(()))?;
        let res = AblationResult {
            label: row.label.clone(),
            final_miou: run.final_eval.mean_miou,
            median_miou: run.final_eval.median_miou,
            eval_mse: run.final_eval.mse.unwrap_or(f64::NAN),
            losses: trailing_mean(&run.records, FINAL_WINDOW),
        };
        progress(&res);
        out.push(res);
    }
    Ok(out)
}

pub fn format_table(results: &[AblationResult]) -> String {
    let mut s = format!(
        "{:<22} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "row", "mIoU", "median", "eval_mse", "l_mask", "l_attn", "l_align", "l_id", "total"
    );
    for r in results {
        s.push_str(&format!(
            "{:<22} {:>8.4} {:>8.4} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>9.5}\n",
            r.label,
            r.final_miou,
            r.median_miou,
            r.eval_mse,
            r.losses.l_mask,
            r.losses.l_attn,
            r.losses.l_align,
            r.losses.l_id,
            r.losses.total
        ));
    }
    s
}
