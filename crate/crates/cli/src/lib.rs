//! `tvl`: train, evaluate, sweep, gradient-check and export artifacts.

pub mod settings;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tvl_core::eval::{export_heldout_heatmap, EvalReport};
use tvl_core::gradsuite::{run_gradcheck, SuiteOptions, DEFAULT_TOLERANCE};
use tvl_core::merging::{merge_texts_cls, merge_texts_words, TextMergeStrategy, VideoMergeStrategy};
use tvl_core::model::TokenizedText;
use tvl_core::pipeline::video_plan;
use tvl_core::tensor::OpKind;
use tvl_core::trainer::{run, Checkpoint, Trainer};
use tvl_core::RunConfig;

pub use settings::load_config;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<tvl_core::Error> for CliError {
    fn from(e: tvl_core::Error) -> Self {
        match e {
            tvl_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "tvl", version, about = "Text-video localization pre-training on merged sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.steps=10`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics.csv, checkpoints and config.json to output_dir.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split; prints JSON.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Finite-difference check of every op and loss on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Also write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// One training run per value of an axis; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// One of the sweep axes, or several joined by commas.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; for several axes join a row's values with `:`.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds; each value runs once per seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Run values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Write the merge plan of one batch as JSON.
    ExportPlan {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Merge seed.
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Modality::Video)]
        modality: Modality,
        /// Batch index of the query (Sampling/HardSampling).
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// Parameters for HardSampling similarities (default: initial parameters).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the frame-text cosine heatmap of one held-out query as CSV.
    ExportHeatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Modality {
    Video,
    Text,
}

/// Sweep axis aliases and the config keys they set.
pub const SWEEP_AXES: [(&str, &str); 6] = [
    ("video_merge.strategy", "train.video_merge.strategy"),
    ("text_merge.strategy", "train.text_merge"),
    ("train.beta", "train.beta"),
    ("model.n_layers_fusion", "model.n_layers_fusion"),
    ("video_merge.K", "train.video_merge.K"),
    ("video_merge.K_p_max", "train.video_merge.K_p_max"),
];

pub fn resolve_axis(axis: &str) -> Result<&'static str, CliError> {
    SWEEP_AXES
        .iter()
        .find(|(alias, key)| *alias == axis || *key == axis)
        .map(|(_, key)| *key)
        .ok_or_else(|| {
            let known: Vec<&str> = SWEEP_AXES.iter().map(|(a, _)| *a).collect();
            CliError::Config(format!("unknown sweep axis `{axis}`; expected one of {}", known.join(", ")))
        })
}

pub fn run_cli(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { cfg, output_dir, resume } => {
            let mut sets = cfg.sets;
            if let Some(d) = output_dir {
                sets.push(format!("output_dir={}", toml::Value::String(d.display().to_string())));
            }
            let config = load_config(cfg.config.as_deref(), &sets, true)?;
            cmd_train(&config, resume.as_deref())
        }
        Command::Eval { cfg, checkpoint, split_seed } => {
            let mut config = load_config(cfg.config.as_deref(), &cfg.sets, false)?;
            if let Some(s) = split_seed {
                config.train.eval.split_seed = s;
            }
            let (report, step) = cmd_eval(&config, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&eval_json(&report, step, &config)).expect("json"));
            Ok(())
        }
        Command::Gradcheck { seed, tolerance, report, inject_fault } => cmd_gradcheck(seed, tolerance, report.as_deref(), inject_fault.as_deref()),
        Command::Sweep { cfg, output_dir, axis, values, seeds, parallel } => {
            let mut sets = cfg.sets;
            if let Some(d) = output_dir {
                sets.push(format!("output_dir={}", toml::Value::String(d.display().to_string())));
            }
            let base = cfg.config.as_deref().map(settings::read_table).transpose()?.unwrap_or_default();
            cmd_sweep(&base, &sets, &axis, &values, seeds.as_deref(), parallel).map(|_| ())
        }
        Command::ExportPlan { cfg, seed, modality, query, checkpoint, out } => {
            let config = load_config(cfg.config.as_deref(), &cfg.sets, false)?;
            cmd_export_plan(&config, seed, modality, query, checkpoint.as_deref(), &out)
        }
        Command::ExportHeatmap { cfg, checkpoint, query, out } => {
            let config = load_config(cfg.config.as_deref(), &cfg.sets, false)?;
            let trainer = trainer_for(&config, checkpoint.as_deref())?;
            export_heldout_heatmap(&trainer.eval_setup(), query, &out)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let summary = run(config, resume)?;
    let mut line = format!(
        "trained {} steps; metrics {}; checkpoint {}",
        summary.steps_completed,
        summary.metrics_path.display(),
        summary.final_checkpoint.display()
    );
    if let Some(e) = &summary.final_eval {
        line.push_str(&format!(
            "; recall@1 {:.4} boundary_acc {:.4} mean_iou {:.4} cls_match_acc {:.4}",
            e.recall(1),
            e.localization.both_acc,
            e.localization.mean_iou,
            e.cls_match_acc
        ));
    }
    println!("{line}");
    Ok(())
}

fn trainer_for(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Trainer, CliError> {
    match checkpoint {
        Some(path) => Ok(Trainer::with_params(config.clone(), Checkpoint::load(path)?.params)?),
        None => Ok(Trainer::new(config.clone())?),
    }
}

/// Held-out report of `checkpoint` and its step.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<(EvalReport, usize), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let step = ckpt.step;
    let mut trainer = Trainer::with_params(config.clone(), ckpt.params)?;
    Ok((trainer.evaluate()?, step))
}

pub fn eval_json(r: &EvalReport, step: usize, config: &RunConfig) -> serde_json::Value {
    let g = config.train.eval.gallery_size;
    let recall: serde_json::Map<String, serde_json::Value> =
        r.retrieval.recall_at.iter().map(|(k, v)| (format!("recall@{k}"), json!(v))).collect();
    json!({
        "step": step,
        "split_seed": config.train.eval.split_seed,
        "gallery_size": g,
        "queries": config.train.eval.queries,
        "recall": recall,
        "start_acc": r.localization.start_acc,
        "end_acc": r.localization.end_acc,
        "boundary_acc": r.localization.both_acc,
        "mean_iou": r.localization.mean_iou,
        "cls_match_acc": r.cls_match_acc,
        "alignment_fraction": r.alignment_fraction,
    })
}

pub fn cmd_gradcheck(seed: u64, tolerance: f64, report: Option<&Path>, fault: Option<&str>) -> Result<(), CliError> {
    let fault = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| CliError::Config(format!("unknown op `{name}` for --inject-fault"))))
        .transpose()?;
    let r = run_gradcheck(&SuiteOptions { seed, tolerance, fault })?;
    for c in &r.checks {
        println!(
            "{} {:<28} coords {:>4} max_rel_err {:.3e}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.coordinates,
            c.max_rel_err
        );
        for f in &c.failures {
            println!(
                "     {} analytic {:.6e} numeric {:.6e} rel_err {:.3e}",
                f.location, f.analytic, f.numeric, f.rel_err
            );
        }
        if c.n_kinks > 0 {
            println!("     {} non-differentiable coordinates", c.n_kinks);
        }
    }
    if let Some(path) = report {
        std::fs::write(path, serde_json::to_string_pretty(&r).expect("json")).map_err(|e| io_err(path, e))?;
    }
    let failed = r.checks.iter().filter(|c| !c.passed()).count();
    println!("model parameters: {}; tolerance {:e}", r.model_parameters, r.tolerance);
    if failed == 0 {
        println!("gradcheck passed: {} checks", r.checks.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradcheck failed: {failed} of {} checks; suspect ops: {}",
            r.checks.len(),
            if r.suspect_ops.is_empty() { "none isolated".to_string() } else { r.suspect_ops.join(", ") }
        )))
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub label: String,
    pub values: Vec<String>,
    pub seed: Option<u64>,
    pub report: EvalReport,
    pub final_total: f64,
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// Runs every (value row, seed) pair and writes `<output_dir>/sweep.csv`.
pub fn cmd_sweep(
    base: &toml::Table,
    sets: &[String],
    axis: &str,
    values: &str,
    seeds: Option<&str>,
    parallel: bool,
) -> Result<Vec<SweepRow>, CliError> {
    let keys = axis.split(',').map(|a| resolve_axis(a.trim())).collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<Vec<String>> = values
        .split(',')
        .map(|v| v.split(':').map(|s| s.trim().to_string()).collect::<Vec<_>>())
        .collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != keys.len() || r.iter().any(String::is_empty)) {
        return Err(CliError::Config(format!("sweep value `{}` does not match axis `{axis}`", bad.join(":"))));
    }
    let seeds: Vec<Option<u64>> = match seeds {
        None => vec![None],
        Some(s) => s
            .split(',')
            .map(|x| x.trim().parse().map(Some).map_err(|_| CliError::Config(format!("bad seed `{x}`"))))
            .collect::<Result<_, _>>()?,
    };

    let mut table = base.clone();
    for s in sets {
        settings::apply_override(&mut table, s)?;
    }
    let base_cfg = {
        use serde::Deserialize;
        RunConfig::deserialize(toml::Value::Table(table.clone())).map_err(|e| CliError::Config(e.to_string()))?
    };
    let root = base_cfg.output_dir.clone();

    let mut jobs = Vec::new();
    for row in &rows {
        for &seed in &seeds {
            let mut t = table.clone();
            let mut label: Vec<String> = keys.iter().zip(row).map(|(k, v)| format!("{}={v}", k.rsplit('.').next().unwrap_or(k))).collect();
            for (k, v) in keys.iter().zip(row) {
                settings::apply_override(&mut t, &format!("{k}={v}"))?;
            }
            if let Some(s) = seed {
                settings::apply_override(&mut t, &format!("train.seed={s}"))?;
                label.push(format!("seed={s}"));
            }
            let label = label.join("_");
            let dir = root.join(&label);
            t.insert("output_dir".into(), toml::Value::String(dir.display().to_string()));
            let cfg = {
                use serde::Deserialize;
                RunConfig::deserialize(toml::Value::Table(t)).map_err(|e| CliError::Config(e.to_string()))?
            };
            cfg.validate()?;
            jobs.push((label, row.clone(), seed, cfg));
        }
    }

    let exec = |cfg: &RunConfig| -> Result<(EvalReport, f64), CliError> {
        let s = run(cfg, None)?;
        let total = s.records.last().map_or(f64::NAN, |r| r.losses.total);
        let report = match s.final_eval {
            Some(r) => r,
            None => Trainer::with_params(cfg.clone(), s.params)?.evaluate()?,
        };
        Ok((report, total))
    };
    let results: Vec<Result<(EvalReport, f64), CliError>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.iter().map(|(_, _, _, cfg)| scope.spawn(|| exec(cfg))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    } else {
        jobs.iter().map(|(_, _, _, cfg)| exec(cfg)).collect()
    };

    let mut out = Vec::with_capacity(jobs.len());
    for ((label, values, seed, _), res) in jobs.into_iter().zip(results) {
        let (report, final_total) = res?;
        eprintln!("{label}: recall@1 {:.4} boundary_acc {:.4}", report.recall(1), report.localization.both_acc);
        out.push(SweepRow { label, values, seed, report, final_total });
    }
    std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    let path = root.join(SWEEP_FILE);
    std::fs::write(&path, sweep_csv(&keys, &out)).map_err(|e| io_err(&path, e))?;
    println!("{}", path.display());
    Ok(out)
}

pub fn sweep_csv(keys: &[&str], rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{},seed,final_total,recall_at_1,recall_at_5,recall_at_10,start_acc,end_acc,boundary_acc,mean_iou,cls_match_acc,alignment_fraction\n",
        keys.join(",")
    );
    for r in rows {
        let e = &r.report;
        let recall = |k: usize| e.retrieval.recall_at.get(&k).map_or(String::new(), |v| v.to_string());
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.values.join(","),
            r.seed.map_or(String::new(), |x| x.to_string()),
            r.final_total,
            recall(1),
            recall(5),
            recall(10),
            e.localization.start_acc,
            e.localization.end_acc,
            e.localization.both_acc,
            e.localization.mean_iou,
            e.cls_match_acc,
            e.alignment_fraction
        ));
    }
    s
}

/// Plan for the first training batch of `config`, using merge seed `seed`.
pub fn cmd_export_plan(
    config: &RunConfig,
    seed: u64,
    modality: Modality,
    query: usize,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let t = &config.train;
    let ids: Vec<u64> = (0..t.batch_size as u64).collect();
    match modality {
        Modality::Video => {
            let similarity = if t.video_merge.strategy == VideoMergeStrategy::HardSampling {
                Some(trainer_for(config, checkpoint)?.batch_similarity(0)?)
            } else {
                None
            };
            let plan = video_plan(&t.video_merge, &ids, config.model.frames_per_video, query, similarity.as_ref(), seed)?;
            plan.save_json(out)?;
        }
        Modality::Text => {
            let trainer = Trainer::new(config.clone())?;
            let texts: Vec<TokenizedText> = trainer
                .generator()
                .generate_batch(t.batch_size, trainer.data_seed(0), true)?
                .into_iter()
                .map(|p| p.text)
                .collect();
            let plan = match t.text_merge {
                TextMergeStrategy::MergeCls => merge_texts_cls(&texts, seed)?.1,
                TextMergeStrategy::MergeWords => {
                    merge_texts_words(&texts, seed, config.model.max_merged_len - config.model.frames_per_video)?.1
                }
            };
            plan.save_json(out)?;
        }
    }
    println!("{}", out.display());
    Ok(())
}
