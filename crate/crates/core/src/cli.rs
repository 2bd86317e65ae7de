//! Command-line interface: synth, pretrain, finetune, eval, and sweep
//! subcommands binding a TOML run config to the library pipelines. Each run
//! writes into its own `<output_dir>/<protocol>/<timestamp>/` directory; the
//! timestamp lives only in the path and meta.json, so report files are
//! byte-identical across reruns of the same config and seeds.

use std::fs::{self, File};
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{load_run_config, DatasetKind, RunConfig};
use crate::data::{load_csv, sample_per_class, synth_generate, write_csv, CsvSchema, RawRecording, WindowSet};
use crate::error::{Error, Result};
use crate::eval::{
    prepare_protocol_data, predict_labels, macro_f1, run_anomaly_eval, run_one_pipeline,
    run_pipeline_rows, run_semi_supervised_sweep, run_strategy_comparison, run_trick_comparison,
    write_reports_csv, write_reports_json, MetricsReport, PipelineConfig, ProtocolData,
    DEFAULT_M_VALUES, DEFAULT_X_VALUES,
};
use crate::masking::{StrategyConfig, StrategyKind};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{init_params, ModelParams};
use crate::train::{finetune, pretrain, StepRecord};

/// Loss-weight grid for the alpha sweep.
pub const ALPHA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
/// Time-ratio grid for the masking-ratio sweep.
pub const TIME_RATIO_GRID: [f64; 7] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9];
/// Masked-channel-count grid for the channel-count sweep.
pub const CHANNEL_COUNT_GRID: [usize; 5] = [1, 2, 3, 4, 5];

const CONFIG_REFERENCE: &str = "\
CONFIG KEYS (TOML; defaults shown; --set key.path=value overrides the file):
  version = 1                          config schema version
  output_dir = \"runs\"                  run directories are created here
  seeds = [1, 2, 3, 4, 5]              run seeds; protocols aggregate over all of them
  dataset.kind = \"synthetic\"           \"synthetic\" or \"csv\"
  dataset.path = (unset)               CSV file, required for csv datasets
  dataset.sample_rate_hz = 50.0        rate attached to csv recordings
  dataset.synth.num_subjects = 4
  dataset.synth.num_classes = 4
  dataset.synth.length = 800           samples per recording
  dataset.synth.channels = 6
  dataset.synth.sample_rate_hz = 50.0
  dataset.synth.noise_amp = 0.1
  dataset.synth.seed = 7
  window.length = 128                  samples per window
  window.overlap = 0.5                 overlap fraction between windows, in [0, 1)
  split.test_subjects = []             explicit subject ids; win over fractions
  split.val_subjects = []
  split.test_fraction = 0.25
  split.val_fraction = 0.25
  split.seed = 0
  encoder.d_model = 128
  encoder.num_blocks = 3
  encoder.num_heads = 4
  encoder.ff_dim = 256
  encoder.dropout = 0.1
  strategy.kind = \"time-channel\"       time | span | channel | time-channel | span-channel
  strategy.time_ratio = 0.1            unset fields fall back to the reference
  strategy.span_ratio = 0.15           settings for the chosen kind
  strategy.span_geometric_p = 0.2
  strategy.span_max_len = 10
  strategy.channel_count_masked = 2    (half the channels for pure channel masking)
  strategy.same_position_per_batch = true
  pretrain.epochs = 150
  pretrain.batch_size = 256
  pretrain.lr = 0.001
  pretrain.alpha = 0.5                 weight of the time term in the combined loss
  finetune.epochs = 100
  finetune.batch_size = 1024
  finetune.lr = 0.001
  finetune.freeze_encoder = true
  finetune.labels_per_class = (unset)  cap labeled windows per class; unset uses all";

#[derive(Parser, Debug)]
#[command(
    name = "maskrecon",
    version,
    about = "Masked-reconstruction pretraining for multichannel time series",
    after_help = CONFIG_REFERENCE
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// TOML run config file
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-path override like pretrain.epochs=10; wins over the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        load_run_config(&self.config, &self.set)
    }
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic dataset CSV plus a manifest JSON
    Synth {
        #[command(flatten)]
        common: ConfigArgs,
        /// Write the CSV here instead of under output_dir
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain an encoder with masked reconstruction; writes a checkpoint
    Pretrain {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train a classifier on top of a checkpointed encoder and score it
    Finetune {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint to start from
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a finetuned checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint to score
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a multi-seed protocol over one sweep axis
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        /// Which experiment table or curve to produce
        #[arg(long)]
        axis: SweepAxis,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Labeled windows per class, x in {1,2,5,10,25,50,100}
    X,
    /// Loss weight alpha in {0.1,0.3,0.5,0.7,0.9}
    Alpha,
    /// Time masking ratio in {0.05,0.1,0.2,0.3,0.5,0.7,0.9}
    #[value(name = "time_ratio")]
    TimeRatio,
    /// Masked channel count in {1..5}
    #[value(name = "channel_count")]
    ChannelCount,
    /// Same-position vs different-position masking per batch
    Trick,
    /// Zeroed-channel counts {1,3,5} at test time
    Anomaly,
    /// All five masking strategies plus a supervised baseline
    Strategy,
}

impl SweepAxis {
    fn protocol(self) -> &'static str {
        match self {
            SweepAxis::X => "semi-supervised",
            SweepAxis::Alpha => "alpha-sweep",
            SweepAxis::TimeRatio => "time-ratio-sweep",
            SweepAxis::ChannelCount => "channel-count-sweep",
            SweepAxis::Trick => "position-trick",
            SweepAxis::Anomaly => "channel-anomaly",
            SweepAxis::Strategy => "strategy-comparison",
        }
    }
}

/// Parses argv, runs the command, and maps errors to exit codes
/// (0 ok, 2 config/usage, 3 data/format/io, 4 numeric).
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth { common, out } => cmd_synth(common, out.as_deref()),
        Cmd::Pretrain { common } => cmd_pretrain(common),
        Cmd::Finetune { common, checkpoint } => cmd_finetune(common, checkpoint),
        Cmd::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Cmd::Sweep { common, axis } => cmd_sweep(common, *axis),
    }
}

/// Channel columns are whatever the header holds beyond subject and label,
/// in file order.
fn sniff_csv_schema(path: &Path, sample_rate_hz: f64) -> Result<CsvSchema> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?;
    let channels: Vec<String> = headers
        .iter()
        .filter(|h| *h != "subject" && *h != "label")
        .map(str::to_string)
        .collect();
    if channels.is_empty() {
        return Err(Error::Data(format!(
            "{} has no channel columns beyond subject and label",
            path.display()
        )));
    }
    Ok(CsvSchema {
        subject: "subject".into(),
        label: "label".into(),
        channels,
        sample_rate_hz,
    })
}

fn load_recordings(cfg: &RunConfig) -> Result<Vec<RawRecording>> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => synth_generate(&cfg.dataset.synth),
        DatasetKind::Csv => {
            let path = cfg.dataset.path.as_ref().expect("validated for csv kind");
            let schema = sniff_csv_schema(path, cfg.dataset.sample_rate_hz)?;
            load_csv(path, &schema)
        }
    }
}

fn prepare(cfg: &RunConfig) -> Result<ProtocolData> {
    let recs = load_recordings(cfg)?;
    prepare_protocol_data(&recs, cfg.window.length, cfg.window.overlap, &cfg.split.to_spec())
}

fn make_run_dir(outdir: &Path, protocol: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let base = outdir.join(protocol);
    fs::create_dir_all(&base)?;
    let mut dir = base.join(&stamp);
    let mut i = 1;
    while dir.exists() {
        i += 1;
        dir = base.join(format!("{stamp}-{i}"));
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.snapshot"), cfg.to_toml()?)?;
    Ok(())
}

/// Wall-clock provenance lives here, keeping every other output file
/// deterministic.
fn write_meta(dir: &Path, protocol: &str, extra: serde_json::Value) -> Result<()> {
    let meta = json!({
        "protocol": protocol,
        "created_utc": chrono::Utc::now().to_rfc3339(),
        "extra": extra,
    });
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(dir.join("meta.json"), text + "\n")?;
    Ok(())
}

fn write_report_files(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_reports_json(&dir.join("report.json"), reports)?;
    write_reports_csv(&dir.join("report.csv"), reports)
}

fn print_reports(reports: &[MetricsReport]) {
    for r in reports {
        match r.ci95_halfwidth {
            Some(ci) => println!("{:<26} mean_f1 {:.4} +-{:.4}", r.row, r.mean_f1, ci),
            None => println!("{:<26} mean_f1 {:.4}", r.row, r.mean_f1),
        }
    }
}

fn cmd_synth(common: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    if cfg.dataset.kind != DatasetKind::Synthetic {
        return Err(Error::Config("synth requires dataset.kind = \"synthetic\"".into()));
    }
    let recs = synth_generate(&cfg.dataset.synth)?;
    let csv_path = match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            p.to_path_buf()
        }
        None => make_run_dir(&cfg.output_dir, "synth")?.join("data.csv"),
    };
    write_csv(&recs, &csv_path)?;
    let manifest = json!({
        "seed": cfg.dataset.synth.seed,
        "params": cfg.dataset.synth,
        "recordings": recs.len(),
        "csv": csv_path.file_name().and_then(|s| s.to_str()),
    });
    let manifest_path = csv_path.with_extension("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n")?;
    println!(
        "wrote {} ({} recordings) and {}",
        csv_path.display(),
        recs.len(),
        manifest_path.display()
    );
    Ok(())
}

fn cmd_pretrain(common: &ConfigArgs) -> Result<()> {
    let cfg = common.load()?;
    let data = prepare(&cfg)?;
    let run_seed = cfg.seeds[0];
    let k = data.train.channel_count;
    let pc = cfg.pretrain_config(run_seed, k);
    let mut params = init_params(&cfg.encoder_config(), k, data.train.num_classes, run_seed)?;
    let dir = make_run_dir(&cfg.output_dir, "pretrain")?;
    write_snapshot(&dir, &cfg)?;
    let mut log = BufWriter::new(File::create(dir.join("run.ndjson"))?);
    let curve = {
        let mut sink = |r: &StepRecord| {
            let line = serde_json::to_string(r).expect("step record serializes");
            let _ = writeln!(log, "{line}");
        };
        pretrain(&mut params, &pc, &data.train, &mut sink)?
    };
    log.flush()?;
    save_checkpoint(&params, &dir.join("checkpoint.mrck"))?;
    write_meta(
        &dir,
        "pretrain",
        json!({
            "seed": run_seed,
            "train_windows": data.train.len(),
            "channels": k,
            "classes": data.train.num_classes,
        }),
    )?;
    let last = curve.last().expect("at least one epoch");
    println!(
        "pretrained {} epochs; final loss {:.6} (time {:.6}, channel {:.6})",
        curve.len(),
        last.combined,
        last.loss_time,
        last.loss_channel
    );
    println!("run dir: {}", dir.display());
    Ok(())
}

/// Single-model test-split score as a one-row report.
fn evaluate_model(
    params: &ModelParams,
    test: &WindowSet,
    batch_size: usize,
    protocol: &str,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    let preds = predict_labels(params, test, batch_size)?;
    let (f1, per_class_f1) = macro_f1(&preds, &test.labels(), test.num_classes)?;
    Ok(MetricsReport {
        protocol: protocol.into(),
        row: "test".into(),
        per_run_f1: vec![f1],
        mean_f1: f1,
        ci95_halfwidth: None,
        per_class_f1,
        config,
    })
}

fn cmd_finetune(common: &ConfigArgs, checkpoint: &Path) -> Result<()> {
    let cfg = common.load()?;
    let data = prepare(&cfg)?;
    let run_seed = cfg.seeds[0];
    let mut params = load_checkpoint(checkpoint)?;
    params.ensure_compatible(data.train.channel_count, data.train.num_classes)?;
    let labeled = match cfg.finetune.labels_per_class {
        Some(x) => sample_per_class(&data.train, x, run_seed)?,
        None => data.train.clone(),
    };
    let fc = cfg.finetune_config(run_seed);
    let dir = make_run_dir(&cfg.output_dir, "finetune")?;
    write_snapshot(&dir, &cfg)?;
    let mut log = BufWriter::new(File::create(dir.join("run.ndjson"))?);
    let summaries = {
        let mut sink = |r: &StepRecord| {
            let line = serde_json::to_string(r).expect("step record serializes");
            let _ = writeln!(log, "{line}");
        };
        finetune(&mut params, &fc, &labeled, &data.val, &mut sink)?
    };
    log.flush()?;
    save_checkpoint(&params, &dir.join("checkpoint.mrck"))?;
    let report = evaluate_model(
        &params,
        &data.test,
        fc.batch_size,
        "finetune",
        json!({
            "checkpoint": checkpoint.display().to_string(),
            "seed": run_seed,
            "freeze_encoder": fc.freeze_encoder,
            "labels_per_class": cfg.finetune.labels_per_class,
        }),
    )?;
    write_report_files(&dir, std::slice::from_ref(&report))?;
    write_meta(
        &dir,
        "finetune",
        json!({"labeled_windows": labeled.len(), "epochs": summaries.len()}),
    )?;
    println!("test macro F1 {:.4}", report.mean_f1);
    println!("run dir: {}", dir.display());
    Ok(())
}

fn cmd_eval(common: &ConfigArgs, checkpoint: &Path) -> Result<()> {
    let cfg = common.load()?;
    let data = prepare(&cfg)?;
    let params = load_checkpoint(checkpoint)?;
    params.ensure_compatible(data.train.channel_count, data.train.num_classes)?;
    let dir = make_run_dir(&cfg.output_dir, "eval")?;
    write_snapshot(&dir, &cfg)?;
    let report = evaluate_model(
        &params,
        &data.test,
        cfg.finetune.batch_size,
        "eval",
        json!({"checkpoint": checkpoint.display().to_string()}),
    )?;
    write_report_files(&dir, std::slice::from_ref(&report))?;
    write_meta(&dir, "eval", json!({"test_windows": data.test.len()}))?;
    println!("test macro F1 {:.4}", report.mean_f1);
    println!("run dir: {}", dir.display());
    Ok(())
}

fn cmd_sweep(common: &ConfigArgs, axis: SweepAxis) -> Result<()> {
    let cfg = common.load()?;
    let data = prepare(&cfg)?;
    let k = data.train.channel_count;
    let enc = cfg.encoder_config();
    let pre = cfg.pretrain_config(0, k);
    let ft = cfg.finetune_config(0);
    let protocol = axis.protocol();
    let labels_per_class = cfg.finetune.labels_per_class;

    let frozen_row = |name: String, p: crate::train::PretrainConfig| {
        let mut f = ft.clone();
        f.freeze_encoder = true;
        (
            name,
            PipelineConfig {
                encoder: enc,
                pretrain: Some(p),
                finetune: f,
                labels_per_class,
            },
        )
    };

    let reports = match axis {
        SweepAxis::X => {
            run_semi_supervised_sweep(&enc, &pre, &ft, &data, &DEFAULT_X_VALUES, &cfg.seeds)?
        }
        SweepAxis::Alpha => {
            let rows: Vec<_> = ALPHA_GRID
                .iter()
                .map(|&a| {
                    let mut p = pre.clone();
                    p.alpha = a;
                    frozen_row(format!("alpha={a}"), p)
                })
                .collect();
            run_pipeline_rows(protocol, &rows, &data, &cfg.seeds)?
        }
        SweepAxis::TimeRatio => {
            if !pre.strategy.kind.masks_time() {
                return Err(Error::Config(format!(
                    "time_ratio sweep needs a time-masking strategy, got {}",
                    pre.strategy.kind.name()
                )));
            }
            let rows: Vec<_> = TIME_RATIO_GRID
                .iter()
                .map(|&r| {
                    let mut p = pre.clone();
                    p.strategy.time_ratio = r;
                    frozen_row(format!("time_ratio={r}"), p)
                })
                .collect();
            run_pipeline_rows(protocol, &rows, &data, &cfg.seeds)?
        }
        SweepAxis::ChannelCount => {
            if !pre.strategy.kind.masks_channel() {
                return Err(Error::Config(format!(
                    "channel_count sweep needs a channel-masking strategy, got {}",
                    pre.strategy.kind.name()
                )));
            }
            if *CHANNEL_COUNT_GRID.last().unwrap() > k {
                return Err(Error::Config(format!(
                    "channel_count sweep masks up to {} channels but the data has {k}",
                    CHANNEL_COUNT_GRID.last().unwrap()
                )));
            }
            let rows: Vec<_> = CHANNEL_COUNT_GRID
                .iter()
                .map(|&c| {
                    let mut p = pre.clone();
                    p.strategy.channel_count_masked = c;
                    frozen_row(format!("channel_count={c}"), p)
                })
                .collect();
            run_pipeline_rows(protocol, &rows, &data, &cfg.seeds)?
        }
        SweepAxis::Trick => run_trick_comparison(&enc, &pre, &ft, &data, &cfg.seeds)?,
        SweepAxis::Anomaly => {
            // both paradigms are trained once at the first seed; the
            // remaining seeds redraw which channels are zeroed
            let mut p = pre.clone();
            p.strategy = StrategyConfig::for_kind(StrategyKind::Channel, k);
            let (_, pipe_pre) = frozen_row(String::new(), p);
            let mut f = ft.clone();
            f.freeze_encoder = false;
            let pipe_sup = PipelineConfig {
                encoder: enc,
                pretrain: None,
                finetune: f,
                labels_per_class,
            };
            let trained_pre = run_one_pipeline(&pipe_pre, &data, cfg.seeds[0])?;
            let trained_sup = run_one_pipeline(&pipe_sup, &data, cfg.seeds[0])?;
            run_anomaly_eval(
                &trained_pre.model,
                &trained_sup.model,
                &data.test,
                &DEFAULT_M_VALUES,
                &cfg.seeds,
                ft.batch_size,
            )?
        }
        SweepAxis::Strategy => run_strategy_comparison(&enc, &pre, &ft, &data, &cfg.seeds)?,
    };

    let dir = make_run_dir(&cfg.output_dir, protocol)?;
    write_snapshot(&dir, &cfg)?;
    write_report_files(&dir, &reports)?;
    write_meta(&dir, protocol, json!({"rows": reports.len(), "seeds": cfg.seeds}))?;
    print_reports(&reports);
    println!("run dir: {}", dir.display());
    Ok(())
}
