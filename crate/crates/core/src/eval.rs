//! Evaluation: macro-averaged F1, Student-t confidence intervals, and the
//! multi-run experiment protocols (strategy table, labeled-budget sweep,
//! channel-anomaly table, masking-position comparison). Reports are written
//! as JSON plus a flat per-run CSV for external plotting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{
    inject_channel_anomaly, normalize, sample_per_class, segment, split_by_subject, stack_windows,
    RawRecording, SplitSpec, WindowSet,
};
use crate::error::{Error, Result};
use crate::masking::{StrategyConfig, StrategyKind};
use crate::model::{init_params, EncoderConfig, ForwardMode, ModelParams};
use crate::train::{finetune, pretrain, FinetuneConfig, PretrainConfig};

/// Labeled-budget grid used by the semi-supervised protocol.
pub const DEFAULT_X_VALUES: [usize; 7] = [1, 2, 5, 10, 25, 50, 100];
/// Zeroed-channel counts used by the anomaly protocol.
pub const DEFAULT_M_VALUES: [usize; 3] = [1, 3, 5];

/// Macro-averaged F1 over `a` classes. Per class: precision and recall
/// default to 0 when their denominator is 0, and F1 = 0 when both are 0.
/// A class absent from preds and labels alike carries no evidence: it is
/// reported as None and excluded from the mean. A class on one side only
/// scores 0 and is included.
pub fn macro_f1(preds: &[usize], labels: &[usize], a: usize) -> Result<(f64, Vec<Option<f64>>)> {
    if preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "got {} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Argument("cannot score an empty prediction set".into()));
    }
    if let Some(&bad) = preds.iter().chain(labels.iter()).find(|&&c| c >= a) {
        return Err(Error::Argument(format!(
            "class {bad} out of range for {a} classes"
        )));
    }
    let mut tp = vec![0usize; a];
    let mut fp = vec![0usize; a];
    let mut f_n = vec![0usize; a];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            f_n[l] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(a);
    for c in 0..a {
        if tp[c] + fp[c] + f_n[c] == 0 {
            per_class.push(None);
            continue;
        }
        let prec = if tp[c] + fp[c] > 0 {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        } else {
            0.0
        };
        let rec = if tp[c] + f_n[c] > 0 {
            tp[c] as f64 / (tp[c] + f_n[c]) as f64
        } else {
            0.0
        };
        let f1 = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
        per_class.push(Some(f1));
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = included.iter().sum::<f64>() / included.len() as f64;
    Ok((mean, per_class))
}

/// Mean and 95% halfwidth under a Student-t interval with n-1 degrees of
/// freedom and the sample standard deviation.
pub fn confidence_interval(scores: &[f64]) -> Result<(f64, f64)> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "a confidence interval needs at least 2 scores, got {n}"
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score in confidence interval".into()));
    }
    let nf = n as f64;
    let mean = scores.iter().sum::<f64>() / nf;
    let var = scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / nf.sqrt()))
}

/// Eval-mode class predictions, batched. Argmax ties pick the lowest index.
pub fn predict_labels(
    params: &ModelParams,
    set: &WindowSet,
    batch_size: usize,
) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be >= 1".into()));
    }
    if set.is_empty() {
        return Err(Error::Argument("cannot predict on an empty window set".into()));
    }
    let mut preds = Vec::with_capacity(set.len());
    for chunk in set.windows.chunks(batch_size) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = stack_windows(&refs)?;
        let logits = params.classify_input(batch.view(), ForwardMode::Eval, 0)?;
        for row in logits.rows() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}

/// Aggregated scores for one table row or curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub row: String,
    pub per_run_f1: Vec<f64>,
    pub mean_f1: f64,
    /// None when fewer than two runs were aggregated.
    pub ci95_halfwidth: Option<f64>,
    /// Per class, averaged over the runs where the class carried evidence.
    pub per_class_f1: Vec<Option<f64>>,
    /// The exact configuration that produced this row.
    pub config: serde_json::Value,
}

fn build_report(
    protocol: &str,
    row: &str,
    config: serde_json::Value,
    outcomes: &[(f64, Vec<Option<f64>>)],
) -> Result<MetricsReport> {
    let per_run: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let mean_f1 = per_run.iter().sum::<f64>() / per_run.len() as f64;
    let ci95_halfwidth = if per_run.len() >= 2 {
        Some(confidence_interval(&per_run)?.1)
    } else {
        None
    };
    let a = outcomes[0].1.len();
    let mut per_class_f1 = Vec::with_capacity(a);
    for c in 0..a {
        let vals: Vec<f64> = outcomes.iter().filter_map(|o| o.1[c]).collect();
        per_class_f1.push(if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        });
    }
    Ok(MetricsReport {
        protocol: protocol.into(),
        row: row.into(),
        per_run_f1: per_run,
        mean_f1,
        ci95_halfwidth,
        per_class_f1,
        config,
    })
}

/// Subject-disjoint, train-normalized windows for one experiment.
#[derive(Debug, Clone)]
pub struct ProtocolData {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Segments recordings, splits by subject, and normalizes every split with
/// statistics taken from the training split only.
pub fn prepare_protocol_data(
    recordings: &[RawRecording],
    window_len: usize,
    overlap_fraction: f64,
    split: &SplitSpec,
) -> Result<ProtocolData> {
    let mut windows = Vec::new();
    for rec in recordings {
        windows.extend(segment(rec, window_len, overlap_fraction)?);
    }
    let all = WindowSet::from_windows(windows, None)?;
    let (train, val, test) = split_by_subject(&all, split)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("subject split left train or test empty".into()));
    }
    let (train, mut rest) = normalize(&train, &[&val, &test])?;
    let test = rest.pop().expect("two normalized sets");
    let val = rest.pop().expect("two normalized sets");
    Ok(ProtocolData { train, val, test })
}

/// One end-to-end recipe: optional pretraining, then classifier training.
/// `labels_per_class` restricts the labeled set; None uses every training
/// window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub pretrain: Option<PretrainConfig>,
    pub finetune: FinetuneConfig,
    pub labels_per_class: Option<usize>,
}

pub struct PipelineOutcome {
    pub f1: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub model: Box<ModelParams>,
}

/// Runs one pipeline at one seed and scores it on the test split. The seed
/// drives parameter init, masking, dropout, label subsampling, and shuffling;
/// seeds stored inside the pretrain/finetune configs are replaced by it.
pub fn run_one_pipeline(
    cfg: &PipelineConfig,
    data: &ProtocolData,
    run_seed: u64,
) -> Result<PipelineOutcome> {
    let mut params = init_params(
        &cfg.encoder,
        data.train.channel_count,
        data.train.num_classes,
        run_seed,
    )?;
    if let Some(base) = &cfg.pretrain {
        let mut pc = base.clone();
        pc.seed = run_seed;
        pretrain(&mut params, &pc, &data.train, &mut |_| {})?;
    }
    let labeled = match cfg.labels_per_class {
        Some(x) => sample_per_class(&data.train, x, run_seed)?,
        None => data.train.clone(),
    };
    let mut fc = cfg.finetune.clone();
    fc.seed = run_seed;
    finetune(&mut params, &fc, &labeled, &data.val, &mut |_| {})?;
    let preds = predict_labels(&params, &data.test, fc.batch_size)?;
    let (f1, per_class_f1) = macro_f1(&preds, &data.test.labels(), data.test.num_classes)?;
    Ok(PipelineOutcome {
        f1,
        per_class_f1,
        model: Box::new(params),
    })
}

/// Runs every named pipeline across the whole seed list and aggregates one
/// report per row. Rows share the seed list, so comparisons are paired.
pub fn run_pipeline_rows(
    protocol: &str,
    rows: &[(String, PipelineConfig)],
    data: &ProtocolData,
    seeds: &[u64],
) -> Result<Vec<MetricsReport>> {
    if rows.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("need at least one row and one seed".into()));
    }
    let mut reports = Vec::with_capacity(rows.len());
    for (name, cfg) in rows {
        let mut outcomes = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let out = run_one_pipeline(cfg, data, seed)
                .map_err(|e| e.with_context(&format!("row '{name}' seed {seed}")))?;
            outcomes.push((out.f1, out.per_class_f1));
        }
        let snapshot = json!({ "pipeline": cfg, "seeds": seeds });
        reports.push(build_report(protocol, name, snapshot, &outcomes)?);
    }
    Ok(reports)
}

/// Table of the five masking strategies plus a fully supervised baseline.
/// Pretrained rows use the reference settings for each strategy at the
/// dataset's channel count and a frozen encoder; the baseline trains end to
/// end with no pretraining.
pub fn run_strategy_comparison(
    encoder: &EncoderConfig,
    pretrain_base: &PretrainConfig,
    finetune_base: &FinetuneConfig,
    data: &ProtocolData,
    seeds: &[u64],
) -> Result<Vec<MetricsReport>> {
    let k = data.train.channel_count;
    let mut rows = Vec::new();
    for kind in StrategyKind::ALL {
        let mut pre = pretrain_base.clone();
        pre.strategy = StrategyConfig::for_kind(kind, k);
        let mut ft = finetune_base.clone();
        ft.freeze_encoder = true;
        rows.push((
            kind.name().to_string(),
            PipelineConfig {
                encoder: *encoder,
                pretrain: Some(pre),
                finetune: ft,
                labels_per_class: None,
            },
        ));
    }
    let mut ft = finetune_base.clone();
    ft.freeze_encoder = false;
    rows.push((
        "supervised".to_string(),
        PipelineConfig {
            encoder: *encoder,
            pretrain: None,
            finetune: ft,
            labels_per_class: None,
        },
    ));
    run_pipeline_rows("strategy-comparison", &rows, data, seeds)
}

/// Labeled-budget sweep: for every x, a pretrained pipeline (frozen encoder)
/// and a supervised baseline are trained on x labels per class and scored on
/// the full test split, giving both curves of the comparison.
pub fn run_semi_supervised_sweep(
    encoder: &EncoderConfig,
    pretrain_base: &PretrainConfig,
    finetune_base: &FinetuneConfig,
    data: &ProtocolData,
    x_values: &[usize],
    seeds: &[u64],
) -> Result<Vec<MetricsReport>> {
    if x_values.is_empty() {
        return Err(Error::Argument("x_values must be nonempty".into()));
    }
    let mut rows = Vec::new();
    for &x in x_values {
        let mut ft = finetune_base.clone();
        ft.freeze_encoder = true;
        rows.push((
            format!("x={x}/pretrained"),
            PipelineConfig {
                encoder: *encoder,
                pretrain: Some(pretrain_base.clone()),
                finetune: ft,
                labels_per_class: Some(x),
            },
        ));
        let mut ft = finetune_base.clone();
        ft.freeze_encoder = false;
        rows.push((
            format!("x={x}/supervised"),
            PipelineConfig {
                encoder: *encoder,
                pretrain: None,
                finetune: ft,
                labels_per_class: Some(x),
            },
        ));
    }
    run_pipeline_rows("semi-supervised", &rows, data, seeds)
}

/// Evaluates two already-trained models on test sets with m channels zeroed.
/// Each seed redraws which channels are zeroed; both models score the same
/// corrupted set, so the paradigms are paired. m = 0 reproduces the clean
/// test score.
pub fn run_anomaly_eval(
    pretrained: &ModelParams,
    supervised: &ModelParams,
    test: &WindowSet,
    m_values: &[usize],
    seeds: &[u64],
    batch_size: usize,
) -> Result<Vec<MetricsReport>> {
    if m_values.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("need at least one m value and one seed".into()));
    }
    let truth = test.labels();
    let mut reports = Vec::with_capacity(2 * m_values.len());
    for &m in m_values {
        let mut out_pre = Vec::with_capacity(seeds.len());
        let mut out_sup = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let corrupted = inject_channel_anomaly(test, m, seed)?;
            for (model, out) in [(pretrained, &mut out_pre), (supervised, &mut out_sup)] {
                let preds = predict_labels(model, &corrupted, batch_size)?;
                out.push(macro_f1(&preds, &truth, test.num_classes)?);
            }
        }
        for (paradigm, outcomes) in [("pretrained", &out_pre), ("supervised", &out_sup)] {
            let snapshot = json!({ "m": m, "paradigm": paradigm, "seeds": seeds });
            reports.push(build_report(
                "channel-anomaly",
                &format!("m={m}/{paradigm}"),
                snapshot,
                outcomes,
            )?);
        }
    }
    Ok(reports)
}

/// Same-position vs different-position masking within a batch: two full
/// pipelines differing only in that flag, sharing seeds.
pub fn run_trick_comparison(
    encoder: &EncoderConfig,
    pretrain_base: &PretrainConfig,
    finetune_base: &FinetuneConfig,
    data: &ProtocolData,
    seeds: &[u64],
) -> Result<Vec<MetricsReport>> {
    if pretrain_base.strategy.kind != StrategyKind::TimeChannel {
        return Err(Error::Config(format!(
            "position comparison expects the time-channel strategy, got {}",
            pretrain_base.strategy.kind.name()
        )));
    }
    let mut rows = Vec::new();
    for (name, same) in [("same", true), ("different", false)] {
        let mut pre = pretrain_base.clone();
        pre.strategy.same_position_per_batch = same;
        let mut ft = finetune_base.clone();
        ft.freeze_encoder = true;
        rows.push((
            name.to_string(),
            PipelineConfig {
                encoder: *encoder,
                pretrain: Some(pre),
                finetune: ft,
                labels_per_class: None,
            },
        ));
    }
    run_pipeline_rows("position-trick", &rows, data, seeds)
}

pub fn write_reports_json(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, reports)
        .map_err(|e| Error::Format(format!("serializing reports: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_reports_json(path: &Path) -> Result<Vec<MetricsReport>> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Format(format!("parsing reports: {e}")))
}

/// One CSV line per (row, run) pair, for external plotting.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("writing report csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["protocol", "row", "run", "f1", "mean_f1", "ci95_halfwidth"])
        .map_err(csv_err)?;
    for r in reports {
        let ci = r.ci95_halfwidth.map(|v| v.to_string()).unwrap_or_default();
        for (i, f1) in r.per_run_f1.iter().enumerate() {
            let rec = [
                r.protocol.clone(),
                r.row.clone(),
                i.to_string(),
                f1.to_string(),
                r.mean_f1.to_string(),
                ci.clone(),
            ];
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
