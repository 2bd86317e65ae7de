//! Run configuration: one versioned TOML file describes a whole experiment
//! (dataset, windowing, split, model, strategy, schedules, seeds, output
//! directory). Unknown keys are rejected, dotted-path flag overrides win
//! over the file, and every default mirrors the reference settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::masking::{StrategyConfig, StrategyKind};
use crate::model::EncoderConfig;
use crate::train::{FinetuneConfig, PretrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Csv,
}

/// Where the recordings come from. `synth` is ignored for CSV datasets and
/// `path` for synthetic ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Sample rate attached to CSV recordings (their files carry none).
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub synth: SynthConfig,
}

fn default_sample_rate() -> f64 {
    50.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            sample_rate_hz: 50.0,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub length: usize,
    pub overlap: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            length: 128,
            overlap: 0.5,
        }
    }
}

/// Subject split. Explicit subject lists win when given; otherwise subjects
/// are drawn by fraction with the split seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default)]
    pub test_subjects: Vec<String>,
    #[serde(default)]
    pub val_subjects: Vec<String>,
    #[serde(default = "default_split_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_split_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_split_fraction() -> f64 {
    0.25
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_subjects: Vec::new(),
            val_subjects: Vec::new(),
            test_fraction: 0.25,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn to_spec(&self) -> SplitSpec {
        if !self.test_subjects.is_empty() || !self.val_subjects.is_empty() {
            SplitSpec::ExplicitSubjects {
                test: self.test_subjects.clone(),
                val: self.val_subjects.clone(),
            }
        } else {
            SplitSpec::SubjectFraction {
                test_fraction: self.test_fraction,
                val_fraction: self.val_fraction,
                seed: self.seed,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            d_model: 128,
            num_blocks: 3,
            num_heads: 4,
            ff_dim: 256,
            dropout: 0.1,
        }
    }
}

impl EncoderSection {
    pub fn to_encoder(&self, max_len: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
            max_len,
        }
    }
}

/// Strategy knobs. Unset numeric fields fall back to the reference settings
/// for the chosen kind at the dataset's channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub kind: StrategyKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span_geometric_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span_max_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_count_masked: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub same_position_per_batch: Option<bool>,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            kind: StrategyKind::TimeChannel,
            time_ratio: None,
            span_ratio: None,
            span_geometric_p: None,
            span_max_len: None,
            channel_count_masked: None,
            same_position_per_batch: None,
        }
    }
}

impl StrategySection {
    pub fn resolve(&self, channel_count: usize) -> StrategyConfig {
        let mut cfg = StrategyConfig::for_kind(self.kind, channel_count);
        if let Some(v) = self.time_ratio {
            cfg.time_ratio = v;
        }
        if let Some(v) = self.span_ratio {
            cfg.span_ratio = v;
        }
        if let Some(v) = self.span_geometric_p {
            cfg.span_geometric_p = v;
        }
        if let Some(v) = self.span_max_len {
            cfg.span_max_len = v;
        }
        if let Some(v) = self.channel_count_masked {
            cfg.channel_count_masked = v;
        }
        if let Some(v) = self.same_position_per_batch {
            cfg.same_position_per_batch = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 256,
            lr: 1e-3,
            alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub freeze_encoder: bool,
    /// None trains on every labeled window.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_per_class: Option<usize>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1024,
            lr: 1e-3,
            freeze_encoder: true,
            labels_per_class: None,
        }
    }
}

/// The whole experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            output_dir: default_output_dir(),
            seeds: default_seeds(),
            dataset: DatasetConfig::default(),
            window: WindowConfig::default(),
            split: SplitConfig::default(),
            encoder: EncoderSection::default(),
            strategy: StrategySection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.window.length < 2 {
            return Err(Error::Config(format!(
                "window.length must be >= 2, got {}",
                self.window.length
            )));
        }
        if !(0.0..1.0).contains(&self.window.overlap) {
            return Err(Error::Config(format!(
                "window.overlap must be in [0, 1), got {}",
                self.window.overlap
            )));
        }
        if self.dataset.kind == DatasetKind::Csv && self.dataset.path.is_none() {
            return Err(Error::Config(
                "dataset.path is required when dataset.kind = \"csv\"".into(),
            ));
        }
        self.encoder.to_encoder(self.window.length).validate()?;
        self.pretrain_config(0, 1).validate()?;
        self.finetune_config(0).validate()?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        self.encoder.to_encoder(self.window.length)
    }

    /// Strategy knobs are resolved against the channel count, so the caller
    /// supplies it after loading the data.
    pub fn pretrain_config(&self, seed: u64, channel_count: usize) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            strategy: self.strategy.resolve(channel_count),
            alpha: self.pretrain.alpha,
            seed,
        }
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune.epochs,
            batch_size: self.finetune.batch_size,
            lr: self.finetune.lr,
            freeze_encoder: self.finetune.freeze_encoder,
            seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("serializing config: {e}")))
    }
}

/// Parses a TOML config and applies `key.path=value` overrides on top.
pub fn parse_run_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("config schema error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_run_config(&text, overrides)
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' must look like key.path=value")))?;
    let leaf = parse_override_value(raw);
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override '{spec}' has an empty key segment")));
    }
    let mut node = root;
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}': '{seg}' is not a table")))?;
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{path}' does not address a table")))?;
    table.insert(segments.last().unwrap().to_string(), leaf);
    Ok(())
}

/// `value` is parsed as a TOML literal (number, bool, array, string); input
/// that does not parse is taken as a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_reference_settings() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.version, 1);
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.window.length, 128);
        assert_eq!(cfg.pretrain.epochs, 150);
        assert_eq!(cfg.pretrain.batch_size, 256);
        assert_eq!(cfg.pretrain.lr, 1e-3);
        assert_eq!(cfg.pretrain.alpha, 0.5);
        assert_eq!(cfg.finetune.epochs, 100);
        assert_eq!(cfg.finetune.batch_size, 1024);
        assert!(cfg.finetune.freeze_encoder);
        assert_eq!(cfg.strategy.kind, StrategyKind::TimeChannel);
        let enc = cfg.encoder_config();
        assert_eq!(
            (enc.d_model, enc.num_blocks, enc.num_heads, enc.ff_dim, enc.max_len),
            (128, 3, 4, 256, 128)
        );
        // resolved strategy at K=6 carries the reference knobs
        let strat = cfg.strategy.resolve(6);
        assert_eq!(strat.time_ratio, 0.10);
        assert_eq!(strat.channel_count_masked, 2);
        assert!(strat.same_position_per_batch);
    }

    #[test]
    fn empty_file_is_the_default_config() {
        let cfg = parse_run_config("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = parse_run_config("typo_key = 3", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("typo_key"), "{err}");
        let err = parse_run_config("[pretrain]\nepochs = 1\nlearning = 2.0", &[]).unwrap_err();
        assert!(err.to_string().contains("learning"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let err = parse_run_config("version = 2", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn overrides_win_over_the_file() {
        let text = "[pretrain]\nepochs = 9";
        let cfg = parse_run_config(
            text,
            &[
                "pretrain.epochs=3".into(),
                "strategy.kind=channel".into(),
                "finetune.freeze_encoder=false".into(),
                "seeds=[7, 8]".into(),
                "dataset.synth.num_classes=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.strategy.kind, StrategyKind::Channel);
        assert!(!cfg.finetune.freeze_encoder);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.dataset.synth.num_classes, 4);
    }

    #[test]
    fn bad_override_shapes_are_config_errors() {
        assert!(parse_run_config("", &["no_equals_sign".into()]).is_err());
        assert!(parse_run_config("", &["pretrain.epochs.deep=1".into()]).is_err());
        // unknown key introduced by an override is still schema-checked
        assert!(parse_run_config("", &["pretrain.bogus=1".into()]).is_err());
    }

    #[test]
    fn string_overrides_need_no_quotes() {
        let cfg = parse_run_config(
            "",
            &["dataset.kind=csv".into(), "dataset.path=data/x.csv".into()],
        )
        .unwrap();
        assert_eq!(cfg.dataset.kind, DatasetKind::Csv);
        assert_eq!(cfg.dataset.path, Some(PathBuf::from("data/x.csv")));
    }

    #[test]
    fn csv_kind_requires_a_path() {
        let err = parse_run_config("[dataset]\nkind = \"csv\"", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("dataset.path"), "{err}");
    }

    #[test]
    fn explicit_subjects_win_over_fractions() {
        let cfg = parse_run_config("[split]\ntest_subjects = [\"s3\"]", &[]).unwrap();
        match cfg.split.to_spec() {
            SplitSpec::ExplicitSubjects { test, val } => {
                assert_eq!(test, vec!["s3".to_string()]);
                assert!(val.is_empty());
            }
            other => panic!("expected explicit split, got {other:?}"),
        }
        let cfg = parse_run_config("", &[]).unwrap();
        assert!(matches!(cfg.split.to_spec(), SplitSpec::SubjectFraction { .. }));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = parse_run_config("", &["strategy.time_ratio=0.3".into()]).unwrap();
        let text = cfg.to_toml().unwrap();
        let back = parse_run_config(&text, &[]).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn strategy_section_overrides_reference_knobs() {
        let cfg = parse_run_config(
            "[strategy]\nkind = \"span-channel\"\nspan_max_len = 4\nchannel_count_masked = 1",
            &[],
        )
        .unwrap();
        let strat = cfg.strategy.resolve(6);
        assert_eq!(strat.kind, StrategyKind::SpanChannel);
        assert_eq!(strat.span_max_len, 4);
        assert_eq!(strat.channel_count_masked, 1);
        assert_eq!(strat.span_ratio, 0.15);
    }
}
