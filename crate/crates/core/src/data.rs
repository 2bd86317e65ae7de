//! Data pipeline: CSV ingestion, window segmentation, subject-disjoint splits,
//! per-channel normalization, semi-supervised subsampling, synthetic recordings,
//! and channel-anomaly injection.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Round-half-up for nonnegative reals, used for stride / count conversions.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

// ── Domain types ─────────────────────────────────────────────────────────────

/// A contiguous recording of one subject performing one activity.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject_id: String,
    pub activity_label: usize,
    /// (length, channels), sensor units.
    pub samples: Array2<f64>,
    pub sample_rate_hz: f64,
}

impl RawRecording {
    pub fn new(
        subject_id: impl Into<String>,
        activity_label: usize,
        samples: Array2<f64>,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::Argument(
                "recording must have at least one sample and one channel".into(),
            ));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(Error::Argument("sample_rate_hz must be positive".into()));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            activity_label,
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.ncols()
    }
}

/// A fixed-length window cut from a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorWindow {
    /// (window_len, channels).
    pub values: Array2<f64>,
    pub label: usize,
    pub subject_id: String,
}

impl SensorWindow {
    pub fn new(values: Array2<f64>, label: usize, subject_id: impl Into<String>) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 1 {
            return Err(Error::Argument(format!(
                "window must be at least 2x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("window contains non-finite values".into()));
        }
        Ok(Self {
            values,
            label,
            subject_id: subject_id.into(),
        })
    }

    pub fn window_len(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// A homogeneous collection of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<SensorWindow>,
    pub num_classes: usize,
    pub channel_count: usize,
}

impl WindowSet {
    /// Builds a set, checking dimension homogeneity and label range.
    /// `num_classes = None` infers `max label + 1`.
    pub fn from_windows(windows: Vec<SensorWindow>, num_classes: Option<usize>) -> Result<Self> {
        let channel_count = windows.first().map(|w| w.channels()).unwrap_or(0);
        let window_len = windows.first().map(|w| w.window_len()).unwrap_or(0);
        for w in &windows {
            if w.channels() != channel_count || w.window_len() != window_len {
                return Err(Error::Argument(format!(
                    "window dims {}x{} differ from {}x{}",
                    w.window_len(),
                    w.channels(),
                    window_len,
                    channel_count
                )));
            }
        }
        let inferred = windows.iter().map(|w| w.label + 1).max().unwrap_or(0);
        let num_classes = match num_classes {
            Some(a) => {
                if inferred > a {
                    return Err(Error::Argument(format!(
                        "label {} out of range for {} classes",
                        inferred - 1,
                        a
                    )));
                }
                a
            }
            None => inferred,
        };
        Ok(Self {
            windows,
            num_classes,
            channel_count,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Window length shared by all members, if any member exists.
    pub fn window_len(&self) -> Option<usize> {
        self.windows.first().map(|w| w.window_len())
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.windows
            .iter()
            .map(|w| w.subject_id.clone())
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.label).collect()
    }
}

/// How to partition subjects into train / val / test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    /// Named subject lists for test and val; everything else trains.
    ExplicitSubjects { test: Vec<String>, val: Vec<String> },
    /// Draw test subjects first, then val subjects from the remainder.
    SubjectFraction {
        test_fraction: f64,
        val_fraction: f64,
        seed: u64,
    },
}

/// Column layout of an input CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub subject: String,
    pub label: String,
    pub channels: Vec<String>,
    pub sample_rate_hz: f64,
}

impl CsvSchema {
    /// `subject,label,ch0..ch{k-1}` layout, the format written by the generator.
    pub fn with_channel_count(k: usize, sample_rate_hz: f64) -> Self {
        Self {
            subject: "subject".into(),
            label: "label".into(),
            channels: (0..k).map(|j| format!("ch{j}")).collect(),
            sample_rate_hz,
        }
    }
}

// ── CSV ingestion ────────────────────────────────────────────────────────────

/// Loads one `RawRecording` per contiguous (subject, label) run of rows, in file order.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<RawRecording>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();

    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("schema error: missing column '{name}'")))
    };
    let subject_idx = col(&schema.subject)?;
    let label_idx = col(&schema.label)?;
    let channel_idx: Vec<usize> = schema
        .channels
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let k = channel_idx.len();

    let mut recordings = Vec::new();
    let mut run_key: Option<(String, usize)> = None;
    let mut run_rows: Vec<f64> = Vec::new();

    let flush = |key: &Option<(String, usize)>, rows: &mut Vec<f64>,
                     out: &mut Vec<RawRecording>|
     -> Result<()> {
        if let Some((subject, label)) = key {
            let len = rows.len() / k;
            let samples = Array2::from_shape_vec((len, k), std::mem::take(rows))
                .expect("row buffer length is a multiple of k");
            out.push(RawRecording::new(
                subject.clone(),
                *label,
                samples,
                schema.sample_rate_hz,
            )?);
        }
        Ok(())
    };

    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("csv read error: {e}")))?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or_default();
        let get = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or_else(|| {
                Error::Data(format!("row at line {line} is missing column index {idx}"))
            })
        };
        let subject = get(subject_idx)?.to_string();
        let label: usize = get(label_idx)?.trim().parse().map_err(|_| {
            Error::Data(format!(
                "parse error at line {line}: label '{}' is not a category id",
                get(label_idx).unwrap_or("")
            ))
        })?;
        let key = (subject, label);
        if run_key.as_ref() != Some(&key) {
            flush(&run_key, &mut run_rows, &mut recordings)?;
            run_key = Some(key);
        }
        for (&idx, name) in channel_idx.iter().zip(&schema.channels) {
            let raw = get(idx)?.trim();
            let value: f64 = raw.parse().map_err(|_| {
                Error::Data(format!(
                    "parse error at line {line}: column '{name}' value '{raw}' is not numeric"
                ))
            })?;
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "parse error at line {line}: column '{name}' value '{raw}' is not finite"
                )));
            }
            run_rows.push(value);
        }
    }
    flush(&run_key, &mut run_rows, &mut recordings)?;
    Ok(recordings)
}

/// Writes recordings in the `subject,label,ch0..` format read back by [`load_csv`].
pub fn write_csv(recordings: &[RawRecording], path: &Path) -> Result<()> {
    let k = recordings
        .first()
        .map(|r| r.channels())
        .ok_or_else(|| Error::Argument("nothing to write".into()))?;
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut header = vec!["subject".to_string(), "label".to_string()];
    header.extend((0..k).map(|j| format!("ch{j}")));
    writer
        .write_record(&header)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for rec in recordings {
        for row in rec.samples.rows() {
            let mut fields = vec![rec.subject_id.clone(), rec.activity_label.to_string()];
            fields.extend(row.iter().map(|v| format!("{v:?}")));
            writer
                .write_record(&fields)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    writer
        .flush()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

// ── Segmentation ─────────────────────────────────────────────────────────────

/// Cuts a recording into windows of `window_len` rows with stride
/// `round(window_len * (1 - overlap_fraction))`, floored at 1.
/// Recordings shorter than one window yield an empty list.
pub fn segment(
    rec: &RawRecording,
    window_len: usize,
    overlap_fraction: f64,
) -> Result<Vec<SensorWindow>> {
    if window_len < 2 {
        return Err(Error::Argument("window_len must be >= 2".into()));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Argument(format!(
            "overlap_fraction must be in [0, 1), got {overlap_fraction}"
        )));
    }
    let stride = round_half_up(window_len as f64 * (1.0 - overlap_fraction)).max(1);
    let len = rec.len();
    if len < window_len {
        return Ok(Vec::new());
    }
    let count = (len - window_len) / stride + 1;
    let mut windows = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let values = rec.samples.slice(s![start..start + window_len, ..]).to_owned();
        windows.push(SensorWindow::new(
            values,
            rec.activity_label,
            rec.subject_id.clone(),
        )?);
    }
    Ok(windows)
}

// ── Subject-disjoint splits ──────────────────────────────────────────────────

/// Partitions `ws` into (train, val, test) with no subject spanning two sets.
pub fn split_by_subject(ws: &WindowSet, spec: &SplitSpec) -> Result<(WindowSet, WindowSet, WindowSet)> {
    let all_subjects: Vec<String> = ws.subjects().into_iter().collect();
    let (test_set, val_set): (BTreeSet<String>, BTreeSet<String>) = match spec {
        SplitSpec::ExplicitSubjects { test, val } => {
            for s in test.iter().chain(val.iter()) {
                if !all_subjects.contains(s) {
                    return Err(Error::Config(format!("unknown subject id '{s}'")));
                }
            }
            let test_set: BTreeSet<String> = test.iter().cloned().collect();
            let val_set: BTreeSet<String> = val.iter().cloned().collect();
            if let Some(dup) = test_set.intersection(&val_set).next() {
                return Err(Error::Config(format!(
                    "subject '{dup}' appears in both test and val lists"
                )));
            }
            (test_set, val_set)
        }
        SplitSpec::SubjectFraction {
            test_fraction,
            val_fraction,
            seed,
        } => {
            for (name, f) in [("test_fraction", test_fraction), ("val_fraction", val_fraction)] {
                if !(0.0..=1.0).contains(f) {
                    return Err(Error::Config(format!("{name} must be in [0, 1], got {f}")));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let n = all_subjects.len();
            let n_test = round_half_up(test_fraction * n as f64).min(n);
            let mut test_idx: Vec<usize> = index_sample(&mut rng, n, n_test).into_vec();
            test_idx.sort_unstable();
            let test_set: BTreeSet<String> =
                test_idx.iter().map(|&i| all_subjects[i].clone()).collect();
            let remainder: Vec<&String> = all_subjects
                .iter()
                .filter(|s| !test_set.contains(*s))
                .collect();
            let n_val = round_half_up(val_fraction * remainder.len() as f64).min(remainder.len());
            let mut val_idx: Vec<usize> =
                index_sample(&mut rng, remainder.len(), n_val).into_vec();
            val_idx.sort_unstable();
            let val_set: BTreeSet<String> =
                val_idx.iter().map(|&i| remainder[i].clone()).collect();
            (test_set, val_set)
        }
    };

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for w in &ws.windows {
        if test_set.contains(&w.subject_id) {
            test.push(w.clone());
        } else if val_set.contains(&w.subject_id) {
            val.push(w.clone());
        } else {
            train.push(w.clone());
        }
    }
    let a = Some(ws.num_classes);
    Ok((
        WindowSet::from_windows(train, a)?,
        WindowSet::from_windows(val, a)?,
        WindowSet::from_windows(test, a)?,
    ))
}

// ── Normalization ────────────────────────────────────────────────────────────

/// Per-channel mean and standard deviation over every entry of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Computes train statistics. Channels with std below 1e-8 get std 1 substituted.
pub fn channel_stats(train: &WindowSet) -> Result<ChannelStats> {
    if train.is_empty() {
        return Err(Error::Argument("cannot normalize from an empty train set".into()));
    }
    let k = train.channel_count;
    let mut sum = vec![0.0; k];
    let mut count = 0usize;
    for w in &train.windows {
        for row in w.values.rows() {
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
            }
        }
        count += w.window_len();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; k];
    for w in &train.windows {
        for row in w.values.rows() {
            for (j, v) in row.iter().enumerate() {
                let d = v - mean[j];
                sq[j] += d * d;
            }
        }
    }
    let std: Vec<f64> = sq
        .iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd < 1e-8 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Applies `(x - mean_j) / std_j` to every window.
pub fn apply_stats(ws: &WindowSet, stats: &ChannelStats) -> WindowSet {
    let windows = ws
        .windows
        .iter()
        .map(|w| {
            let mut values = w.values.clone();
            for mut row in values.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - stats.mean[j]) / stats.std[j];
                }
            }
            SensorWindow {
                values,
                label: w.label,
                subject_id: w.subject_id.clone(),
            }
        })
        .collect();
    WindowSet {
        windows,
        num_classes: ws.num_classes,
        channel_count: ws.channel_count,
    }
}

/// Normalizes all sets with statistics computed on `train` alone.
pub fn normalize(train: &WindowSet, others: &[&WindowSet]) -> Result<(WindowSet, Vec<WindowSet>)> {
    let stats = channel_stats(train)?;
    let train_out = apply_stats(train, &stats);
    let others_out = others.iter().map(|ws| apply_stats(ws, &stats)).collect();
    Ok((train_out, others_out))
}

// ── Semi-supervised subsampling ──────────────────────────────────────────────

/// For each class, keeps `min(x, available)` windows sampled uniformly without
/// replacement. Deterministic given `seed`.
pub fn sample_per_class(train: &WindowSet, x: usize, seed: u64) -> Result<WindowSet> {
    if x == 0 {
        return Err(Error::Argument("x must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in train.windows.iter().enumerate() {
        by_class.entry(w.label).or_default().push(i);
    }
    for class in 0..train.num_classes {
        if !by_class.contains_key(&class) {
            return Err(Error::Protocol(format!(
                "class {class} has no windows in the training set"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for (_, indices) in by_class {
        let take = x.min(indices.len());
        let mut picks: Vec<usize> = index_sample(&mut rng, indices.len(), take).into_vec();
        picks.sort_unstable();
        chosen.extend(picks.into_iter().map(|p| indices[p]));
    }
    chosen.sort_unstable();
    let windows = chosen.iter().map(|&i| train.windows[i].clone()).collect();
    WindowSet::from_windows(windows, Some(train.num_classes))
}

/// Stacks same-shaped windows into a (B, N, K) batch tensor.
pub fn stack_windows(windows: &[&SensorWindow]) -> Result<ndarray::Array3<f64>> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Argument("cannot stack an empty batch".into()))?;
    let (n, k) = (first.window_len(), first.channels());
    let mut out = ndarray::Array3::zeros((windows.len(), n, k));
    for (b, w) in windows.iter().enumerate() {
        if w.window_len() != n || w.channels() != k {
            return Err(Error::Argument("batch windows have mixed dimensions".into()));
        }
        out.slice_mut(ndarray::s![b, .., ..]).assign(&w.values);
    }
    Ok(out)
}

// ── Synthetic recordings ─────────────────────────────────────────────────────

/// Parameters for the synthetic multichannel generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_subjects: usize,
    pub num_classes: usize,
    pub length: usize,
    pub channels: usize,
    pub sample_rate_hz: f64,
    pub noise_amp: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_subjects: 4,
            num_classes: 4,
            length: 800,
            channels: 6,
            sample_rate_hz: 50.0,
            noise_amp: 0.1,
            seed: 7,
        }
    }
}

/// Class-dependent base frequency in Hz.
fn synth_freq(class: usize) -> f64 {
    1.0 + 0.75 * class as f64
}

/// Noise-free generator value, closed form. Channel `j` carries the class
/// frequency with channel-specific phase and class-channel-coupled amplitude,
/// so cross-channel structure exists for channel masking to exploit.
pub fn synth_clean_value(cfg: &SynthConfig, class: usize, subject: usize, channel: usize, i: usize) -> f64 {
    let t = i as f64 / cfg.sample_rate_hz;
    let freq = synth_freq(class);
    let phase = 2.0 * PI * channel as f64 / cfg.channels as f64 + 0.1 * subject as f64;
    let amp = 1.0 + 0.5 * (2.0 * PI * ((channel + 1) * (class + 1)) as f64
        / (cfg.channels + cfg.num_classes) as f64)
        .sin();
    amp * (2.0 * PI * freq * t + phase).sin()
}

/// One recording per (subject, class) pair: coupled sinusoids plus Gaussian noise.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<RawRecording>> {
    if cfg.num_classes < 2 || cfg.channels < 2 {
        return Err(Error::Argument(
            "generator requires at least 2 classes and 2 channels".into(),
        ));
    }
    if cfg.length == 0 || cfg.num_subjects == 0 {
        return Err(Error::Argument("length and num_subjects must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Argument(e.to_string()))?;
    let mut recordings = Vec::with_capacity(cfg.num_subjects * cfg.num_classes);
    for subject in 0..cfg.num_subjects {
        for class in 0..cfg.num_classes {
            let mut samples = Array2::zeros((cfg.length, cfg.channels));
            for i in 0..cfg.length {
                for j in 0..cfg.channels {
                    let noise = if cfg.noise_amp == 0.0 {
                        0.0
                    } else {
                        cfg.noise_amp * normal.sample(&mut rng)
                    };
                    samples[[i, j]] = synth_clean_value(cfg, class, subject, j, i) + noise;
                }
            }
            recordings.push(RawRecording::new(
                format!("s{subject}"),
                class,
                samples,
                cfg.sample_rate_hz,
            )?);
        }
    }
    Ok(recordings)
}

// ── Channel anomaly injection ────────────────────────────────────────────────

/// Zeros `m` channels, drawn once per call and applied to every window.
pub fn inject_channel_anomaly(ws: &WindowSet, m: usize, seed: u64) -> Result<WindowSet> {
    let k = ws.channel_count;
    if m > k {
        return Err(Error::Argument(format!(
            "cannot zero {m} channels of a {k}-channel set"
        )));
    }
    if m == 0 {
        return Ok(ws.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels: Vec<usize> = index_sample(&mut rng, k, m).into_vec();
    channels.sort_unstable();
    let windows = ws
        .windows
        .iter()
        .map(|w| {
            let mut values = w.values.clone();
            for &j in &channels {
                values.column_mut(j).fill(0.0);
            }
            SensorWindow {
                values,
                label: w.label,
                subject_id: w.subject_id.clone(),
            }
        })
        .collect();
    Ok(WindowSet {
        windows,
        num_classes: ws.num_classes,
        channel_count: ws.channel_count,
    })
}
