//! Mask sampling and application: time, span, and channel masks over
//! fixed-length windows, plus the batch-level same-position trick.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::data::{round_half_up, SensorWindow};
use crate::error::{Error, Result};

/// The index sets defining one mask: rows (time steps) and columns (channels)
/// to be zeroed. Either set may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub time_indices: BTreeSet<usize>,
    pub channel_indices: BTreeSet<usize>,
}

impl MaskSpec {
    pub fn new(time_indices: BTreeSet<usize>, channel_indices: BTreeSet<usize>) -> Self {
        Self {
            time_indices,
            channel_indices,
        }
    }

    pub fn empty() -> Self {
        Self::new(BTreeSet::new(), BTreeSet::new())
    }

    /// True when cell (i, j) is masked, i.e. i is a masked step or j a masked channel.
    pub fn covers(&self, i: usize, j: usize) -> bool {
        self.time_indices.contains(&i) || self.channel_indices.contains(&j)
    }

    /// Number of masked cells in an n-by-k window: |T|k + |C|n - |T||C|.
    pub fn masked_cell_count(&self, n: usize, k: usize) -> usize {
        let t = self.time_indices.len();
        let c = self.channel_indices.len();
        t * k + c * n - t * c
    }

    pub fn validate_for(&self, n: usize, k: usize) -> Result<()> {
        if let Some(&i) = self.time_indices.iter().next_back() {
            if i >= n {
                return Err(Error::Argument(format!("time index {i} out of range for N={n}")));
            }
        }
        if let Some(&j) = self.channel_indices.iter().next_back() {
            if j >= k {
                return Err(Error::Argument(format!(
                    "channel index {j} out of range for K={k}"
                )));
            }
        }
        Ok(())
    }
}

/// Canonical log form: `T=[..];C=[..]`.
impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fmt_set = |set: &BTreeSet<usize>| {
            set.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "T=[{}];C=[{}]",
            fmt_set(&self.time_indices),
            fmt_set(&self.channel_indices)
        )
    }
}

/// Which masking strategy drives pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Time,
    Span,
    Channel,
    TimeChannel,
    SpanChannel,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Time,
        StrategyKind::Span,
        StrategyKind::Channel,
        StrategyKind::TimeChannel,
        StrategyKind::SpanChannel,
    ];

    pub fn masks_time(&self) -> bool {
        matches!(self, StrategyKind::Time | StrategyKind::TimeChannel)
    }

    pub fn masks_span(&self) -> bool {
        matches!(self, StrategyKind::Span | StrategyKind::SpanChannel)
    }

    pub fn masks_channel(&self) -> bool {
        matches!(
            self,
            StrategyKind::Channel | StrategyKind::TimeChannel | StrategyKind::SpanChannel
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Time => "time",
            StrategyKind::Span => "span",
            StrategyKind::Channel => "channel",
            StrategyKind::TimeChannel => "time-channel",
            StrategyKind::SpanChannel => "span-channel",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(StrategyKind::Time),
            "span" => Ok(StrategyKind::Span),
            "channel" => Ok(StrategyKind::Channel),
            "time-channel" => Ok(StrategyKind::TimeChannel),
            "span-channel" => Ok(StrategyKind::SpanChannel),
            other => Err(Error::Config(format!(
                "unknown strategy kind '{other}' (expected time|span|channel|time-channel|span-channel)"
            ))),
        }
    }
}

/// Full description of a masking strategy and its knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub time_ratio: f64,
    pub span_ratio: f64,
    pub span_geometric_p: f64,
    pub span_max_len: usize,
    pub channel_count_masked: usize,
    pub same_position_per_batch: bool,
}

impl StrategyConfig {
    /// Reference settings: 10% time ratio, 15% span ratio, geometric span
    /// lengths with p = 0.2 clipped at 10, half the channels masked for the
    /// pure channel strategy and 2 for the combined strategies, one mask
    /// position shared per batch.
    pub fn for_kind(kind: StrategyKind, channel_count: usize) -> Self {
        let channel_count_masked = match kind {
            StrategyKind::Channel => round_half_up(channel_count as f64 / 2.0),
            StrategyKind::TimeChannel | StrategyKind::SpanChannel => 2.min(channel_count),
            _ => 0,
        };
        Self {
            kind,
            time_ratio: 0.10,
            span_ratio: 0.15,
            span_geometric_p: 0.2,
            span_max_len: 10,
            channel_count_masked,
            same_position_per_batch: true,
        }
    }

    pub fn validate(&self, channel_count: usize) -> Result<()> {
        for (name, v) in [("time_ratio", self.time_ratio), ("span_ratio", self.span_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.span_geometric_p) || self.span_geometric_p == 0.0 {
            return Err(Error::Config(format!(
                "span_geometric_p must be in (0, 1), got {}",
                self.span_geometric_p
            )));
        }
        if self.span_max_len == 0 {
            return Err(Error::Config("span_max_len must be positive".into()));
        }
        if self.kind.masks_channel() && self.channel_count_masked > channel_count {
            return Err(Error::Config(format!(
                "channel_count_masked {} exceeds channel count {}",
                self.channel_count_masked, channel_count
            )));
        }
        Ok(())
    }
}

/// Ratio-to-count conversion shared by the time and span samplers:
/// round half up, at least 1 when the ratio is positive, at most n.
fn mask_count(n: usize, ratio: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("mask ratio must be in [0, 1], got {ratio}")));
    }
    if ratio == 0.0 {
        return Ok(0);
    }
    Ok(round_half_up(ratio * n as f64).clamp(1, n))
}

/// Uniformly samples `round(ratio * n)` distinct time indices.
pub fn sample_time_mask(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<BTreeSet<usize>> {
    let count = mask_count(n, ratio)?;
    Ok(index_sample(rng, n, count).into_iter().collect())
}

/// Samples contiguous spans with geometric lengths (clipped to `[1, max_len]`)
/// and uniform starts until exactly `round(ratio * n)` indices are masked.
/// Overlapping placements are resampled a bounded number of times, after which
/// remaining cells are filled adjacent to existing runs so the target count is
/// always met exactly.
pub fn sample_span_mask(
    n: usize,
    ratio: f64,
    p: f64,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeSet<usize>> {
    let target = mask_count(n, ratio)?;
    if max_len == 0 {
        return Err(Error::Argument("span max_len must be positive".into()));
    }
    let geometric =
        Geometric::new(p).map_err(|e| Error::Argument(format!("bad geometric p: {e}")))?;
    let mut masked = vec![false; n];
    let mut remaining = target;
    while remaining > 0 {
        let len = ((geometric.sample(rng) as usize + 1).min(max_len)).min(remaining);
        let mut placed = false;
        for _ in 0..50 {
            let start = rng.gen_range(0..=n - len);
            if masked[start..start + len].iter().all(|&m| !m) {
                masked[start..start + len].iter_mut().for_each(|m| *m = true);
                remaining -= len;
                placed = true;
                break;
            }
        }
        if !placed {
            // Fill cells bordering existing runs first so contiguity is kept.
            let mut to_fill = len;
            while to_fill > 0 && remaining > 0 {
                let next = (0..n)
                    .find(|&i| {
                        !masked[i]
                            && ((i > 0 && masked[i - 1]) || (i + 1 < n && masked[i + 1]))
                    })
                    .or_else(|| (0..n).find(|&i| !masked[i]));
                match next {
                    Some(i) => {
                        masked[i] = true;
                        remaining -= 1;
                        to_fill -= 1;
                    }
                    None => break,
                }
            }
        }
    }
    Ok(masked
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect())
}

/// Uniformly samples `count` distinct channel indices.
pub fn sample_channel_mask(k: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<BTreeSet<usize>> {
    if count > k {
        return Err(Error::Argument(format!(
            "cannot mask {count} channels of a {k}-channel window"
        )));
    }
    Ok(index_sample(rng, k, count).into_iter().collect())
}

/// Samples one mask according to the strategy kind. Pure-time strategies leave
/// C empty, the pure-channel strategy leaves T empty.
pub fn sample_strategy_mask(
    n: usize,
    k: usize,
    cfg: &StrategyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSpec> {
    let time_indices = if cfg.kind.masks_time() {
        sample_time_mask(n, cfg.time_ratio, rng)?
    } else if cfg.kind.masks_span() {
        sample_span_mask(n, cfg.span_ratio, cfg.span_geometric_p, cfg.span_max_len, rng)?
    } else {
        BTreeSet::new()
    };
    let channel_indices = if cfg.kind.masks_channel() {
        sample_channel_mask(k, cfg.channel_count_masked, rng)?
    } else {
        BTreeSet::new()
    };
    Ok(MaskSpec::new(time_indices, channel_indices))
}

/// Zeroes cell (i, j) exactly when i is in T or j is in C; the input is untouched.
pub fn apply_mask(window: &SensorWindow, spec: &MaskSpec) -> Result<SensorWindow> {
    spec.validate_for(window.window_len(), window.channels())?;
    let mut values = window.values.clone();
    for &i in &spec.time_indices {
        values.row_mut(i).fill(0.0);
    }
    for &j in &spec.channel_indices {
        values.column_mut(j).fill(0.0);
    }
    Ok(SensorWindow {
        values,
        label: window.label,
        subject_id: window.subject_id.clone(),
    })
}

/// Masks a batch. With `same_position_per_batch` one spec is sampled and
/// replicated; otherwise every window draws its own.
pub fn batch_mask(
    batch: &[SensorWindow],
    cfg: &StrategyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SensorWindow>, Vec<MaskSpec>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Argument("batch_mask requires a nonempty batch".into()))?;
    let (n, k) = (first.window_len(), first.channels());
    if batch.iter().any(|w| w.window_len() != n || w.channels() != k) {
        return Err(Error::Argument("batch windows have mixed dimensions".into()));
    }
    cfg.validate(k)?;
    let specs: Vec<MaskSpec> = if cfg.same_position_per_batch {
        let spec = sample_strategy_mask(n, k, cfg, rng)?;
        vec![spec; batch.len()]
    } else {
        (0..batch.len())
            .map(|_| sample_strategy_mask(n, k, cfg, rng))
            .collect::<Result<_>>()?
    };
    let masked = batch
        .iter()
        .zip(&specs)
        .map(|(w, s)| apply_mask(w, s))
        .collect::<Result<_>>()?;
    Ok((masked, specs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn window(n: usize, k: usize) -> SensorWindow {
        let values = Array2::from_shape_fn((n, k), |(i, j)| (i * k + j + 1) as f64);
        SensorWindow::new(values, 0, "s").unwrap()
    }

    #[test]
    fn time_mask_counts() {
        assert_eq!(sample_time_mask(100, 0.10, &mut rng(0)).unwrap().len(), 10);
        assert!(sample_time_mask(100, 0.0, &mut rng(0)).unwrap().is_empty());
        assert_eq!(sample_time_mask(100, 0.90, &mut rng(0)).unwrap().len(), 90);
        // positive ratio always masks at least one step
        assert_eq!(sample_time_mask(10, 0.01, &mut rng(0)).unwrap().len(), 1);
    }

    fn runs(set: &BTreeSet<usize>) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &i in set {
            match out.last_mut() {
                Some((_, end)) if *end + 1 == i => *end = i,
                _ => out.push((i, i)),
            }
        }
        out
    }

    #[test]
    fn span_mask_exact_count_and_runs() {
        let set = sample_span_mask(100, 0.15, 0.2, 10, &mut rng(1)).unwrap();
        assert_eq!(set.len(), 15);
        let rs = runs(&set);
        assert!(!rs.is_empty());
        for (start, end) in rs {
            assert!(end - start + 1 <= 15);
        }
    }

    #[test]
    fn span_mask_minimal_target_is_singleton_run() {
        let set = sample_span_mask(100, 0.005, 0.2, 10, &mut rng(2)).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(runs(&set).len(), 1);
    }

    #[test]
    fn span_mask_high_ratio_still_exact() {
        for seed in 0..20 {
            let set = sample_span_mask(50, 0.9, 0.2, 10, &mut rng(seed)).unwrap();
            assert_eq!(set.len(), 45);
        }
    }

    #[test]
    fn span_with_unit_max_len_matches_time_mask_distribution() {
        // Two-sample chi-square over per-index frequencies, 10^4 draws each.
        let n = 20;
        let ratio = 0.2;
        let draws = 10_000;
        let mut span_counts = vec![0f64; n];
        let mut time_counts = vec![0f64; n];
        let mut r1 = rng(33);
        let mut r2 = rng(44);
        for _ in 0..draws {
            for i in sample_span_mask(n, ratio, 0.2, 1, &mut r1).unwrap() {
                span_counts[i] += 1.0;
            }
            for i in sample_time_mask(n, ratio, &mut r2).unwrap() {
                time_counts[i] += 1.0;
            }
        }
        let chi2: f64 = span_counts
            .iter()
            .zip(&time_counts)
            .map(|(a, b)| (a - b).powi(2) / (a + b))
            .sum();
        // df = 19; the 0.999 quantile is 43.8
        assert!(chi2 < 43.8, "chi-square {chi2} too large");
    }

    #[test]
    fn channel_mask_counts() {
        assert_eq!(sample_channel_mask(6, 3, &mut rng(0)).unwrap().len(), 3);
        assert!(sample_channel_mask(6, 0, &mut rng(0)).unwrap().is_empty());
        assert_eq!(sample_channel_mask(9, 5, &mut rng(0)).unwrap().len(), 5);
        assert!(sample_channel_mask(4, 5, &mut rng(0)).is_err());
    }

    #[test]
    fn samplers_are_deterministic_given_rng_state() {
        let a = sample_span_mask(64, 0.3, 0.2, 10, &mut rng(9)).unwrap();
        let b = sample_span_mask(64, 0.3, 0.2, 10, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        let a = sample_time_mask(64, 0.3, &mut rng(9)).unwrap();
        let b = sample_time_mask(64, 0.3, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn apply_empty_mask_is_identity() {
        let w = window(5, 3);
        let out = apply_mask(&w, &MaskSpec::empty()).unwrap();
        assert_eq!(out.values, w.values);
    }

    #[test]
    fn apply_mask_small_enumeration() {
        let w = window(3, 2);
        let spec = MaskSpec::new(BTreeSet::from([1]), BTreeSet::from([0]));
        let out = apply_mask(&w, &spec).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                if i == 1 || j == 0 {
                    assert_eq!(out.values[[i, j]], 0.0);
                } else {
                    assert_eq!(out.values[[i, j]], w.values[[i, j]]);
                }
            }
        }
        assert_eq!(spec.masked_cell_count(3, 2), 4);
    }

    #[test]
    fn full_channel_mask_zeroes_window() {
        let w = window(4, 3);
        let spec = MaskSpec::new(BTreeSet::new(), (0..3).collect());
        let out = apply_mask(&w, &spec).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_only_mask_equals_general_form_with_empty_t() {
        // Zeroing columns directly is the pure-channel special case.
        let w = window(6, 4);
        let c: BTreeSet<usize> = BTreeSet::from([1, 3]);
        let via_general = apply_mask(&w, &MaskSpec::new(BTreeSet::new(), c.clone())).unwrap();
        let mut direct = w.values.clone();
        for &j in &c {
            direct.column_mut(j).fill(0.0);
        }
        assert_eq!(via_general.values, direct);
    }

    #[test]
    fn out_of_range_spec_is_rejected() {
        let w = window(3, 2);
        let spec = MaskSpec::new(BTreeSet::from([3]), BTreeSet::new());
        assert!(apply_mask(&w, &spec).is_err());
    }

    #[test]
    fn batch_same_position_replicates_one_spec() {
        let batch: Vec<SensorWindow> = (0..8).map(|_| window(10, 4)).collect();
        let cfg = StrategyConfig::for_kind(StrategyKind::TimeChannel, 4);
        let (_, specs) = batch_mask(&batch, &cfg, &mut rng(5)).unwrap();
        assert_eq!(specs.len(), 8);
        assert!(specs.iter().all(|s| s == &specs[0]));
    }

    #[test]
    fn batch_different_positions_are_independent() {
        let batch: Vec<SensorWindow> = (0..256).map(|_| window(50, 6)).collect();
        let mut cfg = StrategyConfig::for_kind(StrategyKind::TimeChannel, 6);
        cfg.same_position_per_batch = false;
        let (_, specs) = batch_mask(&batch, &cfg, &mut rng(5)).unwrap();
        let distinct: std::collections::BTreeSet<String> =
            specs.iter().map(|s| s.to_string()).collect();
        assert!(distinct.len() > 200, "only {} distinct specs", distinct.len());
    }

    #[test]
    fn channel_strategy_leaves_time_empty() {
        let batch: Vec<SensorWindow> = (0..4).map(|_| window(10, 6)).collect();
        let cfg = StrategyConfig::for_kind(StrategyKind::Channel, 6);
        assert_eq!(cfg.channel_count_masked, 3);
        let (_, specs) = batch_mask(&batch, &cfg, &mut rng(6)).unwrap();
        for s in &specs {
            assert!(s.time_indices.is_empty());
            assert_eq!(s.channel_indices.len(), 3);
        }
    }

    #[test]
    fn display_form() {
        let spec = MaskSpec::new(BTreeSet::from([2, 0]), BTreeSet::from([1]));
        assert_eq!(spec.to_string(), "T=[0,2];C=[1]");
    }

    proptest! {
        #[test]
        fn masked_cell_count_matches_indicator(
            n in 2usize..20,
            k in 1usize..8,
            seed in 0u64..500,
        ) {
            let mut r = rng(seed);
            let t_count = seed as usize % (n + 1);
            let c_count = (seed as usize / 7) % (k + 1);
            let spec = MaskSpec::new(
                sample_time_mask(n, t_count as f64 / n as f64, &mut r).unwrap(),
                sample_channel_mask(k, c_count, &mut r).unwrap(),
            );
            let by_indicator = (0..n)
                .flat_map(|i| (0..k).map(move |j| (i, j)))
                .filter(|&(i, j)| spec.covers(i, j))
                .count();
            prop_assert_eq!(spec.masked_cell_count(n, k), by_indicator);
        }

        #[test]
        fn apply_mask_is_idempotent(n in 2usize..16, k in 1usize..6, seed in 0u64..200) {
            let w = window(n, k);
            let mut r = rng(seed);
            let spec = MaskSpec::new(
                sample_time_mask(n, 0.3, &mut r).unwrap(),
                sample_channel_mask(k, k / 2, &mut r).unwrap(),
            );
            let once = apply_mask(&w, &spec).unwrap();
            let twice = apply_mask(&once, &spec).unwrap();
            prop_assert_eq!(&once.values, &twice.values);
        }

        #[test]
        fn span_mask_hits_exact_target(n in 4usize..128, pct in 1usize..100, seed in 0u64..100) {
            let ratio = pct as f64 / 100.0;
            let set = sample_span_mask(n, ratio, 0.2, 10, &mut rng(seed)).unwrap();
            let expected = round_half_up(ratio * n as f64).clamp(1, n);
            prop_assert_eq!(set.len(), expected);
        }
    }
}
