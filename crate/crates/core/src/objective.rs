//! Reconstruction and classification losses. The reconstruction loss is a
//! mean squared error over masked cells only, split into a time term (masked
//! rows) and a channel term (masked columns) merged by a weight alpha.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskSpec;

/// One training step's reconstruction loss components.
/// combined = alpha * loss_time + (1 - alpha) * loss_channel, exactly.
/// When one axis has no masked cells its term is skipped by forcing alpha to
/// the endpoint (0 when T is empty, 1 when C is empty), so the identity still
/// holds on the recorded fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_time: f64,
    pub loss_channel: f64,
    pub combined: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    fn merge(alpha: f64, loss_time: Option<f64>, loss_channel: Option<f64>) -> Result<Self> {
        let (alpha, lt, lc) = match (loss_time, loss_channel) {
            (Some(lt), Some(lc)) => (alpha, lt, lc),
            (Some(lt), None) => (1.0, lt, 0.0),
            (None, Some(lc)) => (0.0, 0.0, lc),
            (None, None) => {
                return Err(Error::UndefinedLoss(
                    "no masked cells on either axis".into(),
                ))
            }
        };
        Ok(Self {
            loss_time: lt,
            loss_channel: lc,
            combined: alpha * lt + (1.0 - alpha) * lc,
            alpha,
        })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(Error::Argument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_same_shape(raw: &ArrayView2<f64>, rec: &ArrayView2<f64>) -> Result<()> {
    if raw.dim() != rec.dim() {
        return Err(Error::Argument(format!(
            "shape mismatch: raw {:?} vs rec {:?}",
            raw.dim(),
            rec.dim()
        )));
    }
    Ok(())
}

/// MSE over all cells of the masked rows: mean of (raw - rec)^2 for i in T.
pub fn masked_time_mse(
    raw: ArrayView2<f64>,
    rec: ArrayView2<f64>,
    spec: &MaskSpec,
) -> Result<f64> {
    check_same_shape(&raw, &rec)?;
    spec.validate_for(raw.nrows(), raw.ncols())?;
    if spec.time_indices.is_empty() {
        return Err(Error::UndefinedLoss("no masked time steps".into()));
    }
    let mut sum = 0.0;
    for &i in &spec.time_indices {
        for j in 0..raw.ncols() {
            sum += (raw[[i, j]] - rec[[i, j]]).powi(2);
        }
    }
    Ok(sum / (spec.time_indices.len() * raw.ncols()) as f64)
}

/// MSE over all cells of the masked columns: mean of (raw - rec)^2 for j in C.
pub fn masked_channel_mse(
    raw: ArrayView2<f64>,
    rec: ArrayView2<f64>,
    spec: &MaskSpec,
) -> Result<f64> {
    check_same_shape(&raw, &rec)?;
    spec.validate_for(raw.nrows(), raw.ncols())?;
    if spec.channel_indices.is_empty() {
        return Err(Error::UndefinedLoss("no masked channels".into()));
    }
    let mut sum = 0.0;
    for &j in &spec.channel_indices {
        for i in 0..raw.nrows() {
            sum += (raw[[i, j]] - rec[[i, j]]).powi(2);
        }
    }
    Ok(sum / (spec.channel_indices.len() * raw.nrows()) as f64)
}

/// Weighted dual-axis reconstruction loss for one window. Cells masked on
/// both axes contribute to both terms.
pub fn combined_loss(
    raw: ArrayView2<f64>,
    rec: ArrayView2<f64>,
    spec: &MaskSpec,
    alpha: f64,
) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    let lt = match masked_time_mse(raw, rec, spec) {
        Ok(v) => Some(v),
        Err(Error::UndefinedLoss(_)) => None,
        Err(e) => return Err(e),
    };
    let lc = match masked_channel_mse(raw, rec, spec) {
        Ok(v) => Some(v),
        Err(Error::UndefinedLoss(_)) => None,
        Err(e) => return Err(e),
    };
    LossBreakdown::merge(alpha, lt, lc)
}

/// Batch reconstruction loss, pooled over every masked cell in the batch:
/// each term is the mean over the union of that axis's selected cells across
/// all windows, so windows with larger masks weigh proportionally more.
/// Also returns the gradient with respect to `rec`, which is nonzero only at
/// masked cells.
pub fn batch_combined_loss_grad(
    raw: ArrayView3<f64>,
    rec: ArrayView3<f64>,
    specs: &[MaskSpec],
    alpha: f64,
) -> Result<(LossBreakdown, Array3<f64>)> {
    check_alpha(alpha)?;
    if raw.dim() != rec.dim() {
        return Err(Error::Argument(format!(
            "shape mismatch: raw {:?} vs rec {:?}",
            raw.dim(),
            rec.dim()
        )));
    }
    let (b, n, k) = raw.dim();
    if specs.len() != b {
        return Err(Error::Argument(format!(
            "got {} mask specs for a batch of {b}",
            specs.len()
        )));
    }
    for spec in specs {
        spec.validate_for(n, k)?;
    }

    let time_cells: usize = specs.iter().map(|s| s.time_indices.len() * k).sum();
    let channel_cells: usize = specs.iter().map(|s| s.channel_indices.len() * n).sum();

    let mut time_sum = 0.0;
    let mut channel_sum = 0.0;
    for (w, spec) in specs.iter().enumerate() {
        for &i in &spec.time_indices {
            for j in 0..k {
                time_sum += (raw[[w, i, j]] - rec[[w, i, j]]).powi(2);
            }
        }
        for &j in &spec.channel_indices {
            for i in 0..n {
                channel_sum += (raw[[w, i, j]] - rec[[w, i, j]]).powi(2);
            }
        }
    }
    let lt = (time_cells > 0).then(|| time_sum / time_cells as f64);
    let lc = (channel_cells > 0).then(|| channel_sum / channel_cells as f64);
    let breakdown = LossBreakdown::merge(alpha, lt, lc)?;

    let mut grad = Array3::zeros((b, n, k));
    for (w, spec) in specs.iter().enumerate() {
        for &i in &spec.time_indices {
            for j in 0..k {
                grad[[w, i, j]] += breakdown.alpha * 2.0 * (rec[[w, i, j]] - raw[[w, i, j]])
                    / time_cells as f64;
            }
        }
        for &j in &spec.channel_indices {
            for i in 0..n {
                grad[[w, i, j]] += (1.0 - breakdown.alpha)
                    * 2.0
                    * (rec[[w, i, j]] - raw[[w, i, j]])
                    / channel_cells as f64;
            }
        }
    }
    Ok((breakdown, grad))
}

/// Mean negative log softmax probability of the true label, computed with
/// per-row max subtraction.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_grad(logits, labels)?.0)
}

/// Cross entropy plus its gradient with respect to the logits,
/// (softmax - onehot) / B.
pub fn cross_entropy_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let (b, a) = logits.dim();
    if labels.len() != b {
        return Err(Error::Argument(format!(
            "got {} labels for a batch of {b}",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(Error::Argument("cross entropy over an empty batch".into()));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros((b, a));
    for (w, &label) in labels.iter().enumerate() {
        if label >= a {
            return Err(Error::Argument(format!(
                "label {label} out of range for {a} classes"
            )));
        }
        let row = logits.row(w);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let denom: f64 = exp.iter().sum();
        loss += denom.ln() - (row[label] - max);
        for (j, &e) in exp.iter().enumerate() {
            grad[[w, j]] = (e / denom - if j == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    

    fn spec(t: &[usize], c: &[usize]) -> MaskSpec {
        MaskSpec::new(t.iter().cloned().collect(), c.iter().cloned().collect())
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let raw = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let s = spec(&[0], &[1]);
        let out = combined_loss(raw.view(), raw.view(), &s, 0.5).unwrap();
        assert_eq!(out.loss_time, 0.0);
        assert_eq!(out.loss_channel, 0.0);
        assert_eq!(out.combined, 0.0);
    }

    #[test]
    fn hand_enumerated_time_and_channel_terms() {
        let raw = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let rec = Array2::zeros((2, 2));
        let lt = masked_time_mse(raw.view(), rec.view(), &spec(&[0], &[])).unwrap();
        assert_eq!(lt, 2.5);
        let lc = masked_channel_mse(raw.view(), rec.view(), &spec(&[], &[1])).unwrap();
        assert_eq!(lc, 10.0);
        let both = combined_loss(raw.view(), rec.view(), &spec(&[0], &[1]), 0.5).unwrap();
        assert_eq!(both.combined, 6.25);
    }

    #[test]
    fn alpha_endpoints() {
        let raw = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let rec = Array2::zeros((2, 2));
        let s = spec(&[0], &[1]);
        let at_one = combined_loss(raw.view(), rec.view(), &s, 1.0).unwrap();
        assert_eq!(at_one.combined, at_one.loss_time);
        let at_zero = combined_loss(raw.view(), rec.view(), &s, 0.0).unwrap();
        assert_eq!(at_zero.combined, at_zero.loss_channel);
    }

    #[test]
    fn empty_axis_forces_alpha_endpoint() {
        let raw = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let rec = Array2::zeros((2, 2));
        let channel_only = combined_loss(raw.view(), rec.view(), &spec(&[], &[1]), 0.7).unwrap();
        assert_eq!(channel_only.alpha, 0.0);
        assert_eq!(channel_only.combined, channel_only.loss_channel);
        assert_eq!(channel_only.loss_time, 0.0);
        let time_only = combined_loss(raw.view(), rec.view(), &spec(&[0], &[]), 0.7).unwrap();
        assert_eq!(time_only.alpha, 1.0);
        assert_eq!(time_only.combined, time_only.loss_time);
    }

    #[test]
    fn both_axes_empty_is_undefined() {
        let raw = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let err = combined_loss(raw.view(), raw.view(), &MaskSpec::empty(), 0.5).unwrap_err();
        assert!(matches!(err, Error::UndefinedLoss(_)));
    }

    #[test]
    fn doubly_masked_cells_count_in_both_terms() {
        // Single cell masked by both axes: each term sees only that cell.
        let raw = arr2(&[[3.0]]);
        let rec = arr2(&[[0.0]]);
        let out = combined_loss(raw.view(), rec.view(), &spec(&[0], &[0]), 0.5).unwrap();
        assert_eq!(out.loss_time, 9.0);
        assert_eq!(out.loss_channel, 9.0);
        assert_eq!(out.combined, 9.0);
    }

    #[test]
    fn unselected_cells_do_not_matter() {
        let raw = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let rec = Array2::zeros((3, 2));
        let s = spec(&[1], &[]);
        let base = masked_time_mse(raw.view(), rec.view(), &s).unwrap();
        let mut raw2 = raw.clone();
        let mut rec2 = rec.clone();
        raw2[[0, 0]] = -99.0;
        raw2[[2, 1]] = 42.0;
        rec2[[0, 1]] = 7.0;
        assert_eq!(masked_time_mse(raw2.view(), rec2.view(), &s).unwrap(), base);
    }

    #[test]
    fn batch_pooling_weights_by_cell_count() {
        // Window 0 masks one row, window 1 masks none: pooled time loss is
        // window 0's row mean, and the channel term covers both windows.
        let mut raw = Array3::zeros((2, 2, 2));
        raw[[0, 0, 0]] = 1.0;
        raw[[0, 0, 1]] = 2.0;
        raw[[1, 0, 0]] = 4.0;
        let rec = Array3::zeros((2, 2, 2));
        let specs = vec![spec(&[0], &[0]), spec(&[], &[0])];
        let (out, grad) = batch_combined_loss_grad(raw.view(), rec.view(), &specs, 0.5).unwrap();
        assert_eq!(out.loss_time, (1.0 + 4.0) / 2.0);
        // channel cells: w0 col0 {1,0}, w1 col0 {16,0} over 4 cells
        assert_eq!(out.loss_channel, (1.0 + 16.0) / 4.0);
        assert_eq!(out.alpha, 0.5);
        // gradient locality: unmasked cells of each window stay zero
        assert_eq!(grad[[1, 0, 1]], 0.0);
        assert_eq!(grad[[1, 1, 1]], 0.0);
        assert_ne!(grad[[0, 0, 0]], 0.0);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = Array3::from_shape_fn((3, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let mut rec = Array3::from_shape_fn((3, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let specs = vec![
            spec(&[0, 2], &[1]),
            spec(&[], &[0, 2]),
            spec(&[3], &[]),
        ];
        let (_, grad) = batch_combined_loss_grad(raw.view(), rec.view(), &specs, 0.3).unwrap();
        let eps = 1e-6;
        for idx in [[0usize, 0, 1], [0, 2, 2], [1, 3, 0], [2, 3, 1], [1, 1, 1]] {
            let orig = rec[idx];
            rec[idx] = orig + eps;
            let up = batch_combined_loss_grad(raw.view(), rec.view(), &specs, 0.3)
                .unwrap()
                .0
                .combined;
            rec[idx] = orig - eps;
            let down = batch_combined_loss_grad(raw.view(), rec.view(), &specs, 0.3)
                .unwrap()
                .0
                .combined;
            rec[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!(
                (fd - grad[idx]).abs() < 1e-7,
                "fd {fd} vs analytic {} at {idx:?}",
                grad[idx]
            );
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array2::zeros((3, 4));
        let loss = cross_entropy(logits.view(), &[0, 1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_goes_to_zero() {
        let mut logits = Array2::zeros((1, 4));
        logits[[0, 2]] = 50.0;
        let loss = cross_entropy(logits.view(), &[2]).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Array2::from_shape_fn((16, 5), |_| rng.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..16).map(|_| rng.gen_range(0..5)).collect();
        let loss = cross_entropy(logits.view(), &labels).unwrap();
        // direct softmax without max subtraction; safe at these magnitudes
        let mut oracle = 0.0;
        for (w, &label) in labels.iter().enumerate() {
            let denom: f64 = logits.row(w).iter().map(|&v| v.exp()).sum();
            oracle += -(logits[[w, label]].exp() / denom).ln();
        }
        oracle /= 16.0;
        assert!((loss - oracle).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Array2::zeros((2, 3));
        assert!(matches!(
            cross_entropy(logits.view(), &[0, 3]).unwrap_err(),
            Error::Argument(_)
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut logits = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
        let labels = vec![2, 0, 1, 1];
        let (_, grad) = cross_entropy_grad(logits.view(), &labels).unwrap();
        let eps = 1e-6;
        for idx in [[0usize, 0], [1, 2], [3, 1], [2, 0]] {
            let orig = logits[idx];
            logits[idx] = orig + eps;
            let up = cross_entropy(logits.view(), &labels).unwrap();
            logits[idx] = orig - eps;
            let down = cross_entropy(logits.view(), &labels).unwrap();
            logits[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grad[idx]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn combined_is_exactly_linear_in_alpha(
            seed in 0u64..400,
            alpha_pct in 0u32..=100,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-2.0..2.0));
            let rec = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-2.0..2.0));
            let s = spec(&[1, 4], &[0, 3]);
            let alpha = alpha_pct as f64 / 100.0;
            let out = combined_loss(raw.view(), rec.view(), &s, alpha).unwrap();
            prop_assert!(out.loss_time >= 0.0 && out.loss_channel >= 0.0);
            prop_assert_eq!(
                out.combined,
                alpha * out.loss_time + (1.0 - alpha) * out.loss_channel
            );
        }

        #[test]
        fn batch_of_one_matches_single_window(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
            let rec = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
            let s = spec(&[0, 3], &[2]);
            let single = combined_loss(raw.view(), rec.view(), &s, 0.5).unwrap();
            let raw3 = raw.clone().insert_axis(ndarray::Axis(0));
            let rec3 = rec.clone().insert_axis(ndarray::Axis(0));
            let (batch, _) =
                batch_combined_loss_grad(raw3.view(), rec3.view(), &[s], 0.5).unwrap();
            prop_assert!((single.combined - batch.combined).abs() < 1e-15);
            prop_assert!((single.loss_time - batch.loss_time).abs() < 1e-15);
            prop_assert!((single.loss_channel - batch.loss_channel).abs() < 1e-15);
        }
    }
}
