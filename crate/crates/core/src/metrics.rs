//! Evaluation metrics: driver classification accuracy, balanced per-pixel
//! segmentation accuracy, and equivariance-error diagnostics.
//!
//! Counting is integer-exact with a single final division. The segmentation
//! decision threshold is fixed at sigmoid(logit) > 0.5, i.e. logit > 0, and
//! used everywhere.

use crate::error::{Error, Result};
use crate::model::UNetModel;
use crate::spatial;
use crate::tensor::{Scalar, Tensor};

/// Fraction of exact matches between predictions and labels.
pub fn classification_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::arg("classification_accuracy", "empty input"));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "classification_accuracy",
            format!("{} predictions vs {} labels", preds.len(), labels.len()),
        ));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Argmax class index per row of `[B,K]` logits.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let s = logits.shape();
    let (b, k) = (s[0], s[1]);
    let d = logits.data();
    (0..b)
        .map(|bi| {
            let row = &d[bi * k..(bi + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// The fixed decision rule: predicted mask = (logit > 0).
pub fn threshold_logits<T: Scalar>(seg_logits: &Tensor<T>) -> Vec<bool> {
    seg_logits.data().iter().map(|&v| v > T::zero()).collect()
}

/// Per-sample balanced segmentation accuracy `(TPR + TNR)/2`; with no true
/// negatives the score degenerates to the TPR alone. The true mask must have
/// at least one positive pixel.
pub fn balanced_seg_accuracy(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "balanced_seg_accuracy",
            format!("{} predicted pixels vs {} true pixels", pred.len(), truth.len()),
        ));
    }
    let (mut tp, mut fng, mut tn, mut fp) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (false, true) => fng += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    if tp + fng == 0 {
        return Err(Error::arg(
            "balanced_seg_accuracy",
            "true mask has no positive pixels",
        ));
    }
    let tpr = tp as f64 / (tp + fng) as f64;
    if tn + fp == 0 {
        return Ok(tpr);
    }
    let tnr = tn as f64 / (tn + fp) as f64;
    Ok((tpr + tnr) / 2.0)
}

/// Unweighted mean of per-sample balanced accuracies (the default
/// aggregation: large images cannot dominate).
pub fn balanced_seg_accuracy_mean(pairs: &[(Vec<bool>, Vec<bool>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::arg("balanced_seg_accuracy_mean", "empty input"));
    }
    let mut acc = 0.0;
    for (pred, truth) in pairs {
        acc += balanced_seg_accuracy(pred, truth)?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Alternative aggregation pooling pixel counts across the whole dataset.
pub fn balanced_seg_accuracy_pooled(pairs: &[(Vec<bool>, Vec<bool>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::arg("balanced_seg_accuracy_pooled", "empty input"));
    }
    let (mut tp, mut fng, mut tn, mut fp) = (0u64, 0u64, 0u64, 0u64);
    for (pred, truth) in pairs {
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => tp += 1,
                (false, true) => fng += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
            }
        }
    }
    if tp + fng == 0 {
        return Err(Error::arg(
            "balanced_seg_accuracy_pooled",
            "no positive pixels in the dataset",
        ));
    }
    let tpr = tp as f64 / (tp + fng) as f64;
    if tn + fp == 0 {
        return Ok(tpr);
    }
    let tnr = tn as f64 / (tn + fp) as f64;
    Ok((tpr + tnr) / 2.0)
}

// ---------------------------------------------------------------------------
// Equivariance diagnostics
// ---------------------------------------------------------------------------

fn rotate_batch_planes<T: Scalar>(t: &Tensor<T>, angle_deg: f64) -> Tensor<T> {
    let s = t.shape();
    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
    let d = t.data();
    let hw = h * w;
    let mut out = vec![T::zero(); d.len()];
    let quarters = {
        let r = angle_deg.rem_euclid(360.0);
        let q = r / 90.0;
        if (q - q.round()).abs() < 1e-9 {
            Some((q.round() as usize) % 4)
        } else {
            None
        }
    };
    for i in 0..bc {
        let plane = &d[i * hw..(i + 1) * hw];
        let rot = match quarters {
            Some(q) => spatial::rotate_quarter(plane, h, w, q).0,
            None => spatial::rotate_bilinear(plane, h, w, angle_deg.to_radians()),
        };
        out[i * hw..(i + 1) * hw].copy_from_slice(&rot);
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// For each angle (degrees, counterclockwise), the maximum absolute
/// difference over pixels and batch between `rotate(seg_logits(x))` and
/// `seg_logits(rotate(x))`, in eval mode. Quarter-turn angles use the exact
/// rotation path; other angles are resampled and serve as diagnostics only.
pub fn equivariance_error<T: Scalar>(
    model: &UNetModel<T>,
    images: &Tensor<T>,
    angles_deg: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let (seg_base, _) = model.forward_eval(images)?;
    let mut out = Vec::with_capacity(angles_deg.len());
    for &angle in angles_deg {
        if angle.rem_euclid(360.0) == 0.0 {
            out.push((angle, 0.0));
            continue;
        }
        let rotated_in = rotate_batch_planes(images, angle);
        let (seg_rot_in, _) = model.forward_eval(&rotated_in)?;
        let rotated_out = rotate_batch_planes(&seg_base, angle);
        let a = seg_rot_in.data();
        let b = rotated_out.data();
        let err = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs().to_f64().unwrap())
            .fold(0.0f64, f64::max);
        out.push((angle, err));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

/// Per-class classification tallies.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassStat {
    pub correct: usize,
    pub total: usize,
}

impl ClassStat {
    pub fn fraction(&self) -> Option<f64> {
        if self.total == 0 {
            None
        } else {
            Some(self.correct as f64 / self.total as f64)
        }
    }
}

/// Evaluation summary over one split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n_samples: usize,
    pub classification_accuracy: f64,
    pub balanced_seg_accuracy: f64,
    pub per_class: [ClassStat; 4],
    pub class_names: [&'static str; 4],
    /// angle (degrees) -> max-abs commutation error.
    pub equivariance_errors: Vec<(f64, f64)>,
}

impl EvalReport {
    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("samples                  {}\n", self.n_samples));
        s.push_str(&format!(
            "classification accuracy  {:.4}\n",
            self.classification_accuracy
        ));
        s.push_str(&format!(
            "balanced seg accuracy    {:.4}\n",
            self.balanced_seg_accuracy
        ));
        for (stat, name) in self.per_class.iter().zip(self.class_names) {
            match stat.fraction() {
                Some(f) => s.push_str(&format!(
                    "  {:<24} {:.4} ({}/{})\n",
                    name, f, stat.correct, stat.total
                )),
                None => s.push_str(&format!("  {:<24} -      (0 samples)\n", name)),
            }
        }
        for (angle, err) in &self.equivariance_errors {
            s.push_str(&format!("equivariance err @ {:>5.1}  {:.3e}\n", angle, err));
        }
        s
    }

    /// Machine-readable `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("n_samples = {}\n", self.n_samples));
        s.push_str(&format!(
            "classification_accuracy = {:.6}\n",
            self.classification_accuracy
        ));
        s.push_str(&format!(
            "balanced_seg_accuracy = {:.6}\n",
            self.balanced_seg_accuracy
        ));
        for (i, stat) in self.per_class.iter().enumerate() {
            s.push_str(&format!("class{}_correct = {}\n", i, stat.correct));
            s.push_str(&format!("class{}_total = {}\n", i, stat.total));
        }
        for (angle, err) in &self.equivariance_errors {
            s.push_str(&format!("equivariance_error_{} = {:.6e}\n", angle, err));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts_exact_matches() {
        assert_eq!(classification_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(
            classification_accuracy(&[0, 1, 2, 3], &[0, 1, 0, 0]).unwrap(),
            0.5
        );
        assert!(classification_accuracy(&[], &[]).is_err());
        assert!(classification_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn balanced_accuracy_worked_example() {
        // 16 pixels: 4 true positives (2 predicted), 12 true negatives (all
        // correctly negative) -> (0.5 + 1.0) / 2 = 0.75.
        let truth: Vec<bool> = (0..16).map(|i| i < 4).collect();
        let pred: Vec<bool> = (0..16).map(|i| i < 2).collect();
        assert_eq!(balanced_seg_accuracy(&pred, &truth).unwrap(), 0.75);
    }

    #[test]
    fn balanced_accuracy_edge_cases() {
        let truth = vec![true, true, false, false];
        assert_eq!(balanced_seg_accuracy(&truth, &truth).unwrap(), 1.0);
        // All-positive prediction: TPR 1, TNR 0.
        assert_eq!(
            balanced_seg_accuracy(&vec![true; 4], &truth).unwrap(),
            0.5
        );
        // No true negatives: score is the TPR alone.
        let all_pos = vec![true; 4];
        let half = vec![true, true, false, false];
        assert_eq!(balanced_seg_accuracy(&half, &all_pos).unwrap(), 0.5);
        // All-negative true mask violates the sample invariant.
        assert!(balanced_seg_accuracy(&half, &vec![false; 4]).is_err());
    }

    #[test]
    fn balanced_accuracy_invariant_under_joint_rotation() {
        let truth: Vec<bool> = (0..36).map(|i| i % 5 == 0).collect();
        let pred: Vec<bool> = (0..36).map(|i| i % 3 == 0).collect();
        let base = balanced_seg_accuracy(&pred, &truth).unwrap();
        for q in 0..4 {
            let (tr, _, _) = spatial::rotate_quarter(&truth, 6, 6, q);
            let (pr, _, _) = spatial::rotate_quarter(&pred, 6, 6, q);
            assert_eq!(balanced_seg_accuracy(&pr, &tr).unwrap(), base);
        }
    }

    #[test]
    fn threshold_is_logit_positive() {
        let t = Tensor::<f32>::from_vec(&[1, 1, 1, 3], vec![-0.1, 0.0, 0.1]).unwrap();
        assert_eq!(threshold_logits(&t), vec![false, false, true]);
    }

    #[test]
    fn pooled_and_mean_aggregations_differ_as_expected() {
        // Sample 1: perfect. Sample 2: TPR 0.5, TNR 1.0.
        let s1 = (vec![true, false], vec![true, false]);
        let s2 = (
            vec![true, false, false, false],
            vec![true, true, false, false],
        );
        let mean = balanced_seg_accuracy_mean(&[s1.clone(), s2.clone()]).unwrap();
        assert!((mean - (1.0 + 0.75) / 2.0).abs() < 1e-12);
        // Pooled: tp=2, fn=1, tn=3, fp=0 -> (2/3 + 1)/2.
        let pooled = balanced_seg_accuracy_pooled(&[s1, s2]).unwrap();
        assert!((pooled - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }
}
