//! Metric implementations against brute-force counting references, plus the
//! equivariance-error diagnostic on tiny models.

use equiseg_core::metrics::{
    balanced_seg_accuracy, classification_accuracy, equivariance_error, threshold_logits,
};
use equiseg_core::model::{build_model, Head, ModelConfig, Variant};
use equiseg_core::tensor::Tensor;
use equiseg_oracles as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[test]
fn classification_accuracy_matches_counting_oracle_on_1000_cases() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.gen_range(1..40usize);
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4usize)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4usize)).collect();
        let ours = classification_accuracy(&preds, &labels).unwrap();
        let reference = oracle::counting_accuracy(&preds, &labels);
        assert_eq!(ours, reference, "case {}", case);
    }
}

#[test]
fn balanced_accuracy_matches_counting_oracle_on_1000_cases() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let mut checked = 0usize;
    while checked < 1000 {
        let n = rng.gen_range(4..80usize);
        let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        if !truth.iter().any(|&t| t) {
            continue;
        }
        let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let ours = balanced_seg_accuracy(&pred, &truth).unwrap();
        let reference = oracle::counting_balanced_accuracy(&pred, &truth).unwrap();
        assert_eq!(ours, reference);
        checked += 1;
    }
}

#[test]
fn worked_example_reproduces() {
    // 4 true positives with 2 predicted, 12 true negatives all correct
    // -> (0.5 + 1.0)/2 = 0.75.
    let truth: Vec<bool> = (0..16).map(|i| i < 4).collect();
    let pred: Vec<bool> = (0..16).map(|i| i < 2).collect();
    assert_eq!(balanced_seg_accuracy(&pred, &truth).unwrap(), 0.75);
}

fn tiny_cfg(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        group_n: 4,
        image_size: 16,
        widths: [4, 4, 4, 8, 8],
        num_classes: 4,
        dropout_p: 0.0,
        head: Head::InvariantPool,
        mlp_hidden: [8, 8],
        kernel_size: 3,
    }
}

#[test]
fn equivariance_error_diagnostics() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let images = Tensor::from_vec(
        &[2, 3, 16, 16],
        (0..2 * 3 * 256).map(|_| rng.gen::<f32>()).collect(),
    )
    .unwrap();

    let eq = build_model::<f32>(&tiny_cfg(Variant::Equivariant), 5).unwrap();
    let errs = equivariance_error(&eq, &images, &[0.0, 90.0, 180.0, 270.0]).unwrap();
    assert_eq!(errs[0].1, 0.0, "angle 0 must be exactly zero");
    for (angle, err) in &errs[1..] {
        assert!(*err <= 1e-4, "equivariant model err {} at {}", err, angle);
    }

    let cnn = build_model::<f32>(&tiny_cfg(Variant::Cnn), 5).unwrap();
    let cerrs = equivariance_error(&cnn, &images, &[90.0]).unwrap();
    assert!(
        cerrs[0].1 > errs[1].1 * 10.0,
        "cnn error {} should dwarf equivariant error {}",
        cerrs[0].1,
        errs[1].1
    );
}

#[test]
fn threshold_rule_is_logit_positive() {
    let t = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![-5.0, -0.0, 1e-6, 3.0]).unwrap();
    assert_eq!(threshold_logits(&t), vec![false, false, true, true]);
}
