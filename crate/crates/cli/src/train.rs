//! The training loop: Adam over the joint segmentation + classification
//! loss, per-epoch validation, best-validation checkpointing, and a fully
//! deterministic run log.
//!
//! Everything downstream of `(config, seed, dataset bytes)` is reproducible:
//! shuffling and dropout draw from dedicated ChaCha12 streams, batches are
//! formed in shuffled-id order, and log files contain no timestamps.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use equiseg_core::data::{batch_images, batch_masks, load_dataset, Sample};
use equiseg_core::metrics::{argmax_classes, balanced_seg_accuracy, classification_accuracy};
use equiseg_core::model::{build_model, UNetModel};
use equiseg_core::tensor::ops::{self, Phase};
use equiseg_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::config::TrainConfig;

fn stream_seed(seed: u64, label: u64) -> u64 {
    // SplitMix64 of (seed ^ label) keeps the shuffle/dropout streams apart.
    let mut x = (seed ^ label).wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Classic Adam with optional L2 weight decay.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>], lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            lr: lr as f32,
            beta1: beta1 as f32,
            beta2: beta2 as f32,
            eps: 1e-8,
            weight_decay: weight_decay as f32,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &[Tensor<f32>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + self.weight_decay * data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Eval-mode metrics over a list of samples, batched.
pub struct SplitMetrics {
    pub loss: f64,
    pub cls_acc: f64,
    pub seg_acc: f64,
}

pub fn evaluate_split(
    model: &UNetModel<f32>,
    samples: &[&Sample],
    lambda: f64,
    batch_size: usize,
) -> Result<SplitMetrics> {
    if samples.is_empty() {
        bail!("cannot evaluate an empty split");
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut seg_pairs: Vec<(Vec<bool>, Vec<bool>)> = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    for chunk in samples.chunks(batch_size) {
        let (images, batch_labels) = batch_images(chunk)?;
        let masks = batch_masks(chunk)?;
        let (seg, cls) = model.forward_eval(&images)?;
        let (bce, ce) = ops::no_grad(|| -> equiseg_core::Result<(f32, f32)> {
            let bce = ops::bce_with_logits(&seg, &masks)?.item();
            let ce = ops::softmax_cross_entropy(&cls, &batch_labels)?.item();
            Ok((bce, ce))
        })?;
        loss_sum += bce as f64 + lambda * ce as f64;
        batches += 1;
        preds.extend(argmax_classes(&cls));
        labels.extend(batch_labels);
        let hw = seg.shape()[2] * seg.shape()[3];
        let seg_d = seg.data();
        let mask_d = masks.data();
        for (i, _) in chunk.iter().enumerate() {
            let p: Vec<bool> = seg_d[i * hw..(i + 1) * hw].iter().map(|&v| v > 0.0).collect();
            let t: Vec<bool> = mask_d[i * hw..(i + 1) * hw].iter().map(|&v| v == 1.0).collect();
            seg_pairs.push((p, t));
        }
    }
    let cls_acc = classification_accuracy(&preds, &labels)?;
    let mut seg_sum = 0.0;
    for (p, t) in &seg_pairs {
        seg_sum += balanced_seg_accuracy(p, t)?;
    }
    Ok(SplitMetrics {
        loss: loss_sum / batches as f64,
        cls_acc,
        seg_acc: seg_sum / seg_pairs.len() as f64,
    })
}

pub struct TrainOutcome {
    pub model: UNetModel<f32>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub best_epoch: usize,
    pub final_train: SplitMetrics,
    pub final_val: SplitMetrics,
}

/// Runs the full training loop described by `cfg`. Writes
/// `out_dir/checkpoint.eqsg`, `out_dir/train_log.txt`, and
/// `out_dir/metrics.txt`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (samples, split) = load_dataset(&cfg.data_dir)?;
    let by_id = |ids: &[String]| -> Vec<&Sample> {
        ids.iter()
            .map(|id| samples.iter().find(|s| &s.id == id).expect("split ids validated"))
            .collect()
    };
    let train_samples = by_id(&split.train);
    let val_samples = by_id(&split.val);
    if train_samples.len() < cfg.batch_size {
        bail!(
            "train split has {} samples, smaller than one batch of {}",
            train_samples.len(),
            cfg.batch_size
        );
    }
    for s in &train_samples {
        if s.height() != cfg.model.image_size || s.width() != cfg.model.image_size {
            bail!(
                "sample `{}` is {}x{}, config expects {}",
                s.id,
                s.height(),
                s.width(),
                cfg.model.image_size
            );
        }
    }

    let model = build_model::<f32>(&cfg.model, cfg.seed)?;
    let named_params = model.named_parameters();
    let params: Vec<Tensor<f32>> = named_params.iter().map(|(_, t)| t.clone()).collect();
    let mut opt = Adam::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(stream_seed(cfg.seed, 0x73687566));
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(stream_seed(cfg.seed, 0x64726f70));

    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create output dir {}", cfg.out_dir.display()))?;
    let mut log = String::new();
    log.push_str("# equiseg training log\n");
    log.push_str("# ---- config ----\n");
    for line in cfg.to_canonical_string().lines() {
        log.push_str(&format!("# {}\n", line));
    }
    log.push_str("# ----------------\n");

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<Vec<f32>> = Vec::new();
    let mut best_buffers: Vec<Vec<f32>> = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for (step, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            if batch_ids.len() < cfg.batch_size {
                continue; // partial trailing batch: skipped (batch norm needs full batches)
            }
            let batch: Vec<&Sample> = batch_ids.iter().map(|&i| train_samples[i]).collect();
            let (images, labels) = batch_images(&batch)?;
            let masks = batch_masks(&batch)?;
            let (seg, cls) = model.forward(&images, Phase::Train, &mut dropout_rng)?;
            let seg_loss = ops::bce_with_logits(&seg, &masks)?;
            let cls_loss = ops::softmax_cross_entropy(&cls, &labels)?;
            let total = ops::add(&seg_loss, &ops::scale(&cls_loss, cfg.lambda as f32))?;
            let loss_val = total.item();
            if !loss_val.is_finite() {
                bail!(
                    "loss became non-finite ({}) at epoch {} step {}",
                    loss_val,
                    epoch,
                    step
                );
            }
            model.zero_grad();
            ops::backward(&total)?;
            opt.step(&params);
            epoch_loss += loss_val as f64;
            steps += 1;
        }
        let val = evaluate_split(&model, &val_samples, cfg.lambda, cfg.batch_size)?;
        let line = format!(
            "epoch {:3}  train_loss {:.6}  val_loss {:.6}  val_cls_acc {:.4}  val_seg_acc {:.4}",
            epoch,
            epoch_loss / steps.max(1) as f64,
            val.loss,
            val.cls_acc,
            val.seg_acc
        );
        println!("{}", line);
        log.push_str(&line);
        log.push('\n');

        let score = (val.cls_acc + val.seg_acc) / 2.0;
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best_params = named_params.iter().map(|(_, t)| t.data().clone()).collect();
            best_buffers = model
                .named_buffers()
                .iter()
                .map(|(_, t)| t.data().clone())
                .collect();
        }
    }

    // Restore the best-validation state.
    for ((_, t), saved) in named_params.iter().zip(&best_params) {
        t.data_mut().copy_from_slice(saved);
    }
    for ((_, t), saved) in model.named_buffers().iter().zip(&best_buffers) {
        t.data_mut().copy_from_slice(saved);
    }

    let final_train = evaluate_split(&model, &train_samples, cfg.lambda, cfg.batch_size)?;
    let final_val = evaluate_split(&model, &val_samples, cfg.lambda, cfg.batch_size)?;
    let metrics_text = format!(
        "best_epoch = {}\n\
         train_loss = {:.6}\n\
         train_cls_acc = {:.6}\n\
         train_seg_acc = {:.6}\n\
         val_loss = {:.6}\n\
         val_cls_acc = {:.6}\n\
         val_seg_acc = {:.6}\n",
        best_epoch,
        final_train.loss,
        final_train.cls_acc,
        final_train.seg_acc,
        final_val.loss,
        final_val.cls_acc,
        final_val.seg_acc
    );
    log.push_str(&format!("best_epoch {}\n", best_epoch));
    log.push_str(&metrics_text);

    let ckpt = checkpoint::from_model(
        cfg.to_canonical_string(),
        &model.named_parameters(),
        &model.named_buffers(),
        metrics_text.clone(),
    );
    let checkpoint_path = cfg.out_dir.join("checkpoint.eqsg");
    checkpoint::save(&checkpoint_path, &ckpt)?;
    let log_path = cfg.out_dir.join("train_log.txt");
    fs::write(&log_path, &log).with_context(|| format!("cannot write {}", log_path.display()))?;
    let metrics_path = cfg.out_dir.join("metrics.txt");
    fs::write(&metrics_path, &metrics_text)
        .with_context(|| format!("cannot write {}", metrics_path.display()))?;

    Ok(TrainOutcome {
        model,
        checkpoint_path,
        log_path,
        best_epoch,
        final_train,
        final_val,
    })
}

/// Rebuilds a model from a checkpoint: parse the embedded config, construct
/// with the recorded seed, then restore parameters and running statistics.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(UNetModel<f32>, TrainConfig)> {
    let cfg = TrainConfig::parse_str(&ckpt.config_text)
        .context("checkpoint embeds an invalid config")?;
    let model = build_model::<f32>(&cfg.model, cfg.seed)?;
    checkpoint::restore_tensors(&ckpt.params, &model.named_parameters())?;
    checkpoint::restore_tensors(&ckpt.buffers, &model.named_buffers())?;
    Ok((model, cfg))
}
