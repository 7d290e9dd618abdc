//! `equiseg` command-line interface.
//!
//! Subcommands: `gen-data` (synthetic scenes), `train`, `eval`,
//! `check-equivariance`, and `predict` (segmentation overlays).
//! Exit codes: 0 on success, 1 on any error, 2 when `check-equivariance`
//! finds a quarter-turn error above tolerance on an equivariant model.

use equiseg_cli::{checkpoint, config, train};

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use equiseg_core::data::{
    self, batch_images, batch_masks, load_dataset, rotated_test_set, RotationMode, Sample,
};
use equiseg_core::metrics::{
    argmax_classes, balanced_seg_accuracy, balanced_seg_accuracy_pooled, classification_accuracy,
    equivariance_error, ClassStat, EvalReport,
};
use equiseg_core::model::{UNetModel, Variant};
use equiseg_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const EQUIVARIANCE_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "equiseg",
    about = "Rotation-equivariant deforestation segmentation and driver classification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Number of samples (class-balanced within one).
        #[arg(long)]
        n: usize,
        /// Image height = width.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split name: train | val | test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Rotate the split first: none | quarter | arbitrary.
        #[arg(long, default_value = "none")]
        rotated: String,
        #[arg(long, default_value_t = 0)]
        rotation_seed: u64,
        /// Also write the report as `key = value` lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pool pixels across samples instead of averaging per sample.
        #[arg(long)]
        pooled: bool,
    },
    /// Measure segmentation-logit stability under input rotation.
    CheckEquivariance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated angles in degrees (counterclockwise).
        #[arg(long, default_value = "90,180,270")]
        angles: String,
        /// Number of dataset images to test on.
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predict a segmentation overlay for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Optional ground-truth mask; its boundary is traced in red.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output overlay PNG.
        #[arg(long)]
        out: PathBuf,
        /// Output for the raw predicted mask (default: `<out>.mask.png`).
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData { n, size, seed, out } => {
            data::generate_synthetic(n, size, seed, &out)?;
            println!("wrote {} samples of {}x{} to {}", n, size, size, out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { config } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("cannot read config {}", config.display()))?;
            let cfg = config::TrainConfig::parse_str(&text)?;
            let outcome = train::train(&cfg)?;
            println!(
                "done: best epoch {}  train_cls_acc {:.4}  train_seg_acc {:.4}  val_cls_acc {:.4}  val_seg_acc {:.4}",
                outcome.best_epoch,
                outcome.final_train.cls_acc,
                outcome.final_train.seg_acc,
                outcome.final_val.cls_acc,
                outcome.final_val.seg_acc,
            );
            println!(
                "checkpoint {}  log {}",
                outcome.checkpoint_path.display(),
                outcome.log_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            checkpoint,
            data,
            split,
            rotated,
            rotation_seed,
            out,
            pooled,
        } => cmd_eval(&checkpoint, &data, &split, &rotated, rotation_seed, out.as_deref(), pooled),
        Cmd::CheckEquivariance {
            checkpoint,
            data,
            angles,
            n,
            seed,
        } => cmd_check_equivariance(&checkpoint, &data, &angles, n, seed),
        Cmd::Predict {
            checkpoint,
            image,
            mask,
            out,
            mask_out,
        } => cmd_predict(&checkpoint, &image, mask.as_deref(), &out, mask_out),
    }
}

fn load_model(path: &Path) -> Result<(UNetModel<f32>, config::TrainConfig)> {
    let ckpt = checkpoint::load(path)?;
    train::model_from_checkpoint(&ckpt)
}

fn select_split<'a>(
    samples: &'a [Sample],
    split: &equiseg_core::data::DatasetSplit,
    name: &str,
) -> Result<Vec<&'a Sample>> {
    let ids = split.ids(name)?;
    if ids.is_empty() {
        bail!("split `{}` is empty", name);
    }
    Ok(ids
        .iter()
        .map(|id| samples.iter().find(|s| &s.id == id).expect("ids validated by loader"))
        .collect())
}

fn build_report(
    model: &UNetModel<f32>,
    samples: &[&Sample],
    batch_size: usize,
    pooled: bool,
) -> Result<EvalReport> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut seg_pairs: Vec<(Vec<bool>, Vec<bool>)> = Vec::new();
    for chunk in samples.chunks(batch_size) {
        let (images, batch_labels) = batch_images(chunk)?;
        let masks = batch_masks(chunk)?;
        let (seg, cls) = model.forward_eval(&images)?;
        preds.extend(argmax_classes(&cls));
        labels.extend(batch_labels);
        let hw = seg.shape()[2] * seg.shape()[3];
        let seg_d = seg.data();
        let mask_d = masks.data();
        for i in 0..chunk.len() {
            seg_pairs.push((
                seg_d[i * hw..(i + 1) * hw].iter().map(|&v| v > 0.0).collect(),
                mask_d[i * hw..(i + 1) * hw].iter().map(|&v| v == 1.0).collect(),
            ));
        }
    }
    let mut per_class = [ClassStat::default(); 4];
    for (&p, &l) in preds.iter().zip(&labels) {
        per_class[l].total += 1;
        if p == l {
            per_class[l].correct += 1;
        }
    }
    let seg_acc = if pooled {
        balanced_seg_accuracy_pooled(&seg_pairs)?
    } else {
        let mut acc = 0.0;
        for (p, t) in &seg_pairs {
            acc += balanced_seg_accuracy(p, t)?;
        }
        acc / seg_pairs.len() as f64
    };
    Ok(EvalReport {
        n_samples: samples.len(),
        classification_accuracy: classification_accuracy(&preds, &labels)?,
        balanced_seg_accuracy: seg_acc,
        per_class,
        class_names: [
            data::DriverLabel::Plantation.name(),
            data::DriverLabel::GrasslandShrubland.name(),
            data::DriverLabel::SmallholderAgriculture.name(),
            data::DriverLabel::Other.name(),
        ],
        equivariance_errors: Vec::new(),
    })
}

fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    split_name: &str,
    rotated: &str,
    rotation_seed: u64,
    out: Option<&Path>,
    pooled: bool,
) -> Result<ExitCode> {
    let (model, cfg) = load_model(checkpoint)?;
    let (samples, split) = load_dataset(data_dir)?;
    let selected = select_split(&samples, &split, split_name)?;
    let rotated_storage;
    let eval_samples: Vec<&Sample> = match rotated {
        "none" => selected,
        "quarter" | "arbitrary" => {
            let mode = if rotated == "quarter" {
                RotationMode::Quarter
            } else {
                RotationMode::Arbitrary
            };
            let owned: Vec<Sample> = selected.into_iter().cloned().collect();
            rotated_storage = rotated_test_set(&owned, mode, rotation_seed)?;
            rotated_storage.iter().collect()
        }
        other => bail!("--rotated must be none|quarter|arbitrary, got `{}`", other),
    };
    let report = build_report(&model, &eval_samples, cfg.batch_size, pooled)?;
    print!("{}", report.table());
    if let Some(path) = out {
        std::fs::write(path, report.to_kv())
            .with_context(|| format!("cannot write report to {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check_equivariance(
    checkpoint: &Path,
    data_dir: &Path,
    angles: &str,
    n: usize,
    seed: u64,
) -> Result<ExitCode> {
    let (model, _cfg) = load_model(checkpoint)?;
    let (samples, _) = load_dataset(data_dir)?;
    let angle_list: Vec<f64> = angles
        .split(',')
        .map(|a| a.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("cannot parse --angles `{}`", angles))?;

    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let chosen: Vec<&Sample> = idx.iter().take(n.min(samples.len())).map(|&i| &samples[i]).collect();
    if chosen.is_empty() {
        bail!("dataset has no samples");
    }
    let (images, _) = batch_images(&chosen)?;
    let errors = equivariance_error(&model, &images, &angle_list)?;

    let is_equivariant = model.config().variant == Variant::Equivariant;
    let mut failed = false;
    println!("angle    max_abs_error");
    for (angle, err) in &errors {
        let quarter = angle.rem_euclid(90.0) == 0.0;
        let status = if is_equivariant && quarter && *err > EQUIVARIANCE_TOLERANCE {
            failed = true;
            "  FAIL"
        } else {
            ""
        };
        println!("{:>6.1}  {: >12.3e}{}", angle, err, status);
    }
    if failed {
        eprintln!(
            "equivariant model exceeded {} on a quarter-turn angle",
            EQUIVARIANCE_TOLERANCE
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(
    checkpoint: &Path,
    image_path: &Path,
    mask_path: Option<&Path>,
    out: &Path,
    mask_out: Option<PathBuf>,
) -> Result<ExitCode> {
    let (model, cfg) = load_model(checkpoint)?;
    let (img, h, w) = data::load_rgb_png(image_path)?;
    let size = cfg.model.image_size;
    if h != size || w != size {
        bail!(
            "image is {}x{}, model expects {}x{}",
            h,
            w,
            size,
            size
        );
    }
    let images = Tensor::from_vec(&[1, 3, h, w], img.clone())?;
    let (seg, _) = model.forward_eval(&images)?;
    let pred: Vec<bool> = seg.data().iter().map(|&v| v > 0.0).collect();

    // Overlay: predicted pixels alpha-blended in blue over the input.
    let hw = h * w;
    let mut overlay = img;
    let blue = [0.15f32, 0.25, 0.95];
    for p in 0..hw {
        if pred[p] {
            for ch in 0..3 {
                overlay[ch * hw + p] = 0.55 * overlay[ch * hw + p] + 0.45 * blue[ch];
            }
        }
    }
    // Ground-truth boundary in red, if provided.
    if let Some(mpath) = mask_path {
        let (gt, mh, mw) = data::load_mask_png(mpath)?;
        if (mh, mw) != (h, w) {
            bail!("mask is {}x{}, image is {}x{}", mh, mw, h, w);
        }
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                if gt[p] != 1.0 {
                    continue;
                }
                let boundary = r == 0
                    || r == h - 1
                    || c == 0
                    || c == w - 1
                    || gt[p - w] == 0.0
                    || gt[p + w] == 0.0
                    || gt[p - 1] == 0.0
                    || gt[p + 1] == 0.0;
                if boundary {
                    overlay[p] = 0.95;
                    overlay[hw + p] = 0.1;
                    overlay[2 * hw + p] = 0.1;
                }
            }
        }
    }
    data::save_rgb_png(out, &overlay, h, w)?;
    let mask_out = mask_out.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".mask.png");
        PathBuf::from(p)
    });
    let pred_f: Vec<f32> = pred.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    data::save_mask_png(&mask_out, &pred_f, h, w)?;
    println!(
        "wrote overlay {} and mask {}",
        out.display(),
        mask_out.display()
    );
    Ok(ExitCode::SUCCESS)
}
