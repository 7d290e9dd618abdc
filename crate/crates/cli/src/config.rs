//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Unknown keys are rejected
//! so typos cannot silently fall back to defaults. The canonical rendering
//! (fixed key order) is embedded verbatim in run logs and checkpoints.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use equiseg_core::model::{Head, ModelConfig, Variant};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the classification loss in
    /// `total = seg_bce + lambda * class_ce`.
    pub lambda: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            epochs: 20,
            batch_size: 8,
            lambda: 1.0,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

fn parse_usize_list<const N: usize>(value: &str, key: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("{}: expected comma-separated integers, got `{}`", key, value))?;
    if parts.len() != N {
        bail!("{}: expected {} values, got {}", key, N, parts.len());
    }
    let mut out = [0usize; N];
    out.copy_from_slice(&parts);
    Ok(out)
}

impl TrainConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = || format!("line {}: invalid value for `{}`", lineno + 1, key);
            match key {
                "variant" => {
                    cfg.model.variant = match value {
                        "cnn" => Variant::Cnn,
                        "equivariant" => Variant::Equivariant,
                        other => bail!("line {}: variant must be cnn|equivariant, got `{}`", lineno + 1, other),
                    }
                }
                "group_n" => cfg.model.group_n = value.parse().with_context(ctx)?,
                "image_size" => cfg.model.image_size = value.parse().with_context(ctx)?,
                "widths" => cfg.model.widths = parse_usize_list::<5>(value, key)?,
                "num_classes" => cfg.model.num_classes = value.parse().with_context(ctx)?,
                "dropout_p" => cfg.model.dropout_p = value.parse().with_context(ctx)?,
                "head" => {
                    cfg.model.head = match value {
                        "invariant_pool" => Head::InvariantPool,
                        "flatten" => Head::Flatten,
                        other => bail!("line {}: head must be invariant_pool|flatten, got `{}`", lineno + 1, other),
                    }
                }
                "mlp_hidden" => cfg.model.mlp_hidden = parse_usize_list::<2>(value, key)?,
                "kernel_size" => cfg.model.kernel_size = value.parse().with_context(ctx)?,
                "lr" => cfg.lr = value.parse().with_context(ctx)?,
                "beta1" => cfg.beta1 = value.parse().with_context(ctx)?,
                "beta2" => cfg.beta2 = value.parse().with_context(ctx)?,
                "weight_decay" => cfg.weight_decay = value.parse().with_context(ctx)?,
                "epochs" => cfg.epochs = value.parse().with_context(ctx)?,
                "batch_size" => cfg.batch_size = value.parse().with_context(ctx)?,
                "lambda" => cfg.lambda = value.parse().with_context(ctx)?,
                "seed" => cfg.seed = value.parse().with_context(ctx)?,
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other => bail!("line {}: unknown key `{}`", lineno + 1, other),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(anyhow::Error::from)?;
        if self.lambda < 0.0 {
            bail!("lambda must be >= 0, got {}", self.lambda);
        }
        if self.batch_size < 2 {
            bail!("batch_size must be >= 2 (batch norm), got {}", self.batch_size);
        }
        if self.epochs == 0 {
            bail!("epochs must be >= 1");
        }
        if self.lr <= 0.0 {
            bail!("lr must be positive");
        }
        Ok(())
    }

    /// Canonical rendering: every key, fixed order.
    pub fn to_canonical_string(&self) -> String {
        let variant = match self.model.variant {
            Variant::Cnn => "cnn",
            Variant::Equivariant => "equivariant",
        };
        let head = match self.model.head {
            Head::InvariantPool => "invariant_pool",
            Head::Flatten => "flatten",
        };
        let widths: Vec<String> = self.model.widths.iter().map(|w| w.to_string()).collect();
        let mlp: Vec<String> = self.model.mlp_hidden.iter().map(|w| w.to_string()).collect();
        format!(
            "variant = {}\n\
             group_n = {}\n\
             image_size = {}\n\
             widths = {}\n\
             num_classes = {}\n\
             dropout_p = {}\n\
             head = {}\n\
             mlp_hidden = {}\n\
             kernel_size = {}\n\
             lr = {}\n\
             beta1 = {}\n\
             beta2 = {}\n\
             weight_decay = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             lambda = {}\n\
             seed = {}\n\
             data_dir = {}\n\
             out_dir = {}\n",
            variant,
            self.model.group_n,
            self.model.image_size,
            widths.join(","),
            self.model.num_classes,
            self.model.dropout_p,
            head,
            mlp.join(","),
            self.model.kernel_size,
            self.lr,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.epochs,
            self.batch_size,
            self.lambda,
            self.seed,
            self.data_dir.display(),
            self.out_dir.display(),
        )
    }
}
