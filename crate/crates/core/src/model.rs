//! The U-Net with a classification head.
//!
//! Both variants share one topology: five encoder blocks with 2x max pooling
//! between consecutive blocks, five decoder blocks with 2x nearest-neighbor
//! upsampling between consecutive blocks, and skip connections concatenating
//! each pooled encoder output into the same-resolution decoder input. A 1x1
//! convolution maps the last decoder block to the single-channel segmentation
//! logits; the classification head pools the bottleneck features and applies
//! three affine layers.
//!
//! The `cnn` variant instantiates the layers over the trivial group `C_1`
//! (so the kernel constraint is vacuous and every layer reduces to its plain
//! counterpart); the `equivariant` variant uses `C_N` with regular-field
//! hidden layers, which makes segmentation logits equivariant and — with the
//! `invariant_pool` head — classification logits invariant under quarter-turn
//! rotations of the input.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::group::{make_group, FieldType, GeometricTensor, Group, GroupKind};
use crate::kernels::BasisCache;
use crate::layers::{
    concat_fields, group_pool, maxpool_field, upsample_field, ConvBlock, EquivariantConv, Linear,
};
use crate::tensor::ops::{self, Phase};
use crate::tensor::{Scalar, Tensor};

/// Which convolution family the model is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Cnn,
    Equivariant,
}

/// How bottleneck features reach the classification MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Group-pool the regular fields, then global spatial average. Makes the
    /// class logits rotation-invariant for the equivariant variant.
    InvariantPool,
    /// Group-pool, then flatten the spatial grid. No invariance claimed.
    Flatten,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Rotation count N of the symmetry group (equivariant variant only).
    pub group_n: usize,
    /// Input height = width; must be divisible by 16 (four pooling stages).
    pub image_size: usize,
    /// Nominal channel count per encoder stage; the equivariant variant
    /// rounds each to a multiple of N (multiplicity = width / N).
    pub widths: [usize; 5],
    pub num_classes: usize,
    pub dropout_p: f64,
    pub head: Head,
    pub mlp_hidden: [usize; 2],
    pub kernel_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Equivariant,
            group_n: 8,
            image_size: 64,
            widths: [8, 16, 32, 64, 64],
            num_classes: 4,
            dropout_p: 0.1,
            head: Head::InvariantPool,
            mlp_hidden: [64, 32],
            kernel_size: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".to_string()));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0,1]",
                self.dropout_p
            )));
        }
        if self.variant == Variant::Equivariant && self.group_n == 0 {
            return Err(Error::Config("group_n must be >= 1".to_string()));
        }
        self.effective_widths()?;
        Ok(())
    }

    pub fn group(&self) -> Result<Group> {
        match self.variant {
            Variant::Cnn => make_group(GroupKind::Cyclic, 1),
            Variant::Equivariant => make_group(GroupKind::Cyclic, self.group_n),
        }
    }

    /// Widths rounded to the nearest multiple of the group order (ties up).
    pub fn effective_widths(&self) -> Result<[usize; 5]> {
        let n = match self.variant {
            Variant::Cnn => 1,
            Variant::Equivariant => self.group_n,
        };
        let mut out = [0usize; 5];
        for (i, &w) in self.widths.iter().enumerate() {
            let mult = (2 * w + n) / (2 * n);
            if mult == 0 {
                return Err(Error::Config(format!(
                    "width {} at stage {} rounds to zero regular fields of C{}",
                    w, i, n
                )));
            }
            out[i] = mult * n;
        }
        Ok(out)
    }

    /// Spatial size of the bottleneck feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size / 16
    }
}

/// The U-Net with classification head.
pub struct UNetModel<T: Scalar> {
    cfg: ModelConfig,
    group: Group,
    in_type: FieldType,
    enc: Vec<ConvBlock<T>>,
    dec: Vec<ConvBlock<T>>,
    seg_head: EquivariantConv<T>,
    mlp: Vec<Linear<T>>,
}

/// Builds a model with deterministic He-style initialization from `seed`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<UNetModel<T>> {
    cfg.validate()?;
    let group = cfg.group()?;
    let widths = cfg.effective_widths()?;
    let order = group.order();
    let hidden: Vec<FieldType> = widths
        .iter()
        .map(|&w| FieldType::regular(&group, w / order))
        .collect();
    let in_type = FieldType::trivial(&group, 3);
    let seg_out = FieldType::trivial(&group, 1);

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cache = BasisCache::new();
    let k = cfg.kernel_size;
    let p = cfg.dropout_p;

    let mut enc = Vec::with_capacity(5);
    for i in 0..5 {
        let it = if i == 0 { &in_type } else { &hidden[i - 1] };
        enc.push(ConvBlock::new(it, &hidden[i], k, p, &mut cache, &mut rng)?);
    }
    let mut dec = Vec::with_capacity(5);
    dec.push(ConvBlock::new(&hidden[4], &hidden[4], k, p, &mut cache, &mut rng)?);
    for i in 1..5 {
        // Decoder block i consumes upsampled features concatenated with the
        // same-resolution encoder output.
        let skip = &hidden[4 - i];
        let up_in = if i == 1 { &hidden[4] } else { &hidden[5 - i] };
        let cat = up_in.concat(skip)?;
        dec.push(ConvBlock::new(&cat, skip, k, p, &mut cache, &mut rng)?);
    }
    let seg_head = EquivariantConv::new(&hidden[0], &seg_out, 1, 1, 0, &mut cache, &mut rng)?;

    let mult5 = widths[4] / order;
    let s5 = cfg.bottleneck_size();
    let mlp_in = match cfg.head {
        Head::InvariantPool => mult5,
        Head::Flatten => mult5 * s5 * s5,
    };
    let mlp = vec![
        Linear::new(mlp_in, cfg.mlp_hidden[0], &mut rng),
        Linear::new(cfg.mlp_hidden[0], cfg.mlp_hidden[1], &mut rng),
        Linear::new(cfg.mlp_hidden[1], cfg.num_classes, &mut rng),
    ];

    Ok(UNetModel {
        cfg: cfg.clone(),
        group,
        in_type,
        enc,
        dec,
        seg_head,
        mlp,
    })
}

impl<T: Scalar> UNetModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn group(&self) -> &Group {
        &self.group
    }

    /// Forward pass producing `(seg_logits [B,1,H,W], class_logits [B,K])`.
    ///
    /// `rng` feeds dropout; it is consumed only in [`Phase::Train`] with a
    /// positive dropout probability.
    pub fn forward<R: rand::Rng>(
        &self,
        images: &Tensor<T>,
        phase: Phase,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = images.shape().to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.image_size || s[3] != self.cfg.image_size
        {
            return Err(Error::shape(
                "UNetModel::forward",
                format!(
                    "expected [B,3,{},{}], got {:?}",
                    self.cfg.image_size, self.cfg.image_size, s
                ),
            ));
        }
        let x = GeometricTensor::new(images.clone(), self.in_type.clone())?;

        let mut skips: Vec<GeometricTensor<T>> = Vec::with_capacity(5);
        let mut h = self.enc[0].forward(&x, phase, rng)?;
        skips.push(h.clone());
        for block in &self.enc[1..] {
            let pooled = maxpool_field(&h)?;
            h = block.forward(&pooled, phase, rng)?;
            skips.push(h.clone());
        }
        let bottleneck = skips[4].clone();

        let mut d = self.dec[0].forward(&bottleneck, phase, rng)?;
        for (i, block) in self.dec.iter().enumerate().skip(1) {
            let up = upsample_field(&d)?;
            let cat = concat_fields(&up, &skips[4 - i])?;
            d = block.forward(&cat, phase, rng)?;
        }
        let seg_logits = self.seg_head.forward(&d)?.tensor;

        let pooled = group_pool(&bottleneck)?;
        let feat = match self.cfg.head {
            Head::InvariantPool => ops::spatial_mean(&pooled.tensor)?,
            Head::Flatten => ops::flatten(&pooled.tensor)?,
        };
        let h1 = ops::relu(&self.mlp[0].forward(&feat)?);
        let h2 = ops::relu(&self.mlp[1].forward(&h1)?);
        let class_logits = self.mlp[2].forward(&h2)?;
        Ok((seg_logits, class_logits))
    }

    /// Evaluation-mode forward with no graph recording; a pure function of
    /// the inputs and parameters.
    pub fn forward_eval(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        ops::no_grad(|| {
            let mut rng = ChaCha12Rng::seed_from_u64(0);
            self.forward(images, Phase::Eval, &mut rng)
        })
    }

    /// Learnable parameters in a fixed, documented order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            b.collect_params(&format!("enc{}", i + 1), &mut out);
        }
        for (i, b) in self.dec.iter().enumerate() {
            b.collect_params(&format!("dec{}", i + 1), &mut out);
        }
        self.seg_head.collect_params("seg", &mut out);
        for (i, l) in self.mlp.iter().enumerate() {
            l.collect_params(&format!("head.fc{}", i + 1), &mut out);
        }
        out
    }

    /// Non-learnable state (batch-norm running statistics), fixed order.
    pub fn named_buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            b.collect_buffers(&format!("enc{}", i + 1), &mut out);
        }
        for (i, b) in self.dec.iter().enumerate() {
            b.collect_buffers(&format!("dec{}", i + 1), &mut out);
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }
}

/// Total number of learnable scalars.
pub fn param_count<T: Scalar>(model: &UNetModel<T>) -> usize {
    model.named_parameters().iter().map(|(_, t)| t.numel()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            group_n: 4,
            image_size: 16,
            widths: [4, 4, 8, 8, 8],
            num_classes: 4,
            dropout_p: 0.1,
            head: Head::InvariantPool,
            mlp_hidden: [8, 8],
            kernel_size: 3,
        }
    }

    #[test]
    fn config_rejects_bad_image_size() {
        let cfg = ModelConfig {
            image_size: 40,
            ..tiny_cfg(Variant::Cnn)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_unroundable_width() {
        let cfg = ModelConfig {
            group_n: 8,
            widths: [3, 8, 8, 8, 8],
            ..tiny_cfg(Variant::Equivariant)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn widths_round_to_group_multiples() {
        let cfg = ModelConfig {
            group_n: 8,
            widths: [8, 12, 20, 64, 60],
            ..tiny_cfg(Variant::Equivariant)
        };
        assert_eq!(cfg.effective_widths().unwrap(), [8, 16, 24, 64, 64]);
    }

    #[test]
    fn bottleneck_spatial_size_is_image_over_16() {
        let cfg = ModelConfig {
            image_size: 64,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.bottleneck_size(), 4);
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        for variant in [Variant::Cnn, Variant::Equivariant] {
            let cfg = tiny_cfg(variant);
            let model = build_model::<f32>(&cfg, 7).unwrap();
            let img = Tensor::from_vec(
                &[2, 3, 16, 16],
                (0..2 * 3 * 256).map(|i| (i % 97) as f32 / 97.0).collect(),
            )
            .unwrap();
            let (seg, cls) = model.forward_eval(&img).unwrap();
            assert_eq!(seg.shape(), &[2, 1, 16, 16]);
            assert_eq!(cls.shape(), &[2, 4]);
            let (seg2, cls2) = model.forward_eval(&img).unwrap();
            assert_eq!(*seg.data(), *seg2.data());
            assert_eq!(*cls.data(), *cls2.data());
        }
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = tiny_cfg(Variant::Equivariant);
        let a = build_model::<f32>(&cfg, 42).unwrap();
        let b = build_model::<f32>(&cfg, 42).unwrap();
        for ((na, ta), (nb, tb)) in a.named_parameters().iter().zip(b.named_parameters().iter()) {
            assert_eq!(na, nb);
            assert_eq!(*ta.data(), *tb.data());
        }
        let c = build_model::<f32>(&cfg, 43).unwrap();
        let any_diff = a
            .named_parameters()
            .iter()
            .zip(c.named_parameters().iter())
            .any(|((_, ta), (_, tc))| *ta.data() != *tc.data());
        assert!(any_diff);
    }

    #[test]
    fn eval_batch_of_two_equals_two_batches_of_one() {
        let cfg = tiny_cfg(Variant::Cnn);
        let model = build_model::<f32>(&cfg, 3).unwrap();
        let data: Vec<f32> = (0..2 * 3 * 256).map(|i| ((i * 31) % 113) as f32 / 113.0).collect();
        let both = Tensor::from_vec(&[2, 3, 16, 16], data.clone()).unwrap();
        let first = Tensor::from_vec(&[1, 3, 16, 16], data[..3 * 256].to_vec()).unwrap();
        let second = Tensor::from_vec(&[1, 3, 16, 16], data[3 * 256..].to_vec()).unwrap();
        let (seg, cls) = model.forward_eval(&both).unwrap();
        let (seg_a, cls_a) = model.forward_eval(&first).unwrap();
        let (seg_b, cls_b) = model.forward_eval(&second).unwrap();
        let seg_d = seg.data();
        for (i, &v) in seg_a.data().iter().enumerate() {
            assert!((seg_d[i] - v).abs() <= 1e-6);
        }
        for (i, &v) in seg_b.data().iter().enumerate() {
            assert!((seg_d[256 + i] - v).abs() <= 1e-6);
        }
        let cls_d = cls.data();
        for (i, &v) in cls_a.data().iter().enumerate() {
            assert!((cls_d[i] - v).abs() <= 1e-6);
        }
        for (i, &v) in cls_b.data().iter().enumerate() {
            assert!((cls_d[4 + i] - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn equivariant_has_fewer_parameters_than_cnn() {
        let ecfg = ModelConfig {
            variant: Variant::Equivariant,
            group_n: 8,
            ..ModelConfig::default()
        };
        let ccfg = ModelConfig {
            variant: Variant::Cnn,
            ..ecfg.clone()
        };
        let e = build_model::<f32>(&ecfg, 1).unwrap();
        let c = build_model::<f32>(&ccfg, 1).unwrap();
        assert!(
            param_count(&e) < param_count(&c),
            "equivariant {} !< cnn {}",
            param_count(&e),
            param_count(&c)
        );
    }

    /// Closed-form parameter count of a plain-CNN conv block:
    /// 2*(Cout*Cin*k^2 + Cout) for the convs plus 2*2*Cout for the norms,
    /// with Cin = Cout for the second conv.
    #[test]
    fn cnn_block_param_count_matches_hand_formula() {
        let cfg = tiny_cfg(Variant::Cnn);
        let model = build_model::<f32>(&cfg, 0).unwrap();
        let (cin, cout, k) = (3usize, 4usize, 3usize);
        let expect = (cout * cin * k * k + cout) + (cout * cout * k * k + cout) + 2 * 2 * cout;
        assert_eq!(model.enc[0].param_count(), expect);
    }
}
