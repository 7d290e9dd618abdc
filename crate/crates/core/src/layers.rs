//! Equivariance-respecting neural layers over geometric tensors.
//!
//! Every layer here commutes with the group action on its field types (for
//! quarter-turn elements, exactly up to float rounding):
//! - [`EquivariantConv`] constrains its kernel to the equivariant subspace
//!   and uses one bias scalar per output field.
//! - [`FieldBatchNorm`] shares statistics and affine parameters across all
//!   channels of one field.
//! - [`FieldDropout`] draws one mask value per field per spatial location,
//!   replicated across the field's channels, so train-time equivariance
//!   holds per sample.
//! - Pointwise ReLU commutes with any permutation representation, and
//!   [`group_pool`] averages each regular field down to an invariant scalar
//!   channel.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::group::{FieldType, GeometricTensor, RepKind};
use crate::kernels::{build_basis_cached, BasisCache, BlockExpander};
use crate::tensor::autodiff::ChannelRanges;
use crate::tensor::ops::{self, Phase, RunningStats};
use crate::tensor::{lit, Scalar, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Standard normal draw via Box-Muller; deterministic given the RNG stream.
pub(crate) fn randn<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn ranges_of(ft: &FieldType) -> ChannelRanges {
    Arc::new(ft.ranges())
}

// ---------------------------------------------------------------------------
// Equivariant convolution
// ---------------------------------------------------------------------------

/// A convolution whose kernel is a learned combination of equivariant basis
/// elements, with one bias scalar per output field.
pub struct EquivariantConv<T: Scalar> {
    in_type: FieldType,
    out_type: FieldType,
    kernel_size: usize,
    stride: usize,
    padding: usize,
    basis_count: usize,
    expander: Arc<BlockExpander<T>>,
    coeffs: Tensor<T>,
    bias: Tensor<T>,
    out_ranges: ChannelRanges,
}

impl<T: Scalar> EquivariantConv<T> {
    /// Builds the layer, constructing (or fetching from `cache`) the
    /// per-pair bases and drawing He-style initial coefficients: each
    /// coefficient segment is scaled so the expanded kernel matches the
    /// variance of a fan-in-initialized unconstrained kernel.
    pub fn new<R: Rng>(
        in_type: &FieldType,
        out_type: &FieldType,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        cache: &mut BasisCache,
        rng: &mut R,
    ) -> Result<Self> {
        let basis = build_basis_cached(in_type, out_type, kernel_size, cache)?;
        let count = basis.count();
        if count == 0 {
            return Err(Error::arg(
                "EquivariantConv::new",
                format!(
                    "equivariant basis between {:?} and {:?} is empty",
                    in_type, out_type
                ),
            ));
        }
        let fan_in = (in_type.total_dim() * kernel_size * kernel_size) as f64;
        let base_std = (2.0 / fan_in).sqrt();
        let mut coeffs = vec![T::zero(); count];
        for seg in basis.segments() {
            // Orthonormal basis: kernel variance = coeff variance * count/dim.
            let sigma = base_std * (seg.pair_dim as f64 / seg.count.max(1) as f64).sqrt();
            for c in coeffs[seg.offset..seg.offset + seg.count].iter_mut() {
                *c = lit::<T>(randn(rng) * sigma);
            }
        }
        let expander = BlockExpander::<T>::from_basis(&basis);
        let coeffs = Tensor::from_vec(&[count], coeffs)?.requires_grad();
        let bias = Tensor::zeros(&[out_type.fields().len()]).requires_grad();
        Ok(EquivariantConv {
            in_type: in_type.clone(),
            out_type: out_type.clone(),
            kernel_size,
            stride,
            padding,
            basis_count: count,
            expander,
            coeffs,
            bias,
            out_ranges: ranges_of(out_type),
        })
    }

    pub fn in_type(&self) -> &FieldType {
        &self.in_type
    }

    pub fn out_type(&self) -> &FieldType {
        &self.out_type
    }

    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn coeffs(&self) -> &Tensor<T> {
        &self.coeffs
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    /// Number of learnable scalars: basis coefficients plus one bias per
    /// output field.
    pub fn param_count(&self) -> usize {
        self.basis_count + self.out_type.fields().len()
    }

    /// The current expanded kernel `[out, in, k, k]` (differentiable).
    pub fn kernel(&self) -> Result<Tensor<T>> {
        ops::expand_kernel_op(&self.coeffs, self.expander.clone() as Arc<_>)
    }

    pub fn forward(&self, x: &GeometricTensor<T>) -> Result<GeometricTensor<T>> {
        if !x.field_type.same_as(&self.in_type) {
            return Err(Error::FieldMismatch(format!(
                "conv expects {:?}, got {:?}",
                self.in_type, x.field_type
            )));
        }
        let kernel = self.kernel()?;
        let y = ops::conv2d(&x.tensor, &kernel, None, self.stride, self.padding)?;
        let y = ops::bias_fields(&y, &self.bias, &self.out_ranges)?;
        GeometricTensor::new(y, self.out_type.clone())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.coeffs"), self.coeffs.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// ---------------------------------------------------------------------------
// Field-shared batch norm
// ---------------------------------------------------------------------------

/// Batch normalization with statistics and affine parameters shared across
/// all channels of one field (required for regular-field equivariance; with
/// all-trivial fields this is ordinary per-channel batch norm).
pub struct FieldBatchNorm<T: Scalar> {
    field_type: FieldType,
    ranges: ChannelRanges,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running: RunningStats<T>,
}

impl<T: Scalar> FieldBatchNorm<T> {
    pub fn new(field_type: &FieldType) -> Self {
        let nf = field_type.fields().len();
        FieldBatchNorm {
            field_type: field_type.clone(),
            ranges: ranges_of(field_type),
            gamma: Tensor::full(&[nf], T::one()).requires_grad(),
            beta: Tensor::zeros(&[nf]).requires_grad(),
            running: RunningStats::new(nf),
        }
    }

    pub fn forward(&self, x: &GeometricTensor<T>, phase: Phase) -> Result<GeometricTensor<T>> {
        if !x.field_type.same_as(&self.field_type) {
            return Err(Error::FieldMismatch(format!(
                "batchnorm expects {:?}, got {:?}",
                self.field_type, x.field_type
            )));
        }
        let y = ops::batchnorm_groups(
            &x.tensor,
            &self.gamma,
            &self.beta,
            &self.running,
            &self.ranges,
            phase,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        GeometricTensor::new(y, self.field_type.clone())
    }

    pub fn running(&self) -> &RunningStats<T> {
        &self.running
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.running_mean"), self.running.mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running.var.clone()));
    }
}

// ---------------------------------------------------------------------------
// Field-coherent dropout
// ---------------------------------------------------------------------------

/// Inverted dropout with one Bernoulli draw per (batch, field, pixel),
/// replicated across the field's channels. Identity in eval mode.
pub struct FieldDropout<T: Scalar> {
    field_type: FieldType,
    ranges: ChannelRanges,
    p: f64,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> FieldDropout<T> {
    pub fn new(field_type: &FieldType, p: f64) -> Self {
        FieldDropout {
            field_type: field_type.clone(),
            ranges: ranges_of(field_type),
            p,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward<R: Rng>(
        &self,
        x: &GeometricTensor<T>,
        phase: Phase,
        rng: &mut R,
    ) -> Result<GeometricTensor<T>> {
        if !x.field_type.same_as(&self.field_type) {
            return Err(Error::FieldMismatch(format!(
                "dropout expects {:?}, got {:?}",
                self.field_type, x.field_type
            )));
        }
        match phase {
            Phase::Eval => Ok(x.clone()),
            Phase::Train => {
                let y = ops::dropout_fields(&x.tensor, &self.ranges, self.p, rng)?;
                GeometricTensor::new(y, self.field_type.clone())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pointwise and pooling helpers on geometric tensors
// ---------------------------------------------------------------------------

/// Pointwise ReLU. Valid on permutation representations (trivial, regular,
/// and their sums), where elementwise maps commute with the channel action.
pub fn relu_field<T: Scalar>(x: &GeometricTensor<T>) -> GeometricTensor<T> {
    GeometricTensor {
        tensor: ops::relu(&x.tensor),
        field_type: x.field_type.clone(),
    }
}

/// Channelwise 2x2 max pooling; commutes with quarter-turn rotations because
/// pooling windows map onto pooling windows.
pub fn maxpool_field<T: Scalar>(x: &GeometricTensor<T>) -> Result<GeometricTensor<T>> {
    Ok(GeometricTensor {
        tensor: ops::maxpool2(&x.tensor)?,
        field_type: x.field_type.clone(),
    })
}

/// Channelwise nearest-neighbor 2x upsampling.
pub fn upsample_field<T: Scalar>(x: &GeometricTensor<T>) -> Result<GeometricTensor<T>> {
    Ok(GeometricTensor {
        tensor: ops::upsample_nearest2(&x.tensor)?,
        field_type: x.field_type.clone(),
    })
}

/// Concatenates two geometric tensors along channels (skip connections).
pub fn concat_fields<T: Scalar>(
    a: &GeometricTensor<T>,
    b: &GeometricTensor<T>,
) -> Result<GeometricTensor<T>> {
    let tensor = ops::concat_channels(&[&a.tensor, &b.tensor])?;
    let field_type = a.field_type.concat(&b.field_type)?;
    GeometricTensor::new(tensor, field_type)
}

/// Mean over each regular field's `|G|` channels, producing one trivial field
/// per input field. The result is invariant under the channel action, so
/// only the spatial grid moves under rotation.
pub fn group_pool<T: Scalar>(x: &GeometricTensor<T>) -> Result<GeometricTensor<T>> {
    for f in x.field_type.fields() {
        if f.kind() != RepKind::Regular {
            return Err(Error::FieldMismatch(format!(
                "group_pool requires all-regular fields, found {}",
                f.descriptor()
            )));
        }
    }
    let ranges = ranges_of(&x.field_type);
    let tensor = ops::group_mean_channels(&x.tensor, &ranges)?;
    let out_type = FieldType::trivial(x.field_type.group(), x.field_type.fields().len());
    GeometricTensor::new(tensor, out_type)
}

// ---------------------------------------------------------------------------
// Convolutional block
// ---------------------------------------------------------------------------

/// The model's convolutional block: two conv layers, two batch norms, two
/// dropouts, wired conv -> bn -> relu -> dropout twice.
pub struct ConvBlock<T: Scalar> {
    conv1: EquivariantConv<T>,
    bn1: FieldBatchNorm<T>,
    drop1: FieldDropout<T>,
    conv2: EquivariantConv<T>,
    bn2: FieldBatchNorm<T>,
    drop2: FieldDropout<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new<R: Rng>(
        in_type: &FieldType,
        out_type: &FieldType,
        kernel_size: usize,
        dropout_p: f64,
        cache: &mut BasisCache,
        rng: &mut R,
    ) -> Result<Self> {
        let padding = (kernel_size - 1) / 2;
        let conv1 = EquivariantConv::new(in_type, out_type, kernel_size, 1, padding, cache, rng)?;
        let bn1 = FieldBatchNorm::new(out_type);
        let drop1 = FieldDropout::new(out_type, dropout_p);
        let conv2 = EquivariantConv::new(out_type, out_type, kernel_size, 1, padding, cache, rng)?;
        let bn2 = FieldBatchNorm::new(out_type);
        let drop2 = FieldDropout::new(out_type, dropout_p);
        Ok(ConvBlock {
            conv1,
            bn1,
            drop1,
            conv2,
            bn2,
            drop2,
        })
    }

    pub fn out_type(&self) -> &FieldType {
        self.conv2.out_type()
    }

    pub fn conv1(&self) -> &EquivariantConv<T> {
        &self.conv1
    }

    pub fn forward<R: Rng>(
        &self,
        x: &GeometricTensor<T>,
        phase: Phase,
        rng: &mut R,
    ) -> Result<GeometricTensor<T>> {
        let mut h = self.conv1.forward(x)?;
        h = self.bn1.forward(&h, phase)?;
        h = relu_field(&h);
        h = self.drop1.forward(&h, phase, rng)?;
        h = self.conv2.forward(&h)?;
        h = self.bn2.forward(&h, phase)?;
        h = relu_field(&h);
        self.drop2.forward(&h, phase, rng)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.bn1.param_count()
            + self.bn2.param_count()
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.bn1.collect_params(&format!("{prefix}.bn1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        self.bn2.collect_params(&format!("{prefix}.bn2"), out);
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.bn1.collect_buffers(&format!("{prefix}.bn1"), out);
        self.bn2.collect_buffers(&format!("{prefix}.bn2"), out);
    }
}

// ---------------------------------------------------------------------------
// Affine layer for the classification head
// ---------------------------------------------------------------------------

/// Fully connected layer `x W^T + b`.
pub struct Linear<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let w: Vec<T> = (0..out_dim * in_dim)
            .map(|_| lit::<T>(randn(rng) * std))
            .collect();
        Linear {
            weight: Tensor::from_vec(&[out_dim, in_dim], w).unwrap().requires_grad(),
            bias: Tensor::zeros(&[out_dim]).requires_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::matmul_bias(x, &self.weight, &self.bias)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}
