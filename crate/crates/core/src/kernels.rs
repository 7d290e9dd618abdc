//! Equivariant-kernel subspace solver.
//!
//! A convolution layer between steerable feature fields is equivariant iff
//! its kernel satisfies `kappa(g x) = rho_out(g) kappa(x) rho_in(g)^-1` for
//! every group element. The solver projects each canonical basis kernel with
//! the group-averaging (Reynolds) operator
//! `P kappa = 1/|G| sum_g rho_out(g)^-1 kappa(g x) rho_in(g)`,
//! orthonormalizes the projections with modified Gram-Schmidt, and exposes
//! the result as an orthonormal basis of the permissible-kernel subspace.
//!
//! Spatial rotation of the kernel grid is an exact index permutation for
//! angles that are multiples of 90 degrees, and bilinear resampling
//! otherwise (the 45-degree elements of C8). The projected kernels are still
//! exactly equivariant under the quarter-turn subgroup; the 45-degree
//! constraint holds to resampling tolerance. Everything here runs in f64 at
//! construction time; layers cast the finished basis to the training dtype.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::group::{FieldType, GroupElement, Representation};
use crate::spatial;
use crate::tensor::autodiff::KernelExpander;
use crate::tensor::{ops, Scalar, Tensor};

/// Gram-Schmidt drop tolerance, relative to the largest projected norm.
const DROP_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Group action on raw kernels
// ---------------------------------------------------------------------------

fn check_types(in_type: &FieldType, out_type: &FieldType, k: usize) -> Result<()> {
    if in_type.group().kind() != out_type.group().kind()
        || in_type.group().n() != out_type.group().n()
    {
        return Err(Error::GroupMismatch(format!(
            "kernel between fields of {} and {}",
            in_type.group(),
            out_type.group()
        )));
    }
    if k % 2 == 0 {
        return Err(Error::arg(
            "equivariant kernel",
            format!("kernel size {} must be odd", k),
        ));
    }
    Ok(())
}

/// Samples `kappa(g x)`: each `(out, in)` plane of the kernel is evaluated at
/// the transformed grid position. Exact for quarter turns, bilinear otherwise.
fn kernel_spatial_action(
    kernel: &[f64],
    d_out: usize,
    d_in: usize,
    k: usize,
    ft: &FieldType,
    g: GroupElement,
) -> Vec<f64> {
    let group = ft.group();
    let kk = k * k;
    let quarters = group.quarter_turns(g);
    let mut out = vec![0.0f64; kernel.len()];
    for plane_idx in 0..d_out * d_in {
        let plane = &kernel[plane_idx * kk..(plane_idx + 1) * kk];
        // out(p) = plane(R_theta F p): rotate the buffer by -theta, then flip.
        let rotated = match quarters {
            Some(q) => spatial::rotate_quarter(plane, k, k, (4 - q) % 4).0,
            None => spatial::rotate_bilinear(plane, k, k, -group.angle(g)),
        };
        let moved = if g.reflect {
            spatial::flip_horizontal(&rotated, k, k)
        } else {
            rotated
        };
        out[plane_idx * kk..(plane_idx + 1) * kk].copy_from_slice(&moved);
    }
    out
}

/// Per-position channel mixing `out = M_out * kappa * M_in`, applied blockwise
/// over the (out_field, in_field) structure of the two field types.
fn kernel_channel_mix(
    kernel: &[f64],
    in_type: &FieldType,
    out_type: &FieldType,
    k: usize,
    m_out_of: impl Fn(&Representation) -> Vec<f64>,
    m_in_of: impl Fn(&Representation) -> Vec<f64>,
) -> Vec<f64> {
    let d_in = in_type.total_dim();
    let d_out = out_type.total_dim();
    let kk = k * k;
    let mut out = vec![0.0f64; kernel.len()];
    for (fo, (o0, o1)) in out_type.fields().iter().zip(out_type.ranges()) {
        let mo = m_out_of(fo);
        let dob = o1 - o0;
        for (fi, (i0, i1)) in in_type.fields().iter().zip(in_type.ranges()) {
            let mi = m_in_of(fi);
            let dib = i1 - i0;
            let mut block = vec![0.0f64; dob * dib];
            let mut mixed = vec![0.0f64; dob * dib];
            for s in 0..kk {
                for (bo, row) in block.chunks_mut(dib).enumerate() {
                    for (bi, v) in row.iter_mut().enumerate() {
                        *v = kernel[((o0 + bo) * d_in + i0 + bi) * kk + s];
                    }
                }
                // mixed = mo * block * mi
                for r in 0..dob {
                    for c in 0..dib {
                        let mut acc = 0.0;
                        for p in 0..dob {
                            let mo_rp = mo[r * dob + p];
                            if mo_rp == 0.0 {
                                continue;
                            }
                            for q in 0..dib {
                                acc += mo_rp * block[p * dib + q] * mi[q * dib + c];
                            }
                        }
                        mixed[r * dib + c] = acc;
                    }
                }
                for bo in 0..dob {
                    for bi in 0..dib {
                        out[((o0 + bo) * d_in + i0 + bi) * kk + s] = mixed[bo * dib + bi];
                    }
                }
            }
        }
    }
    let _ = d_out;
    out
}

/// One term of the Reynolds average:
/// `T_g(kappa) = rho_out(g)^-1 kappa(g x) rho_in(g)`.
/// The constraint set is exactly the fixed points of all `T_g`.
pub fn reynolds_term(
    kernel: &[f64],
    in_type: &FieldType,
    out_type: &FieldType,
    k: usize,
    g: GroupElement,
) -> Vec<f64> {
    let moved = kernel_spatial_action(kernel, out_type.total_dim(), in_type.total_dim(), k, in_type, g);
    kernel_channel_mix(
        &moved,
        in_type,
        out_type,
        k,
        |rep| rep.matrix_inverse(g).to_vec(),
        |rep| rep.matrix(g).to_vec(),
    )
}

/// Projects a raw kernel onto the equivariant subspace by group averaging:
/// `P kappa = 1/|G| sum_g rho_out(g)^-1 kappa(g x) rho_in(g)`.
pub fn reynolds_project(
    kernel: &[f64],
    in_type: &FieldType,
    out_type: &FieldType,
    k: usize,
) -> Result<Vec<f64>> {
    check_types(in_type, out_type, k)?;
    let expect = out_type.total_dim() * in_type.total_dim() * k * k;
    if kernel.len() != expect {
        return Err(Error::shape(
            "reynolds_project",
            format!("kernel has {} entries, expected {}", kernel.len(), expect),
        ));
    }
    let group = in_type.group();
    let mut acc = vec![0.0f64; kernel.len()];
    for &g in group.elements() {
        let term = reynolds_term(kernel, in_type, out_type, k, g);
        for (a, t) in acc.iter_mut().zip(&term) {
            *a += t;
        }
    }
    let inv = 1.0 / group.order() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(acc)
}

/// Max-abs violation of the kernel constraint at one group element,
/// measured as `max |T_g(kappa) - kappa|`.
pub fn constraint_violation(
    kernel: &[f64],
    in_type: &FieldType,
    out_type: &FieldType,
    k: usize,
    g: GroupElement,
) -> f64 {
    let term = reynolds_term(kernel, in_type, out_type, k, g);
    term.iter()
        .zip(kernel)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Like [`constraint_violation`] but restricted to the central
/// `(k-2) x (k-2)` sub-grid, where bilinear resampling error is bounded.
/// Returns 0 for `k <= 2`.
pub fn constraint_violation_central(
    kernel: &[f64],
    in_type: &FieldType,
    out_type: &FieldType,
    k: usize,
    g: GroupElement,
) -> f64 {
    if k <= 2 {
        return 0.0;
    }
    let term = reynolds_term(kernel, in_type, out_type, k, g);
    let planes = out_type.total_dim() * in_type.total_dim();
    let kk = k * k;
    let mut worst = 0.0f64;
    for p in 0..planes {
        for r in 1..k - 1 {
            for c in 1..k - 1 {
                let idx = p * kk + r * k + c;
                worst = worst.max((term[idx] - kernel[idx]).abs());
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Per-pair bases
// ---------------------------------------------------------------------------

/// Orthonormal basis of the equivariant subspace for one
/// (input representation, output representation, kernel size) triple.
pub struct PairBasis {
    d_in: usize,
    d_out: usize,
    k: usize,
    kind: PairBasisKind,
}

enum PairBasisKind {
    /// Trivial group: the constraint is vacuous and the canonical basis is
    /// already orthonormal. Kept implicit so wide layers stay cheap.
    Identity,
    Dense(Vec<Vec<f64>>),
}

impl PairBasis {
    pub fn count(&self) -> usize {
        match &self.kind {
            PairBasisKind::Identity => self.dim(),
            PairBasisKind::Dense(v) => v.len(),
        }
    }

    /// Full dimension of the unconstrained kernel space for this pair.
    pub fn dim(&self) -> usize {
        self.d_out * self.d_in * self.k * self.k
    }

    /// Materializes basis element `idx` as a flat `[d_out, d_in, k, k]` buffer.
    pub fn element(&self, idx: usize) -> Vec<f64> {
        match &self.kind {
            PairBasisKind::Identity => {
                let mut v = vec![0.0; self.dim()];
                v[idx] = 1.0;
                v
            }
            PairBasisKind::Dense(v) => v[idx].clone(),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram-Schmidt with one re-orthogonalization pass; vectors whose
/// residual falls below `tol` are dropped as dependent.
fn gram_schmidt(vectors: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut u = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&u, b);
                for (ui, bi) in u.iter_mut().zip(b) {
                    *ui -= c * bi;
                }
            }
        }
        let n = norm(&u);
        if n > tol {
            let inv = 1.0 / n;
            for ui in u.iter_mut() {
                *ui *= inv;
            }
            basis.push(u);
        }
    }
    basis
}

/// Builds the orthonormal basis for a single representation pair.
pub fn pair_basis(rep_in: &Representation, rep_out: &Representation, k: usize) -> Result<Arc<PairBasis>> {
    let in_type = FieldType::new(rep_in.group(), vec![rep_in.clone()])?;
    let out_type = FieldType::new(rep_out.group(), vec![rep_out.clone()])?;
    check_types(&in_type, &out_type, k)?;
    let (d_in, d_out) = (rep_in.dim(), rep_out.dim());
    if in_type.group().order() == 1 {
        return Ok(Arc::new(PairBasis {
            d_in,
            d_out,
            k,
            kind: PairBasisKind::Identity,
        }));
    }
    let dim = d_out * d_in * k * k;
    let mut projected: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut canonical = vec![0.0f64; dim];
    for i in 0..dim {
        canonical[i] = 1.0;
        projected.push(reynolds_project(&canonical, &in_type, &out_type, k)?);
        canonical[i] = 0.0;
    }
    let max_norm = projected.iter().map(|v| norm(v)).fold(0.0f64, f64::max);
    let basis = if max_norm == 0.0 {
        Vec::new()
    } else {
        gram_schmidt(&projected, DROP_TOL * max_norm)
    };
    Ok(Arc::new(PairBasis {
        d_in,
        d_out,
        k,
        kind: PairBasisKind::Dense(basis),
    }))
}

/// Cache of pair bases keyed by (group, representation descriptors, k), so a
/// model builds each distinct basis once.
#[derive(Default)]
pub struct BasisCache {
    map: HashMap<String, Arc<PairBasis>>,
}

impl BasisCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &mut self,
        rep_in: &Representation,
        rep_out: &Representation,
        k: usize,
    ) -> Result<Arc<PairBasis>> {
        let key = format!(
            "{}|{}|{}|{}",
            rep_in.group(),
            rep_in.descriptor(),
            rep_out.descriptor(),
            k
        );
        if let Some(b) = self.map.get(&key) {
            return Ok(Arc::clone(b));
        }
        let b = pair_basis(rep_in, rep_out, k)?;
        self.map.insert(key, Arc::clone(&b));
        Ok(b)
    }
}

// ---------------------------------------------------------------------------
// Joint bases over full field types
// ---------------------------------------------------------------------------

struct PairSlot {
    out_range: (usize, usize),
    in_range: (usize, usize),
    basis: Arc<PairBasis>,
    coeff_offset: usize,
}

/// Where one (out_field, in_field) pair's coefficients live in the flat
/// coefficient vector, plus the pair's unconstrained kernel dimension.
#[derive(Debug, Clone, Copy)]
pub struct CoeffSegment {
    pub offset: usize,
    pub count: usize,
    pub pair_dim: usize,
}

/// Orthonormal basis of the equivariant-kernel subspace between two field
/// types. Kernel blocks between different (out_field, in_field) pairs are
/// independent, so the joint basis is the union of per-pair bases embedded
/// at their block positions.
pub struct EquivariantBasis {
    in_type: FieldType,
    out_type: FieldType,
    kernel_size: usize,
    slots: Vec<PairSlot>,
    count: usize,
}

impl EquivariantBasis {
    pub fn in_type(&self) -> &FieldType {
        &self.in_type
    }

    pub fn out_type(&self) -> &FieldType {
        &self.out_type
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    /// Number of basis elements (= learnable coefficients).
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        [
            self.out_type.total_dim(),
            self.in_type.total_dim(),
            self.kernel_size,
            self.kernel_size,
        ]
    }

    /// Coefficient layout: one segment per (out_field, in_field) pair.
    pub fn segments(&self) -> Vec<CoeffSegment> {
        self.slots
            .iter()
            .map(|s| CoeffSegment {
                offset: s.coeff_offset,
                count: s.basis.count(),
                pair_dim: s.basis.dim(),
            })
            .collect()
    }

    /// Materializes basis element `idx` as a flat `[out, in, k, k]` kernel.
    pub fn kernel(&self, idx: usize) -> Vec<f64> {
        let dims = self.kernel_dims();
        let mut out = vec![0.0f64; dims.iter().product()];
        let slot = self
            .slots
            .iter()
            .rev()
            .find(|s| idx >= s.coeff_offset)
            .expect("index within count");
        let local = slot.basis.element(idx - slot.coeff_offset);
        embed_block(&local, slot, dims[1], self.kernel_size, &mut out, 1.0);
        out
    }

    /// Dense linear combination of the basis (f64 reference path; layers use
    /// the cast [`BlockExpander`] instead).
    pub fn expand_f64(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.count {
            return Err(Error::shape(
                "EquivariantBasis::expand",
                format!("{} coefficients, basis has {}", coeffs.len(), self.count),
            ));
        }
        let dims = self.kernel_dims();
        let mut out = vec![0.0f64; dims.iter().product()];
        for slot in &self.slots {
            for c in 0..slot.basis.count() {
                let w = coeffs[slot.coeff_offset + c];
                if w == 0.0 {
                    continue;
                }
                let local = slot.basis.element(c);
                embed_block(&local, slot, dims[1], self.kernel_size, &mut out, w);
            }
        }
        Ok(out)
    }
}

fn embed_block(local: &[f64], slot: &PairSlot, d_in_total: usize, k: usize, out: &mut [f64], w: f64) {
    let (o0, o1) = slot.out_range;
    let (i0, i1) = slot.in_range;
    let (dob, dib) = (o1 - o0, i1 - i0);
    let kk = k * k;
    for bo in 0..dob {
        for bi in 0..dib {
            for s in 0..kk {
                out[((o0 + bo) * d_in_total + i0 + bi) * kk + s] +=
                    w * local[(bo * dib + bi) * kk + s];
            }
        }
    }
}

/// Builds the joint equivariant basis for `(in_type, out_type, k)`.
pub fn build_basis(in_type: &FieldType, out_type: &FieldType, k: usize) -> Result<EquivariantBasis> {
    build_basis_cached(in_type, out_type, k, &mut BasisCache::new())
}

/// [`build_basis`] with a shared pair cache (models reuse bases across layers).
pub fn build_basis_cached(
    in_type: &FieldType,
    out_type: &FieldType,
    k: usize,
    cache: &mut BasisCache,
) -> Result<EquivariantBasis> {
    check_types(in_type, out_type, k)?;
    let mut slots = Vec::new();
    let mut offset = 0usize;
    for (fo, out_range) in out_type.fields().iter().zip(out_type.ranges()) {
        for (fi, in_range) in in_type.fields().iter().zip(in_type.ranges()) {
            let basis = cache.get(fi, fo, k)?;
            let cnt = basis.count();
            slots.push(PairSlot {
                out_range,
                in_range,
                basis,
                coeff_offset: offset,
            });
            offset += cnt;
        }
    }
    Ok(EquivariantBasis {
        in_type: in_type.clone(),
        out_type: out_type.clone(),
        kernel_size: k,
        slots,
        count: offset,
    })
}

// ---------------------------------------------------------------------------
// Differentiable expansion
// ---------------------------------------------------------------------------

enum ExpandKind<T> {
    Identity,
    Dense(Vec<Vec<T>>),
}

struct ExpandSlot<T> {
    coeff_offset: usize,
    /// Flat kernel index for each block-local entry.
    index_map: Vec<u32>,
    kind: ExpandKind<T>,
}

/// The linear map from coefficients to a full kernel, cast to the training
/// dtype with per-pair index maps precomputed.
pub struct BlockExpander<T: Scalar> {
    dims: [usize; 4],
    count: usize,
    slots: Vec<ExpandSlot<T>>,
}

impl<T: Scalar> BlockExpander<T> {
    pub fn from_basis(basis: &EquivariantBasis) -> Arc<Self> {
        let dims = basis.kernel_dims();
        let d_in_total = dims[1];
        let kk = basis.kernel_size * basis.kernel_size;
        let slots = basis
            .slots
            .iter()
            .map(|slot| {
                let (o0, o1) = slot.out_range;
                let (i0, i1) = slot.in_range;
                let (dob, dib) = (o1 - o0, i1 - i0);
                let mut index_map = Vec::with_capacity(dob * dib * kk);
                for bo in 0..dob {
                    for bi in 0..dib {
                        for s in 0..kk {
                            index_map
                                .push((((o0 + bo) * d_in_total + i0 + bi) * kk + s) as u32);
                        }
                    }
                }
                let kind = match &slot.basis.kind {
                    PairBasisKind::Identity => ExpandKind::Identity,
                    PairBasisKind::Dense(vecs) => ExpandKind::Dense(
                        vecs.iter()
                            .map(|v| v.iter().map(|&x| T::from_f64(x).unwrap()).collect())
                            .collect(),
                    ),
                };
                ExpandSlot {
                    coeff_offset: slot.coeff_offset,
                    index_map,
                    kind,
                }
            })
            .collect();
        Arc::new(BlockExpander {
            dims,
            count: basis.count,
            slots,
        })
    }
}

impl<T: Scalar> KernelExpander<T> for BlockExpander<T> {
    fn coeff_count(&self) -> usize {
        self.count
    }

    fn kernel_dims(&self) -> [usize; 4] {
        self.dims
    }

    fn expand(&self, coeffs: &[T], out: &mut [T]) {
        for o in out.iter_mut() {
            *o = T::zero();
        }
        for slot in &self.slots {
            match &slot.kind {
                ExpandKind::Identity => {
                    for (e, &gi) in slot.index_map.iter().enumerate() {
                        out[gi as usize] = coeffs[slot.coeff_offset + e];
                    }
                }
                ExpandKind::Dense(vecs) => {
                    for (c, vec) in vecs.iter().enumerate() {
                        let w = coeffs[slot.coeff_offset + c];
                        for (&v, &gi) in vec.iter().zip(&slot.index_map) {
                            out[gi as usize] += w * v;
                        }
                    }
                }
            }
        }
    }

    fn coeff_grad(&self, d_kernel: &[T], d_coeffs: &mut [T]) {
        for slot in &self.slots {
            match &slot.kind {
                ExpandKind::Identity => {
                    for (e, &gi) in slot.index_map.iter().enumerate() {
                        d_coeffs[slot.coeff_offset + e] += d_kernel[gi as usize];
                    }
                }
                ExpandKind::Dense(vecs) => {
                    for (c, vec) in vecs.iter().enumerate() {
                        let mut acc = T::zero();
                        for (&v, &gi) in vec.iter().zip(&slot.index_map) {
                            acc += v * d_kernel[gi as usize];
                        }
                        d_coeffs[slot.coeff_offset + c] += acc;
                    }
                }
            }
        }
    }
}

/// Differentiable expansion `sum_i coeffs_i * basis_i`; gradients flow to the
/// coefficients.
pub fn expand_kernel<T: Scalar>(basis: &EquivariantBasis, coeffs: &Tensor<T>) -> Result<Tensor<T>> {
    let expander = BlockExpander::<T>::from_basis(basis);
    ops::expand_kernel_op(coeffs, expander)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{make_group, GroupKind};

    fn c(n: usize) -> crate::group::Group {
        make_group(GroupKind::Cyclic, n).unwrap()
    }

    fn pseudo_kernel(len: usize) -> Vec<f64> {
        (0..len).map(|i| ((i * 2654435761) % 1000) as f64 / 250.0 - 2.0).collect()
    }

    #[test]
    fn projection_is_idempotent_for_exact_groups() {
        for group in [c(2), c(4), make_group(GroupKind::Dihedral, 4).unwrap()] {
            let t = FieldType::trivial(&group, 1);
            let r = FieldType::regular(&group, 1);
            for (in_t, out_t) in [(&t, &r), (&r, &r), (&r, &t), (&t, &t)] {
                let k = 3;
                let dim = in_t.total_dim() * out_t.total_dim() * k * k;
                let raw = pseudo_kernel(dim);
                let once = reynolds_project(&raw, in_t, out_t, k).unwrap();
                let twice = reynolds_project(&once, in_t, out_t, k).unwrap();
                for (a, b) in once.iter().zip(&twice) {
                    assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
                }
            }
        }
    }

    #[test]
    fn c4_trivial_to_trivial_1x1_projects_identically() {
        let g = c(4);
        let t = FieldType::trivial(&g, 1);
        let raw = vec![0.7];
        let p = reynolds_project(&raw, &t, &t, 1).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-15);
    }

    /// A 1x1 kernel from a trivial field into a C4 regular field must be
    /// constant across the four output channels: the four constraints force
    /// all components equal, so the projector averages them.
    #[test]
    fn c4_trivial_to_regular_1x1_projects_to_constant_vector() {
        let g = c(4);
        let t = FieldType::trivial(&g, 1);
        let r = FieldType::regular(&g, 1);
        let raw = vec![1.0, 2.0, -3.0, 4.0];
        let p = reynolds_project(&raw, &t, &r, 1).unwrap();
        let mean = (1.0 + 2.0 - 3.0 + 4.0) / 4.0;
        for &v in &p {
            assert!((v - mean).abs() < 1e-14, "{} vs {}", v, mean);
        }
    }

    #[test]
    fn basis_counts_for_c4() {
        let g = c(4);
        let t = FieldType::trivial(&g, 1);
        let r = FieldType::regular(&g, 1);
        assert_eq!(build_basis(&t, &t, 1).unwrap().count(), 1);
        assert_eq!(build_basis(&r, &r, 1).unwrap().count(), 4);
        // trivial -> regular, k=3: the action on (out-channel, position) pairs
        // is free, so the orbit count is 4*9/4 = 9.
        assert_eq!(build_basis(&t, &r, 3).unwrap().count(), 9);
    }

    #[test]
    fn basis_elements_satisfy_constraint_and_are_orthonormal() {
        for group in [c(2), c(4), c(8)] {
            let r = FieldType::regular(&group, 1);
            let t = FieldType::trivial(&group, 1);
            for (in_t, out_t) in [(&t, &r), (&r, &r)] {
                let k = 3;
                let basis = build_basis(in_t, out_t, k).unwrap();
                let elements: Vec<Vec<f64>> =
                    (0..basis.count()).map(|i| basis.kernel(i)).collect();
                // Constraint at every exact (quarter-turn) element.
                for el in group.elements() {
                    if group.quarter_turns(*el).is_none() {
                        continue;
                    }
                    for b in &elements {
                        let viol = constraint_violation(b, in_t, out_t, k, *el);
                        assert!(viol <= 1e-10, "violation {} at {:?}", viol, el);
                    }
                }
                // 45-degree elements of C8: resampling tolerance on the
                // central sub-grid.
                for el in group.elements() {
                    if group.quarter_turns(*el).is_some() {
                        continue;
                    }
                    for b in &elements {
                        let viol = constraint_violation_central(b, in_t, out_t, k, *el);
                        assert!(viol <= 1e-2, "central violation {} at {:?}", viol, el);
                    }
                }
                // Gram matrix = identity.
                for (i, a) in elements.iter().enumerate() {
                    for (j, b) in elements.iter().enumerate() {
                        let d = dot(a, b);
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert!((d - expect).abs() <= 1e-10, "gram[{},{}] = {}", i, j, d);
                    }
                }
            }
        }
    }

    #[test]
    fn parameter_efficiency_for_nontrivial_groups() {
        for group in [c(2), c(4), c(8)] {
            let r = FieldType::regular(&group, 1);
            for k in [1usize, 3] {
                let basis = build_basis(&r, &r, k).unwrap();
                let full = r.total_dim() * r.total_dim() * k * k;
                assert!(
                    basis.count() < full,
                    "{}: count {} not below {}",
                    group,
                    basis.count(),
                    full
                );
            }
        }
    }

    #[test]
    fn expand_returns_exact_basis_elements() {
        let g = c(4);
        let r = FieldType::regular(&g, 1);
        let basis = build_basis(&r, &r, 3).unwrap();
        let mut coeffs = vec![0.0f64; basis.count()];
        coeffs[1] = 1.0;
        let expanded = basis.expand_f64(&coeffs).unwrap();
        let direct = basis.kernel(1);
        for (a, b) in expanded.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
        let zeros = basis.expand_f64(&vec![0.0; basis.count()]).unwrap();
        assert!(zeros.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expand_kernel_is_differentiable() {
        let g = c(4);
        let r = FieldType::regular(&g, 1);
        let basis = build_basis(&r, &r, 1).unwrap();
        let coeffs = Tensor::<f64>::from_vec(&[basis.count()], vec![0.3, -0.7, 1.1, 0.2])
            .unwrap()
            .requires_grad();
        let kernel = expand_kernel(&basis, &coeffs).unwrap();
        let loss = ops::sum_all(&kernel);
        ops::backward(&loss).unwrap();
        // d(sum)/d(c_i) = sum of basis element i.
        let grad = coeffs.grad().unwrap();
        for (i, &gv) in grad.iter().enumerate() {
            let expect: f64 = basis.kernel(i).iter().sum();
            assert!((gv - expect).abs() < 1e-12, "{} vs {}", gv, expect);
        }
    }

    #[test]
    fn coefficient_length_mismatch_rejected() {
        let g = c(4);
        let r = FieldType::regular(&g, 1);
        let basis = build_basis(&r, &r, 1).unwrap();
        let coeffs = Tensor::<f64>::zeros(&[basis.count() + 1]);
        assert!(expand_kernel(&basis, &coeffs).is_err());
    }

    #[test]
    fn even_kernel_size_rejected() {
        let g = c(4);
        let t = FieldType::trivial(&g, 1);
        assert!(build_basis(&t, &t, 2).is_err());
    }

    #[test]
    fn mixed_groups_rejected() {
        let a = FieldType::trivial(&c(4), 1);
        let b = FieldType::trivial(&c(8), 1);
        assert!(matches!(
            build_basis(&a, &b, 1),
            Err(Error::GroupMismatch(_))
        ));
    }

    #[test]
    fn c1_identity_basis_is_unconstrained() {
        let g = c(1);
        let t = FieldType::trivial(&g, 3);
        let basis = build_basis(&t, &t, 3).unwrap();
        assert_eq!(basis.count(), 3 * 3 * 9);
    }
}
