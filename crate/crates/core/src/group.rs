//! Finite rotation(-reflection) groups, their matrix representations, and the
//! action of group elements on geometric feature fields.
//!
//! A group element acts on a feature field by moving the spatial grid and
//! mixing the channel fiber: `(g.f)(x) = rho(g) f(g^-1 x)`. For the cyclic
//! group `C_N` the spatial action is a rotation by `k * 2pi/N`; the dihedral
//! group `D_N` adds a reflection across the vertical image axis, applied
//! before the rotation. Rotations by multiples of 90 degrees are exact index
//! permutations; other angles resample bilinearly.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spatial;
use crate::tensor::{Scalar, Tensor};

/// Which family of finite symmetry groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Cyclic,
    Dihedral,
}

/// One group element: a rotation index in `[0, N)` plus a reflection flag
/// (dihedral only). Composition: rotations add mod N; a reflection conjugates
/// the rotation index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement {
    pub rotation: usize,
    pub reflect: bool,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement {
        rotation: 0,
        reflect: false,
    };
}

/// A finite symmetry group `C_N` or `D_N` with its full element table.
#[derive(Debug)]
pub struct GroupSpec {
    kind: GroupKind,
    n: usize,
    elements: Vec<GroupElement>,
}

/// Groups are shared widely (field types, representations, layers); an `Arc`
/// keeps identity comparisons cheap.
pub type Group = Arc<GroupSpec>;

/// Builds `C_N` (N elements) or `D_N` (2N elements).
pub fn make_group(kind: GroupKind, n: usize) -> Result<Group> {
    if n == 0 {
        return Err(Error::arg("make_group", "rotation count N must be >= 1"));
    }
    let mut elements: Vec<GroupElement> = (0..n)
        .map(|rotation| GroupElement {
            rotation,
            reflect: false,
        })
        .collect();
    if kind == GroupKind::Dihedral {
        elements.extend((0..n).map(|rotation| GroupElement {
            rotation,
            reflect: true,
        }));
    }
    Ok(Arc::new(GroupSpec { kind, n, elements }))
}

impl GroupSpec {
    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    /// The rotation count N (not the group order).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    /// Dense index of an element: rotations first, then reflections.
    pub fn element_index(&self, g: GroupElement) -> usize {
        debug_assert!(g.rotation < self.n);
        debug_assert!(self.kind == GroupKind::Dihedral || !g.reflect);
        if g.reflect {
            self.n + g.rotation
        } else {
            g.rotation
        }
    }

    /// `a * b`: apply `b` first, then `a`.
    pub fn compose(&self, a: GroupElement, b: GroupElement) -> GroupElement {
        let rotation = if a.reflect {
            (a.rotation + self.n - b.rotation % self.n) % self.n
        } else {
            (a.rotation + b.rotation) % self.n
        };
        GroupElement {
            rotation,
            reflect: a.reflect ^ b.reflect,
        }
    }

    pub fn inverse(&self, g: GroupElement) -> GroupElement {
        if g.reflect {
            g
        } else {
            GroupElement {
                rotation: (self.n - g.rotation) % self.n,
                reflect: false,
            }
        }
    }

    /// Rotation angle of the element, in radians (counterclockwise).
    pub fn angle(&self, g: GroupElement) -> f64 {
        g.rotation as f64 * std::f64::consts::TAU / self.n as f64
    }

    /// Exact quarter turns of the rotation part, if the angle is a multiple
    /// of 90 degrees.
    pub fn quarter_turns(&self, g: GroupElement) -> Option<usize> {
        spatial::quarter_turns(self.n, g.rotation)
    }

    fn same_group(a: &Group, b: &Group) -> bool {
        Arc::ptr_eq(a, b) || (a.kind == b.kind && a.n == b.n)
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            GroupKind::Cyclic => write!(f, "C{}", self.n),
            GroupKind::Dihedral => write!(f, "D{}", self.n),
        }
    }
}

/// Tag describing how a representation was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepKind {
    Trivial,
    Regular,
    DirectSum,
}

/// A real matrix representation of a finite group: one `dim x dim` matrix per
/// element, satisfying `rho(e) = I` and `rho(g h) = rho(g) rho(h)`.
#[derive(Clone)]
pub struct Representation {
    group: Group,
    dim: usize,
    /// Row-major `dim x dim` matrices, indexed by `GroupSpec::element_index`.
    matrices: Arc<Vec<Vec<f64>>>,
    kind: RepKind,
    /// Stable key used to cache equivariant bases per representation pair.
    descriptor: String,
}

impl fmt::Debug for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Representation({} of {})", self.descriptor, self.group)
    }
}

impl Representation {
    pub fn group(&self) -> &Group {
        &self.group
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> RepKind {
        self.kind
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// The matrix of one element.
    pub fn matrix(&self, g: GroupElement) -> &[f64] {
        &self.matrices[self.group.element_index(g)]
    }

    /// `rho(g)^-1 = rho(g^-1)`, exact via the element table.
    pub fn matrix_inverse(&self, g: GroupElement) -> &[f64] {
        self.matrix(self.group.inverse(g))
    }

    /// Applies `rho(g)` to a fiber: `out = rho(g) * v`.
    pub fn apply(&self, g: GroupElement, v: &[f64], out: &mut [f64]) {
        let m = self.matrix(g);
        for i in 0..self.dim {
            let row = &m[i * self.dim..(i + 1) * self.dim];
            let mut acc = 0.0;
            for (mv, &x) in row.iter().zip(v) {
                acc += mv * x;
            }
            out[i] = acc;
        }
    }
}

/// The one-dimensional representation `rho(g) = [1]` for all `g`.
pub fn trivial_rep(group: &Group) -> Representation {
    let matrices = vec![vec![1.0]; group.order()];
    Representation {
        group: Arc::clone(group),
        dim: 1,
        matrices: Arc::new(matrices),
        kind: RepKind::Trivial,
        descriptor: "trivial".to_string(),
    }
}

/// The `|G|`-dimensional permutation representation of left translation:
/// `rho(g) e_h = e_{g h}`.
pub fn regular_rep(group: &Group) -> Representation {
    let order = group.order();
    let mut matrices = Vec::with_capacity(order);
    for &g in group.elements() {
        let mut m = vec![0.0; order * order];
        for &h in group.elements() {
            let col = group.element_index(h);
            let row = group.element_index(group.compose(g, h));
            m[row * order + col] = 1.0;
        }
        matrices.push(m);
    }
    Representation {
        group: Arc::clone(group),
        dim: order,
        matrices: Arc::new(matrices),
        kind: RepKind::Regular,
        descriptor: "regular".to_string(),
    }
}

/// Block-diagonal direct sum of representations of one group.
pub fn direct_sum(reps: &[Representation]) -> Result<Representation> {
    let first = reps
        .first()
        .ok_or_else(|| Error::arg("direct_sum", "need at least one representation"))?;
    for r in reps {
        if !GroupSpec::same_group(&first.group, &r.group) {
            return Err(Error::GroupMismatch(format!(
                "direct_sum mixes {} and {}",
                first.group, r.group
            )));
        }
    }
    if reps.len() == 1 {
        return Ok(first.clone());
    }
    let dim: usize = reps.iter().map(|r| r.dim).sum();
    let group = Arc::clone(&first.group);
    let mut matrices = Vec::with_capacity(group.order());
    for &g in group.elements() {
        let mut m = vec![0.0; dim * dim];
        let mut off = 0usize;
        for r in reps {
            let sub = r.matrix(g);
            for i in 0..r.dim {
                for j in 0..r.dim {
                    m[(off + i) * dim + (off + j)] = sub[i * r.dim + j];
                }
            }
            off += r.dim;
        }
        matrices.push(m);
    }
    let descriptor = format!(
        "sum({})",
        reps.iter()
            .map(|r| r.descriptor.as_str())
            .collect::<Vec<_>>()
            .join(",")
    );
    Ok(Representation {
        group,
        dim,
        matrices: Arc::new(matrices),
        kind: RepKind::DirectSum,
        descriptor,
    })
}

/// An ordered list of representations attached to the channel axis of a
/// feature tensor; the channel count of any attached tensor equals the sum
/// of the field dimensions.
#[derive(Clone)]
pub struct FieldType {
    group: Group,
    fields: Vec<Representation>,
    total_dim: usize,
}

impl fmt::Debug for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FieldType({} : {})", self.group, self.descriptor())
    }
}

impl FieldType {
    pub fn new(group: &Group, fields: Vec<Representation>) -> Result<Self> {
        for r in &fields {
            if !GroupSpec::same_group(group, r.group()) {
                return Err(Error::GroupMismatch(format!(
                    "field type over {} contains a representation of {}",
                    group,
                    r.group()
                )));
            }
        }
        if fields.is_empty() {
            return Err(Error::arg("FieldType::new", "need at least one field"));
        }
        let total_dim = fields.iter().map(|r| r.dim()).sum();
        Ok(FieldType {
            group: Arc::clone(group),
            fields,
            total_dim,
        })
    }

    /// `count` trivial fields (scalar channels).
    pub fn trivial(group: &Group, count: usize) -> Self {
        let rep = trivial_rep(group);
        FieldType {
            group: Arc::clone(group),
            fields: vec![rep; count],
            total_dim: count,
        }
    }

    /// `multiplicity` copies of the regular representation.
    pub fn regular(group: &Group, multiplicity: usize) -> Self {
        let rep = regular_rep(group);
        let total_dim = group.order() * multiplicity;
        FieldType {
            group: Arc::clone(group),
            fields: vec![rep; multiplicity],
            total_dim,
        }
    }

    pub fn group(&self) -> &Group {
        &self.group
    }

    pub fn fields(&self) -> &[Representation] {
        &self.fields
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Channel range of each field, in order.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.fields.len());
        let mut off = 0usize;
        for r in &self.fields {
            out.push((off, off + r.dim()));
            off += r.dim();
        }
        out
    }

    /// Concatenation of two field lists over the same group.
    pub fn concat(&self, other: &FieldType) -> Result<FieldType> {
        if !GroupSpec::same_group(&self.group, &other.group) {
            return Err(Error::GroupMismatch(format!(
                "cannot concatenate field types over {} and {}",
                self.group, other.group
            )));
        }
        let mut fields = self.fields.clone();
        fields.extend(other.fields.iter().cloned());
        FieldType::new(&self.group, fields)
    }

    pub fn descriptor(&self) -> String {
        self.fields
            .iter()
            .map(|r| r.descriptor())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn same_as(&self, other: &FieldType) -> bool {
        GroupSpec::same_group(&self.group, &other.group)
            && self.fields.len() == other.fields.len()
            && self
                .fields
                .iter()
                .zip(&other.fields)
                .all(|(a, b)| a.descriptor() == b.descriptor() && a.dim() == b.dim())
    }
}

/// A feature tensor `[B, C, H, W]` together with the field type that defines
/// its transformation law (`C` must equal the field type's total dimension).
#[derive(Debug, Clone)]
pub struct GeometricTensor<T: Scalar> {
    pub tensor: Tensor<T>,
    pub field_type: FieldType,
}

impl<T: Scalar> GeometricTensor<T> {
    pub fn new(tensor: Tensor<T>, field_type: FieldType) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 {
            return Err(Error::shape(
                "GeometricTensor::new",
                format!("expected [B,C,H,W], got {:?}", s),
            ));
        }
        if s[1] != field_type.total_dim() {
            return Err(Error::FieldMismatch(format!(
                "tensor has {} channels, field type {:?} has total dimension {}",
                s[1],
                field_type,
                field_type.total_dim()
            )));
        }
        Ok(GeometricTensor { tensor, field_type })
    }
}

/// Applies a group element to a geometric tensor: rotates (and possibly
/// reflects) the spatial grid about the image center and multiplies each
/// channel fiber by `rho(g)`.
///
/// The result is a plain leaf tensor; this action is a test/data utility and
/// does not participate in differentiation. Rotations by multiples of 90
/// degrees are exact; other angles use bilinear resampling with zero fill.
pub fn transform_field<T: Scalar>(
    x: &GeometricTensor<T>,
    g: GroupElement,
) -> Result<GeometricTensor<T>> {
    let group = x.field_type.group();
    let s = x.tensor.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let quarters = group.quarter_turns(g);
    if quarters.map_or(true, |q| q % 2 == 1) && h != w {
        return Err(Error::geometry(
            "transform_field",
            format!("rotation of a non-square {}x{} grid", h, w),
        ));
    }
    let hw = h * w;
    let data = x.tensor.data();

    // Spatial action first: out(p) = in(act(g)^-1 p), acting per channel.
    // act(g) = R_angle o Flip^m, so the buffer is flipped first, rotated second.
    let mut moved = vec![T::zero(); data.len()];
    for bc in 0..b * c {
        let plane = &data[bc * hw..(bc + 1) * hw];
        let flipped: Vec<T> = if g.reflect {
            spatial::flip_horizontal(plane, h, w)
        } else {
            plane.to_vec()
        };
        let rotated = match quarters {
            Some(q) => spatial::rotate_quarter(&flipped, h, w, q).0,
            None => spatial::rotate_bilinear(&flipped, h, w, group.angle(g)),
        };
        moved[bc * hw..(bc + 1) * hw].copy_from_slice(&rotated);
    }
    drop(data);

    // Channel action: per pixel, per field, out_fiber = rho(g) * fiber.
    let mut out = moved.clone();
    for (f, (c0, c1)) in x.field_type.fields().iter().zip(x.field_type.ranges()) {
        let d = c1 - c0;
        if d == 1 && f.matrix(g)[0] == 1.0 {
            continue;
        }
        let m = f.matrix(g);
        let mut fiber = vec![0.0f64; d];
        for bi in 0..b {
            for p in 0..hw {
                for (j, fv) in fiber.iter_mut().enumerate() {
                    *fv = moved[(bi * c + c0 + j) * hw + p].to_f64().unwrap();
                }
                for i in 0..d {
                    let row = &m[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for (mv, &fv) in row.iter().zip(&fiber) {
                        acc += mv * fv;
                    }
                    out[(bi * c + c0 + i) * hw + p] = T::from_f64(acc).unwrap();
                }
            }
        }
    }

    let tensor = Tensor::from_vec(&[b, c, h, w], out).expect("same shape");
    GeometricTensor::new(tensor, x.field_type.clone())
}
