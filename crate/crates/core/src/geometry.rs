//! Hypersphere geometry: normalization, the three pair metrics, and the
//! backward magnitudes each metric imposes on a raw descriptor.
//!
//! Descriptors live on the unit sphere after normalization. The included
//! angle, the inner product and the chordal L2 distance all rank pairs the
//! same way, but their gradients with respect to the raw descriptor `x`
//! differ in magnitude:
//!
//! | metric | `‖∂d/∂x‖` |
//! |--------|-----------|
//! | angle `θ` | `1/‖x‖` |
//! | similarity `s` | `√(1−s²)/‖x‖` |
//! | chordal `l` | `√(4−l²)/(2‖x‖)` |
//!
//! All three gradients point along the tangent of the sphere at `x̂`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Cosines are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

/// Smallest angle distance from `0` or `π` at which [`angle_grad`] is defined.
pub const THETA_GUARD: f64 = 1e-3;

const MIN_NORM: f64 = 1e-12;

/// A descriptor as produced by the encoder, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDescriptor(Vec<f64>);

impl RawDescriptor {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "descriptor dimension must be at least 2, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain {
                value: *v,
                domain: "finite reals",
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A point on the unit sphere together with the norm it was scaled from.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitDescriptor {
    unit: Vec<f64>,
    magnitude: f64,
}

impl UnitDescriptor {
    pub fn unit(&self) -> &[f64] {
        &self.unit
    }

    /// `‖x‖` of the raw descriptor.
    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn dim(&self) -> usize {
        self.unit.len()
    }
}

/// Pair metric on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Angle,
    Similarity,
    L2,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Angle => "angle",
            Metric::Similarity => "similarity",
            Metric::L2 => "l2",
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Clamped `acos` shared by every angle computation in the crate.
#[inline]
pub fn clamped_acos(cos: f64) -> f64 {
    cos.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP).acos()
}

pub fn normalize(v: &RawDescriptor) -> Result<UnitDescriptor> {
    let magnitude = norm(v.values());
    if !(magnitude >= MIN_NORM) {
        return Err(Error::ZeroVector { norm: magnitude });
    }
    Ok(UnitDescriptor {
        unit: v.values().iter().map(|x| x / magnitude).collect(),
        magnitude,
    })
}

/// Included angle in radians. Never exactly `0` or `π` because of the clamp.
pub fn angle(x: &UnitDescriptor, y: &UnitDescriptor) -> f64 {
    clamped_acos(dot(&x.unit, &y.unit))
}

/// Inner product `s` and chordal distance `l = √(2 − 2s)`.
pub fn similarity_and_l2(x: &UnitDescriptor, y: &UnitDescriptor) -> (f64, f64) {
    let s = dot(&x.unit, &y.unit).clamp(-1.0, 1.0);
    (s, (2.0 - 2.0 * s).max(0.0).sqrt())
}

/// `∂θ/∂x` with respect to the raw coordinates of `x`.
///
/// Equals `−(ŷ − cosθ·x̂) / (‖x‖·sinθ)`: tangent to the sphere at `x̂`, with
/// norm exactly `1/‖x‖`.
pub fn angle_grad(x: &UnitDescriptor, y: &UnitDescriptor) -> Result<Vec<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "descriptor dimensions {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    let theta = angle(x, y);
    if !(THETA_GUARD..=std::f64::consts::PI - THETA_GUARD).contains(&theta) {
        return Err(Error::DegenerateAngle {
            theta,
            min: THETA_GUARD,
        });
    }
    let cos = theta.cos();
    let scale = -1.0 / (x.magnitude * theta.sin());
    Ok(x
        .unit
        .iter()
        .zip(&y.unit)
        .map(|(xu, yu)| scale * (yu - cos * xu))
        .collect())
}

/// Norm of `∂d/∂x` for metric value `d` and raw magnitude `‖x‖`.
pub fn grad_magnitude(metric: Metric, magnitude: f64, d: f64) -> Result<f64> {
    if !(magnitude > 0.0) {
        return Err(Error::Domain {
            value: magnitude,
            domain: "(0, inf)",
        });
    }
    let invalid = || Error::InvalidDistance {
        metric: metric.name(),
        value: d,
    };
    match metric {
        Metric::Angle => {
            if !(0.0..=std::f64::consts::PI).contains(&d) {
                return Err(invalid());
            }
            Ok(1.0 / magnitude)
        }
        Metric::Similarity => {
            if !(-1.0..=1.0).contains(&d) {
                return Err(invalid());
            }
            Ok((1.0 - d * d).sqrt() / magnitude)
        }
        // √(4l² − l⁴)/(2l) with the removable singularity at l = 0 taken out.
        Metric::L2 => {
            if !(0.0..=2.0).contains(&d) {
                return Err(invalid());
            }
            Ok((4.0 - d * d).sqrt() / (2.0 * magnitude))
        }
    }
}

/// Square matrix of anchor-versus-positive angles.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMatrix {
    entries: Array2<f64>,
}

impl AngleMatrix {
    /// Wraps a precomputed matrix. Entries must lie in `[0, π]`.
    pub fn from_entries(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "angle matrix must be square, got {:?}",
                entries.shape()
            )));
        }
        if let Some(v) = entries
            .iter()
            .find(|v| !(0.0..=std::f64::consts::PI).contains(*v))
        {
            return Err(Error::Domain {
                value: *v,
                domain: "[0, pi]",
            });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Angle between anchor `i` and positive `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }
}

pub fn angle_matrix(anchors: &[UnitDescriptor], positives: &[UnitDescriptor]) -> Result<AngleMatrix> {
    if anchors.len() != positives.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} anchors vs {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    let dim = anchors.first().map_or(0, UnitDescriptor::dim);
    if anchors.iter().chain(positives).any(|d| d.dim() != dim) {
        return Err(Error::ShapeMismatch(
            "descriptors have differing dimensions".into(),
        ));
    }
    let n = anchors.len();
    let a = Array2::from_shape_fn((n, dim), |(i, k)| anchors[i].unit[k]);
    let p = Array2::from_shape_fn((n, dim), |(i, k)| positives[i].unit[k]);
    angle_matrix_rows(a.view(), p.view())
}

/// Angle matrix from row-stacked unit descriptors.
///
/// The Gram entries are accumulated row by row in coordinate order, so each
/// entry is bitwise equal to the corresponding [`angle`] call regardless of
/// how rows are partitioned.
pub fn angle_matrix_rows(anchors: ArrayView2<f64>, positives: ArrayView2<f64>) -> Result<AngleMatrix> {
    if anchors.dim() != positives.dim() {
        return Err(Error::ShapeMismatch(format!(
            "anchors {:?} vs positives {:?}",
            anchors.shape(),
            positives.shape()
        )));
    }
    let n = anchors.nrows();
    let a = anchors.as_standard_layout();
    let p = positives.as_standard_layout();
    let mut entries = Array2::zeros((n, n));
    for i in 0..n {
        let ai = a.row(i);
        let ai = ai.as_slice().expect("standard layout");
        for j in 0..n {
            let pj = p.row(j);
            entries[[i, j]] = clamped_acos(dot(ai, pj.as_slice().expect("standard layout")));
        }
    }
    Ok(AngleMatrix { entries })
}
