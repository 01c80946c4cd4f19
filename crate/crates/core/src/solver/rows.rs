use serde::{Deserialize, Serialize};

use super::operators::{GradientOperators, SparseRow};
use crate::diffuse::Illumination;
use crate::mfcp::ConvexityWeights;
use crate::raster::{in_mask, Mask, NormalMap, Raster, NEIGHBORS4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Azimuth,
    IntensityRatio,
    Mfcp,
    Laplacian,
}

impl RowKind {
    pub const ALL: [RowKind; 4] = [
        RowKind::Azimuth,
        RowKind::IntensityRatio,
        RowKind::Mfcp,
        RowKind::Laplacian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RowKind::Azimuth => "azimuth",
            RowKind::IntensityRatio => "intensity_ratio",
            RowKind::Mfcp => "mfcp",
            RowKind::Laplacian => "laplacian",
        }
    }
}

/// Which form of the azimuth row to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AzimuthForm {
    /// `sin(phi) z_x - cos(phi) z_y = 0`: gradient parallel to the azimuth.
    Geometric,
    /// `-cos(phi) z_x + sin(phi) z_y = 0`.
    Printed,
}

/// Linear constraint rows over the masked heights.
#[derive(Debug, Clone, Default)]
pub struct ConstraintRows {
    pub rows: Vec<SparseRow>,
    pub rhs: Vec<f64>,
    pub tags: Vec<RowKind>,
}

impl ConstraintRows {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, other: ConstraintRows) {
        self.rows.extend(other.rows);
        self.rhs.extend(other.rhs);
        self.tags.extend(other.tags);
    }

    /// Pushes `a (Dx z) + b (Dy z) = rhs` for mask pixel `i`.
    fn push_gradient(&mut self, ops: &GradientOperators, i: usize, a: f64, b: f64, rhs: f64, kind: RowKind) {
        let mut row: SparseRow = Vec::with_capacity(ops.dx[i].len() + ops.dy[i].len());
        if a != 0.0 {
            row.extend(ops.dx[i].iter().map(|&(j, v)| (j, a * v)));
        }
        if b != 0.0 {
            row.extend(ops.dy[i].iter().map(|&(j, v)| (j, b * v)));
        }
        self.rows.push(row);
        self.rhs.push(rhs);
        self.tags.push(kind);
    }

    pub fn residuals(&self, z: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(row, &b)| GradientOperators::apply(row, z) - b)
            .collect()
    }

    pub fn count(&self, kind: RowKind) -> usize {
        self.tags.iter().filter(|&&t| t == kind).count()
    }

    /// Largest absolute residual per kind (`None` when the kind has no rows).
    pub fn max_residual(&self, kind: RowKind, z: &[f64]) -> Option<f64> {
        self.residuals(z)
            .iter()
            .zip(&self.tags)
            .filter(|(_, &t)| t == kind)
            .map(|(r, _)| r.abs())
            .reduce(f64::max)
    }
}

pub fn azimuth_rows(aop: &Raster, ops: &GradientOperators, form: AzimuthForm) -> ConstraintRows {
    let mut out = ConstraintRows::default();
    for (i, &p) in ops.index.pixels().iter().enumerate() {
        let (s, c) = aop[p].sin_cos();
        let (a, b) = match form {
            AzimuthForm::Geometric => (s, -c),
            AzimuthForm::Printed => (-c, s),
        };
        out.push_gradient(ops, i, a, b, 0.0, RowKind::Azimuth);
    }
    out
}

/// Threshold below which `cos(theta)` or `I` disables an intensity-ratio row.
pub const RATIO_GUARD: f64 = 1e-6;

/// Equating the two expressions for `sqrt(1 + |grad z|^2)` given by the zenith
/// (`cos theta = n . v`) and Lambert (`I = albedo n . l`) and clearing
/// denominators gives a row linear in the gradient:
/// `(-v1 I + a l1 cos) z_x + (-v2 I + a l2 cos) z_y = a l3 cos - v3 I`.
/// Rows are omitted entirely when light and view coincide.
pub fn intensity_ratio_rows(
    intensity: &Raster,
    zenith: &Raster,
    illum: &Illumination,
    albedo: f64,
    ops: &GradientOperators,
) -> ConstraintRows {
    let mut out = ConstraintRows::default();
    if !illum.intensity_ratio_enabled() {
        return out;
    }
    let [l1, l2, l3] = illum.direction;
    let [v1, v2, v3] = illum.view;
    for (i, &p) in ops.index.pixels().iter().enumerate() {
        let cos = zenith[p].cos();
        let int = intensity[p];
        if cos <= RATIO_GUARD || int <= RATIO_GUARD {
            continue;
        }
        let a = -v1 * int + albedo * l1 * cos;
        let b = -v2 * int + albedo * l2 * cos;
        let rhs = albedo * l3 * cos - v3 * int;
        out.push_gradient(ops, i, a, b, rhs, RowKind::IntensityRatio);
    }
    out
}

/// Threshold on `cos(theta) * w_con` below which prior rows are dropped.
pub const MFCP_GUARD: f64 = 1e-9;

/// Matches the first two components of `[-z_x cos, -z_y cos, cos]` to the
/// prior normal, each row scaled by the convexity weight.
pub fn mfcp_rows(prior: &NormalMap, weights: &ConvexityWeights, zenith: &Raster, ops: &GradientOperators) -> ConstraintRows {
    let mut out = ConstraintRows::default();
    for (i, &p) in ops.index.pixels().iter().enumerate() {
        let w = weights.w_con[p];
        let cos = zenith[p].cos();
        if cos * w < MFCP_GUARD {
            continue;
        }
        let n = prior[p];
        out.push_gradient(ops, i, -w * cos, 0.0, w * n[0], RowKind::Mfcp);
        out.push_gradient(ops, i, 0.0, -w * cos, w * n[1], RowKind::Mfcp);
    }
    out
}

/// Five-point Laplacian on `z` using whichever 4-neighbors lie in the mask
/// (graph Laplacian), whose null space is the constants of each component.
pub fn laplacian_rows(mask: &Mask, ops: &GradientOperators, weight: f64) -> ConstraintRows {
    let mut out = ConstraintRows::default();
    if weight == 0.0 {
        return out;
    }
    for (i, &p) in ops.index.pixels().iter().enumerate() {
        let mut row: SparseRow = Vec::with_capacity(5);
        let mut centre = 0.0;
        for &d in &NEIGHBORS4 {
            if let Some(q) = in_mask(mask, p, d) {
                row.push((ops.index.get(q).unwrap(), weight));
                centre -= weight;
            }
        }
        if row.is_empty() {
            continue;
        }
        row.push((i, centre));
        out.rows.push(row);
        out.rhs.push(0.0);
        out.tags.push(RowKind::Laplacian);
    }
    out
}
