//! Diffuse Fresnel polarization model relating zenith angle, degree of
//! polarization and refractive index, plus Lambertian light estimation.

use std::f64::consts::FRAC_PI_2;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, NormalMap, Raster};

/// Largest zenith the inversion will return; grazing angles are singular.
pub const ZENITH_CAP: f64 = 89.0 * std::f64::consts::PI / 180.0;
pub const ETA_MIN: f64 = 1.05;
pub const ETA_MAX: f64 = 3.0;
const BISECTION_STEPS: usize = 200;

/// Refractive index and albedo of a homogeneous dielectric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub eta: f64,
    pub albedo: f64,
}

impl MaterialParams {
    pub fn new(eta: f64, albedo: f64) -> Result<Self> {
        if !(ETA_MIN..=ETA_MAX).contains(&eta) {
            return Err(Error::invalid(format!(
                "refractive index {eta} outside [{ETA_MIN}, {ETA_MAX}]"
            )));
        }
        if !(albedo > 0.0 && albedo <= 1.0) {
            return Err(Error::invalid(format!("albedo {albedo} outside (0, 1]")));
        }
        Ok(Self { eta, albedo })
    }

    /// Projects onto the admissible parameter box.
    pub fn clamped(self) -> Self {
        Self {
            eta: self.eta.clamp(ETA_MIN, ETA_MAX),
            albedo: self.albedo.clamp(1e-6, 1.0),
        }
    }
}

/// Light and view directions in camera coordinates (z toward the camera).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Illumination {
    pub direction: [f64; 3],
    pub view: [f64; 3],
}

/// Minimum angular separation between light and view for the intensity-ratio
/// rows to be meaningful.
pub const MIN_LIGHT_VIEW_SEPARATION: f64 = 1e-6;

impl Illumination {
    pub fn new(direction: [f64; 3], view: [f64; 3]) -> Result<Self> {
        Ok(Self {
            direction: normalize(direction)?,
            view: normalize(view)?,
        })
    }

    /// Angle between light and view, radians.
    pub fn separation(&self) -> f64 {
        let d = dot(self.direction, self.view).clamp(-1.0, 1.0);
        // acos loses precision near 1; use the cross-product form
        let cr = cross(self.direction, self.view);
        norm(cr).atan2(d)
    }

    pub fn intensity_ratio_enabled(&self) -> bool {
        self.separation() >= MIN_LIGHT_VIEW_SEPARATION
    }
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::invalid(format!("cannot normalize direction {v:?}")));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Diffuse DOP for zenith `theta` without domain checks.
#[inline]
pub fn diffuse_dop(theta: f64, eta: f64) -> f64 {
    let s2 = theta.sin().powi(2);
    let c = theta.cos();
    let a = eta - 1.0 / eta;
    let b = eta + 1.0 / eta;
    a * a * s2 / (2.0 + 2.0 * eta * eta - b * b * s2 + 4.0 * c * (eta * eta - s2).sqrt())
}

pub fn dop_from_zenith(theta: f64, eta: f64) -> Result<f64> {
    if !(0.0..FRAC_PI_2).contains(&theta) {
        return Err(Error::invalid(format!("zenith {theta} outside [0, pi/2)")));
    }
    if !(eta > 1.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("refractive index {eta} must exceed 1")));
    }
    Ok(diffuse_dop(theta, eta))
}

/// DOP at the zenith cap: the largest value the inversion can represent.
pub fn dop_ceiling(eta: f64) -> f64 {
    diffuse_dop(ZENITH_CAP, eta)
}

/// Smallest refractive index whose DOP ceiling reaches `rho`. Occluding
/// contours sit near grazing zenith, so the high DOP quantile of a silhouette
/// bounds the index from below.
pub fn eta_for_ceiling(rho: f64) -> f64 {
    if !(rho > dop_ceiling(ETA_MIN)) {
        return ETA_MIN;
    }
    if rho >= dop_ceiling(ETA_MAX) {
        return ETA_MAX;
    }
    let (mut lo, mut hi) = (ETA_MIN, ETA_MAX);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if dop_ceiling(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Inverts the diffuse model by bisection on `[0, ZENITH_CAP]`. Values above
/// the ceiling return the cap; use [`dop_ceiling`] to detect that case.
pub fn zenith_from_dop(rho: f64, eta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("DOP {rho} outside [0, 1]")));
    }
    if !(eta > 1.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("refractive index {eta} must exceed 1")));
    }
    Ok(invert_unchecked(rho, eta))
}

fn invert_unchecked(rho: f64, eta: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    if rho >= dop_ceiling(eta) {
        return ZENITH_CAP;
    }
    let (mut lo, mut hi) = (0.0, ZENITH_CAP);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if diffuse_dop(mid, eta) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Zenith raster from a DOP raster; returns the raster and the number of mask
/// pixels clamped at the cap.
pub fn zenith_map(dop: &Raster, eta: f64, mask: &Mask) -> Result<(Raster, usize)> {
    if !(eta > 1.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("refractive index {eta} must exceed 1")));
    }
    let ceiling = dop_ceiling(eta);
    let mut clamped = 0;
    let mut out = Raster::zeros(dop.dim());
    for ((p, v), &m) in out.indexed_iter_mut().zip(mask.iter()) {
        if m {
            let rho = dop[p].clamp(0.0, 1.0);
            if rho >= ceiling {
                clamped += 1;
            }
            *v = invert_unchecked(rho, eta);
        }
    }
    Ok((out, clamped))
}

/// One sample of the closed-form inverse check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedFormSample {
    pub rho: f64,
    pub theta_bisect: f64,
    /// `None` when the radicand is negative or `cos` would exceed 1.
    pub theta_closed: Option<f64>,
    pub abs_err: Option<f64>,
    pub radicand_negative: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedFormReport {
    pub eta: f64,
    pub samples: Vec<ClosedFormSample>,
    pub negative_radicands: usize,
    pub max_abs_err: Option<f64>,
}

impl ClosedFormReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rho,theta_bisect,theta_closed,abs_err,radicand_negative\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.12e}"));
        for s in &self.samples {
            out.push_str(&format!(
                "{:.12e},{:.12e},{},{},{}\n",
                s.rho,
                s.theta_bisect,
                fmt(s.theta_closed),
                fmt(s.abs_err),
                s.radicand_negative
            ));
        }
        out
    }
}

/// Terms `(P1, P2, Q1)` of the published closed-form inverse.
pub fn closed_form_terms(rho: f64, eta: f64) -> (f64, f64, f64) {
    let e2 = eta * eta;
    let p1 = e2 * e2 * (1.0 - rho * rho) + 2.0 * e2 * (2.0 * rho * rho + rho - 1.0) + (rho + 1.0).powi(2);
    let p2 = 4.0 * e2 * eta * rho * (1.0 - rho * rho).sqrt();
    let q1 = (rho + 1.0).powi(2) * (eta + 1.0) + 2.0 * e2 * (3.0 * rho * rho + 2.0 * rho - 1.0);
    (p1, p2, q1)
}

/// Evaluates the published closed-form inverse across `[0, rho_max]` against
/// the bisection inverse, which is authoritative.
pub fn validate_closed_form_inverse(eta: f64, points: usize) -> Result<ClosedFormReport> {
    if !(ETA_MIN..=ETA_MAX).contains(&eta) {
        return Err(Error::invalid(format!(
            "refractive index {eta} outside [{ETA_MIN}, {ETA_MAX}]"
        )));
    }
    let points = points.max(2);
    let rho_max = dop_ceiling(eta);
    let mut samples = Vec::with_capacity(points);
    for k in 0..points {
        let rho = rho_max * k as f64 / (points - 1) as f64;
        let theta_bisect = invert_unchecked(rho, eta);
        let (p1, p2, q1) = closed_form_terms(rho, eta);
        let radicand = (p1 - p2) / q1;
        let radicand_negative = radicand < 0.0 || !radicand.is_finite();
        let theta_closed = if radicand_negative {
            None
        } else {
            let c = radicand.sqrt();
            (c <= 1.0).then(|| c.acos())
        };
        samples.push(ClosedFormSample {
            rho,
            theta_bisect,
            abs_err: theta_closed.map(|t| (t - theta_bisect).abs()),
            theta_closed,
            radicand_negative,
        });
    }
    let negative_radicands = samples.iter().filter(|s| s.radicand_negative).count();
    let max_abs_err = samples
        .iter()
        .filter_map(|s| s.abs_err)
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    Ok(ClosedFormReport {
        eta,
        samples,
        negative_radicands,
        max_abs_err,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlluminationEstimate {
    pub illumination: Illumination,
    /// Set when the normal matrix was rank deficient and the light fell back
    /// to the view direction.
    pub fallback: bool,
}

/// Least-squares Lambertian light direction from intensity and prior normals:
/// solves `I = albedo * n . l` over mask pixels and normalizes `l`.
pub fn estimate_illumination(
    intensity: &Raster,
    prior_normals: &NormalMap,
    albedo: f64,
    mask: &Mask,
    view: [f64; 3],
) -> Result<IlluminationEstimate> {
    crate::raster::ensure_same_dims(mask, intensity)?;
    crate::raster::ensure_same_dims(mask, prior_normals)?;
    let view = normalize(view)?;
    let fallback = IlluminationEstimate {
        illumination: Illumination {
            direction: view,
            view,
        },
        fallback: true,
    };
    let mut ata = Mat::<f64>::zeros(3, 3);
    let mut atb = Mat::<f64>::zeros(3, 1);
    let mut n_px = 0usize;
    for ((p, &m), n) in mask.indexed_iter().zip(prior_normals.iter()) {
        if !m {
            continue;
        }
        n_px += 1;
        let i = intensity[p] / albedo;
        for a in 0..3 {
            atb[(a, 0)] += n[a] * i;
            for b in 0..3 {
                ata[(a, b)] += n[a] * n[b];
            }
        }
    }
    if n_px < 3 {
        return Ok(fallback);
    }
    let eig = ata
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    let (lo, hi) = (eig[0], eig[2]);
    if !(hi > 0.0) || lo <= 1e-10 * hi {
        return Ok(fallback);
    }
    let llt = ata
        .llt(Side::Lower)
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    let l = llt.solve(&atb);
    match normalize([l[(0, 0)], l[(1, 0)], l[(2, 0)]]) {
        Ok(direction) => Ok(IlluminationEstimate {
            illumination: Illumination { direction, view },
            fallback: false,
        }),
        Err(_) => Ok(fallback),
    }
}
