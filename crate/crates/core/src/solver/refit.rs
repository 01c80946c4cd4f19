use serde::{Deserialize, Serialize};

use super::operators::GradientOperators;
use crate::diffuse::{diffuse_dop, dot, MaterialParams, ETA_MAX, ETA_MIN, ZENITH_CAP};
use crate::raster::{erode, Mask, NormalMap, Raster};

/// Minimum number of usable pixels for a refit.
pub const MIN_REFIT_PX: usize = 10;
/// Width of the region rim left out of the refit.
pub const REFIT_RIM_PX: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefitOutcome {
    pub material: MaterialParams,
    pub eta_updated: bool,
    pub albedo_updated: bool,
}

/// Zenith of the surface `z` relative to `view`, capped like the DOP inverse.
pub fn zenith_from_height(height: &Raster, ops: &GradientOperators, view: [f64; 3]) -> Raster {
    let z = ops.index.gather(height);
    let mut out = Raster::zeros(height.dim());
    for (i, (gx, gy)) in ops.gradient(&z).into_iter().enumerate() {
        let n = super::operators::normal_from_gradient(gx, gy);
        out[ops.index.pixel(i)] = dot(n, view).clamp(-1.0, 1.0).acos().min(ZENITH_CAP);
    }
    out
}

fn eta_objective(rho: &[f64], theta: &[f64], eta: f64) -> f64 {
    rho.iter()
        .zip(theta)
        .map(|(&r, &t)| (r - diffuse_dop(t, eta)).powi(2))
        .sum()
}

/// Golden-section search for the refractive index minimizing the squared DOP
/// misfit. A flat objective (for instance all pixels at normal incidence)
/// leaves `current` unchanged.
pub fn refit_eta(rho_est: &Raster, zenith: &Raster, mask: &Mask, current: f64) -> Option<f64> {
    let (rho, theta): (Vec<f64>, Vec<f64>) = mask
        .indexed_iter()
        .filter(|(p, &m)| m && zenith[*p].is_finite() && rho_est[*p].is_finite())
        .map(|(p, _)| (rho_est[p], zenith[p]))
        .unzip();
    if rho.len() < MIN_REFIT_PX {
        return None;
    }
    let f = |eta: f64| eta_objective(&rho, &theta, eta);
    let (flo, fhi, fmid) = (f(ETA_MIN), f(ETA_MAX), f(0.5 * (ETA_MIN + ETA_MAX)));
    let spread = flo.max(fhi).max(fmid) - flo.min(fhi).min(fmid);
    if spread <= 1e-14 * (1.0 + flo.abs()) {
        return Some(current.clamp(ETA_MIN, ETA_MAX));
    }
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (ETA_MIN, ETA_MAX);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-9 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let mut best = 0.5 * (a + b);
    // golden section assumes unimodality; never do worse than the bounds
    for cand in [ETA_MIN, ETA_MAX] {
        if f(cand) < f(best) {
            best = cand;
        }
    }
    Some(best)
}

/// Closed-form least-squares albedo for `I = albedo * max(n . l, 0)`.
pub fn refit_albedo(intensity: &Raster, normals: &NormalMap, light: [f64; 3], mask: &Mask) -> Option<f64> {
    let (mut num, mut den, mut n) = (0.0, 0.0, 0usize);
    for (p, &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let s = dot(normals[p], light).max(0.0);
        if s <= 0.0 || !intensity[p].is_finite() {
            continue;
        }
        num += s * intensity[p];
        den += s * s;
        n += 1;
    }
    if n < MIN_REFIT_PX || den <= 0.0 {
        return None;
    }
    Some((num / den).clamp(1e-6, 1.0))
}

/// Updates refractive index from DOP and albedo from intensity. Parameters
/// with too few usable pixels are returned unchanged and flagged.
pub fn refit_material(
    rho_est: &Raster,
    zenith: &Raster,
    intensity: &Raster,
    normals: &NormalMap,
    light: [f64; 3],
    mask: &Mask,
    current: MaterialParams,
) -> RefitOutcome {
    // One-sided rim gradients underestimate steep slopes, which the DOP fit
    // would read as a larger index.
    let inner = erode(mask, REFIT_RIM_PX);
    let eta = refit_eta(rho_est, zenith, &inner, current.eta);
    let albedo = refit_albedo(intensity, normals, light, &inner);
    RefitOutcome {
        material: MaterialParams {
            eta: eta.unwrap_or(current.eta),
            albedo: albedo.unwrap_or(current.albedo),
        }
        .clamped(),
        eta_updated: eta.is_some(),
        albedo_updated: albedo.is_some(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_eta_from_forward_model() {
        let n = 40;
        let mask = Mask::from_elem((n, n), true);
        let theta = Raster::from_shape_fn((n, n), |(r, c)| ((r * n + c) as f64 / (n * n) as f64) * 1.4);
        let rho = theta.mapv(|t| diffuse_dop(t, 1.5));
        let eta = refit_eta(&rho, &theta, &mask, 1.15).unwrap();
        assert!((eta - 1.5).abs() < 1e-4, "eta {eta}");
    }

    #[test]
    fn flat_objective_keeps_eta() {
        let mask = Mask::from_elem((8, 8), true);
        let z = Raster::zeros((8, 8));
        assert_eq!(refit_eta(&z, &z, &mask, 1.37), Some(1.37));
    }

    #[test]
    fn albedo_is_linear_in_intensity() {
        let mask = Mask::from_elem((6, 6), true);
        let normals = NormalMap::from_shape_fn((6, 6), |(r, c)| {
            let (x, y) = (0.05 * c as f64, 0.04 * r as f64);
            let s = (1.0 + x * x + y * y).sqrt();
            [x / s, y / s, 1.0 / s]
        });
        let l = [0.0, 0.0, 1.0];
        let int = Raster::from_shape_fn((6, 6), |p| 0.3 * dot(normals[p], l));
        let a1 = refit_albedo(&int, &normals, l, &mask).unwrap();
        let a2 = refit_albedo(&int.mapv(|v| 2.0 * v), &normals, l, &mask).unwrap();
        assert!((a1 - 0.3).abs() < 1e-12 && (a2 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn too_few_pixels_leave_material_unchanged() {
        let mut mask = Mask::from_elem((4, 4), false);
        mask[(1, 1)] = true;
        let cur = MaterialParams { eta: 1.2, albedo: 0.7 };
        let out = refit_material(
            &Raster::zeros((4, 4)),
            &Raster::zeros((4, 4)),
            &Raster::ones((4, 4)),
            &NormalMap::from_elem((4, 4), [0.0, 0.0, 1.0]),
            [0.0, 0.0, 1.0],
            &mask,
            cur,
        );
        assert_eq!(out.material, cur);
        assert!(!out.eta_updated && !out.albedo_updated);
    }
}
