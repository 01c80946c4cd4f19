use serde::{Deserialize, Serialize};

use crate::polarimetry::{aop_gradient_magnitude, fold_half_period, PolarMaps};
use crate::raster::{ensure_same_dims, Mask, Raster};
use crate::Result;

/// Four-channel polarization feature `[rho, cos 2phi, sin 2phi, |grad phi|]`.
pub type Feature = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub rho: Raster,
    pub cos2: Raster,
    pub sin2: Raster,
    pub grad: Raster,
}

impl FeatureField {
    pub fn dim(&self) -> (usize, usize) {
        self.rho.dim()
    }

    #[inline]
    pub fn at(&self, p: (usize, usize)) -> Feature {
        [self.rho[p], self.cos2[p], self.sin2[p], self.grad[p]]
    }

    /// Copy with the gradient channel divided by its mask-wide quantile `q`
    /// (no-op when the quantile is zero).
    pub fn with_normalized_gradient(&self, mask: &Mask, q: f64) -> (Self, f64) {
        let mut vals: Vec<f64> = self
            .grad
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(&g, _)| g)
            .collect();
        let scale = quantile(&mut vals, q);
        let mut out = self.clone();
        if scale > 0.0 {
            out.grad.mapv_inplace(|g| g / scale);
        }
        (out, scale)
    }
}

/// Nearest-rank quantile; 0 for an empty slice.
pub(crate) fn quantile(vals: &mut [f64], q: f64) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(f64::total_cmp);
    let rank = ((q * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
    vals[rank - 1]
}

pub fn build_feature_field(polar: &PolarMaps, mask: &Mask) -> Result<FeatureField> {
    ensure_same_dims(mask, &polar.dop)?;
    ensure_same_dims(mask, &polar.aop)?;
    let aop = polar.aop.mapv(fold_half_period);
    let grad = aop_gradient_magnitude(&aop, mask);
    let zero_outside = |mut r: Raster| {
        r.zip_mut_with(mask, |v, &m| {
            if !m {
                *v = 0.0
            }
        });
        r
    };
    Ok(FeatureField {
        rho: zero_outside(polar.dop.mapv(|r| r.clamp(0.0, 1.0))),
        cos2: zero_outside(aop.mapv(|a| (2.0 * a).cos())),
        sin2: zero_outside(aop.mapv(|a| (2.0 * a).sin())),
        grad: zero_outside(grad),
    })
}

/// Per-pixel reliability of the DOP and AOP channels from local variance over
/// a `window x window` neighborhood clipped to the mask: `exp(-var / max var)`.
/// AOP variance is the circular variance of the `(cos 2phi, sin 2phi)`
/// embedding.
pub fn local_reliability(rho: &Raster, aop: &Raster, mask: &Mask, window: usize) -> (Raster, Raster) {
    let cos2 = aop.mapv(|a| (2.0 * a).cos());
    let sin2 = aop.mapv(|a| (2.0 * a).sin());
    reliability_from_channels(rho, &cos2, &sin2, mask, window)
}

pub(crate) fn reliability_from_channels(
    rho: &Raster,
    cos2: &Raster,
    sin2: &Raster,
    mask: &Mask,
    window: usize,
) -> (Raster, Raster) {
    let (rows, cols) = mask.dim();
    let half = (window / 2) as isize;
    let mut var_rho = Raster::zeros((rows, cols));
    let mut var_phi = Raster::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            if !mask[(r, c)] {
                continue;
            }
            let (mut n, mut s, mut ss, mut sc, mut sn) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in -half..=half {
                for dc in -half..=half {
                    let rr = r as isize + dr;
                    let cc = c as isize + dc;
                    if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                        continue;
                    }
                    let q = (rr as usize, cc as usize);
                    if !mask[q] {
                        continue;
                    }
                    n += 1.0;
                    s += rho[q];
                    ss += rho[q] * rho[q];
                    sc += cos2[q];
                    sn += sin2[q];
                }
            }
            let mean = s / n;
            var_rho[(r, c)] = snap(ss / n - mean * mean);
            let (mc, ms) = (sc / n, sn / n);
            var_phi[(r, c)] = snap(1.0 - (mc * mc + ms * ms));
        }
    }
    (reliability(&var_rho, mask), reliability(&var_phi, mask))
}

/// One-pass variances of a constant window come out at rounding level.
fn snap(v: f64) -> f64 {
    if v < 1e-12 {
        0.0
    } else {
        v
    }
}

fn reliability(var: &Raster, mask: &Mask) -> Raster {
    let max = var
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(0.0f64, f64::max);
    let mut out = Raster::ones(var.dim());
    if max > 0.0 {
        out.zip_mut_with(var, |o, &v| *o = (-v / max).exp());
    }
    out
}

/// Adaptive channel weights for a candidate pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStrength {
    pub lambda_rho: f64,
    pub lambda_phi: f64,
}

#[inline]
pub fn adaptive_weights(r_rho: f64, r_phi: f64, strength: AdaptiveStrength) -> [f64; 4] {
    let w_phi = 1.0 + strength.lambda_phi * r_phi;
    [1.0 + strength.lambda_rho * r_rho, w_phi, w_phi, 1.0]
}

#[inline]
pub fn feature_distance(neighbor: &Feature, seed: &Feature, weights: &[f64; 4]) -> f64 {
    neighbor
        .iter()
        .zip(seed)
        .zip(weights)
        .map(|((a, b), w)| (w * (a - b)).powi(2))
        .sum::<f64>()
        .sqrt()
}
