//! Four-angle linear polarimetry: Stokes decomposition of a polarized stack
//! into intensity, degree and angle of polarization, and the inverse
//! sinusoid synthesis.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, in_mask, Mask, Raster};

/// Polarizer orientations of the four stack channels, in radians.
pub const POLARIZER_ANGLES: [f64; 4] = [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0];

/// Folds an angle into the canonical half period `[-pi/2, pi/2)`.
#[inline]
pub fn fold_half_period(angle: f64) -> f64 {
    let mut a = angle - PI * ((angle + FRAC_PI_2) / PI).floor();
    if a >= FRAC_PI_2 {
        a -= PI;
    }
    if a < -FRAC_PI_2 {
        a += PI;
    }
    a
}

/// Folds an angle into `[-pi, pi)`.
#[inline]
pub fn fold_full_period(angle: f64) -> f64 {
    let mut a = angle - 2.0 * PI * ((angle + PI) / (2.0 * PI)).floor();
    if a >= PI {
        a -= 2.0 * PI;
    }
    if a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Four co-registered intensity images at 0, 45, 90 and 135 degrees plus a
/// foreground mask.
#[derive(Debug, Clone)]
pub struct PolarizedStack {
    pub images: [Raster; 4],
    pub mask: Mask,
}

impl PolarizedStack {
    pub fn new(images: [Raster; 4], mask: Mask) -> Result<Self> {
        let stack = Self { images, mask };
        stack.validate()?;
        Ok(stack)
    }

    /// Synthesizes the four channels from `(I, rho, phi)` maps.
    pub fn from_polar(polar: &PolarMaps, mask: Mask) -> Result<Self> {
        let images = POLARIZER_ANGLES.map(|a| synthesize_intensity(polar, a));
        Self::new(images, mask)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            ensure_same_dims(&self.mask, img)?;
        }
        for (k, img) in self.images.iter().enumerate() {
            if let Some(v) = img.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::invalid(format!(
                    "channel {} ({} deg) holds a non-finite or negative intensity {v}",
                    k,
                    POLARIZER_ANGLES[k].to_degrees()
                )));
            }
        }
        Ok(())
    }
}

/// Linear Stokes components; `s3` is identically zero for a linear analyzer.
#[derive(Debug, Clone)]
pub struct StokesMaps {
    pub s0: Raster,
    pub s1: Raster,
    pub s2: Raster,
}

impl StokesMaps {
    pub fn from_stack(stack: &PolarizedStack) -> Result<Self> {
        stack.validate()?;
        let [i0, i45, i90, i135] = &stack.images;
        Ok(Self {
            s0: i0 + i90,
            s1: i0 - i90,
            s2: i45 - i135,
        })
    }
}

/// Average intensity, degree of polarization in `[0, 1]` and angle of
/// polarization in `[-pi/2, pi/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarMaps {
    pub intensity: Raster,
    pub dop: Raster,
    pub aop: Raster,
    /// Pixels whose raw DOP exceeded 1 and was clamped.
    pub clamped_dop: usize,
}

/// Per-pixel decomposition of one sample quadruple into `(I, rho, phi)` and a
/// flag telling whether the DOP had to be clamped.
#[inline]
pub fn decompose_pixel(i0: f64, i45: f64, i90: f64, i135: f64) -> (f64, f64, f64, bool) {
    let s0 = i0 + i90;
    let s1 = i0 - i90;
    let s2 = i45 - i135;
    if s0 <= 0.0 {
        return (0.0, 0.0, 0.0, false);
    }
    let raw = s1.hypot(s2) / s0;
    let rho = raw.min(1.0);
    let phi = if raw == 0.0 {
        0.0
    } else {
        fold_half_period(0.5 * s2.atan2(s1))
    };
    (0.5 * s0, rho, phi, raw > 1.0)
}

pub fn decompose_stack(stack: &PolarizedStack) -> Result<PolarMaps> {
    stack.validate()?;
    let dim = stack.dim();
    let mut intensity = Raster::zeros(dim);
    let mut dop = Raster::zeros(dim);
    let mut aop = Raster::zeros(dim);
    let [i0, i45, i90, i135] = &stack.images;
    let mut clamped = 0;
    for (p, &v0) in i0.indexed_iter() {
        let (ii, rr, aa, c) = decompose_pixel(v0, i45[p], i90[p], i135[p]);
        intensity[p] = ii;
        dop[p] = rr;
        aop[p] = aa;
        clamped += c as usize;
    }
    Ok(PolarMaps {
        intensity,
        dop,
        aop,
        clamped_dop: clamped,
    })
}

/// Intensity seen through a linear polarizer at `polarizer_angle`.
#[inline]
pub fn sinusoid(intensity: f64, rho: f64, phi: f64, polarizer_angle: f64) -> f64 {
    (intensity * (1.0 + rho * (2.0 * (polarizer_angle - phi)).cos())).max(0.0)
}

pub fn synthesize_intensity(polar: &PolarMaps, polarizer_angle: f64) -> Raster {
    Zip::from(&polar.intensity)
        .and(&polar.dop)
        .and(&polar.aop)
        .map_collect(|&i, &r, &a| sinusoid(i, r, a, polarizer_angle))
}

/// AOP gradient magnitude with differences taken on the pi-periodic circle:
/// central differences where both neighbors are in the mask, one-sided
/// otherwise, zero outside the mask.
pub fn aop_gradient_magnitude(aop: &Raster, mask: &Mask) -> Raster {
    let mut out = Raster::zeros(aop.dim());
    for ((r, c), v) in out.indexed_iter_mut() {
        if !mask[(r, c)] {
            continue;
        }
        let p = (r, c);
        let axis = |minus: (isize, isize), plus: (isize, isize)| -> f64 {
            match (in_mask(mask, p, minus), in_mask(mask, p, plus)) {
                (Some(a), Some(b)) => 0.5 * fold_half_period(aop[b] - aop[a]),
                (None, Some(b)) => fold_half_period(aop[b] - aop[p]),
                (Some(a), None) => fold_half_period(aop[p] - aop[a]),
                (None, None) => 0.0,
            }
        };
        let gx = axis((0, -1), (0, 1));
        let gy = axis((-1, 0), (1, 0));
        *v = gx.hypot(gy);
    }
    out
}

/// Summary of a decomposition, handy for CLI sidecars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolarSummary {
    pub pixels: usize,
    pub clamped_dop: usize,
    pub mean_intensity: f64,
    pub mean_dop: f64,
    pub max_dop: f64,
}

impl PolarMaps {
    pub fn dim(&self) -> (usize, usize) {
        self.intensity.dim()
    }

    pub fn summary(&self, mask: &Mask) -> PolarSummary {
        let mut n = 0usize;
        let (mut si, mut sd, mut md) = (0.0, 0.0, 0.0f64);
        Zip::from(mask)
            .and(&self.intensity)
            .and(&self.dop)
            .for_each(|&m, &i, &d| {
                if m {
                    n += 1;
                    si += i;
                    sd += d;
                    md = md.max(d);
                }
            });
        let nn = n.max(1) as f64;
        PolarSummary {
            pixels: n,
            clamped_dop: self.clamped_dop,
            mean_intensity: si / nn,
            mean_dop: sd / nn,
            max_dop: md,
        }
    }
}
