//! Angular error metrics for normal maps.

use serde::{Deserialize, Serialize};

use crate::diffuse::dot;
use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, erode, Mask, NormalMap, Raster};

pub const THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

/// Per-pixel angle between the maps in degrees, zero outside the mask.
pub fn angular_error_map(est: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<Raster> {
    ensure_same_dims(mask, est)?;
    ensure_same_dims(mask, gt)?;
    Ok(Raster::from_shape_fn(mask.dim(), |p| {
        if mask[p] {
            dot(est[p], gt[p]).clamp(-1.0, 1.0).acos().to_degrees()
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_deg: f64,
    pub rmse_deg: f64,
    pub acc_11_25: f64,
    pub acc_22_5: f64,
    pub acc_30: f64,
    pub n_pixels: usize,
    #[serde(default)]
    pub config_echo: serde_json::Value,
}

impl EvalReport {
    pub fn accuracies(&self) -> [f64; 3] {
        [self.acc_11_25, self.acc_22_5, self.acc_30]
    }
}

/// Mean, RMS and fraction of pixels strictly below each of the three
/// thresholds.
pub fn summarize(errors: &Raster, mask: &Mask, thresholds: [f64; 3]) -> Result<EvalReport> {
    ensure_same_dims(mask, errors)?;
    let vals: Vec<f64> = errors.iter().zip(mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
    if vals.is_empty() {
        return Err(Error::invalid("evaluation mask is empty"));
    }
    if let Some(bad) = vals.iter().find(|e| !e.is_finite()) {
        return Err(Error::invalid(format!("non-finite angular error {bad}")));
    }
    let n = vals.len() as f64;
    let mae = vals.iter().sum::<f64>() / n;
    let rmse = (vals.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let acc = |t: f64| vals.iter().filter(|&&e| e < t).count() as f64 / n;
    Ok(EvalReport {
        mae_deg: mae,
        rmse_deg: rmse,
        acc_11_25: acc(thresholds[0]),
        acc_22_5: acc(thresholds[1]),
        acc_30: acc(thresholds[2]),
        n_pixels: vals.len(),
        config_echo: serde_json::Value::Null,
    })
}

/// Mask with a rim of `width` pixels removed.
pub fn exclude_rim(mask: &Mask, width: usize) -> Mask {
    erode(mask, width)
}

pub fn evaluate(est: &NormalMap, gt: &NormalMap, mask: &Mask, rim: usize) -> Result<(EvalReport, Raster)> {
    let map = angular_error_map(est, gt, mask)?;
    let report = summarize(&map, &exclude_rim(mask, rim), THRESHOLDS)?;
    Ok((report, map))
}

/// Blue (0°) to red (90° and above) ramp through cyan, green and yellow.
/// Pixels outside the mask are black.
pub fn error_colormap(errors: &Raster, mask: &Mask) -> ndarray::Array3<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let (h, w) = errors.dim();
    let mut out = ndarray::Array3::<u8>::zeros((h, w, 3));
    for ((r, c), &e) in errors.indexed_iter() {
        if !mask[(r, c)] {
            continue;
        }
        let t = (e / 90.0).clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
        let i = (t.floor() as usize).min(STOPS.len() - 2);
        let f = t - i as f64;
        for k in 0..3 {
            let v = STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f;
            out[(r, c, k)] = (v * 255.0).round() as u8;
        }
    }
    out
}
