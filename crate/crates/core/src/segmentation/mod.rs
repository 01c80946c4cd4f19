//! Region growing on the polarization feature field.

mod features;
mod grow;
mod post;

use serde::{Deserialize, Serialize};

pub use features::{
    adaptive_weights, build_feature_field, feature_distance, local_reliability, AdaptiveStrength,
    Feature, FeatureField,
};
pub use grow::{initialize_seeds, region_grow, region_grow_from, RegionLabels, Seed};
pub(crate) use features::quantile;
pub use post::{boundary_length, post_process};

use crate::error::{Error, Result};
use crate::polarimetry::PolarMaps;
use crate::raster::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedUpdate {
    /// Incremental mean of all accepted member features.
    RunningMean,
    /// The seed pixel's own feature throughout.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub tau: f64,
    pub lambda_rho: f64,
    pub lambda_phi: f64,
    pub window: usize,
    pub min_region_px: usize,
    pub seed_grid_stride: usize,
    pub seed_update: SeedUpdate,
    pub connectivity: Connectivity,
    /// Quantile used to normalize the gradient channel; `None` keeps raw values.
    pub gradient_quantile: Option<f64>,
    /// Gaussian width for boundary smoothing in post-processing, 0 disables.
    pub smoothing_sigma: f64,
    /// Adjacent regions whose mean feature step across the shared boundary
    /// is below this are merged in post-processing; `None` disables.
    pub merge_contrast: Option<f64>,
    /// Before that merge, regions are cut wherever a single pixel step reaches
    /// this value.
    pub edge_split: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda_rho: 2.0,
            lambda_phi: 2.0,
            window: 5,
            min_region_px: 64,
            seed_grid_stride: 32,
            seed_update: SeedUpdate::RunningMean,
            connectivity: Connectivity::Four,
            gradient_quantile: Some(0.95),
            smoothing_sigma: 1.0,
            merge_contrast: Some(10.0),
            edge_split: 3.0,
        }
    }
}

impl SegConfig {
    pub fn strength(&self) -> AdaptiveStrength {
        AdaptiveStrength {
            lambda_rho: self.lambda_rho,
            lambda_phi: self.lambda_phi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::invalid(format!("window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.lambda_rho >= 0.0 && self.lambda_phi >= 0.0) {
            return Err(Error::invalid("adaptive strengths must be non-negative"));
        }
        if let Some(q) = self.gradient_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::invalid(format!("gradient quantile {q} outside (0, 1]")));
            }
        }
        if let Some(t) = self.merge_contrast {
            if !(t > 0.0) {
                return Err(Error::invalid(format!("merge contrast must be positive, got {t}")));
            }
        }
        if !(self.edge_split > 0.0) {
            return Err(Error::invalid(format!("edge split must be positive, got {}", self.edge_split)));
        }
        if !(self.smoothing_sigma >= 0.0) {
            return Err(Error::invalid("smoothing sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Feature field, growth and post-processing in one call.
pub fn segment(polar: &PolarMaps, mask: &Mask, cfg: &SegConfig) -> Result<RegionLabels> {
    let field = build_feature_field(polar, mask)?;
    let grown = region_grow(&field, mask, cfg)?;
    post_process(&grown, &field, mask, cfg)
}
