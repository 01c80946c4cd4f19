use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::features::{adaptive_weights, feature_distance, reliability_from_channels, Feature, FeatureField};
use super::{Connectivity, SegConfig, SeedUpdate};
use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, in_mask, Mask, NEIGHBORS4, NEIGHBORS8};

/// Integer label raster: 0 is background, `1..=region_count` are regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLabels {
    pub labels: Array2<u32>,
    pub region_count: u32,
}

impl RegionLabels {
    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Pixel count per region, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.region_count as usize];
        for &l in self.labels.iter() {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }

    pub fn region_mask(&self, label: u32) -> Mask {
        self.labels.mapv(|l| l == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub pixel: (usize, usize),
    /// Selected as the flattest-AOP pixel of its grid cell.
    pub high_confidence: bool,
}

/// Seeds: per grid cell the pixel of minimal AOP-gradient (high confidence,
/// ordered by ascending gradient), then the grid points themselves in raster
/// order. Everything is restricted to the mask.
pub fn initialize_seeds(field: &FeatureField, mask: &Mask, stride: usize) -> Vec<Seed> {
    let stride = stride.max(1);
    let (rows, cols) = mask.dim();
    let mut minima: Vec<(f64, (usize, usize))> = Vec::new();
    let mut grid = Vec::new();
    for r0 in (0..rows).step_by(stride) {
        for c0 in (0..cols).step_by(stride) {
            let mut best: Option<(f64, (usize, usize))> = None;
            for r in r0..(r0 + stride).min(rows) {
                for c in c0..(c0 + stride).min(cols) {
                    if !mask[(r, c)] {
                        continue;
                    }
                    let g = field.grad[(r, c)];
                    if best.is_none_or(|(bg, _)| g < bg) {
                        best = Some((g, (r, c)));
                    }
                }
            }
            if let Some(b) = best {
                minima.push(b);
            }
            let center = ((r0 + stride / 2).min(rows - 1), (c0 + stride / 2).min(cols - 1));
            if mask[center] {
                grid.push(center);
            }
        }
    }
    minima.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    minima
        .into_iter()
        .map(|(_, pixel)| Seed {
            pixel,
            high_confidence: true,
        })
        .chain(grid.into_iter().map(|pixel| Seed {
            pixel,
            high_confidence: false,
        }))
        .collect()
}

pub(crate) struct GrowthContext {
    pub features: Array2<Feature>,
    pub weights: Array2<[f64; 4]>,
}

impl GrowthContext {
    pub fn new(field: &FeatureField, mask: &Mask, cfg: &SegConfig) -> Self {
        let (rel_rho, rel_phi) =
            reliability_from_channels(&field.rho, &field.cos2, &field.sin2, mask, cfg.window);
        let strength = cfg.strength();
        let features = Array2::from_shape_fn(mask.dim(), |p| field.at(p));
        let weights =
            Array2::from_shape_fn(mask.dim(), |p| adaptive_weights(rel_rho[p], rel_phi[p], strength));
        Self { features, weights }
    }
}

/// Field prepared for growth: gradient channel normalized as configured.
pub(crate) fn prepared_field(field: &FeatureField, mask: &Mask, cfg: &SegConfig) -> FeatureField {
    match cfg.gradient_quantile {
        Some(q) => field.with_normalized_gradient(mask, q).0,
        None => field.clone(),
    }
}

/// Adaptive region growing. Seeds are grown one after another to completion
/// with a FIFO frontier; a neighbor joins when its weighted feature distance
/// to the region's seed feature is below `tau`. Pixels no seed reaches start
/// their own regions in a second raster-order pass so the mask is covered.
pub fn region_grow(field: &FeatureField, mask: &Mask, cfg: &SegConfig) -> Result<RegionLabels> {
    let seeds = initialize_seeds(&prepared_field(field, mask, cfg), mask, cfg.seed_grid_stride);
    region_grow_from(field, mask, cfg, &seeds)
}

pub fn region_grow_from(
    field: &FeatureField,
    mask: &Mask,
    cfg: &SegConfig,
    seeds: &[Seed],
) -> Result<RegionLabels> {
    ensure_same_dims(mask, &field.rho)?;
    cfg.validate()?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("segmentation of an empty mask"));
    }
    let field = prepared_field(field, mask, cfg);
    let ctx = GrowthContext::new(&field, mask, cfg);
    let neighbors: &[(isize, isize)] = match cfg.connectivity {
        Connectivity::Four => &NEIGHBORS4,
        Connectivity::Eight => &NEIGHBORS8,
    };

    let mut labels = Array2::<u32>::zeros(mask.dim());
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    let mut grow = |start: (usize, usize), labels: &mut Array2<u32>, next: &mut u32| {
        *next += 1;
        let label = *next;
        labels[start] = label;
        let mut seed_feature = ctx.features[start];
        let mut members = 1.0;
        queue.clear();
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &d in neighbors {
                let Some(q) = in_mask(mask, p, d) else { continue };
                if labels[q] != 0 {
                    continue;
                }
                let fq = ctx.features[q];
                if feature_distance(&fq, &seed_feature, &ctx.weights[q]) < cfg.tau {
                    labels[q] = label;
                    queue.push_back(q);
                    if cfg.seed_update == SeedUpdate::RunningMean {
                        members += 1.0;
                        for k in 0..4 {
                            seed_feature[k] += (fq[k] - seed_feature[k]) / members;
                        }
                    }
                }
            }
        }
    };

    for seed in seeds {
        if mask[seed.pixel] && labels[seed.pixel] == 0 {
            grow(seed.pixel, &mut labels, &mut next);
        }
    }
    let (rows, cols) = mask.dim();
    for r in 0..rows {
        for c in 0..cols {
            if mask[(r, c)] && labels[(r, c)] == 0 {
                grow((r, c), &mut labels, &mut next);
            }
        }
    }
    Ok(RegionLabels {
        labels,
        region_count: next,
    })
}
