//! Decompose, segment, reconstruct each region, stitch.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffuse::{eta_for_ceiling, MaterialParams};
use crate::error::{Error, Result};
use crate::imgproc::{distance_transform, guided_filter};
use crate::mfcp::{build_prior, convexity_weights, implicit_azimuth_from_mask, MfcpConfig, MfcpPrior};
use crate::polarimetry::{decompose_stack, PolarMaps, PolarizedStack};
use crate::raster::{bounding_box, components, ensure_same_dims, offset, HeightMap, Mask, NormalMap, Raster, NEIGHBORS4};
use crate::segmentation::{segment, RegionLabels, SegConfig};
use crate::solver::{IterationRecord, build_gradient_operators, normals_from_height, reconstruct_region, RegionInit, SolverConfig};

/// Which mask the convexity prior of a region is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMask {
    Region,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub albedo0: f64,
    pub eta0: f64,
    /// When set, the starting index is raised to the smallest value whose DOP
    /// ceiling covers this quantile of the measured DOP.
    pub eta_contour_quantile: Option<f64>,
    pub view: [f64; 3],
    /// Known light direction; estimated per region when absent.
    pub light: Option<[f64; 3]>,
    /// Region growing on; when off every connected mask component is one
    /// region (global convexity).
    pub segmentation: bool,
    pub seg: SegConfig,
    pub mfcp: MfcpConfig,
    pub prior_mask: PriorMask,
    pub solver: SolverConfig,
    pub guided_radius: usize,
    pub guided_eps: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            albedo0: 0.8,
            eta0: 1.15,
            eta_contour_quantile: Some(0.99),
            view: [0.0, 0.0, 1.0],
            light: None,
            segmentation: true,
            seg: SegConfig::default(),
            mfcp: MfcpConfig::default(),
            prior_mask: PriorMask::Region,
            solver: SolverConfig::default(),
            guided_radius: 8,
            guided_eps: 1e-3,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        MaterialParams::new(self.eta0, self.albedo0)?;
        crate::diffuse::normalize(self.view)?;
        if let Some(l) = self.light {
            crate::diffuse::normalize(l)?;
        }
        self.seg.validate()?;
        self.mfcp.validate()?;
        self.solver.validate()?;
        if let Some(q) = self.eta_contour_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::invalid(format!("contour quantile {q} outside (0, 1]")));
            }
        }
        if !(self.guided_eps > 0.0) {
            return Err(Error::invalid("guided filter epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDiagnostics {
    pub label: u32,
    pub pixels: usize,
    pub iterations: usize,
    pub converged: bool,
    pub eta: f64,
    pub albedo: f64,
    pub light: [f64; 3],
    pub illumination_fallback: bool,
    /// Set when reconstruction failed and the region was filled from its
    /// neighbors.
    pub failure: Option<String>,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub initial_eta: f64,
    pub regions: Vec<RegionDiagnostics>,
    pub clamped_dop: usize,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub height: HeightMap,
    pub normals: NormalMap,
    pub labels: RegionLabels,
    pub materials: Vec<MaterialParams>,
    pub polar: PolarMaps,
    /// Per-region heights after offset alignment, before band smoothing.
    pub aligned: HeightMap,
    pub region_normals: NormalMap,
    pub diagnostics: Diagnostics,
}

/// Optional substitutions, mainly for oracle experiments.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the fused prior azimuth (for instance by ground truth).
    pub prior_azimuth: Option<Raster>,
    /// Skips segmentation.
    pub labels: Option<RegionLabels>,
}

pub fn run_smsfp(stack: &PolarizedStack, cfg: &ReconstructionConfig) -> Result<ReconstructionResult> {
    run_smsfp_with(stack, cfg, &Overrides::default())
}

struct RegionOutput {
    r0: usize,
    c0: usize,
    mask: Mask,
    height: Raster,
    normals: NormalMap,
    diag: RegionDiagnostics,
    material: MaterialParams,
    ok: bool,
}

pub fn run_smsfp_with(stack: &PolarizedStack, cfg: &ReconstructionConfig, overrides: &Overrides) -> Result<ReconstructionResult> {
    cfg.validate()?;
    stack.validate()?;
    let mask = &stack.mask;
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("stack mask is empty"));
    }
    let polar = decompose_stack(stack)?;
    let labels = match &overrides.labels {
        Some(l) => {
            ensure_same_dims(mask, &l.labels)?;
            l.clone()
        }
        None if cfg.segmentation => segment(&polar, mask, &cfg.seg)?,
        None => {
            let (labels, n) = components(mask);
            RegionLabels { labels, region_count: n }
        }
    };
    if let Some(a) = &overrides.prior_azimuth {
        ensure_same_dims(mask, a)?;
    }
    let global_prior = match cfg.prior_mask {
        PriorMask::Global => Some((
            implicit_azimuth_from_mask(mask)?,
            convexity_weights(mask, cfg.mfcp.decay_rate),
        )),
        PriorMask::Region => None,
    };
    let eta0 = match cfg.eta_contour_quantile {
        Some(q) => {
            let mut rho: Vec<f64> = polar.dop.iter().zip(mask).filter(|(_, &m)| m).map(|(&r, _)| r).collect();
            cfg.eta0.max(eta_for_ceiling(crate::segmentation::quantile(&mut rho, q)))
        }
        None => cfg.eta0,
    };
    let init = RegionInit {
        material: MaterialParams::new(eta0, cfg.albedo0)?,
        view: cfg.view,
        light: cfg.light,
    };

    let outputs: Vec<RegionOutput> = (1..=labels.region_count)
        .into_par_iter()
        .map(|label| {
            let region = labels.labels.mapv(|l| l == label);
            let (r0, c0, r1, c1) = bounding_box(&region).expect("labels are compact");
            let crop = |r: &Raster| r.slice(s![r0..r1, c0..c1]).to_owned();
            let rmask = region.slice(s![r0..r1, c0..c1]).to_owned();
            let rpolar = PolarMaps {
                intensity: crop(&polar.intensity),
                dop: crop(&polar.dop),
                aop: crop(&polar.aop),
                clamped_dop: 0,
            };
            let pixels = rmask.iter().filter(|&&m| m).count();
            let attempt = || -> Result<_> {
                let mut prior = build_prior(&rpolar.aop, &rmask, &cfg.mfcp)?;
                if let Some((im, w)) = &global_prior {
                    prior_from_global(&mut prior, im, w, (r0, c0, r1, c1));
                }
                if let Some(a) = &overrides.prior_azimuth {
                    prior.fused.phi = crop(a);
                }
                reconstruct_region(&rpolar, &rmask, &prior, init, &cfg.solver)
            };
            match attempt() {
                Ok(rec) => RegionOutput {
                    r0,
                    c0,
                    diag: RegionDiagnostics {
                        label,
                        pixels,
                        iterations: rec.iterations,
                        converged: rec.converged,
                        eta: rec.material.eta,
                        albedo: rec.material.albedo,
                        light: rec.illumination.direction,
                        illumination_fallback: rec.illumination_fallback,
                        failure: None,
                        trace: rec.trace.clone(),
                    },
                    material: rec.material,
                    height: rec.height,
                    normals: rec.normals,
                    mask: rmask,
                    ok: true,
                },
                Err(e) => RegionOutput {
                    r0,
                    c0,
                    diag: RegionDiagnostics {
                        label,
                        pixels,
                        iterations: 0,
                        converged: false,
                        eta: init.material.eta,
                        albedo: init.material.albedo,
                        light: cfg.light.unwrap_or(cfg.view),
                        illumination_fallback: false,
                        failure: Some(e.to_string()),
                        trace: Vec::new(),
                    },
                    material: init.material,
                    height: Raster::zeros(rmask.dim()),
                    normals: NormalMap::from_elem(rmask.dim(), [0.0, 0.0, 1.0]),
                    mask: rmask,
                    ok: false,
                },
            }
        })
        .collect();

    let dim = mask.dim();
    let mut heights = Raster::zeros(dim);
    let mut region_normals = NormalMap::from_elem(dim, [0.0, 0.0, 1.0]);
    let mut failed = vec![false; labels.region_count as usize];
    for (i, out) in outputs.iter().enumerate() {
        failed[i] = !out.ok;
        for ((r, c), &m) in out.mask.indexed_iter() {
            if m {
                let p = (out.r0 + r, out.c0 + c);
                heights[p] = out.height[(r, c)];
                region_normals[p] = out.normals[(r, c)];
            }
        }
    }
    let mut aligned = align_offsets_excluding(&heights, &labels, mask, &failed)?;
    fill_failed_regions(&mut aligned, &labels, &failed);
    let height = band_smooth(&aligned, &labels, mask, &polar.intensity, cfg.guided_radius, cfg.guided_eps);
    let normals = match build_gradient_operators(mask, cfg.solver.smoothing_sigma) {
        Ok(ops) => normals_from_height(&height, &ops),
        Err(_) => NormalMap::from_elem(dim, [0.0, 0.0, 1.0]),
    };
    Ok(ReconstructionResult {
        height,
        normals,
        materials: outputs.iter().map(|o| o.material).collect(),
        diagnostics: Diagnostics {
            initial_eta: eta0,
            regions: outputs.into_iter().map(|o| o.diag).collect(),
            clamped_dop: polar.clamped_dop,
        },
        labels,
        polar,
        aligned,
        region_normals,
    })
}

fn prior_from_global(
    prior: &mut MfcpPrior,
    implicit: &crate::mfcp::ImplicitAzimuthMap,
    weights: &crate::mfcp::ConvexityWeights,
    (r0, c0, r1, c1): (usize, usize, usize, usize),
) {
    let crop = |r: &Raster| r.slice(s![r0..r1, c0..c1]).to_owned();
    prior.weights.w_con = crop(&weights.w_con) * prior.implicit.valid.mapv(|m| if m { 1.0 } else { 0.0 });
    // refuse to transplant angles onto the fused map wholesale: keep the
    // texture injection but use the global implicit azimuth as its base
    let global = crop(&implicit.phi_im);
    for (p, &m) in prior.implicit.valid.indexed_iter() {
        if m {
            let delta = prior.fused.phi[p] - prior.implicit.phi_im[p];
            prior.fused.phi[p] = crate::polarimetry::fold_full_period(global[p] + delta);
            prior.implicit.phi_im[p] = global[p];
        }
    }
}

/// Region-boundary pixel pairs `(p, q, d)` with `q = p + d` in a different
/// region.
fn boundary_pairs(labels: &RegionLabels) -> Vec<((usize, usize), (usize, usize), (isize, isize))> {
    let lab = &labels.labels;
    let dim = lab.dim();
    let mut out = Vec::new();
    for ((r, c), &l) in lab.indexed_iter() {
        if l == 0 {
            continue;
        }
        for d in [(0isize, 1isize), (1, 0)] {
            if let Some(q) = offset((r, c), d, dim) {
                if lab[q] != 0 && lab[q] != l {
                    out.push(((r, c), q, d));
                }
            }
        }
    }
    out
}

/// Height of a region extrapolated half a pixel across its boundary, using the
/// region's own one-sided slope when the pixel behind `p` belongs to it.
fn extrapolate(height: &Raster, lab: &ndarray::Array2<u32>, p: (usize, usize), outward: (isize, isize)) -> f64 {
    let inward = (-outward.0, -outward.1);
    match offset(p, inward, lab.dim()) {
        Some(b) if lab[b] == lab[p] => height[p] + 0.5 * (height[p] - height[b]),
        _ => height[p],
    }
}

/// Least-squares constant offsets per region that match heights across all
/// region boundaries (extrapolated to the pair midpoint from either side).
/// Offsets of each group of mutually adjacent regions are pinned to zero mean.
pub fn align_offsets(heights: &Raster, labels: &RegionLabels, mask: &Mask) -> Result<HeightMap> {
    align_offsets_excluding(heights, labels, mask, &vec![false; labels.region_count as usize])
}

fn align_offsets_excluding(heights: &Raster, labels: &RegionLabels, mask: &Mask, skip: &[bool]) -> Result<HeightMap> {
    ensure_same_dims(mask, heights)?;
    ensure_same_dims(mask, &labels.labels)?;
    for (p, &m) in mask.indexed_iter() {
        if m && labels.labels[p] == 0 {
            return Err(Error::invalid(format!("mask pixel {p:?} is not covered by any region")));
        }
    }
    let k = labels.region_count as usize;
    let lab = &labels.labels;
    let mut out = heights.clone();
    if k <= 1 {
        return Ok(out);
    }
    let mut normal = Mat::<f64>::zeros(k, k);
    let mut rhs = Mat::<f64>::zeros(k, 1);
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (p, q, d) in boundary_pairs(labels) {
        let (a, b) = (lab[p] as usize - 1, lab[q] as usize - 1);
        if skip[a] || skip[b] {
            continue;
        }
        // (ha + oa) - (hb + ob) = 0  =>  oa - ob = hb - ha
        let diff = extrapolate(heights, lab, q, (-d.0, -d.1)) - extrapolate(heights, lab, p, d);
        normal[(a, a)] += 1.0;
        normal[(b, b)] += 1.0;
        normal[(a, b)] -= 1.0;
        normal[(b, a)] -= 1.0;
        rhs[(a, 0)] += diff;
        rhs[(b, 0)] -= diff;
        if !adjacency[a].contains(&b) {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
    }
    // one zero-mean pin per group of connected regions
    let mut group = vec![usize::MAX; k];
    let mut groups = Vec::new();
    for start in 0..k {
        if group[start] != usize::MAX {
            continue;
        }
        let g = groups.len();
        let mut members = vec![start];
        group[start] = g;
        let mut i = 0;
        while i < members.len() {
            for &n in &adjacency[members[i]] {
                if group[n] == usize::MAX {
                    group[n] = g;
                    members.push(n);
                }
            }
            i += 1;
        }
        groups.push(members);
    }
    for members in &groups {
        let w = 1.0 / members.len() as f64;
        for &a in members {
            for &b in members {
                normal[(a, b)] += w;
            }
        }
    }
    let llt = normal
        .llt(Side::Lower)
        .map_err(|e| Error::Solver(format!("offset alignment: {e:?}")))?;
    let o = llt.solve(&rhs);
    for (p, v) in out.indexed_iter_mut() {
        let l = lab[p];
        if l > 0 && mask[p] {
            *v += o[(l as usize - 1, 0)];
        }
    }
    Ok(out)
}

/// Fills failed regions from the inverse-square-distance weighted average of
/// heights on the boundary of adjacent successful regions.
fn fill_failed_regions(height: &mut Raster, labels: &RegionLabels, failed: &[bool]) {
    let lab = &labels.labels;
    let dim = lab.dim();
    for (i, &f) in failed.iter().enumerate() {
        if !f {
            continue;
        }
        let label = i as u32 + 1;
        let mut sources = Vec::new();
        for ((r, c), &l) in lab.indexed_iter() {
            if l == 0 || l == label || failed[l as usize - 1] {
                continue;
            }
            let touches = NEIGHBORS4
                .iter()
                .any(|&d| offset((r, c), d, dim).is_some_and(|q| lab[q] == label));
            if touches {
                sources.push(((r, c), height[(r, c)]));
            }
        }
        for ((r, c), &l) in lab.indexed_iter() {
            if l != label {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for &((sr, sc), h) in &sources {
                let d2 = (sr as f64 - r as f64).powi(2) + (sc as f64 - c as f64).powi(2);
                let w = 1.0 / d2.max(1.0);
                num += w * h;
                den += w;
            }
            height[(r, c)] = if den > 0.0 { num / den } else { 0.0 };
        }
    }
}

/// Pixels within `radius` of a region boundary.
pub fn boundary_band(labels: &RegionLabels, radius: usize) -> Mask {
    let lab = &labels.labels;
    let mut seam = Mask::from_elem(lab.dim(), false);
    for (p, q, _) in boundary_pairs(labels) {
        seam[p] = true;
        seam[q] = true;
    }
    if !seam.iter().any(|&b| b) {
        return seam;
    }
    let (dist, _) = distance_transform(&seam);
    Mask::from_shape_fn(lab.dim(), |p| lab[p] != 0 && dist[p] <= radius as f64)
}

fn band_smooth(height: &Raster, labels: &RegionLabels, mask: &Mask, guide: &Raster, radius: usize, eps: f64) -> HeightMap {
    let band = boundary_band(labels, radius);
    if !band.iter().any(|&b| b) {
        return height.clone();
    }
    let filtered = guided_filter(height, guide, mask, radius, eps);
    let mut out = height.clone();
    for (p, &b) in band.indexed_iter() {
        if b {
            out[p] = filtered[p];
        }
    }
    out
}

/// Offset alignment followed by guided filtering inside the boundary band.
pub fn stitch_regions(
    heights: &Raster,
    labels: &RegionLabels,
    mask: &Mask,
    guide: &Raster,
    radius: usize,
    eps: f64,
) -> Result<HeightMap> {
    ensure_same_dims(mask, guide)?;
    let aligned = align_offsets(heights, labels, mask)?;
    Ok(band_smooth(&aligned, labels, mask, guide, radius, eps))
}
