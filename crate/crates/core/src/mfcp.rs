//! Multi-scale fusion convexity prior: outward azimuths propagated inward from
//! the mask boundary, textured block-wise with the measured AOP, fused across
//! scales and turned into prior normals with boundary-decaying confidence.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{distance_transform, gaussian_blur};
use crate::polarimetry::{fold_full_period, fold_half_period};
use crate::raster::{boundary, ensure_same_dims, in_mask, Mask, NormalMap, Raster, NEIGHBORS8};

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitAzimuthMap {
    pub phi_im: Raster,
    pub valid: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleSet {
    pub block_sizes: Vec<usize>,
    pub gamma: f64,
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self {
            block_sizes: vec![8, 16, 32],
            gamma: 0.5,
        }
    }
}

impl ScaleSet {
    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.is_empty() {
            return Err(Error::invalid("scale set is empty"));
        }
        if self.block_sizes[0] < 2 || self.block_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "block sizes must be >= 2 and strictly increasing, got {:?}",
                self.block_sizes
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityWeights {
    pub w_con: Raster,
    pub decay_rate: f64,
}

/// Sigma of the mask blur whose gradient defines boundary normals.
const BOUNDARY_SIGMA: f64 = 2.0;

/// Closest-boundary assignment: every mask pixel takes the outward normal
/// direction of its nearest boundary pixel.
pub fn implicit_azimuth_from_mask(mask: &Mask) -> Result<ImplicitAzimuthMap> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("implicit azimuth of an empty mask"));
    }
    let rim = boundary(mask);
    let blurred = gaussian_blur(&mask.mapv(|m| if m { 1.0 } else { 0.0 }), BOUNDARY_SIGMA);
    let (rows, cols) = mask.dim();
    let at = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            blurred[(r as usize, c as usize)]
        }
    };
    let mut rim_dir = Raster::zeros((rows, cols));
    for ((r, c), &b) in rim.indexed_iter() {
        if !b {
            continue;
        }
        let (ri, ci) = (r as isize, c as isize);
        // outward = down the blurred indicator
        let gx = -(at(ri, ci + 1) - at(ri, ci - 1)) / 2.0;
        let gy = -(at(ri + 1, ci) - at(ri - 1, ci)) / 2.0;
        rim_dir[(r, c)] = if gx.hypot(gy) > 1e-9 {
            gy.atan2(gx)
        } else {
            // sum of offsets towards outside neighbors
            let (mut sx, mut sy) = (0.0, 0.0);
            for &(dr, dc) in &NEIGHBORS8 {
                if in_mask(mask, (r, c), (dr, dc)).is_none() {
                    sx += dc as f64;
                    sy += dr as f64;
                }
            }
            sy.atan2(sx)
        };
        rim_dir[(r, c)] = fold_full_period(rim_dir[(r, c)]);
    }
    let (_, nearest) = distance_transform(&rim);
    let mut phi_im = Raster::zeros((rows, cols));
    for ((p, &m), n) in mask.indexed_iter().zip(nearest.iter()) {
        if m {
            if let Some(q) = n {
                phi_im[p] = rim_dir[*q];
            }
        }
    }
    Ok(ImplicitAzimuthMap {
        phi_im,
        valid: mask.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub r0: usize,
    pub c0: usize,
    pub rows: usize,
    pub cols: usize,
    pub mask_px: usize,
    /// Fewer than four mask pixels: left untransformed.
    pub passthrough: bool,
}

impl Block {
    pub fn pixels<'a>(&self, mask: &'a Mask) -> impl Iterator<Item = (usize, usize)> + 'a {
        let b = *self;
        (b.r0..b.r0 + b.rows)
            .flat_map(move |r| (b.c0..b.c0 + b.cols).map(move |c| (r, c)))
            .filter(move |&p| mask[p])
    }
}

pub const MIN_BLOCK_PX: usize = 4;

/// Non-overlapping tiling in raster order; edge blocks are truncated.
pub fn block_decompose(mask: &Mask, block: usize) -> Vec<Block> {
    let block = block.max(1);
    let (rows, cols) = mask.dim();
    let mut out = Vec::new();
    for r0 in (0..rows).step_by(block) {
        for c0 in (0..cols).step_by(block) {
            let h = block.min(rows - r0);
            let w = block.min(cols - c0);
            let mask_px = mask
                .slice(ndarray::s![r0..r0 + h, c0..c0 + w])
                .iter()
                .filter(|&&m| m)
                .count();
            out.push(Block {
                r0,
                c0,
                rows: h,
                cols: w,
                mask_px,
                passthrough: mask_px < MIN_BLOCK_PX,
            });
        }
    }
    out
}

/// Normalizes `azimuth` to [0, 1], applies the power `gamma` and maps the
/// result affinely onto the `[min, max]` of `implicit`. A constant azimuth
/// block maps to the midpoint. Values are taken as given; angular unwrapping
/// is up to the caller.
pub fn gamma_range_map(azimuth: &[f64], implicit: &[f64], gamma: f64) -> Vec<f64> {
    let (lo, hi) = min_max(implicit);
    let (alo, ahi) = min_max(azimuth);
    let span = ahi - alo;
    azimuth
        .iter()
        .map(|&a| {
            if span <= 0.0 {
                0.5 * (lo + hi)
            } else {
                let t = ((a - alo) / span).clamp(0.0, 1.0).powf(gamma);
                lo + t * (hi - lo)
            }
        })
        .collect()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Unwraps `angles` of the given period around their circular mean.
fn unwrap_around_mean(angles: &[f64], period: f64) -> Vec<f64> {
    let k = 2.0 * PI / period;
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), &a| (s + (k * a).sin(), c + (k * a).cos()));
    let mean = s.atan2(c) / k;
    angles
        .iter()
        .map(|&a| {
            let d = a - mean;
            mean + d - period * ((d + period / 2.0) / period).floor()
        })
        .collect()
}

/// Range-mapped azimuth raster for one scale. Both inputs are unwrapped per
/// block (AOP with period pi, implicit azimuth with period 2 pi) before the
/// map; results are folded back to [-pi, pi).
pub fn range_mapped_scale(aop: &Raster, implicit: &Raster, mask: &Mask, block: usize, gamma: f64) -> Raster {
    let mut out = Raster::zeros(mask.dim());
    for b in block_decompose(mask, block) {
        let px: Vec<_> = b.pixels(mask).collect();
        if b.passthrough {
            for &p in &px {
                out[p] = implicit[p];
            }
            continue;
        }
        let a = unwrap_around_mean(&px.iter().map(|&p| aop[p]).collect::<Vec<_>>(), PI);
        let i = unwrap_around_mean(&px.iter().map(|&p| implicit[p]).collect::<Vec<_>>(), 2.0 * PI);
        for (&p, v) in px.iter().zip(gamma_range_map(&a, &i, gamma)) {
            out[p] = fold_full_period(v);
        }
    }
    out
}

/// Circular variance of the block-mean AOP map at one block size, computed on
/// the doubled-angle embedding so the pi ambiguity does not inflate it.
pub fn block_mean_variance(aop: &Raster, mask: &Mask, block: usize) -> f64 {
    let (mut sc, mut ss, mut n) = (0.0, 0.0, 0.0);
    for b in block_decompose(mask, block) {
        if b.mask_px == 0 {
            continue;
        }
        let (c, s) = b
            .pixels(mask)
            .fold((0.0, 0.0), |(c, s), p| (c + (2.0 * aop[p]).cos(), s + (2.0 * aop[p]).sin()));
        let m = (s.atan2(c)) / 2.0;
        let w = b.mask_px as f64;
        sc += w * (2.0 * m).cos();
        ss += w * (2.0 * m).sin();
        n += w;
    }
    if n == 0.0 {
        return 0.0;
    }
    (1.0 - (sc / n).powi(2) - (ss / n).powi(2)).max(0.0)
}

/// Variance weights `sigma_i^2 / sum sigma^2`; uniform when all vanish.
pub fn fusion_weights(variances: &[f64]) -> Vec<f64> {
    let total: f64 = variances.iter().sum();
    if !(total > 0.0) {
        return vec![1.0 / variances.len() as f64; variances.len()];
    }
    variances.iter().map(|v| v / total).collect()
}

/// Weighted per-pixel fusion. Angles are combined as offsets from the first
/// map (wrapped to (-pi, pi]) so maps straddling the +-pi seam average
/// correctly.
pub fn fuse_maps(maps: &[Raster], weights: &[f64], mask: &Mask) -> Result<Raster> {
    let Some(first) = maps.first() else {
        return Err(Error::invalid("no maps to fuse"));
    };
    if maps.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} maps but {} weights",
            maps.len(),
            weights.len()
        )));
    }
    for m in maps {
        ensure_same_dims(first, m)?;
    }
    ensure_same_dims(mask, first)?;
    let mut out = Raster::zeros(first.dim());
    for (p, &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let reference = first[p];
        let mut acc = 0.0;
        for (map, &w) in maps.iter().zip(weights) {
            acc += w * fold_full_period(map[p] - reference);
        }
        out[p] = if acc == 0.0 { reference } else { fold_full_period(reference + acc) };
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub phi: Raster,
    pub weights: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Per-scale variance weighting of `mapped` (one raster per scale) by the
/// block-granular azimuth variance, then fusion.
pub fn fuse_scales(mapped: &[Raster], azimuth: &Raster, scales: &ScaleSet, mask: &Mask) -> Result<Fusion> {
    if mapped.len() != scales.block_sizes.len() {
        return Err(Error::invalid(format!(
            "{} scale rasters for {} block sizes",
            mapped.len(),
            scales.block_sizes.len()
        )));
    }
    ensure_same_dims(mask, azimuth)?;
    let variances: Vec<f64> = scales
        .block_sizes
        .iter()
        .map(|&b| block_mean_variance(azimuth, mask, b))
        .collect();
    let weights = fusion_weights(&variances);
    let phi = fuse_maps(mapped, &weights, mask)?;
    Ok(Fusion {
        phi,
        weights,
        variances,
    })
}

pub fn implicit_normals(phi: &Raster, zenith: &Raster, mask: &Mask) -> NormalMap {
    NormalMap::from_shape_fn(mask.dim(), |p| {
        if !mask[p] {
            return [0.0, 0.0, 1.0];
        }
        let (st, ct) = zenith[p].sin_cos();
        let (sp, cp) = phi[p].sin_cos();
        [st * cp, st * sp, ct]
    })
}

/// `exp(-kappa d)` with `d` the Euclidean distance to the nearest boundary
/// pixel; zero outside the mask.
pub fn convexity_weights(mask: &Mask, decay_rate: f64) -> ConvexityWeights {
    let (dist, _) = distance_transform(&boundary(mask));
    let mut w_con = dist.mapv(|d| if d.is_finite() { (-decay_rate * d).exp() } else { 0.0 });
    w_con.zip_mut_with(mask, |w, &m| {
        if !m {
            *w = 0.0
        }
    });
    ConvexityWeights { w_con, decay_rate }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSource {
    /// Gamma-range-mapped AOP texture per scale.
    RangeMapped,
    /// The implicit azimuth itself at every scale (ablation).
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    Azimuth,
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfcpConfig {
    pub scales: ScaleSet,
    /// Decay constant of the convexity weights, per pixel.
    pub decay_rate: f64,
    pub fusion_source: FusionSource,
    pub variance_source: VarianceSource,
}

impl Default for MfcpConfig {
    fn default() -> Self {
        Self {
            scales: ScaleSet::default(),
            decay_rate: 0.01,
            fusion_source: FusionSource::RangeMapped,
            variance_source: VarianceSource::Azimuth,
        }
    }
}

impl MfcpConfig {
    pub fn validate(&self) -> Result<()> {
        self.scales.validate()?;
        if !(self.decay_rate > 0.0 && self.decay_rate.is_finite()) {
            return Err(Error::invalid(format!("decay rate {} must be positive", self.decay_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MfcpPrior {
    pub implicit: ImplicitAzimuthMap,
    pub fused: Fusion,
    pub weights: ConvexityWeights,
}

impl MfcpPrior {
    pub fn normals(&self, zenith: &Raster) -> NormalMap {
        implicit_normals(&self.fused.phi, zenith, &self.implicit.valid)
    }
}

/// Everything the solver needs from the prior except the zenith, which
/// changes across outer iterations.
pub fn build_prior(aop: &Raster, mask: &Mask, cfg: &MfcpConfig) -> Result<MfcpPrior> {
    cfg.validate()?;
    ensure_same_dims(mask, aop)?;
    let implicit = implicit_azimuth_from_mask(mask)?;
    let aop = aop.mapv(fold_half_period);
    let mapped: Vec<Raster> = cfg
        .scales
        .block_sizes
        .iter()
        .map(|&b| match cfg.fusion_source {
            FusionSource::RangeMapped => range_mapped_scale(&aop, &implicit.phi_im, mask, b, cfg.scales.gamma),
            FusionSource::Implicit => implicit.phi_im.clone(),
        })
        .collect();
    let variance_map = match cfg.variance_source {
        VarianceSource::Azimuth => aop,
        VarianceSource::Implicit => implicit.phi_im.mapv(fold_half_period),
    };
    let fused = fuse_scales(&mapped, &variance_map, &cfg.scales, mask)?;
    Ok(MfcpPrior {
        implicit,
        fused,
        weights: convexity_weights(mask, cfg.decay_rate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn disk(n: usize, cx: f64, cy: f64, rad: f64) -> Mask {
        Mask::from_shape_fn((n, n), |(r, c)| {
            (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2) <= rad * rad
        })
    }

    fn ang_diff(a: f64, b: f64) -> f64 {
        fold_full_period(a - b).abs()
    }

    #[test]
    fn disk_azimuth_is_radial() {
        let (cx, cy) = (32.0, 30.0);
        let mask = disk(64, cx, cy, 25.0);
        let im = implicit_azimuth_from_mask(&mask).unwrap();
        let (mut sum, mut n, mut worst) = (0.0, 0.0, 0.0f64);
        for ((r, c), &m) in mask.indexed_iter() {
            let (x, y) = (c as f64 - cx, r as f64 - cy);
            if m && x.hypot(y) > 3.0 {
                let d = ang_diff(im.phi_im[(r, c)], y.atan2(x));
                sum += d;
                n += 1.0;
                worst = worst.max(d);
            }
        }
        let mean = (sum / n).to_degrees();
        assert!(mean < 5.0, "mean {mean}");
        assert!(worst < 25f64.to_radians(), "worst {}", worst.to_degrees());
    }

    #[test]
    fn half_plane_azimuth_is_constant() {
        // image border is outside, so use an interior half-plane
        let mask = Mask::from_shape_fn((40, 40), |(r, c)| c >= 2 && c < 20 && r >= 2 && r < 38);
        let im = implicit_azimuth_from_mask(&mask).unwrap();
        // column 19 is the right edge: outward is +x
        for r in 12..28 {
            assert!(ang_diff(im.phi_im[(r, 17)], 0.0) < 1e-9);
        }
    }

    #[test]
    fn two_disks_use_their_own_centers() {
        let a = disk(80, 20.0, 40.0, 15.0);
        let b = disk(80, 60.0, 40.0, 15.0);
        let mask = Mask::from_shape_fn((80, 80), |p| a[p] || b[p]);
        let im = implicit_azimuth_from_mask(&mask).unwrap();
        // brute-force nearest boundary pixel
        let rim = boundary(&mask);
        let (mut sum, mut n) = (0.0, 0.0);
        let rim_px: Vec<_> = rim.indexed_iter().filter(|(_, &b)| b).map(|(p, _)| p).collect();
        for ((r, c), &m) in mask.indexed_iter() {
            if !m {
                continue;
            }
            let cx = if a[(r, c)] { 20.0 } else { 60.0 };
            let (x, y) = (c as f64 - cx, r as f64 - 40.0);
            let near = rim_px
                .iter()
                .min_by(|p, q| {
                    let d = |t: &(usize, usize)| (t.0 as f64 - r as f64).powi(2) + (t.1 as f64 - c as f64).powi(2);
                    d(p).total_cmp(&d(q))
                })
                .unwrap();
            let own = if a[(r, c)] { a[*near] } else { b[*near] };
            assert!(own);
            if x.hypot(y) > 3.0 {
                sum += ang_diff(im.phi_im[(r, c)], y.atan2(x));
                n += 1.0;
            }
        }
        assert!((sum / n).to_degrees() < 5.0);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(implicit_azimuth_from_mask(&Mask::from_elem((4, 4), false)).is_err());
    }

    #[test]
    fn block_counts() {
        let full = |n| Mask::from_elem((n, n), true);
        assert_eq!(block_decompose(&full(16), 8).len(), 4);
        let b = block_decompose(&full(17), 8);
        assert_eq!(b.len(), 9);
        assert_eq!((b[8].rows, b[8].cols), (1, 1));
        let mut m = full(16);
        m.slice_mut(ndarray::s![0..8, 0..8]).fill(false);
        assert!(block_decompose(&m, 8)[0].passthrough);
        assert!(!block_decompose(&m, 8)[1].passthrough);
    }

    #[test]
    fn gamma_map_examples() {
        let v = [0.0, 0.25, 1.0];
        let out = gamma_range_map(&v, &[0.0, 1.0], 0.5);
        assert_eq!(out, vec![0.0, 0.5, 1.0]);
        let q = PI / 4.0;
        let out = gamma_range_map(&v, &[-q, 0.3, q], 0.5);
        for (o, e) in out.iter().zip([-q, 0.0, q]) {
            assert!((o - e).abs() < 1e-15);
        }
        let out = gamma_range_map(&[0.7; 4], &[-1.0, 3.0], 0.5);
        assert!(out.iter().all(|&o| o == 1.0));
    }

    #[test]
    fn fusion_examples() {
        let mask = Mask::from_elem((3, 3), true);
        let a = Raster::from_elem((3, 3), 0.4);
        let b = Raster::from_elem((3, 3), -0.2);
        let c = Raster::from_elem((3, 3), 1.0);
        let same = fuse_maps(&[a.clone(), a.clone(), a.clone()], &[0.2, 0.3, 0.5], &mask).unwrap();
        assert!(same.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let w = fusion_weights(&[1.0, 0.0, 0.0]);
        let only_a = fuse_maps(&[a.clone(), b.clone(), c], &w, &mask).unwrap();
        assert_eq!(only_a, a);
        let mean = fuse_maps(&[a, b], &fusion_weights(&[1.0, 1.0]), &mask).unwrap();
        assert!(mean.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert_eq!(fusion_weights(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn fusion_across_seam() {
        let mask = Mask::from_elem((1, 1), true);
        let a = Raster::from_elem((1, 1), PI - 0.1);
        let b = Raster::from_elem((1, 1), -PI + 0.1);
        let out = fuse_maps(&[a, b], &[0.5, 0.5], &mask).unwrap();
        assert!(ang_diff(out[(0, 0)], PI) < 1e-12);
    }

    #[test]
    fn mismatched_fusion_dims() {
        let mask = Mask::from_elem((3, 3), true);
        let err = fuse_maps(&[Raster::zeros((3, 3)), Raster::zeros((3, 4))], &[0.5, 0.5], &mask);
        assert!(err.unwrap_err().is_invalid_input());
    }

    #[test]
    fn normal_examples() {
        let mask = Mask::from_elem((1, 3), true);
        let phi = Raster::from_shape_vec((1, 3), vec![1.3, 0.0, FRAC_PI_2]).unwrap();
        let eps = 1e-6;
        let theta = Raster::from_shape_vec((1, 3), vec![0.0, FRAC_PI_2 - eps, PI / 4.0]).unwrap();
        let n = implicit_normals(&phi, &theta, &mask);
        assert_eq!(n[(0, 0)], [0.0, 0.0, 1.0]);
        assert!((n[(0, 1)][0] - 1.0).abs() < 1e-12 && (n[(0, 1)][2] - eps).abs() < 1e-12);
        let h = 0.5f64.sqrt();
        assert!(n[(0, 2)][0].abs() < 1e-15);
        assert!((n[(0, 2)][1] - h).abs() < 1e-15 && (n[(0, 2)][2] - h).abs() < 1e-15);
    }

    #[test]
    fn convexity_weight_examples() {
        let kappa = 0.1;
        let mask = disk(64, 32.0, 32.0, 20.0);
        let w = convexity_weights(&mask, kappa);
        let rim = boundary(&mask);
        for (p, &b) in rim.indexed_iter() {
            if b {
                assert_eq!(w.w_con[p], 1.0);
            }
        }
        // center is 20 px from the silhouette, the rim pixel sits at 20 or just inside
        let (dist, _) = distance_transform(&rim);
        assert!((w.w_con[(32, 32)] - (-kappa * dist[(32, 32)]).exp()).abs() < 1e-15);
        assert!((dist[(32, 32)] - 20.0).abs() <= 1.0);
        // square: d = 1/kappa gives e^-1
        let sq = Mask::from_shape_fn((40, 40), |(r, c)| r >= 5 && c >= 5 && r < 35 && c < 35);
        let w = convexity_weights(&sq, kappa);
        assert!((w.w_con[(15, 20)] - (-1f64).exp()).abs() < 1e-15);
    }
}
