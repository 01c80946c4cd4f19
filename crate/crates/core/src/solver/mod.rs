//! Sparse least-squares height recovery with alternating material refits.

mod lsq;
mod operators;
mod refit;
mod rows;

use serde::{Deserialize, Serialize};

pub use lsq::{solve_height, ConstraintSystem, KindWeights};
pub use operators::{build_gradient_operators, normal_from_gradient, normals_from_height, GradientOperators, SparseRow};
pub use refit::{refit_albedo, refit_eta, refit_material, zenith_from_height, RefitOutcome, MIN_REFIT_PX};
pub use rows::{
    azimuth_rows, intensity_ratio_rows, laplacian_rows, mfcp_rows, AzimuthForm, ConstraintRows, RowKind,
    MFCP_GUARD, RATIO_GUARD,
};

use crate::diffuse::{estimate_illumination, zenith_map, Illumination, MaterialParams};
use crate::error::{Error, Result};
use crate::mfcp::MfcpPrior;
use crate::polarimetry::PolarMaps;
use crate::raster::{ensure_same_dims, Mask, NormalMap, Raster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub weights: KindWeights,
    pub smoothing_sigma: f64,
    pub azimuth_form: AzimuthForm,
    pub max_iterations: usize,
    /// Relative height change (to the height range) that ends the loop.
    pub tolerance: f64,
    pub refit_eta: bool,
    pub refit_albedo: bool,
    pub intensity_rows: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            weights: KindWeights::default(),
            smoothing_sigma: 0.5,
            azimuth_form: AzimuthForm::Geometric,
            max_iterations: 10,
            tolerance: 1e-4,
            refit_eta: true,
            refit_albedo: true,
            intensity_rows: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.smoothing_sigma >= 0.0) {
            return Err(Error::invalid("gradient smoothing sigma must be >= 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("at least one solver iteration is required"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("convergence tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// Starting point for one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionInit {
    pub material: MaterialParams,
    pub view: [f64; 3],
    /// Known light direction; estimated from the prior normals when `None`.
    pub light: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub eta: f64,
    pub albedo: f64,
    pub max_delta: f64,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct RegionReconstruction {
    /// Mean-zero heights on the region mask, 0 elsewhere.
    pub height: Raster,
    pub normals: NormalMap,
    pub material: MaterialParams,
    pub illumination: Illumination,
    pub illumination_fallback: bool,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
}

/// All constraint rows for one iteration.
pub fn assemble_rows(
    polar: &PolarMaps,
    zenith: &Raster,
    prior_normals: &NormalMap,
    prior: &MfcpPrior,
    illum: &Illumination,
    albedo: f64,
    mask: &Mask,
    ops: &GradientOperators,
    cfg: &SolverConfig,
) -> ConstraintRows {
    let mut rows = azimuth_rows(&polar.aop, ops, cfg.azimuth_form);
    if cfg.intensity_rows {
        rows.extend(intensity_ratio_rows(&polar.intensity, zenith, illum, albedo, ops));
    }
    rows.extend(mfcp_rows(prior_normals, &prior.weights, zenith, ops));
    rows.extend(laplacian_rows(mask, ops, 1.0));
    rows
}

/// Outer loop for one region: zenith from DOP, light, rows, solve, refit,
/// until the height settles or the iteration cap is hit.
pub fn reconstruct_region(
    polar: &PolarMaps,
    mask: &Mask,
    prior: &MfcpPrior,
    init: RegionInit,
    cfg: &SolverConfig,
) -> Result<RegionReconstruction> {
    cfg.validate()?;
    ensure_same_dims(mask, &polar.dop)?;
    ensure_same_dims(mask, &prior.fused.phi)?;
    let ops = build_gradient_operators(mask, cfg.smoothing_sigma)?;
    let view = crate::diffuse::normalize(init.view)?;
    let mut material = init.material.clamped();
    let mut z_old = vec![0.0; ops.len()];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut illumination = Illumination { direction: view, view };
    let mut fallback = false;

    for iteration in 1..=cfg.max_iterations {
        let (zenith, _) = zenith_map(&polar.dop, material.eta, mask)?;
        let prior_normals = prior.normals(&zenith);
        match init.light {
            Some(l) => illumination = Illumination::new(l, view)?,
            None => {
                let est = estimate_illumination(&polar.intensity, &prior_normals, material.albedo, mask, view)?;
                illumination = est.illumination;
                fallback = est.fallback;
            }
        }
        let rows = assemble_rows(
            polar,
            &zenith,
            &prior_normals,
            prior,
            &illumination,
            material.albedo,
            mask,
            &ops,
            cfg,
        );
        let n_rows = rows.len();
        let system = ConstraintSystem::new(mask, &ops, rows, cfg.weights);
        let z = solve_height(&system)?;
        let objective = system.objective(&z);

        let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let max_delta = z.iter().zip(&z_old).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let height = ops.index.scatter(&z, 0.0);
        if cfg.refit_eta || cfg.refit_albedo {
            let theta_z = zenith_from_height(&height, &ops, view);
            let normals = normals_from_height(&height, &ops);
            let out = refit_material(
                &polar.dop,
                &theta_z,
                &polar.intensity,
                &normals,
                illumination.direction,
                mask,
                material,
            );
            if cfg.refit_eta {
                material.eta = out.material.eta;
            }
            if cfg.refit_albedo {
                material.albedo = out.material.albedo;
            }
        }
        trace.push(IterationRecord {
            iteration,
            objective,
            eta: material.eta,
            albedo: material.albedo,
            max_delta,
            rows: n_rows,
        });
        z_old = z;
        if max_delta <= cfg.tolerance * (hi - lo) + 1e-12 {
            converged = true;
            break;
        }
    }
    let height = ops.index.scatter(&z_old, 0.0);
    let normals = normals_from_height(&height, &ops);
    Ok(RegionReconstruction {
        height,
        normals,
        material,
        illumination,
        illumination_fallback: fallback,
        iterations: trace.len(),
        converged,
        trace,
    })
}
