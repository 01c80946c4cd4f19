//! Segmentation-driven monocular shape from polarization.
//!
//! The crate turns a four-angle polarized image stack into per-pixel surface
//! normals and a height map:
//!
//! 1. [`polarimetry`] decomposes the stack into intensity, DOP and AOP.
//! 2. [`segmentation`] partitions the foreground into locally convex regions
//!    by adaptive region growing on a polarization feature field.
//! 3. [`mfcp`] builds a multi-scale convexity prior for each region.
//! 4. [`solver`] assembles azimuth, intensity-ratio, prior and smoothness rows
//!    into one sparse least-squares problem and refits the material.
//! 5. [`pipeline`] runs the regions, aligns and blends them.
//!
//! [`synth`] renders analytic scenes with exact ground truth and [`eval`]
//! scores normal maps against it; [`io`] reads and writes PFM, PNG and JSON.

pub mod diffuse;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod io;
pub mod mfcp;
pub mod pipeline;
pub mod polarimetry;
pub mod raster;
pub mod segmentation;
pub mod solver;
pub mod synth;

pub use diffuse::{Illumination, MaterialParams};
pub use error::{Error, Result};
pub use eval::{EvalReport, THRESHOLDS};
pub use mfcp::{MfcpConfig, ScaleSet};
pub use pipeline::{run_smsfp, run_smsfp_with, Overrides, ReconstructionConfig, ReconstructionResult};
pub use polarimetry::{decompose_stack, PolarMaps, PolarizedStack};
pub use raster::{HeightMap, Mask, Normal, NormalMap, Raster};
pub use segmentation::{segment, RegionLabels, SegConfig};
pub use solver::SolverConfig;
pub use synth::{make_scene, render_polarized, AopConvention, Scene, SceneKind, SceneSpec};
