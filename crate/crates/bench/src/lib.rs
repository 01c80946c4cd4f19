//! Shared fixtures for the benchmarks.

use smsfp_core::diffuse::{Illumination, MaterialParams};
use smsfp_core::synth::Rendered;
use smsfp_core::{make_scene, render_polarized, AopConvention, Scene, SceneKind, SceneSpec};

/// Noise-free frontal render with eta 1.5 and albedo 0.8.
pub fn fixture(kind: SceneKind, grid: usize) -> (Scene, Rendered) {
    let scene = make_scene(&SceneSpec::new(kind, grid)).expect("valid scene");
    let illum = Illumination::new([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]).expect("unit vectors");
    let material = MaterialParams::new(1.5, 0.8).expect("valid material");
    let rendered = render_polarized(&scene, material, &illum, AopConvention::Parallel, 0.0, 0).expect("render");
    (scene, rendered)
}
