use ndarray::{s, Array2};

use smsfp_core::diffuse::{Illumination, MaterialParams};
use smsfp_core::eval::evaluate;
use smsfp_core::pipeline::{align_offsets, stitch_regions};
use smsfp_core::raster::{Mask, Raster};
use smsfp_core::solver::{
    build_gradient_operators, normals_from_height, solve_height, ConstraintRows, ConstraintSystem, KindWeights, RowKind,
};
use smsfp_core::synth::Rendered;
use smsfp_core::{
    make_scene, render_polarized, run_smsfp, AopConvention, PolarizedStack, ReconstructionConfig, RegionLabels,
    Scene, SceneKind, SceneSpec,
};

fn render(spec: &SceneSpec) -> (Scene, Rendered) {
    let scene = make_scene(spec).unwrap();
    let illum = Illumination::new([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]).unwrap();
    let r = render_polarized(&scene, MaterialParams::new(1.5, 0.8).unwrap(), &illum, AopConvention::Parallel, 0.0, 0)
        .unwrap();
    (scene, r)
}

#[test]
fn disjoint_hemispheres_reconstruct_independently() {
    let n = 64;
    let (_, single) = render(&SceneSpec::new(SceneKind::Hemisphere, n));
    let solo = run_smsfp(&single.stack, &ReconstructionConfig::default()).unwrap();

    // the same render twice, side by side
    let wide = |a: &Raster| {
        let mut out = Raster::zeros((n, 2 * n));
        out.slice_mut(s![.., ..n]).assign(a);
        out.slice_mut(s![.., n..]).assign(a);
        out
    };
    let mut mask = Mask::from_elem((n, 2 * n), false);
    mask.slice_mut(s![.., ..n]).assign(&single.stack.mask);
    mask.slice_mut(s![.., n..]).assign(&single.stack.mask);
    let stack = PolarizedStack::new(single.stack.images.clone().map(|im| wide(&im)), mask).unwrap();
    let both = run_smsfp(&stack, &ReconstructionConfig::default()).unwrap();
    assert_eq!(both.labels.region_count, 2);

    let mut worst = 0.0f64;
    for ((r, c), &m) in single.stack.mask.indexed_iter() {
        if m {
            for offset in [0, n] {
                let (a, b) = (solo.region_normals[(r, c)], both.region_normals[(r, c + offset)]);
                worst = (0..3).map(|k| (a[k] - b[k]).abs()).fold(worst, f64::max);
            }
        }
    }
    assert!(worst < 1e-6, "worst normal difference {worst}");
}

#[test]
fn halves_solved_separately_align_across_the_seam() {
    let n = 48;
    let mut spec = SceneSpec::new(SceneKind::Paraboloid, n);
    spec.curvature = Some([0.01, 0.015]);
    let scene = make_scene(&spec).unwrap();
    let mask = &scene.mask;
    let labels = RegionLabels {
        labels: Array2::from_shape_fn((n, n), |(r, c)| if !mask[(r, c)] { 0 } else if c < n / 2 { 1 } else { 2 }),
        region_count: 2,
    };
    // each half integrated from its own exact discrete gradient, mean-zero
    let mut heights = Raster::zeros((n, n));
    for l in 1..=2 {
        let m = labels.region_mask(l);
        let ops = build_gradient_operators(&m, 0.5).unwrap();
        let truth = ops.index.gather(&scene.height);
        let mut rows = ConstraintRows::default();
        for (i, (gx, gy)) in ops.gradient(&truth).into_iter().enumerate() {
            for (row, v) in [(&ops.dx[i], gx), (&ops.dy[i], gy)] {
                rows.rows.push(row.clone());
                rows.rhs.push(v);
                rows.tags.push(RowKind::Mfcp);
            }
        }
        let z = solve_height(&ConstraintSystem::new(&m, &ops, rows, KindWeights::default())).unwrap();
        heights += &ops.index.scatter(&z, 0.0);
    }
    let aligned = align_offsets(&heights, &labels, mask).unwrap();
    let (lo, hi) = scene
        .height
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((f64::MAX, f64::MIN), |(lo, hi), (&h, _)| (lo.min(h), hi.max(h)));
    let mut worst = 0.0f64;
    for r in 0..n {
        let (p, q) = ((r, n / 2 - 1), (r, n / 2));
        if mask[p] && mask[q] {
            let jump = (aligned[p] - aligned[q]) - (scene.height[p] - scene.height[q]);
            worst = worst.max(jump.abs());
        }
    }
    assert!(worst < 1e-3 * (hi - lo), "seam error {worst} vs range {}", hi - lo);
}

#[test]
fn stitching_twice_is_close_to_once() {
    let n = 40;
    let mask = Mask::from_elem((n, n), true);
    let labels = RegionLabels {
        labels: Array2::from_shape_fn((n, n), |(_, c)| if c < n / 2 { 1 } else { 2 }),
        region_count: 2,
    };
    let heights = Raster::from_shape_fn((n, n), |(r, c)| 0.05 * (r as f64) + if c < n / 2 { 0.0 } else { 3.0 });
    let guide = Raster::from_shape_fn((n, n), |(r, c)| ((r * 7 + c * 3) % 11) as f64 / 11.0);
    let once = stitch_regions(&heights, &labels, &mask, &guide, 3, 1e-3).unwrap();
    let twice = stitch_regions(&once, &labels, &mask, &guide, 3, 1e-3).unwrap();
    let drift = once.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let range = once.iter().cloned().fold(f64::MIN, f64::max) - once.iter().cloned().fold(f64::MAX, f64::min);
    // band smoothing is not an exact projection; the second pass only polishes
    assert!(drift < 0.03 * range, "drift {drift}");
}

#[test]
fn ground_truth_height_gives_sphere_normals() {
    let (scene, _) = render(&SceneSpec::new(SceneKind::Hemisphere, 128));
    let ops = build_gradient_operators(&scene.mask, 0.5).unwrap();
    let normals = normals_from_height(&scene.height, &ops);
    for (p, &m) in scene.mask.indexed_iter() {
        if m {
            let len: f64 = normals[p].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((len - 1.0).abs() < 1e-12);
        }
    }
    // away from the silhouette, where slopes are moderate
    let inner = Mask::from_shape_fn(scene.mask.dim(), |p| scene.mask[p] && scene.zenith[p] < 70f64.to_radians());
    let (rep, _) = evaluate(&normals, &scene.normals, &inner, 0).unwrap();
    assert!(rep.mae_deg < 0.5, "MAE {}", rep.mae_deg);
}

#[test]
fn empty_mask_is_invalid() {
    let stack = PolarizedStack::new([0; 4].map(|_| Raster::zeros((8, 8))), Mask::from_elem((8, 8), false)).unwrap();
    let err = run_smsfp(&stack, &ReconstructionConfig::default()).unwrap_err();
    assert!(err.is_invalid_input(), "{err}");
}

#[test]
fn labels_cover_mask_and_normals_are_unit() {
    let (_, r) = render(&SceneSpec::new(SceneKind::TwoBump, 64));
    let res = run_smsfp(&r.stack, &ReconstructionConfig::default()).unwrap();
    for (p, &m) in r.stack.mask.indexed_iter() {
        assert_eq!(m, res.labels.labels[p] != 0);
        if m {
            let len: f64 = res.normals[p].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((len - 1.0).abs() < 1e-12);
            assert!(res.height[p].is_finite());
        } else {
            assert_eq!(res.height[p], 0.0);
        }
    }
    // parallel region scheduling must not leak into the result
    let again = run_smsfp(&r.stack, &ReconstructionConfig::default()).unwrap();
    assert_eq!(again.height, res.height);
    assert_eq!(again.labels, res.labels);
}
