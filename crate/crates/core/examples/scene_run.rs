// Usage: scene_run <kind> <grid> [json config overrides]
use smsfp_core::diffuse::{Illumination, MaterialParams};
use smsfp_core::eval::evaluate;
use smsfp_core::pipeline::{run_smsfp, run_smsfp_with, Overrides, ReconstructionConfig};
use smsfp_core::synth::{make_scene, render_polarized, AopConvention, SceneSpec};

fn main() -> smsfp_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kind = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(smsfp_core::synth::SceneKind::Hemisphere);
    let grid = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(256);
    let cfg: ReconstructionConfig = match args.get(3) {
        Some(j) => serde_json::from_str(j)?,
        None => ReconstructionConfig::default(),
    };
    let mut spec = SceneSpec::new(kind, grid);
    if let Ok(t) = std::env::var("TILT") {
        let v: Vec<f64> = t.split(',').map(|x| x.parse().unwrap()).collect();
        spec.slope = Some([v[0], v[1]]);
    }
    let scene = make_scene(&spec)?;
    let illum = Illumination::new([0.0, 0.0, 1.0], [0.0, 0.0, 1.0])?;
    let r = render_polarized(&scene, MaterialParams::new(1.5, 0.8)?, &illum, AopConvention::Parallel, 0.0, 0)?;
    let t = std::time::Instant::now();
    let res = if std::env::var("ORACLE_LABELS").is_ok() {
        let labels = scene.parts.clone();
        let n = *labels.iter().max().unwrap();
        let labels = smsfp_core::segmentation::RegionLabels { labels: ndarray::Array2::from_shape_fn(labels.dim(), |p| if r.stack.mask[p] { labels[p] } else { 0 }), region_count: n };
        run_smsfp_with(&r.stack, &cfg, &Overrides { prior_azimuth: None, labels: Some(labels) })?
    } else {
        run_smsfp(&r.stack, &cfg)?
    };
    let (rep, _) = evaluate(&res.normals, &scene.normals, &r.stack.mask, 3)?;
    println!("regions {} t {:?}", res.labels.region_count, t.elapsed());
    for d in &res.diagnostics.regions {
        println!("  {} px {} it {} eta {:.3} alb {:.3} fail {:?}", d.label, d.pixels, d.iterations, d.eta, d.albedo, d.failure);
        for t in &d.trace { println!("    obj {:.3} eta {:.4} alb {:.4} dz {:.3e}", t.objective, t.eta, t.albedo, t.max_delta); }
    }
    println!("eta0 {:.4}", res.diagnostics.initial_eta);
    println!("mae {:.2} rmse {:.2} acc {:.3} {:.3} {:.3}", rep.mae_deg, rep.rmse_deg, rep.acc_11_25, rep.acc_22_5, rep.acc_30);
    let (rep, _) = evaluate(&res.region_normals, &scene.normals, &r.stack.mask, 3)?;
    println!("region normals mae {:.2} acc {:.3}", rep.mae_deg, rep.acc_11_25);
    let ov = Overrides { prior_azimuth: Some(scene.azimuth.clone()), labels: None };
    let res = run_smsfp_with(&r.stack, &cfg, &ov)?;
    let (rep, _) = evaluate(&res.normals, &scene.normals, &r.stack.mask, 3)?;
    println!("oracle mae {:.2} acc {:.3}", rep.mae_deg, rep.acc_11_25);
    Ok(())
}
