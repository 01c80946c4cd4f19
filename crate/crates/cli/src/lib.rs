//! The `smsfp` command line. Everything except argument parsing lives in
//! [`run`] so tests can drive it in-process.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use smsfp_core::diffuse::{Illumination, MaterialParams};
use smsfp_core::eval::evaluate;
use smsfp_core::io::{self, StackFormat};
use smsfp_core::solver::IterationRecord;
use smsfp_core::{
    decompose_stack, make_scene, render_polarized, run_smsfp, segment, AopConvention, Error, PolarizedStack,
    ReconstructionConfig, SceneKind, SceneSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "smsfp", version, about = "Monocular shape from polarization")]
pub struct Cli {
    /// Reconstruction config as JSON; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (render noise).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Progress on stderr; `reconstruct` also writes iterations.jsonl.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stack to intensity, DOP and AOP rasters.
    Decompose(StackArgs),
    /// Stack to a region label image.
    Segment(StackArgs),
    /// Analytic scene to a polarized stack plus ground truth.
    Render(RenderArgs),
    /// Stack to height and normals.
    Reconstruct(StackArgs),
    /// Angular error of estimated against ground-truth normals.
    Evaluate(EvaluateArgs),
    /// Reconstruct and evaluate over a grid of config values, one CSV row each.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct StackArgs {
    /// Directory holding i000, i045, i090, i135 (.pfm or .png) and mask.png.
    #[arg(long)]
    pub stack: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Hemisphere,
    Paraboloid,
    TwoBump,
    PlaneRamp,
}

impl From<Kind> for SceneKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Hemisphere => SceneKind::Hemisphere,
            Kind::Paraboloid => SceneKind::Paraboloid,
            Kind::TwoBump => SceneKind::TwoBump,
            Kind::PlaneRamp => SceneKind::PlaneRamp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Pfm,
    Png,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Convention {
    Parallel,
    Perpendicular,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, value_enum, default_value = "hemisphere")]
    pub kind: Kind,
    #[arg(long, default_value_t = 256)]
    pub grid: usize,
    /// Scene geometry as JSON; overrides --kind and --grid.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 1.5)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.8)]
    pub albedo: f64,
    /// Light direction `x,y,z`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0, 0.0, 1.0])]
    pub light: Vec<f64>,
    /// Gaussian noise sigma relative to the brightest channel value.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, value_enum, default_value = "pfm")]
    pub format: Format,
    #[arg(long, value_enum, default_value = "parallel")]
    pub convention: Convention,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Estimated normals (3-channel PFM).
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth normals (3-channel PFM).
    #[arg(long)]
    pub gt: PathBuf,
    /// Evaluation mask; defaults to pixels where both maps are nonzero.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Silhouette rim width excluded from scoring.
    #[arg(long, default_value_t = 1)]
    pub rim: usize,
    /// Score the rim too.
    #[arg(long)]
    pub include_rim: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub stack: PathBuf,
    /// Ground-truth normals (3-channel PFM).
    #[arg(long)]
    pub gt: PathBuf,
    /// `path=v1,v2,...` over a dotted config field such as `seg.tau`;
    /// repeat for a Cartesian grid.
    #[arg(long = "param", required = true)]
    pub params: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub rim: usize,
    #[arg(long)]
    pub include_rim: bool,
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Input problems exit 2, everything else 1.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            let invalid = match err {
                Error::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
                Error::Image(_) | Error::Json(_) => true,
                other => other.is_invalid_input(),
            };
            return if invalid { EXIT_INVALID } else { EXIT_INTERNAL };
        }
        if cause.downcast_ref::<Invalid>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_INVALID;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return EXIT_INVALID;
            }
        }
    }
    EXIT_INTERNAL
}

/// Marks a CLI-level input error.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let cfg_value = load_config_value(cli.config.as_deref())?;
    let cfg = config_from_value(&cfg_value)?;
    match &cli.command {
        Command::Decompose(a) => cmd_decompose(cli, a),
        Command::Segment(a) => cmd_segment(cli, a, &cfg),
        Command::Render(a) => cmd_render(cli, a),
        Command::Reconstruct(a) => cmd_reconstruct(cli, a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(cli, a, &cfg_value),
        Command::Sweep(a) => cmd_sweep(cli, a, &cfg_value),
    }
}

fn load_config_value(path: Option<&Path>) -> anyhow::Result<Value> {
    match path {
        Some(p) => Ok(io::read_json(p).with_context(|| format!("reading config {}", p.display()))?),
        None => Ok(json!({})),
    }
}

fn config_from_value(v: &Value) -> anyhow::Result<ReconstructionConfig> {
    let cfg: ReconstructionConfig = serde_json::from_value(v.clone()).context("parsing config")?;
    cfg.validate()?;
    Ok(cfg)
}

fn log(cli: &Cli, msg: impl AsRef<str>) {
    if cli.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

/// PNG stacks carry the factor that maps code values back to intensities in
/// a `stack.json` beside them.
fn load_stack(dir: &Path) -> anyhow::Result<PolarizedStack> {
    let side = dir.join("stack.json");
    let scale = if side.exists() {
        let v: Value = io::read_json(&side)?;
        v.get("png_scale").and_then(Value::as_f64).unwrap_or(1.0)
    } else {
        1.0
    };
    Ok(io::read_stack(dir, scale).with_context(|| format!("reading stack {}", dir.display()))?)
}

fn cmd_decompose(cli: &Cli, a: &StackArgs) -> anyhow::Result<()> {
    let stack = load_stack(&a.stack)?;
    let polar = decompose_stack(&stack)?;
    io::write_pfm(&cli.out.join("intensity.pfm"), &polar.intensity)?;
    io::write_pfm(&cli.out.join("dop.pfm"), &polar.dop)?;
    io::write_pfm(&cli.out.join("aop.pfm"), &polar.aop)?;
    io::write_json(&cli.out.join("polar.json"), &polar.summary(&stack.mask))?;
    log(cli, format!("decomposed {:?} stack, {} clamped DOP pixels", stack.dim(), polar.clamped_dop));
    Ok(())
}

fn cmd_segment(cli: &Cli, a: &StackArgs, cfg: &ReconstructionConfig) -> anyhow::Result<()> {
    let stack = load_stack(&a.stack)?;
    let polar = decompose_stack(&stack)?;
    let labels = segment(&polar, &stack.mask, &cfg.seg)?;
    io::write_labels(&cli.out.join("labels.png"), &labels)?;
    io::write_json(
        &cli.out.join("labels.json"),
        &json!({
            "region_count": labels.region_count,
            "region_pixels": labels.sizes(),
            "config": cfg.seg,
        }),
    )?;
    log(cli, format!("{} regions", labels.region_count));
    Ok(())
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> anyhow::Result<()> {
    let spec: SceneSpec = match &a.scene {
        Some(p) => io::read_json(p).with_context(|| format!("reading scene {}", p.display()))?,
        None => SceneSpec::new(a.kind.into(), a.grid),
    };
    let scene = make_scene(&spec)?;
    let material = MaterialParams::new(a.eta, a.albedo)?;
    let light: [f64; 3] = a.light.clone().try_into().map_err(|_| invalid("--light needs three components"))?;
    let illum = Illumination::new(light, [0.0, 0.0, 1.0])?;
    let convention = match a.convention {
        Convention::Parallel => AopConvention::Parallel,
        Convention::Perpendicular => AopConvention::Perpendicular,
    };
    let rendered = render_polarized(&scene, material, &illum, convention, a.noise, cli.seed)?;
    let stack = &rendered.stack;
    let (format, png_scale) = match a.format {
        Format::Pfm => (StackFormat::Pfm, 1.0),
        Format::Png => {
            let peak = stack.images.iter().flat_map(|im| im.iter()).fold(0.0f64, |m, &v| m.max(v));
            (StackFormat::Png, if peak > 0.0 { peak } else { 1.0 })
        }
    };
    io::write_stack(&cli.out, stack, format, png_scale)?;
    if matches!(format, StackFormat::Png) {
        io::write_json(&cli.out.join("stack.json"), &json!({ "png_scale": png_scale }))?;
    }
    let gt_height = scene.height.clone() * &stack.mask.mapv(|m| if m { 1.0 } else { 0.0 });
    io::write_pfm(&cli.out.join("gt_height.pfm"), &gt_height)?;
    io::write_pfm_normals(&cli.out.join("gt_normals.pfm"), &masked_normals(&scene.normals, &stack.mask))?;
    io::write_rgb(&cli.out.join("gt_normals.png"), &io::normals_to_rgb(&scene.normals, &stack.mask))?;

    // highest visible point and what was rendered there
    let apex = stack
        .mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(p, _)| p)
        .max_by(|&p, &q| scene.height[p].total_cmp(&scene.height[q]).then(q.cmp(&p)));
    let apex = apex.map(|p| {
        json!({
            "pixel": [p.0, p.1],
            "intensity": rendered.polar.intensity[p],
            "dop": rendered.polar.dop[p],
            "aop": rendered.polar.aop[p],
        })
    });
    io::write_json(
        &cli.out.join("manifest.json"),
        &json!({
            "scene": scene.spec,
            "material": material,
            "light": illum.direction,
            "view": illum.view,
            "convention": convention,
            "noise_sigma": a.noise,
            "seed": cli.seed,
            "format": format,
            "png_scale": png_scale,
            "pixels": smsfp_core::raster::count(&stack.mask),
            "apex": apex,
        }),
    )?;
    log(cli, format!("rendered {:?} at {}", spec.kind, spec.grid));
    Ok(())
}

fn masked_normals(n: &smsfp_core::NormalMap, mask: &smsfp_core::Mask) -> smsfp_core::NormalMap {
    smsfp_core::NormalMap::from_shape_fn(n.dim(), |p| if mask[p] { n[p] } else { [0.0; 3] })
}

fn cmd_reconstruct(cli: &Cli, a: &StackArgs, cfg: &ReconstructionConfig) -> anyhow::Result<()> {
    let stack = load_stack(&a.stack)?;
    let started = std::time::Instant::now();
    let res = run_smsfp(&stack, cfg)?;
    log(cli, format!("{} regions in {:.2?}", res.labels.region_count, started.elapsed()));
    let mask = &stack.mask;
    io::write_pfm(&cli.out.join("height.pfm"), &res.height)?;
    io::write_pfm_normals(&cli.out.join("normals.pfm"), &masked_normals(&res.normals, mask))?;
    io::write_rgb(&cli.out.join("normals.png"), &io::normals_to_rgb(&res.normals, mask))?;
    io::write_labels(&cli.out.join("labels.png"), &res.labels)?;
    io::write_json(
        &cli.out.join("diagnostics.json"),
        &json!({
            "diagnostics": res.diagnostics,
            "materials": res.materials,
            "config": cfg,
        }),
    )?;
    if cli.verbose {
        let mut lines = String::new();
        for region in &res.diagnostics.regions {
            for rec in &region.trace {
                let IterationRecord { iteration, objective, eta, albedo, max_delta, rows } = rec;
                let line = json!({
                    "region": region.label, "iteration": iteration, "objective": objective,
                    "eta": eta, "albedo": albedo, "max_delta": max_delta, "rows": rows,
                });
                lines.push_str(&line.to_string());
                lines.push('\n');
            }
        }
        io::atomic_write(&cli.out.join("iterations.jsonl"), lines.as_bytes())?;
    }
    Ok(())
}

fn load_eval_inputs(
    est: &Path,
    gt: &Path,
    mask: Option<&Path>,
) -> anyhow::Result<(smsfp_core::NormalMap, smsfp_core::NormalMap, smsfp_core::Mask)> {
    let est = io::read_pfm_normals(est).with_context(|| format!("reading {}", est.display()))?;
    let gt = io::read_pfm_normals(gt).with_context(|| format!("reading {}", gt.display()))?;
    if est.dim() != gt.dim() {
        return Err(Error::DimensionMismatch { expected: gt.dim(), found: est.dim() }.into());
    }
    let nonzero = |n: &[f64; 3]| n.iter().any(|&v| v != 0.0);
    let mask = match mask {
        Some(p) => io::read_mask(p)?,
        None => smsfp_core::Mask::from_shape_fn(gt.dim(), |p| nonzero(&est[p]) && nonzero(&gt[p])),
    };
    smsfp_core::raster::ensure_same_dims(&gt, &mask)?;
    Ok((est, gt, mask))
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs, cfg: &Value) -> anyhow::Result<()> {
    let (est, gt, mask) = load_eval_inputs(&a.est, &a.gt, a.mask.as_deref())?;
    let rim = if a.include_rim { 0 } else { a.rim };
    let (mut report, errors) = evaluate(&est, &gt, &mask, rim)?;
    report.config_echo = json!({ "rim": rim, "config": cfg });
    io::write_json(&cli.out.join("report.json"), &report)?;
    let scored = smsfp_core::eval::exclude_rim(&mask, rim);
    io::write_rgb(&cli.out.join("error_map.png"), &smsfp_core::eval::error_colormap(&errors, &scored))?;
    log(cli, format!("MAE {:.3} deg over {} px", report.mae_deg, report.n_pixels));
    Ok(())
}

/// One swept parameter and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub path: String,
    pub values: Vec<Value>,
}

pub fn parse_axis(s: &str) -> anyhow::Result<SweepAxis> {
    let (path, vals) = s.split_once('=').ok_or_else(|| invalid(format!("'{s}' is not path=v1,v2,...")))?;
    if path.is_empty() || vals.is_empty() {
        return Err(invalid(format!("'{s}' is not path=v1,v2,...")));
    }
    // each value is JSON when it parses as JSON, otherwise a string
    let values = vals
        .split(',')
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    Ok(SweepAxis { path: path.to_string(), values })
}

/// Sets a dotted path inside a JSON object, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| invalid(format!("'{path}' crosses a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| json!({}));
        if cur.is_null() {
            *cur = json!({});
        }
    }
    unreachable!()
}

/// Cartesian product of the axes, first axis slowest.
pub fn grid_points(axes: &[SweepAxis]) -> Vec<Vec<Value>> {
    axes.iter().fold(vec![vec![]], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs, base: &Value) -> anyhow::Result<()> {
    let axes: Vec<SweepAxis> = a.params.iter().map(|s| parse_axis(s)).collect::<anyhow::Result<_>>()?;
    let stack = load_stack(&a.stack)?;
    let gt = io::read_pfm_normals(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    smsfp_core::raster::ensure_same_dims(&stack.mask, &gt)?;
    let rim = if a.include_rim { 0 } else { a.rim };

    // every point is validated before any solve runs
    let mut configs = Vec::new();
    for point in grid_points(&axes) {
        let mut v = base.clone();
        if !v.is_object() {
            bail!(invalid("config must be a JSON object"));
        }
        for (axis, val) in axes.iter().zip(&point) {
            set_path(&mut v, &axis.path, val.clone())?;
        }
        let cfg = config_from_value(&v).map_err(|e| invalid(format!("sweep point {point:?}: {e:#}")))?;
        configs.push((point, cfg));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = axes.iter().map(|a| a.path.clone()).collect();
    header.extend(["mae_deg", "rmse_deg", "acc_11_25", "acc_22_5", "acc_30", "n_pixels", "regions"].map(String::from));
    w.write_record(&header)?;
    for (point, cfg) in &configs {
        let res = run_smsfp(&stack, cfg)?;
        let (rep, _) = evaluate(&res.normals, &gt, &stack.mask, rim)?;
        let mut row: Vec<String> = point.iter().map(csv_cell).collect();
        row.extend([
            rep.mae_deg.to_string(),
            rep.rmse_deg.to_string(),
            rep.acc_11_25.to_string(),
            rep.acc_22_5.to_string(),
            rep.acc_30.to_string(),
            rep.n_pixels.to_string(),
            res.labels.region_count.to_string(),
        ]);
        w.write_record(&row)?;
        log(cli, format!("{point:?}: MAE {:.3}", rep.mae_deg));
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("csv: {e}"))?;
    io::atomic_write(&cli.out.join("sweep.csv"), &bytes)?;
    Ok(())
}
