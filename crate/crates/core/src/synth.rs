//! Analytic test surfaces and a forward renderer using the same diffuse
//! polarization and Lambert models the reconstruction inverts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffuse::{diffuse_dop, dot, Illumination, MaterialParams};
use crate::error::{Error, Result};
use crate::polarimetry::{fold_full_period, fold_half_period, sinusoid, PolarMaps, PolarizedStack, POLARIZER_ANGLES};
use crate::raster::{HeightMap, Mask, NormalMap, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Hemisphere,
    Paraboloid,
    TwoBump,
    PlaneRamp,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hemisphere" => Ok(Self::Hemisphere),
            "paraboloid" => Ok(Self::Paraboloid),
            "two-bump" => Ok(Self::TwoBump),
            "plane-ramp" => Ok(Self::PlaneRamp),
            _ => Err(Error::invalid(format!("unknown scene kind '{s}'"))),
        }
    }
}

/// Scene description; unset geometry takes per-kind defaults scaled to the
/// grid. Lengths are in pixels, `x` along columns and `y` along rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub grid: usize,
    #[serde(default)]
    pub center: Option<[f64; 2]>,
    /// Sphere radius, paraboloid or ramp silhouette radius, or the first lobe.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Paraboloid `z = -(a x^2 + b y^2)` coefficients.
    #[serde(default)]
    pub curvature: Option<[f64; 2]>,
    /// Plane ramp `z = a x + b y` slopes; for the two-bump scene a planar
    /// tilt added to the second lobe.
    #[serde(default)]
    pub slope: Option<[f64; 2]>,
    /// Second lobe radius for the two-bump scene.
    #[serde(default)]
    pub second_radius: Option<f64>,
    /// Distance between the two lobe centres.
    #[serde(default)]
    pub separation: Option<f64>,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, grid: usize) -> Self {
        Self {
            kind,
            grid,
            center: None,
            radius: None,
            curvature: None,
            slope: None,
            second_radius: None,
            separation: None,
        }
    }

    /// Copy with every default filled in.
    pub fn resolved(&self) -> Self {
        let g = self.grid as f64;
        let mut s = self.clone();
        s.center.get_or_insert([(g - 1.0) / 2.0, (g - 1.0) / 2.0]);
        match self.kind {
            SceneKind::Hemisphere | SceneKind::Paraboloid | SceneKind::PlaneRamp => {
                s.radius.get_or_insert(0.4 * g);
            }
            SceneKind::TwoBump => {
                s.radius.get_or_insert(0.27 * g);
                s.second_radius.get_or_insert(0.2 * g);
                s.separation.get_or_insert(0.36 * g);
                s.slope.get_or_insert([0.0, 0.0]);
            }
        }
        if self.kind == SceneKind::Paraboloid {
            let r = s.radius.unwrap();
            s.curvature.get_or_insert([1.0 / r, 1.0 / r]);
        }
        if self.kind == SceneKind::PlaneRamp {
            s.slope.get_or_insert([0.3, -0.2]);
        }
        s
    }

    /// Lobe centres of the two-bump scene: the larger lobe sits left of the
    /// centre, both shifted slightly off the centre row.
    fn lobes(&self) -> [([f64; 2], f64); 2] {
        let [cx, cy] = self.center.unwrap();
        let (r1, r2, sep) = (self.radius.unwrap(), self.second_radius.unwrap(), self.separation.unwrap());
        let x1 = cx - sep * r2 / (r1 + r2);
        [([x1, cy], r1), ([x1 + sep, cy + 0.05 * sep], r2)]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.resolved();
        if s.grid < 8 {
            return Err(Error::invalid(format!("grid {} too small", s.grid)));
        }
        let g = s.grid as f64;
        let inside = |c: [f64; 2], r: f64| {
            r > 1.0 && c[0] - r >= -0.5 && c[1] - r >= -0.5 && c[0] + r <= g - 0.5 && c[1] + r <= g - 0.5
        };
        let ok = match s.kind {
            SceneKind::Hemisphere | SceneKind::Paraboloid | SceneKind::PlaneRamp => {
                inside(s.center.unwrap(), s.radius.unwrap())
            }
            SceneKind::TwoBump => {
                let [(c1, r1), (c2, r2)] = s.lobes();
                let d = (c1[0] - c2[0]).hypot(c1[1] - c2[1]);
                inside(c1, r1) && inside(c2, r2) && d < r1 + r2 && d > (r1 - r2).abs()
            }
        };
        if !ok {
            return Err(Error::invalid(format!("scene geometry does not fit a {}-pixel grid", s.grid)));
        }
        if let Some([a, b]) = s.curvature {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::invalid("paraboloid curvatures must be positive"));
            }
        }
        Ok(())
    }
}

/// Ground-truth geometry derived in closed form.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub height: HeightMap,
    pub normals: NormalMap,
    pub zenith: Raster,
    pub azimuth: Raster,
    pub mask: Mask,
    /// Convex parts, 1-based; the two-bump lobes are 1 and 2.
    pub parts: ndarray::Array2<u32>,
}

/// Height, gradient and convex-part index at a pixel, or `None` off the
/// silhouette.
fn sample(spec: &SceneSpec, x: f64, y: f64) -> Option<(f64, f64, f64, u32)> {
    let [cx, cy] = spec.center.unwrap();
    let sphere = |c: [f64; 2], r: f64| {
        let (dx, dy) = (x - c[0], y - c[1]);
        let h2 = r * r - dx * dx - dy * dy;
        (h2 > 0.0).then(|| {
            let h = h2.sqrt();
            (h, -dx / h, -dy / h)
        })
    };
    let disk = |r: f64| (x - cx).powi(2) + (y - cy).powi(2) < r * r;
    let whole = |v: Option<(f64, f64, f64)>| v.map(|(h, gx, gy)| (h, gx, gy, 1));
    match spec.kind {
        SceneKind::Hemisphere => whole(sphere([cx, cy], spec.radius.unwrap())),
        SceneKind::Paraboloid => {
            let [a, b] = spec.curvature.unwrap();
            let (dx, dy) = (x - cx, y - cy);
            whole(disk(spec.radius.unwrap()).then(|| (-(a * dx * dx + b * dy * dy), -2.0 * a * dx, -2.0 * b * dy)))
        }
        SceneKind::PlaneRamp => {
            let [a, b] = spec.slope.unwrap();
            whole(disk(spec.radius.unwrap()).then(|| (a * (x - cx) + b * (y - cy), a, b)))
        }
        SceneKind::TwoBump => {
            let [(c1, r1), (c2, r2)] = spec.lobes();
            let [tx, ty] = spec.slope.unwrap();
            let second = sphere(c2, r2).map(|(h, gx, gy)| (h + tx * (x - c2[0]) + ty * (y - c2[1]), gx + tx, gy + ty));
            let tag = |v: (f64, f64, f64), part| (v.0, v.1, v.2, part);
            match (sphere(c1, r1), second) {
                (Some(a), Some(b)) => Some(if b.0 > a.0 { tag(b, 2) } else { tag(a, 1) }),
                (Some(a), None) => Some(tag(a, 1)),
                (None, b) => b.map(|b| tag(b, 2)),
            }
        }
    }
}

pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let spec = spec.resolved();
    let n = spec.grid;
    let mut height = Raster::zeros((n, n));
    let mut normals = NormalMap::from_elem((n, n), [0.0, 0.0, 1.0]);
    let mut zenith = Raster::zeros((n, n));
    let mut azimuth = Raster::zeros((n, n));
    let mut mask = Mask::from_elem((n, n), false);
    let mut parts = ndarray::Array2::<u32>::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            let Some((z, zx, zy, part)) = sample(&spec, c as f64, r as f64) else { continue };
            parts[(r, c)] = part;
            let nn = crate::solver::normal_from_gradient(zx, zy);
            height[(r, c)] = z;
            normals[(r, c)] = nn;
            zenith[(r, c)] = nn[2].clamp(-1.0, 1.0).acos();
            azimuth[(r, c)] = fold_full_period(nn[1].atan2(nn[0]));
            mask[(r, c)] = true;
        }
    }
    Ok(Scene {
        spec,
        height,
        normals,
        zenith,
        azimuth,
        mask,
        parts,
    })
}

/// How the measured AOP relates to the surface azimuth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AopConvention {
    /// AOP equals the azimuth modulo pi (diffuse reflection).
    Parallel,
    /// AOP is perpendicular to the azimuth.
    Perpendicular,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub stack: PolarizedStack,
    /// Noise-free intensity, DOP and AOP that generated the stack.
    pub polar: PolarMaps,
}

/// Renders the four polarizer images. Shadowed pixels are black and leave the
/// mask; noise is additive Gaussian per channel with standard deviation
/// `noise_sigma * max intensity`, clipped at zero.
pub fn render_polarized(
    scene: &Scene,
    material: MaterialParams,
    illum: &Illumination,
    convention: AopConvention,
    noise_sigma: f64,
    seed: u64,
) -> Result<Rendered> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    let dim = scene.mask.dim();
    let mut polar = PolarMaps {
        intensity: Raster::zeros(dim),
        dop: Raster::zeros(dim),
        aop: Raster::zeros(dim),
        clamped_dop: 0,
    };
    let mut mask = scene.mask.clone();
    for (p, m) in mask.indexed_iter_mut() {
        if !*m {
            continue;
        }
        let shade = dot(scene.normals[p], illum.direction);
        if shade <= 0.0 {
            *m = false;
            continue;
        }
        polar.intensity[p] = material.albedo * shade;
        polar.dop[p] = diffuse_dop(scene.zenith[p], material.eta);
        let az = match convention {
            AopConvention::Parallel => scene.azimuth[p],
            AopConvention::Perpendicular => scene.azimuth[p] + std::f64::consts::FRAC_PI_2,
        };
        polar.aop[p] = fold_half_period(az);
    }
    let mut images = POLARIZER_ANGLES.map(|angle| {
        Raster::from_shape_fn(dim, |p| {
            if mask[p] {
                sinusoid(polar.intensity[p], polar.dop[p], polar.aop[p], angle)
            } else {
                0.0
            }
        })
    });
    if noise_sigma > 0.0 {
        let peak = images
            .iter()
            .flat_map(|im| im.iter())
            .fold(0.0f64, |a, &b| a.max(b));
        let normal = Normal::new(0.0, noise_sigma * peak).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for im in images.iter_mut() {
            for v in im.iter_mut() {
                *v = (*v + normal.sample(&mut rng)).max(0.0);
            }
        }
    }
    Ok(Rendered {
        stack: PolarizedStack::new(images, mask)?,
        polar,
    })
}
