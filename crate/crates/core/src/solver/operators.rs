use crate::error::{Error, Result};
use crate::imgproc::gaussian_kernel;
use crate::raster::{in_mask, Mask, PixelIndex, Raster};

/// One sparse row over the unknown heights: `(column, coefficient)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

/// Finite-difference operators on the masked height vector, one row per mask
/// pixel in [`PixelIndex`] order. `x` is the column axis, `y` the row axis.
#[derive(Debug, Clone)]
pub struct GradientOperators {
    pub index: PixelIndex,
    pub dx: Vec<SparseRow>,
    pub dy: Vec<SparseRow>,
    pub smoothing_sigma: f64,
}

impl GradientOperators {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn apply(row: &SparseRow, z: &[f64]) -> f64 {
        row.iter().map(|&(j, v)| v * z[j]).sum()
    }

    /// `(z_x, z_y)` at every mask pixel.
    pub fn gradient(&self, z: &[f64]) -> Vec<(f64, f64)> {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(rx, ry)| (Self::apply(rx, z), Self::apply(ry, z)))
            .collect()
    }

    /// Operators whose unknowns are the gradients themselves, laid out as
    /// `[z_x of every pixel, z_y of every pixel]`. Rows assembled on top of
    /// them can be evaluated at an exact gradient field, which separates the
    /// algebra of a constraint from the truncation error of differencing.
    pub fn pointwise(mask: &Mask) -> Self {
        let index = PixelIndex::new(mask);
        let n = index.len();
        Self {
            dx: (0..n).map(|i| vec![(i, 1.0)]).collect(),
            dy: (0..n).map(|i| vec![(n + i, 1.0)]).collect(),
            index,
            smoothing_sigma: 0.0,
        }
    }

    /// Gradient rasters of a height raster (zero outside the mask).
    pub fn gradient_rasters(&self, height: &Raster) -> (Raster, Raster) {
        let z = self.index.gather(height);
        let g = self.gradient(&z);
        let gx: Vec<f64> = g.iter().map(|v| v.0).collect();
        let gy: Vec<f64> = g.iter().map(|v| v.1).collect();
        (self.index.scatter(&gx, 0.0), self.index.scatter(&gy, 0.0))
    }
}

/// Central differences averaged over transverse neighbors with Gaussian
/// weights; taps whose own stencil leaves the mask are dropped and the rest
/// renormalized. Where the centre stencil itself leaves the mask the operator
/// falls back to a forward or backward difference.
pub fn build_gradient_operators(mask: &Mask, smoothing_sigma: f64) -> Result<GradientOperators> {
    let index = PixelIndex::new(mask);
    if index.len() < 2 {
        return Err(Error::invalid(format!(
            "gradient operators need at least two mask pixels, got {}",
            index.len()
        )));
    }
    let kernel = gaussian_kernel(smoothing_sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut dx = Vec::with_capacity(index.len());
    let mut dy = Vec::with_capacity(index.len());
    for &p in index.pixels() {
        // axis (dr, dc) of the derivative and its transverse direction
        dx.push(derivative_row(mask, &index, p, (0, 1), (1, 0), &kernel, radius));
        dy.push(derivative_row(mask, &index, p, (1, 0), (0, 1), &kernel, radius));
    }
    Ok(GradientOperators {
        index,
        dx,
        dy,
        smoothing_sigma,
    })
}

fn derivative_row(
    mask: &Mask,
    index: &PixelIndex,
    p: (usize, usize),
    axis: (isize, isize),
    across: (isize, isize),
    kernel: &[f64],
    radius: isize,
) -> SparseRow {
    let id = |q: (usize, usize)| index.get(q).expect("pixel in mask");
    let fwd = in_mask(mask, p, axis);
    let bwd = in_mask(mask, p, (-axis.0, -axis.1));
    match (fwd, bwd) {
        (Some(_), Some(_)) => {
            let mut taps = Vec::new();
            let mut total = 0.0;
            for t in -radius..=radius {
                let Some(q) = in_mask(mask, p, (t * across.0, t * across.1)) else {
                    continue;
                };
                let (Some(f), Some(b)) = (in_mask(mask, q, axis), in_mask(mask, q, (-axis.0, -axis.1))) else {
                    continue;
                };
                // transverse taps must connect to p through the mask
                if t != 0 && !transverse_path(mask, p, across, t) {
                    continue;
                }
                let w = kernel[(t + radius) as usize];
                total += w;
                taps.push((id(f), id(b), w));
            }
            let mut row: SparseRow = Vec::with_capacity(taps.len() * 2);
            for (f, b, w) in taps {
                let w = w / total;
                row.push((f, 0.5 * w));
                row.push((b, -0.5 * w));
            }
            merge_duplicates(row)
        }
        (Some(f), None) => vec![(id(f), 1.0), (id(p), -1.0)],
        (None, Some(b)) => vec![(id(p), 1.0), (id(b), -1.0)],
        (None, None) => Vec::new(),
    }
}

fn transverse_path(mask: &Mask, p: (usize, usize), across: (isize, isize), t: isize) -> bool {
    let step = t.signum();
    (1..=t.abs()).all(|k| in_mask(mask, p, (k * step * across.0, k * step * across.1)).is_some())
}

fn merge_duplicates(mut row: SparseRow) -> SparseRow {
    row.sort_by_key(|e| e.0);
    let mut out: SparseRow = Vec::with_capacity(row.len());
    for (j, v) in row {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += v,
            _ => out.push((j, v)),
        }
    }
    out
}

/// Unit normals `[-z_x, -z_y, 1] / sqrt(1 + |grad z|^2)` from a height raster.
pub fn normals_from_height(height: &Raster, ops: &GradientOperators) -> crate::raster::NormalMap {
    let z = ops.index.gather(height);
    let grad = ops.gradient(&z);
    let mut out = crate::raster::NormalMap::from_elem(height.dim(), [0.0, 0.0, 1.0]);
    for (i, &(gx, gy)) in grad.iter().enumerate() {
        out[ops.index.pixel(i)] = normal_from_gradient(gx, gy);
    }
    out
}

#[inline]
pub fn normal_from_gradient(gx: f64, gy: f64) -> [f64; 3] {
    let n = (1.0 + gx * gx + gy * gy).sqrt();
    [-gx / n, -gy / n, 1.0 / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::erode;

    fn full(n: usize) -> Mask {
        Mask::from_elem((n, n), true)
    }

    #[test]
    fn pointwise_reads_gradients_back() {
        let mut mask = full(3);
        mask[(1, 1)] = false;
        let ops = GradientOperators::pointwise(&mask);
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let g = ops.gradient(&v);
        assert_eq!(g.len(), 8);
        assert_eq!(g[3], (3.0, 11.0));
    }

    fn sample(mask: &Mask, f: impl Fn(f64, f64) -> f64) -> Raster {
        Raster::from_shape_fn(mask.dim(), |(r, c)| f(c as f64, r as f64))
    }

    #[test]
    fn exact_on_linear_functions() {
        let mask = full(32);
        let ops = build_gradient_operators(&mask, 0.5).unwrap();
        let (gx, gy) = ops.gradient_rasters(&sample(&mask, |x, y| 3.0 * x + 2.0 * y + 7.0));
        for (p, &m) in mask.indexed_iter() {
            if m {
                assert!((gx[p] - 3.0).abs() < 1e-10 && (gy[p] - 2.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constants_have_zero_gradient_and_rows_sum_to_zero() {
        let mut mask = full(20);
        mask[(5, 5)] = false;
        mask.slice_mut(ndarray::s![12.., 15..]).fill(false);
        let ops = build_gradient_operators(&mask, 0.5).unwrap();
        for row in ops.dx.iter().chain(&ops.dy) {
            assert!(row.iter().map(|e| e.1).sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn central_differences_exact_on_quadratics() {
        let mask = full(32);
        let ops = build_gradient_operators(&mask, 0.5).unwrap();
        let (gx, _) = ops.gradient_rasters(&sample(&mask, |x, _| x * x));
        let interior = erode(&mask, 1);
        for (p, &m) in interior.indexed_iter() {
            if m {
                assert!((gx[p] - 2.0 * p.1 as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_pixel_mask_rejected() {
        let mut mask = Mask::from_elem((5, 5), false);
        mask[(2, 2)] = true;
        assert!(build_gradient_operators(&mask, 0.5).unwrap_err().is_invalid_input());
    }

    #[test]
    fn second_order_convergence() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (a, b, c, d) = (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..6.0),
            );
            let f = |x: f64, y: f64| (a * x + c).sin() * (b * y + d).cos();
            let fx = |x: f64, y: f64| a * (a * x + c).cos() * (b * y + d).cos();
            let err = |n: usize| {
                // unit square sampled with spacing h
                let h = 1.0 / (n - 1) as f64;
                let mask = full(n);
                let ops = build_gradient_operators(&mask, 0.5).unwrap();
                let z = sample(&mask, |x, y| f(x * h, y * h));
                let (gx, _) = ops.gradient_rasters(&z);
                let mut e: f64 = 0.0;
                for (p, &m) in erode(&mask, 3).indexed_iter() {
                    if m {
                        let (x, y) = (p.1 as f64 * h, p.0 as f64 * h);
                        e = e.max((gx[p] / h - fx(x, y)).abs());
                    }
                }
                e
            };
            let order = (err(33) / err(65)).log2();
            assert!((1.7..=2.3).contains(&order), "order {order}");
        }
    }
}
