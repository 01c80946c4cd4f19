//! Low-level raster filters: Gaussian smoothing, exact Euclidean distance
//! transform with nearest-feature indices, hole filling, and a masked guided
//! filter.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::raster::{in_mask, Mask, Raster, NEIGHBORS4};

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with zero padding outside the raster.
pub fn gaussian_blur(src: &Raster, sigma: f64) -> Raster {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (rows, cols) = src.dim();
    let mut tmp = Raster::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let cc = c as isize + i as isize - radius;
                if cc >= 0 && (cc as usize) < cols {
                    acc += w * src[(r, cc as usize)];
                }
            }
            tmp[(r, c)] = acc;
        }
    }
    let mut out = Raster::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let rr = r as isize + i as isize - radius;
                if rr >= 0 && (rr as usize) < rows {
                    acc += w * tmp[(rr as usize, c)];
                }
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Exact Euclidean distance transform to the `features` pixels together with
/// the coordinates of the nearest feature (Felzenszwalb-Huttenlocher lower
/// envelope, applied per column then per row). Pixels get `None` when the
/// raster holds no feature at all.
pub fn distance_transform(features: &Mask) -> (Raster, Array2<Option<(usize, usize)>>) {
    let (rows, cols) = features.dim();
    // column pass: nearest feature row within the same column
    let mut col_d2 = Array2::<f64>::from_elem((rows, cols), f64::INFINITY);
    let mut col_src = Array2::<usize>::zeros((rows, cols));
    for c in 0..cols {
        let mut last: Option<usize> = None;
        for r in 0..rows {
            if features[(r, c)] {
                last = Some(r);
            }
            if let Some(q) = last {
                let d = (r - q) as f64;
                col_d2[(r, c)] = d * d;
                col_src[(r, c)] = q;
            }
        }
        let mut last: Option<usize> = None;
        for r in (0..rows).rev() {
            if features[(r, c)] {
                last = Some(r);
            }
            if let Some(q) = last {
                let d = (q - r) as f64;
                if d * d < col_d2[(r, c)] {
                    col_d2[(r, c)] = d * d;
                    col_src[(r, c)] = q;
                }
            }
        }
    }

    let mut dist = Raster::from_elem((rows, cols), f64::INFINITY);
    let mut nearest = Array2::from_elem((rows, cols), None);
    let mut hull: Vec<usize> = Vec::with_capacity(cols);
    let mut starts: Vec<f64> = Vec::with_capacity(cols);
    for r in 0..rows {
        hull.clear();
        starts.clear();
        let f = |q: usize| col_d2[(r, q)];
        for q in 0..cols {
            if !f(q).is_finite() {
                continue;
            }
            loop {
                match hull.last() {
                    None => {
                        hull.push(q);
                        starts.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let s = ((f(q) + (q * q) as f64) - (f(p) + (p * p) as f64))
                            / (2.0 * (q as f64 - p as f64));
                        if s <= *starts.last().unwrap() {
                            hull.pop();
                            starts.pop();
                        } else {
                            hull.push(q);
                            starts.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if hull.is_empty() {
            continue;
        }
        let mut k = 0;
        for c in 0..cols {
            while k + 1 < hull.len() && starts[k + 1] < c as f64 {
                k += 1;
            }
            let q = hull[k];
            let dc = c as f64 - q as f64;
            dist[(r, c)] = (dc * dc + f(q)).sqrt();
            nearest[(r, c)] = Some((col_src[(r, q)], q));
        }
    }
    (dist, nearest)
}

/// Fills the holes of `region`: pixels outside it that cannot reach the image
/// border through other non-region pixels (morphological reconstruction of the
/// complement from a border marker).
pub fn fill_holes(region: &Mask) -> Mask {
    let (rows, cols) = region.dim();
    let outside = region.mapv(|v| !v);
    let mut reached = Mask::from_elem((rows, cols), false);
    let mut queue = VecDeque::new();
    for r in 0..rows {
        for c in 0..cols {
            let on_border = r == 0 || c == 0 || r + 1 == rows || c + 1 == cols;
            if on_border && outside[(r, c)] {
                reached[(r, c)] = true;
                queue.push_back((r, c));
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        for &d in &NEIGHBORS4 {
            if let Some(q) = in_mask(&outside, p, d) {
                if !reached[q] {
                    reached[q] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    reached.mapv(|v| !v)
}

/// Summed-area table with a zero guard row and column.
struct Integral {
    table: Array2<f64>,
}

impl Integral {
    fn new(src: &Raster) -> Self {
        let (rows, cols) = src.dim();
        let mut table = Array2::<f64>::zeros((rows + 1, cols + 1));
        for r in 0..rows {
            let mut run = 0.0;
            for c in 0..cols {
                run += src[(r, c)];
                table[(r + 1, c + 1)] = table[(r, c + 1)] + run;
            }
        }
        Self { table }
    }

    fn window(&self, r: usize, c: usize, radius: usize) -> f64 {
        let (rows, cols) = (self.table.nrows() - 1, self.table.ncols() - 1);
        let r0 = r.saturating_sub(radius);
        let c0 = c.saturating_sub(radius);
        let r1 = (r + radius + 1).min(rows);
        let c1 = (c + radius + 1).min(cols);
        self.table[(r1, c1)] - self.table[(r0, c1)] - self.table[(r1, c0)] + self.table[(r0, c0)]
    }
}

/// Mean of `src` over each `(2r+1)^2` window restricted to `weight > 0`
/// pixels. Windows without support yield 0.
pub fn masked_box_mean(src: &Raster, weight: &Raster, radius: usize) -> Raster {
    let num = Integral::new(&(src * weight));
    let den = Integral::new(weight);
    let mut out = Raster::zeros(src.dim());
    for ((r, c), v) in out.indexed_iter_mut() {
        let d = den.window(r, c, radius);
        if d > 0.0 {
            *v = num.window(r, c, radius) / d;
        }
    }
    out
}

/// Guided filter of `input` steered by `guide`, with window statistics taken
/// only over mask pixels.
pub fn guided_filter(input: &Raster, guide: &Raster, mask: &Mask, radius: usize, eps: f64) -> Raster {
    let w = mask.mapv(|m| if m { 1.0 } else { 0.0 });
    let mean_i = masked_box_mean(guide, &w, radius);
    let mean_p = masked_box_mean(input, &w, radius);
    let corr_ii = masked_box_mean(&(guide * guide), &w, radius);
    let corr_ip = masked_box_mean(&(guide * input), &w, radius);
    let var_i = &corr_ii - &(&mean_i * &mean_i);
    let cov_ip = &corr_ip - &(&mean_i * &mean_p);
    let a = ndarray::Zip::from(&cov_ip)
        .and(&var_i)
        .map_collect(|&cv, &vr| cv / (vr.max(0.0) + eps));
    let b = &mean_p - &(&a * &mean_i);
    let mean_a = masked_box_mean(&a, &w, radius);
    let mean_b = masked_box_mean(&b, &w, radius);
    let mut out = &(&mean_a * guide) + &mean_b;
    out.zip_mut_with(mask, |v, &m| {
        if !m {
            *v = 0.0
        }
    });
    out
}
