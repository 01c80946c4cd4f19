//! Raster aliases and mask utilities shared by every stage.
//!
//! All rasters are row-major `[row, col]`. The x axis runs along columns and
//! the y axis along rows, so a normal `[nx, ny, nz]` is expressed in image
//! coordinates with `nz` pointing toward the camera.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};

pub type Raster = Array2<f64>;
pub type Mask = Array2<bool>;
pub type HeightMap = Array2<f64>;
pub type Normal = [f64; 3];
pub type NormalMap = Array2<Normal>;

pub const NEIGHBORS4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
pub const NEIGHBORS8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub fn dims<T>(a: &Array2<T>) -> (usize, usize) {
    a.dim()
}

pub fn ensure_same_dims<A, B>(expected: &Array2<A>, found: &Array2<B>) -> Result<()> {
    if expected.dim() != found.dim() {
        return Err(Error::DimensionMismatch {
            expected: expected.dim(),
            found: found.dim(),
        });
    }
    Ok(())
}

#[inline]
pub fn offset(
    (r, c): (usize, usize),
    (dr, dc): (isize, isize),
    (rows, cols): (usize, usize),
) -> Option<(usize, usize)> {
    let nr = r as isize + dr;
    let nc = c as isize + dc;
    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
        None
    } else {
        Some((nr as usize, nc as usize))
    }
}

#[inline]
pub fn in_mask(mask: &Mask, p: (usize, usize), d: (isize, isize)) -> Option<(usize, usize)> {
    offset(p, d, mask.dim()).filter(|&q| mask[q])
}

pub fn count(mask: &Mask) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// Mask pixels with at least one 4-neighbor outside the mask or the image.
pub fn boundary(mask: &Mask) -> Mask {
    let mut out = Mask::from_elem(mask.dim(), false);
    for ((r, c), &m) in mask.indexed_iter() {
        if m && NEIGHBORS4
            .iter()
            .any(|&d| in_mask(mask, (r, c), d).is_none())
        {
            out[(r, c)] = true;
        }
    }
    out
}

/// Removes `px` layers of boundary pixels.
pub fn erode(mask: &Mask, px: usize) -> Mask {
    let mut cur = mask.clone();
    for _ in 0..px {
        let rim = boundary(&cur);
        cur.zip_mut_with(&rim, |m, &b| *m = *m && !b);
    }
    cur
}

/// 4-connected component labels (1-based, raster order of first pixel) and the
/// number of components.
pub fn components(mask: &Mask) -> (Array2<u32>, u32) {
    let dim = mask.dim();
    let mut labels = Array2::<u32>::zeros(dim);
    let mut next = 0;
    let mut queue = VecDeque::new();
    for r in 0..dim.0 {
        for c in 0..dim.1 {
            if !mask[(r, c)] || labels[(r, c)] != 0 {
                continue;
            }
            next += 1;
            labels[(r, c)] = next;
            queue.push_back((r, c));
            while let Some(p) = queue.pop_front() {
                for &d in &NEIGHBORS4 {
                    if let Some(q) = in_mask(mask, p, d) {
                        if labels[q] == 0 {
                            labels[q] = next;
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Inclusive-exclusive bounding box `(r0, c0, r1, c1)` of the mask, if any.
pub fn bounding_box(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            bb = Some(match bb {
                None => (r, c, r + 1, c + 1),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r + 1), c1.max(c + 1)),
            });
        }
    }
    bb
}

/// Dense numbering of mask pixels in raster order; the unknown vector of the
/// height solver is laid out this way.
#[derive(Debug, Clone)]
pub struct PixelIndex {
    index: Array2<Option<usize>>,
    pixels: Vec<(usize, usize)>,
}

impl PixelIndex {
    pub fn new(mask: &Mask) -> Self {
        let mut index = Array2::from_elem(mask.dim(), None);
        let mut pixels = Vec::new();
        for ((r, c), &m) in mask.indexed_iter() {
            if m {
                index[(r, c)] = Some(pixels.len());
                pixels.push((r, c));
            }
        }
        Self { index, pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.index.dim()
    }

    #[inline]
    pub fn get(&self, p: (usize, usize)) -> Option<usize> {
        self.index[p]
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> (usize, usize) {
        self.pixels[i]
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn gather(&self, raster: &Raster) -> Vec<f64> {
        self.pixels.iter().map(|&p| raster[p]).collect()
    }

    /// Writes `values` back to a raster; pixels outside the mask get `fill`.
    pub fn scatter(&self, values: &[f64], fill: f64) -> Raster {
        let mut out = Raster::from_elem(self.dim(), fill);
        for (&p, &v) in self.pixels.iter().zip(values) {
            out[p] = v;
        }
        out
    }
}
