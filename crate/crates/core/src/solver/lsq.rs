use faer::linalg::solvers::Solve;
use faer::sparse::linalg::LltError;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use super::operators::GradientOperators;
use super::rows::{ConstraintRows, RowKind};
use crate::error::{Error, Result};
use crate::raster::{components, Mask};

/// Per-kind row multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KindWeights {
    pub azimuth: f64,
    pub intensity_ratio: f64,
    pub mfcp: f64,
    pub laplacian: f64,
}

impl Default for KindWeights {
    fn default() -> Self {
        Self {
            azimuth: 1.0,
            intensity_ratio: 0.5,
            mfcp: 1.0,
            laplacian: 0.1,
        }
    }
}

impl KindWeights {
    pub fn get(&self, kind: RowKind) -> f64 {
        match kind {
            RowKind::Azimuth => self.azimuth,
            RowKind::IntensityRatio => self.intensity_ratio,
            RowKind::Mfcp => self.mfcp,
            RowKind::Laplacian => self.laplacian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in RowKind::ALL {
            let w = self.get(k);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("weight for {} rows must be >= 0, got {w}", k.name())));
            }
        }
        Ok(())
    }
}

/// Weighted rows plus the connected components used for gauge fixing.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub unknowns: usize,
    pub rows: ConstraintRows,
    pub weights: KindWeights,
    pub components: Vec<Vec<usize>>,
}

impl ConstraintSystem {
    pub fn new(mask: &Mask, ops: &GradientOperators, rows: ConstraintRows, weights: KindWeights) -> Self {
        let (comp, n) = components(mask);
        let mut groups = vec![Vec::new(); n as usize];
        for (i, &p) in ops.index.pixels().iter().enumerate() {
            groups[comp[p] as usize - 1].push(i);
        }
        Self {
            unknowns: ops.len(),
            rows,
            weights,
            components: groups,
        }
    }

    /// Weighted sum of squared residuals.
    pub fn objective(&self, z: &[f64]) -> f64 {
        self.rows
            .residuals(z)
            .iter()
            .zip(&self.rows.tags)
            .map(|(r, &t)| (self.weights.get(t) * r).powi(2))
            .sum()
    }

    pub fn objective_by_kind(&self, z: &[f64]) -> Vec<(RowKind, f64)> {
        let res = self.rows.residuals(z);
        RowKind::ALL
            .iter()
            .map(|&k| {
                let w = self.weights.get(k);
                let s = res
                    .iter()
                    .zip(&self.rows.tags)
                    .filter(|(_, &t)| t == k)
                    .map(|(r, _)| (w * r).powi(2))
                    .sum();
                (k, s)
            })
            .collect()
    }

    fn row_mix(&self) -> String {
        RowKind::ALL
            .iter()
            .map(|&k| format!("{}={} (w={})", k.name(), self.rows.count(k), self.weights.get(k)))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Least-squares heights from the normal equations by sparse Cholesky, with
/// one step of iterative refinement. One pin row per connected component
/// fixes the additive gauge, and each component is shifted to zero mean.
pub fn solve_height(system: &ConstraintSystem) -> Result<Vec<f64>> {
    let n = system.unknowns;
    if n == 0 {
        return Err(Error::invalid("no unknowns to solve for"));
    }
    let mut triplets = Vec::new();
    let mut rhs = Vec::new();
    let mut m = 0usize;
    for ((row, &b), &t) in system.rows.rows.iter().zip(&system.rows.rhs).zip(&system.rows.tags) {
        let w = system.weights.get(t);
        if w == 0.0 || row.is_empty() {
            continue;
        }
        for &(j, v) in row {
            if v != 0.0 {
                triplets.push(Triplet::new(m, j, w * v));
            }
        }
        rhs.push(w * b);
        m += 1;
    }
    // a dense mean row would fill the factor, so pin one pixel per component
    // and recentre afterwards
    for group in &system.components {
        triplets.push(Triplet::new(m, group[group.len() / 2], 1.0));
        rhs.push(0.0);
        m += 1;
    }
    let rank_error = || {
        Error::RankDeficient(format!(
            "system is numerically rank deficient beyond the gauge ({})",
            system.row_mix()
        ))
    };
    if m < n {
        return Err(Error::RankDeficient(format!(
            "{m} rows for {n} unknowns ({})",
            system.row_mix()
        )));
    }
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(m, n, &triplets)
        .map_err(|e| Error::Solver(format!("assembly: {e:?}")))?;
    let normal = gram_lower(&a, n)?;
    let llt = match normal.sp_cholesky(Side::Lower) {
        Ok(f) => f,
        Err(LltError::Numeric(_)) => return Err(rank_error()),
        Err(e) => return Err(Error::Solver(format!("sparse Cholesky: {e:?}"))),
    };
    let b = Mat::from_fn(m, 1, |i, _| rhs[i]);
    let at = a.transpose();
    let mut x = llt.solve(&(at * &b));
    let r = &b - &a * &x;
    x += llt.solve(&(at * &r));
    let z: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(rank_error());
    }

    // A nearly singular factor still "succeeds". Probe it: for full column
    // rank the solve reproduces any u from A^T A u; a null direction shows up
    // as a mismatch.
    let u = Mat::from_fn(n, 1, |i, _| probe_value(i));
    let back = llt.solve(&(at * (&a * &u)));
    let u_norm = (0..n).map(|i| u[(i, 0)].powi(2)).sum::<f64>().sqrt();
    let err = (0..n).map(|i| (back[(i, 0)] - u[(i, 0)]).powi(2)).sum::<f64>().sqrt();
    if !(err <= 1e-6 * u_norm) {
        return Err(rank_error());
    }
    let mut z = z;
    for group in &system.components {
        let mean = group.iter().map(|&j| z[j]).sum::<f64>() / group.len() as f64;
        for &j in group {
            z[j] -= mean;
        }
    }
    Ok(z)
}

/// Lower triangle of `A^T A`, accumulated row by row.
fn gram_lower(a: &SparseColMat<usize, f64>, n: usize) -> Result<SparseColMat<usize, f64>> {
    // transpose to row-major access: columns of A^T are rows of A
    let rows = a.to_row_major().map_err(|e| Error::Solver(format!("transpose: {e:?}")))?;
    let mut triplets = Vec::new();
    for i in 0..rows.nrows() {
        let cols = rows.col_idx_of_row_raw(i);
        let vals = rows.val_of_row(i);
        for (p, (&j, &vj)) in cols.iter().zip(vals).enumerate() {
            for (&k, &vk) in cols[..=p].iter().zip(&vals[..=p]) {
                let (hi, lo) = if j >= k { (j, k) } else { (k, j) };
                triplets.push(Triplet::new(hi, lo, vj * vk));
            }
        }
    }
    SparseColMat::try_new_from_triplets(n, n, &triplets).map_err(|e| Error::Solver(format!("assembly: {e:?}")))
}

/// Deterministic pseudo-random values in [-1, 1).
fn probe_value(i: usize) -> f64 {
    let mut x = (i as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}
