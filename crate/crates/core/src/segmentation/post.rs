use std::collections::BTreeMap;

use ndarray::{s, Array2};

use super::features::{feature_distance, FeatureField};
use super::grow::RegionLabels;
use super::SegConfig;
use crate::error::Result;
use crate::imgproc::{fill_holes, gaussian_blur, gaussian_kernel};
use crate::raster::{ensure_same_dims, offset, Mask, Raster, NEIGHBORS4, NEIGHBORS8};

/// Clean-up after growth: per-region hole filling, merging across
/// low-contrast boundaries, merging of regions below `min_region_px`, Gaussian boundary smoothing with argmax relabeling, then
/// 4-connectivity repair and compact renumbering.
pub fn post_process(
    labels: &RegionLabels,
    field: &FeatureField,
    mask: &Mask,
    cfg: &SegConfig,
) -> Result<RegionLabels> {
    ensure_same_dims(mask, &labels.labels)?;
    ensure_same_dims(mask, &field.rho)?;
    cfg.validate()?;
    let field = super::grow::prepared_field(field, mask, cfg);
    let mut lab = labels.labels.clone();
    lab.zip_mut_with(mask, |l, &m| {
        if !m {
            *l = 0
        }
    });
    fill_region_holes(&mut lab, mask);
    if let Some(t) = cfg.merge_contrast {
        let ctx = super::grow::GrowthContext::new(&field, mask, cfg);
        let scale = median_step(mask, &ctx);
        if scale > 0.0 {
            let edges = edge_map(mask, &ctx, cfg.edge_split * scale);
            split_at_edges(&mut lab, mask, &ctx, &edges);
            merge_low_contrast(&mut lab, &ctx, t * scale);
        }
        // splitting can cut out islands, typically around surface apexes
        fill_region_holes(&mut lab, mask);
    }
    merge_small(&mut lab, &field, cfg.min_region_px);
    if cfg.smoothing_sigma > 0.0 {
        smooth_boundaries(&mut lab, mask, cfg.smoothing_sigma);
    }
    enforce_connectivity(&mut lab);
    Ok(compact(lab))
}

fn label_count(lab: &Array2<u32>) -> usize {
    lab.iter().copied().max().unwrap_or(0) as usize
}

/// Inclusive-exclusive boxes per label (index `label - 1`).
fn label_boxes(lab: &Array2<u32>) -> Vec<Option<(usize, usize, usize, usize)>> {
    let mut boxes: Vec<Option<(usize, usize, usize, usize)>> = vec![None; label_count(lab)];
    for ((r, c), &l) in lab.indexed_iter() {
        if l == 0 {
            continue;
        }
        let b = &mut boxes[l as usize - 1];
        *b = Some(match *b {
            None => (r, c, r + 1, c + 1),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r + 1), c1.max(c + 1)),
        });
    }
    boxes
}

fn fill_region_holes(lab: &mut Array2<u32>, mask: &Mask) {
    let boxes = label_boxes(lab);
    for (i, bb) in boxes.into_iter().enumerate() {
        let Some((r0, c0, r1, c1)) = bb else { continue };
        let label = i as u32 + 1;
        // Holes cannot touch the box edge, so filling inside the box suffices.
        let view = lab.slice(s![r0..r1, c0..c1]);
        let region = view.mapv(|l| l == label);
        let filled = fill_holes(&region);
        for ((r, c), &f) in filled.indexed_iter() {
            let p = (r0 + r, c0 + c);
            if f && !region[(r, c)] && mask[p] {
                lab[p] = label;
            }
        }
    }
}

/// Mean weighted feature step between 4-adjacent pixels across each
/// boundary between distinct regions, keyed by the ordered label pair.
fn boundary_contrast(lab: &Array2<u32>, ctx: &super::grow::GrowthContext) -> BTreeMap<(u32, u32), (f64, usize)> {
    let dim = lab.dim();
    let mut edges = BTreeMap::new();
    for ((r, c), &a) in lab.indexed_iter() {
        if a == 0 {
            continue;
        }
        for d in [(0isize, 1isize), (1, 0)] {
            let Some(q) = offset((r, c), d, dim) else { continue };
            let b = lab[q];
            if b == 0 || b == a {
                continue;
            }
            let step = pair_step(ctx, (r, c), q);
            let e = edges.entry((a.min(b), a.max(b))).or_insert((0.0, 0));
            e.0 += step;
            e.1 += 1;
        }
    }
    edges
}

fn pair_step(ctx: &super::grow::GrowthContext, p: (usize, usize), q: (usize, usize)) -> f64 {
    let (wp, wq) = (ctx.weights[p], ctx.weights[q]);
    let w: [f64; 4] = std::array::from_fn(|k| 0.5 * (wp[k] + wq[k]));
    feature_distance(&ctx.features[p], &ctx.features[q], &w)
}

/// Median weighted feature step between 4-adjacent mask pixels: the
/// resolution-dependent scale against which edges and boundaries are judged.
fn median_step(mask: &Mask, ctx: &super::grow::GrowthContext) -> f64 {
    let dim = mask.dim();
    let mut steps = Vec::new();
    for ((r, c), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for d in [(0isize, 1isize), (1, 0)] {
            if let Some(q) = offset((r, c), d, dim).filter(|&q| mask[q]) {
                steps.push(pair_step(ctx, (r, c), q));
            }
        }
    }
    if steps.is_empty() {
        return 0.0;
    }
    super::features::quantile(&mut steps, 0.5)
}

/// Pixels with a step above `threshold` to some neighbor, dilated by one
/// pixel so that short gaps along an edge are closed.
fn edge_map(mask: &Mask, ctx: &super::grow::GrowthContext, threshold: f64) -> Mask {
    let dim = mask.dim();
    let mut raw = Mask::from_elem(dim, false);
    for ((r, c), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for d in [(0isize, 1isize), (1, 0)] {
            if let Some(q) = offset((r, c), d, dim).filter(|&q| mask[q]) {
                if pair_step(ctx, (r, c), q) > threshold {
                    raw[(r, c)] = true;
                    raw[q] = true;
                }
            }
        }
    }
    Mask::from_shape_fn(dim, |p| {
        mask[p] && (raw[p] || NEIGHBORS8.iter().any(|&d| offset(p, d, dim).is_some_and(|q| raw[q])))
    })
}

/// Splits every region into its pieces off the edge map, then hands edge
/// pixels to the adjacent piece with the closest feature, breadth first. Growth
/// that leaked through a weak spot of an edge thus no longer bridges it.
fn split_at_edges(lab: &mut Array2<u32>, mask: &Mask, ctx: &super::grow::GrowthContext, edges: &Mask) {
    let dim = lab.dim();
    let old = lab.clone();
    let mut out = Array2::<u32>::zeros(dim);
    let mut next = 0;
    let mut stack = Vec::new();
    for ((r, c), &l) in old.indexed_iter() {
        if l == 0 || edges[(r, c)] || out[(r, c)] != 0 {
            continue;
        }
        next += 1;
        out[(r, c)] = next;
        stack.push((r, c));
        while let Some(p) = stack.pop() {
            for &d in &NEIGHBORS4 {
                let Some(q) = offset(p, d, dim) else { continue };
                if old[q] == l && !edges[q] && out[q] == 0 {
                    out[q] = next;
                    stack.push(q);
                }
            }
        }
    }
    // edge pixels, layer by layer from the pieces inward
    loop {
        let mut assign = Vec::new();
        for ((r, c), &m) in mask.indexed_iter() {
            if !m || out[(r, c)] != 0 {
                continue;
            }
            let best = NEIGHBORS4
                .iter()
                .filter_map(|&d| offset((r, c), d, dim))
                .filter(|&q| out[q] != 0)
                .map(|q| (pair_step(ctx, (r, c), q), out[q]))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((_, l)) = best {
                assign.push(((r, c), l));
            }
        }
        if assign.is_empty() {
            break;
        }
        for (p, l) in assign {
            out[p] = l;
        }
    }
    // a piece made only of edge pixels cannot be reached; keep its old label
    for (p, &m) in mask.indexed_iter() {
        if m && out[p] == 0 {
            next += 1;
            out[p] = next;
        }
    }
    *lab = out;
}

/// Shorter shared boundaries are too weak evidence for a merge: a few pixels
/// of leaked growth must not join two otherwise separated parts.
const MIN_SHARED_BOUNDARY: usize = 10;

/// Greedily merges the adjacent pair with the weakest boundary while its mean
/// step stays below `threshold`. Boundary statistics are additive, so merged
/// regions inherit the sums of both parents.
fn merge_low_contrast(lab: &mut Array2<u32>, ctx: &super::grow::GrowthContext, threshold: f64) {
    let mut edges = boundary_contrast(lab, ctx);
    let mut parent: Vec<u32> = (0..=label_count(lab) as u32).collect();
    loop {
        let weakest = edges
            .iter()
            .filter(|(_, &(_, n))| n >= MIN_SHARED_BOUNDARY)
            .map(|(&k, &(sum, n))| (sum / n as f64, k))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let Some((mean, (keep, gone))) = weakest else { break };
        if mean >= threshold {
            break;
        }
        parent[gone as usize] = keep;
        let old = std::mem::take(&mut edges);
        for ((a, b), (sum, n)) in old {
            let (a, b) = (if a == gone { keep } else { a }, if b == gone { keep } else { b });
            if a == b {
                continue;
            }
            let e = edges.entry((a.min(b), a.max(b))).or_insert((0.0, 0));
            e.0 += sum;
            e.1 += n;
        }
    }
    let root = |mut l: u32| {
        while parent[l as usize] != l {
            l = parent[l as usize];
        }
        l
    };
    lab.mapv_inplace(|l| if l == 0 { 0 } else { root(l) });
}

fn merge_small(lab: &mut Array2<u32>, field: &FeatureField, min_px: usize) {
    if min_px <= 1 {
        return;
    }
    let k = label_count(lab);
    let dim = lab.dim();
    let mut pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k];
    let mut sums = vec![[0.0f64; 4]; k];
    for ((r, c), &l) in lab.indexed_iter() {
        if l > 0 {
            pixels[l as usize - 1].push((r, c));
            let f = field.at((r, c));
            for j in 0..4 {
                sums[l as usize - 1][j] += f[j];
            }
        }
    }
    loop {
        let mut order: Vec<usize> = (0..k)
            .filter(|&i| !pixels[i].is_empty() && pixels[i].len() < min_px)
            .collect();
        order.sort_by_key(|&i| (pixels[i].len(), i));
        let mut changed = false;
        for i in order {
            if pixels[i].is_empty() || pixels[i].len() >= min_px {
                continue;
            }
            let label = i as u32 + 1;
            let mut neighbors: Vec<u32> = Vec::new();
            for &p in &pixels[i] {
                for &d in &NEIGHBORS4 {
                    if let Some(q) = offset(p, d, dim) {
                        let l = lab[q];
                        if l != 0 && l != label && !neighbors.contains(&l) {
                            neighbors.push(l);
                        }
                    }
                }
            }
            let mean = |j: usize| {
                let n = pixels[j].len() as f64;
                sums[j].map(|s| s / n)
            };
            let own = mean(i);
            let best = neighbors
                .iter()
                .map(|&l| {
                    let m = mean(l as usize - 1);
                    let d: f64 = own.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum();
                    (d, l)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let Some((_, target)) = best else { continue };
            let t = target as usize - 1;
            let moved = std::mem::take(&mut pixels[i]);
            for &p in &moved {
                lab[p] = target;
            }
            for j in 0..4 {
                sums[t][j] += sums[i][j];
                sums[i][j] = 0.0;
            }
            pixels[t].extend(moved);
            changed = true;
        }
        if !changed {
            break;
        }
    }
}

/// Blurs each region's indicator and relabels every mask pixel by argmax;
/// ties keep the current label.
fn smooth_boundaries(lab: &mut Array2<u32>, mask: &Mask, sigma: f64) {
    let (rows, cols) = lab.dim();
    let pad = gaussian_kernel(sigma).len() / 2;
    let boxes = label_boxes(lab);
    let mut best = Raster::from_elem((rows, cols), f64::NEG_INFINITY);
    let mut best_label = Array2::<u32>::zeros((rows, cols));
    let current = lab.clone();
    for (i, bb) in boxes.into_iter().enumerate() {
        let Some((r0, c0, r1, c1)) = bb else { continue };
        let label = i as u32 + 1;
        let (r0, c0) = (r0.saturating_sub(pad), c0.saturating_sub(pad));
        let (r1, c1) = ((r1 + pad).min(rows), (c1 + pad).min(cols));
        let indicator = current
            .slice(s![r0..r1, c0..c1])
            .mapv(|l| if l == label { 1.0 } else { 0.0 });
        let blurred = gaussian_blur(&indicator, sigma);
        for ((r, c), &v) in blurred.indexed_iter() {
            let p = (r0 + r, c0 + c);
            if !mask[p] || v <= 0.0 {
                continue;
            }
            let b = best[p];
            if v > b || (v == b && current[p] == label) {
                best[p] = v;
                best_label[p] = label;
            }
        }
    }
    for ((p, l), &m) in lab.indexed_iter_mut().zip(mask.iter()) {
        if m && best_label[p] != 0 {
            *l = best_label[p];
        }
    }
}

/// Same-label 4-connected pieces: piece id per pixel and the label of each piece.
fn pieces(lab: &Array2<u32>) -> (Array2<usize>, Vec<u32>, Vec<usize>) {
    let dim = lab.dim();
    let mut id = Array2::from_elem(dim, usize::MAX);
    let mut piece_label = Vec::new();
    let mut piece_size = Vec::new();
    let mut stack = Vec::new();
    for r in 0..dim.0 {
        for c in 0..dim.1 {
            let l = lab[(r, c)];
            if l == 0 || id[(r, c)] != usize::MAX {
                continue;
            }
            let pid = piece_label.len();
            piece_label.push(l);
            let mut size = 0;
            id[(r, c)] = pid;
            stack.push((r, c));
            while let Some(p) = stack.pop() {
                size += 1;
                for &d in &NEIGHBORS4 {
                    if let Some(q) = offset(p, d, dim) {
                        if lab[q] == l && id[q] == usize::MAX {
                            id[q] = pid;
                            stack.push(q);
                        }
                    }
                }
            }
            piece_size.push(size);
        }
    }
    (id, piece_label, piece_size)
}

/// Keeps the largest piece of every label; other pieces join the adjacent
/// kept region they share the longest border with, or get fresh labels.
fn enforce_connectivity(lab: &mut Array2<u32>) {
    let dim = lab.dim();
    loop {
        let (id, piece_label, piece_size) = pieces(lab);
        let k = label_count(lab);
        let mut main: Vec<Option<usize>> = vec![None; k];
        for (pid, &l) in piece_label.iter().enumerate() {
            let slot = &mut main[l as usize - 1];
            if slot.is_none_or(|m| piece_size[pid] > piece_size[m]) {
                *slot = Some(pid);
            }
        }
        let is_main = |pid: usize| main[piece_label[pid] as usize - 1] == Some(pid);
        let orphans: Vec<usize> = (0..piece_label.len()).filter(|&p| !is_main(p)).collect();
        if orphans.is_empty() {
            return;
        }
        // contacts[orphan] -> (label, count)
        let mut contacts: Vec<Vec<(u32, usize)>> = vec![Vec::new(); piece_label.len()];
        for ((r, c), &pid) in id.indexed_iter() {
            if pid == usize::MAX || is_main(pid) {
                continue;
            }
            for &d in &NEIGHBORS4 {
                if let Some(q) = offset((r, c), d, dim) {
                    let qp = id[q];
                    if qp != usize::MAX && qp != pid && is_main(qp) {
                        let l = piece_label[qp];
                        match contacts[pid].iter_mut().find(|(x, _)| *x == l) {
                            Some(e) => e.1 += 1,
                            None => contacts[pid].push((l, 1)),
                        }
                    }
                }
            }
        }
        let mut target: Vec<Option<u32>> = vec![None; piece_label.len()];
        let mut any = false;
        for &o in &orphans {
            target[o] = contacts[o]
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|e| e.0);
            any |= target[o].is_some();
        }
        let mut fresh = k as u32;
        if !any {
            for &o in &orphans {
                fresh += 1;
                target[o] = Some(fresh);
            }
        }
        for (p, l) in lab.indexed_iter_mut() {
            let pid = id[p];
            if pid != usize::MAX {
                if let Some(t) = target[pid] {
                    *l = t;
                }
            }
        }
    }
}

/// Renumbers labels 1..K in raster order of first appearance.
fn compact(mut lab: Array2<u32>) -> RegionLabels {
    let mut map = vec![0u32; label_count(&lab) + 1];
    let mut next = 0;
    for l in lab.iter_mut() {
        if *l == 0 {
            continue;
        }
        if map[*l as usize] == 0 {
            next += 1;
            map[*l as usize] = next;
        }
        *l = map[*l as usize];
    }
    RegionLabels {
        labels: lab,
        region_count: next,
    }
}

/// Number of 4-adjacent pixel pairs carrying different non-zero labels.
pub fn boundary_length(labels: &Array2<u32>) -> usize {
    let (rows, cols) = labels.dim();
    let mut n = 0;
    for r in 0..rows {
        for c in 0..cols {
            let l = labels[(r, c)];
            if l == 0 {
                continue;
            }
            if c + 1 < cols && labels[(r, c + 1)] != 0 && labels[(r, c + 1)] != l {
                n += 1;
            }
            if r + 1 < rows && labels[(r + 1, c)] != 0 && labels[(r + 1, c)] != l {
                n += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::components;

    fn flat_field(n: usize) -> FeatureField {
        FeatureField {
            rho: Raster::zeros((n, n)),
            cos2: Raster::ones((n, n)),
            sin2: Raster::zeros((n, n)),
            grad: Raster::zeros((n, n)),
        }
    }

    fn run(lab: Array2<u32>, mask: &Mask, min_region_px: usize) -> RegionLabels {
        let n = lab.nrows();
        let cfg = SegConfig {
            min_region_px,
            ..SegConfig::default()
        };
        let count = lab.iter().copied().max().unwrap();
        let labels = RegionLabels {
            labels: lab,
            region_count: count,
        };
        post_process(&labels, &flat_field(n), mask, &cfg).unwrap()
    }

    fn assert_invariants(out: &RegionLabels, mask: &Mask) {
        for (&l, &m) in out.labels.iter().zip(mask.iter()) {
            assert_eq!(l == 0, !m);
            assert!(l <= out.region_count);
        }
        for l in 1..=out.region_count {
            let (_, n) = components(&out.region_mask(l));
            assert_eq!(n, 1, "label {l} is not 4-connected");
        }
    }

    #[test]
    fn interior_hole_is_filled() {
        let mut lab = Array2::from_elem((9, 9), 1u32);
        lab[(4, 4)] = 2;
        let mask = Mask::from_elem((9, 9), true);
        let out = run(lab, &mask, 1);
        assert_eq!(out.region_count, 1);
        assert!(out.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn speckle_is_merged() {
        let mut lab = Array2::from_elem((20, 20), 1u32);
        lab[(3, 3)] = 2;
        lab[(3, 4)] = 2;
        // speckle touching the image edge so hole filling does not apply
        lab[(0, 10)] = 3;
        lab[(1, 10)] = 3;
        let mask = Mask::from_elem((20, 20), true);
        let out = run(lab, &mask, 10);
        assert_eq!(out.region_count, 1);
    }

    #[test]
    fn staircase_boundary_gets_shorter() {
        let n = 40;
        let lab = Array2::from_shape_fn((n, n), |(r, c)| {
            // diagonal split with a one-pixel zigzag
            let jag = if r % 2 == 0 { 1 } else { 0 };
            if c + jag < n / 2 + (r % 4) {
                1
            } else {
                2
            }
        });
        let mask = Mask::from_elem((n, n), true);
        let before = boundary_length(&lab);
        let out = run(lab, &mask, 8);
        assert_eq!(out.region_count, 2);
        assert!(boundary_length(&out.labels) < before);
        assert_invariants(&out, &mask);
    }

    #[test]
    fn disconnected_fragments_are_repaired() {
        let n = 16;
        let mut lab = Array2::from_elem((n, n), 1u32);
        lab.slice_mut(s![.., 8..]).fill(2);
        // a label-1 island deep in region 2 and touching the edge
        lab.slice_mut(s![0..3, 13..16]).fill(1);
        let mask = Mask::from_elem((n, n), true);
        let cfg = SegConfig {
            min_region_px: 1,
            smoothing_sigma: 0.0,
            ..SegConfig::default()
        };
        let labels = RegionLabels {
            labels: lab,
            region_count: 2,
        };
        let out = post_process(&labels, &flat_field(n), &mask, &cfg).unwrap();
        assert_invariants(&out, &mask);
        assert_eq!(out.region_count, 2);
    }

    #[test]
    fn background_stays_zero() {
        let n = 12;
        let mut mask = Mask::from_elem((n, n), true);
        mask.slice_mut(s![.., 0..2]).fill(false);
        mask[(6, 6)] = false;
        let lab = Array2::from_shape_fn((n, n), |(r, c)| {
            if !mask[(r, c)] {
                0
            } else if r < 6 {
                1
            } else {
                2
            }
        });
        let out = run(lab, &mask, 4);
        assert_invariants(&out, &mask);
    }
}
