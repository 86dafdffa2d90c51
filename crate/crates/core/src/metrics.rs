//! Overlap and surface agreement between label masks.

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

pub const DEFAULT_NSD_TOLERANCE_MM: f64 = 2.0;

fn check_pair(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Geometry(format!(
            "prediction {:?} and reference {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Dice similarity `2|P∩G| / (|P| + |G|)` for one label; 1 when both are
/// empty.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, label: u16) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == label, b == label);
        p += ia as u64;
        g += ib as u64;
        both += (ia && ib) as u64;
    }
    Ok(if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

/// Mask voxels with at least one 6-neighbor outside the mask. Neighbors
/// beyond the grid count as outside.
pub fn boundary(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                out[i] = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1];
            }
        }
    }
    out
}

/// Squared 1D distance transform of sampled function `f` on a grid with
/// spacing `s` (lower envelope of parabolas). Infinite samples are not
/// sites; an all-infinite input stays infinite.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = s * s;
    // Intersection abscissa (in index units) of the parabolas rooted at q and p.
    let meet = |q: usize, p: usize| {
        ((f[q] + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64)) / (2.0 * s2 * (q as f64 - p as f64))
    };
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let m = meet(q, p);
                    if m <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(m);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = (q as f64 - p as f64) * s;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest
/// `site` voxel, with per-axis spacing `(z, y, x)`. Infinite everywhere when
/// there are no sites.
pub fn squared_edt(sites: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let longest = d.max(h).max(w);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (Vec::with_capacity(longest), Vec::with_capacity(longest));
    let strides = [h * w, w, 1];
    for axis in [2usize, 1, 0] {
        let n = shape[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..shape[others[0]] {
            for b in 0..shape[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                for i in 0..n {
                    line[i] = g[base + i * stride];
                }
                edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut z);
                for i in 0..n {
                    g[base + i * stride] = out[i];
                }
            }
        }
    }
    g
}

/// Normalized surface dice of one label at `tolerance_mm`:
/// `(|{b in B_P : d(b, B_G) <= tol}| + |{b in B_G : d(b, B_P) <= tol}|) /
/// (|B_P| + |B_G|)` over the boundary voxel sets. 1 when both masks are
/// empty, 0 when exactly one is.
pub fn nsd(pred: &LabelVolume, gt: &LabelVolume, label: u16, tolerance_mm: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if !(tolerance_mm >= 0.0) {
        return Err(Error::Config(format!("NSD tolerance {tolerance_mm} must be non-negative")));
    }
    let shape = pred.shape();
    let spacing = gt.geometry.spacing.map(|s| s as f64);
    // Work inside the bounding box of both masks, one voxel wider so the
    // boundary test sees the same neighbors as on the full grid.
    let Some((lo, hi)) = union_bbox(pred, gt, label) else {
        return Ok(1.0);
    };
    let sub: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let extract = |m: &LabelVolume| -> Vec<bool> {
        let mut out = Vec::with_capacity(sub.iter().product());
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                let s = (z * shape[1] + y) * shape[2];
                out.extend(m.data[s + lo[2]..=s + hi[2]].iter().map(|&v| v == label));
            }
        }
        out
    };
    let (p, g) = (extract(pred), extract(gt));
    let (np, ng) = (p.iter().filter(|&&b| b).count(), g.iter().filter(|&&b| b).count());
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let bp = boundary(&p, sub);
    let bg = boundary(&g, sub);
    let tol2 = tolerance_mm * tolerance_mm;
    let dp = squared_edt(&bp, sub, spacing);
    let dg = squared_edt(&bg, sub, spacing);
    let p_ok = bp.iter().zip(&dg).filter(|(&b, &d)| b && d <= tol2).count();
    let g_ok = bg.iter().zip(&dp).filter(|(&b, &d)| b && d <= tol2).count();
    let total = bp.iter().filter(|&&b| b).count() + bg.iter().filter(|&&b| b).count();
    Ok((p_ok + g_ok) as f64 / total as f64)
}

/// Inclusive box around both masks' voxels of `label`, grown by one voxel
/// and clamped to the grid.
fn union_bbox(pred: &LabelVolume, gt: &LabelVolume, label: u16) -> Option<([usize; 3], [usize; 3])> {
    let [_, h, w] = pred.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, (&a, &b)) in pred.data.iter().zip(&gt.data).enumerate() {
        if a == label || b == label {
            any = true;
            let c = [i / (h * w), (i / w) % h, i % w];
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
    }
    if !any {
        return None;
    }
    let shape = pred.shape();
    Some((lo.map(|v| v.saturating_sub(1)), std::array::from_fn(|k| (hi[k] + 1).min(shape[k] - 1))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn cube(shape: [usize; 3], lo: [usize; 3], size: usize, spacing: f32) -> LabelVolume {
        let g = Geometry::new(shape, [spacing; 3]).unwrap();
        let mut m = LabelVolume::zeros(g);
        for z in lo[0]..lo[0] + size {
            for y in lo[1]..lo[1] + size {
                for x in lo[2]..lo[2] + size {
                    let i = m.geometry.index(z, y, x);
                    m.data[i] = 1;
                }
            }
        }
        m
    }

    #[test]
    fn dice_closed_forms() {
        let a = cube([8, 8, 8], [0, 0, 0], 2, 1.0);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        let b = cube([8, 8, 8], [4, 4, 4], 2, 1.0);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0);
        let c = cube([8, 8, 8], [1, 0, 0], 2, 1.0);
        assert_eq!(dsc(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dsc(&a, &a, 7).unwrap(), 1.0);
    }

    #[test]
    fn nsd_closed_forms() {
        let a = cube([10, 10, 10], [2, 2, 2], 4, 1.0);
        assert_eq!(nsd(&a, &a, 1, 2.0).unwrap(), 1.0);
        let far = cube([10, 10, 200], [2, 2, 150], 4, 1.0);
        let a2 = cube([10, 10, 200], [2, 2, 2], 4, 1.0);
        assert_eq!(nsd(&a2, &far, 1, 2.0).unwrap(), 0.0);
        let empty = LabelVolume::zeros(a.geometry.clone());
        assert_eq!(nsd(&empty, &empty, 1, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &empty, 1, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn edt_matches_brute_force() {
        let shape = [5, 6, 7];
        let spacing = [2.0, 0.5, 1.25];
        let mut sites = vec![false; 210];
        for i in [3usize, 77, 150, 209] {
            sites[i] = true;
        }
        let d = squared_edt(&sites, shape, spacing);
        let coord = |i: usize| [i / 42, (i / 7) % 6, i % 7];
        for (i, &v) in d.iter().enumerate() {
            let c = coord(i);
            let best = (0..210)
                .filter(|&j| sites[j])
                .map(|j| {
                    let o = coord(j);
                    (0..3).map(|a| ((c[a] as f64 - o[a] as f64) * spacing[a]).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((v - best).abs() < 1e-9, "voxel {i}: {v} vs {best}");
        }
    }

    #[test]
    fn boundary_of_solid_cube_is_its_shell() {
        let m = vec![true; 27];
        let b = boundary(&m, [3, 3, 3]);
        assert_eq!(b.iter().filter(|&&v| v).count(), 26);
        assert!(!b[13]);
    }
}
