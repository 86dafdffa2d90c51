//! RECIST markings to lesion prompts.
//!
//! A marking volume carries one rasterized diameter per lesion label. Only the
//! two endpoints of each diameter are kept; they become two prompt tokens for
//! the bottleneck attention and define the sphere used by the presence
//! guarantee in post-processing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pipeline::CropScaleRecord;
use crate::scalar::Scalar;
use crate::volume::LabelVolume;

/// Smallest sphere radius, in voxels, used for degenerate (point) markings.
pub const R_MIN: f64 = 1.5;

/// Beyond this many voxels a label's point set is reduced to per-slice
/// convex hull vertices before the exhaustive farthest-pair search.
const HULL_PREFILTER_THRESHOLD: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct RecistAnnotation {
    pub label: u16,
    /// Endpoints in voxel coordinates `(z, y, x)`, `p0 <= p1` lexicographically.
    pub p0: [f64; 3],
    pub p1: [f64; 3],
    pub length_vox: f64,
    pub slice_z: usize,
}

impl RecistAnnotation {
    pub fn new(label: u16, a: [f64; 3], b: [f64; 3]) -> Self {
        let (p0, p1) = if lex_le(&a, &b) { (a, b) } else { (b, a) };
        Self {
            label,
            p0,
            p1,
            length_vox: dist(&p0, &p1),
            slice_z: p0[0].max(0.0).round() as usize,
        }
    }

    pub fn sphere(&self, r_min: f64) -> RecistSphere {
        recist_sphere(self, r_min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecistSphere {
    pub center: [f64; 3],
    pub radius_vox: f64,
}

impl RecistSphere {
    /// Voxel-center membership test.
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d2: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum();
        d2 <= self.radius_vox * self.radius_vox
    }

    /// Inclusive voxel index bounds of the sphere clipped to `shape`, or
    /// `None` when the sphere misses the grid entirely.
    pub fn voxel_bounds(&self, shape: [usize; 3]) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = (self.center[a] - self.radius_vox).ceil().max(0.0);
            let h = (self.center[a] + self.radius_vox).floor().min(shape[a] as f64 - 1.0);
            if l > h {
                return None;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        Some((lo, hi))
    }
}

pub fn recist_sphere(ann: &RecistAnnotation, r_min: f64) -> RecistSphere {
    RecistSphere {
        center: std::array::from_fn(|a| 0.5 * (ann.p0[a] + ann.p1[a])),
        radius_vox: (0.5 * ann.length_vox).max(r_min),
    }
}

fn lex_le(a: &[f64; 3], b: &[f64; 3]) -> bool {
    a.partial_cmp(b) != Some(std::cmp::Ordering::Greater)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

type Voxel = [i64; 3];

fn d2(a: &Voxel, b: &Voxel) -> i64 {
    (0..3).map(|i| (a[i] - b[i]).pow(2)).sum()
}

/// Farthest pair of a point set. Among equally distant pairs the
/// lexicographically smallest `(min, max)` pair wins, so the result depends
/// only on the set, not on its order.
fn farthest_pair(points: &[Voxel]) -> (Voxel, Voxel) {
    let reduced;
    let pts = if points.len() > HULL_PREFILTER_THRESHOLD {
        reduced = hull_candidates(points);
        &reduced[..]
    } else {
        points
    };
    let mut best = (pts[0], pts[0]);
    let mut best_d = 0i64;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i..] {
            let d = d2(a, b);
            let pair = if a <= b { (*a, *b) } else { (*b, *a) };
            if d > best_d || (d == best_d && pair < best) {
                best_d = d;
                best = pair;
            }
        }
    }
    best
}

/// Vertices of each axial slice's 2D convex hull. Every vertex of the 3D hull
/// is a vertex of its slice's hull, and a diameter is always realized by two
/// hull vertices, so the farthest pair survives the reduction.
fn hull_candidates(points: &[Voxel]) -> Vec<Voxel> {
    // Row extremes first: an interior point of an x-row is never a vertex.
    let mut rows: BTreeMap<(i64, i64), (i64, i64)> = BTreeMap::new();
    for p in points {
        let e = rows.entry((p[0], p[1])).or_insert((p[2], p[2]));
        e.0 = e.0.min(p[2]);
        e.1 = e.1.max(p[2]);
    }
    let mut slices: BTreeMap<i64, Vec<(i64, i64)>> = BTreeMap::new();
    for (&(z, y), &(x0, x1)) in &rows {
        let s = slices.entry(z).or_default();
        s.push((y, x0));
        if x1 != x0 {
            s.push((y, x1));
        }
    }
    let mut out = Vec::new();
    for (z, mut pts) in slices {
        out.extend(convex_hull_2d(&mut pts).into_iter().map(|(y, x)| [z, y, x]));
    }
    out
}

/// Andrew's monotone chain; strict hull (collinear points dropped).
fn convex_hull_2d(pts: &mut [(i64, i64)]) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    if pts.len() <= 2 {
        return pts.to_vec();
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// One annotation per distinct nonzero label, sorted by label. The endpoints
/// are the two voxels of the label that lie farthest apart.
///
/// A label spanning several axial slices is accepted (endpoints are then a 3D
/// farthest pair) but logged as a warning.
pub fn extract_endpoints(marking: &LabelVolume) -> Vec<RecistAnnotation> {
    let [_, h, w] = marking.shape();
    let mut voxels: BTreeMap<u16, Vec<Voxel>> = BTreeMap::new();
    for (i, &l) in marking.data.iter().enumerate() {
        if l != 0 {
            let z = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            voxels.entry(l).or_default().push([z as i64, y as i64, x as i64]);
        }
    }
    voxels
        .into_iter()
        .map(|(label, pts)| {
            let z0 = pts[0][0];
            if pts.iter().any(|p| p[0] != z0) {
                log::warn!("marking for label {label} spans several axial slices; using 3D endpoints");
            }
            let (a, b) = farthest_pair(&pts);
            RecistAnnotation::new(label, a.map(|v| v as f64), b.map(|v| v as f64))
        })
        .collect()
}

/// Endpoint role of a prompt token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Start,
    End,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptToken<T> {
    pub label: u16,
    pub role: Role,
    /// Unit-norm embedding.
    pub embedding: Vec<T>,
    /// Position in the padded patch, normalized per axis to `[0, 1]`.
    pub position: [f64; 3],
}

/// Two tokens per annotation, in annotation order, start token first.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTokens<T> {
    pub tokens: Vec<PromptToken<T>>,
}

impl<T: Scalar> PromptTokens<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_count(&self) -> usize {
        self.tokens.len() / 2
    }

    pub fn labels(&self) -> Vec<u16> {
        self.tokens.iter().step_by(2).map(|t| t.label).collect()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.tokens.iter().map(|t| t.position).collect()
    }
}

/// Learned prompt vectors: one per endpoint role plus a shared lesion vector.
#[derive(Clone, Debug)]
pub struct PromptEncoder<T> {
    pub role: [Vec<T>; 2],
    pub lesion: Vec<T>,
}

impl<T: Scalar> PromptEncoder<T> {
    pub fn dim(&self) -> usize {
        self.lesion.len()
    }

    pub fn embed(&self, role: Role) -> Vec<T> {
        let r = &self.role[role as usize];
        let mut v: Vec<T> = r.iter().zip(&self.lesion).map(|(&a, &b)| a + b).collect();
        crate::model::normalize_in_place(&mut v);
        v
    }
}

/// Maps every annotation to its start/end tokens in the preprocessed patch.
pub fn embed_prompts<T: Scalar>(
    anns: &[RecistAnnotation],
    rec: &CropScaleRecord,
    encoder: &PromptEncoder<T>,
) -> Result<PromptTokens<T>> {
    let dims = rec.patch_shape();
    let mut tokens = Vec::with_capacity(2 * anns.len());
    for ann in anns {
        let (a, b) = if lex_le(&ann.p0, &ann.p1) {
            (ann.p0, ann.p1)
        } else {
            (ann.p1, ann.p0)
        };
        for (role, p) in [(Role::Start, a), (Role::End, b)] {
            let q = rec.to_patch(p).map_err(|e| {
                Error::Internal(format!("label {} endpoint {p:?}: {e}", ann.label))
            })?;
            let position = std::array::from_fn(|i| q[i] / dims[i] as f64);
            tokens.push(PromptToken {
                label: ann.label,
                role,
                embedding: encoder.embed(role),
                position,
            });
        }
    }
    Ok(PromptTokens { tokens })
}
