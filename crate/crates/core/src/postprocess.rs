//! Per-prompt logits to a multi-label mask, with every annotated lesion
//! guaranteed at least one voxel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::RecistSphere;
use crate::scalar::Scalar;
use crate::volume::{Geometry, LabelVolume};

/// Offsets `delta0 * growth^k`, `k = 0, 1, ..`, each tried against the
/// original logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetSchedule {
    pub delta0: f64,
    pub growth: f64,
    pub max_iters: u32,
}

impl Default for OffsetSchedule {
    fn default() -> Self {
        Self {
            delta0: 1.0,
            growth: 2.0,
            max_iters: 32,
        }
    }
}

impl OffsetSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta0 > 0.0 && self.delta0.is_finite()) {
            return Err(Error::Config(format!("offset start {} must be positive", self.delta0)));
        }
        if !(self.growth > 1.0 && self.growth.is_finite()) {
            return Err(Error::Config(format!("offset growth {} must exceed 1", self.growth)));
        }
        Ok(())
    }

    pub fn offset(&self, k: u32) -> f64 {
        self.delta0 * self.growth.powi(k as i32)
    }
}

/// Logits of one prompt over the full image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVolume<T> {
    pub label: u16,
    pub shape: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> LogitVolume<T> {
    pub fn new(label: u16, shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "logit volume {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { label, shape, data })
    }

    pub fn filled(label: u16, shape: [usize; 3], value: T) -> Self {
        Self {
            label,
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    /// Calls `f(flat_index)` for every voxel whose center lies in `sphere`.
    pub fn for_each_in_sphere(&self, sphere: &RecistSphere, f: impl FnMut(usize)) {
        for_each_in_sphere(self.shape, sphere, f)
    }

    /// The `k` highest in-sphere voxels as `(logit, index)`, best first;
    /// equal logits prefer the smaller index.
    pub fn top_in_sphere(&self, sphere: &RecistSphere, k: usize) -> Vec<(T, usize)> {
        let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        self.for_each_in_sphere(sphere, |i| {
            let v = self.data[i];
            let pos = best.partition_point(|&(b, j)| b > v || (b == v && j < i));
            if pos < k {
                best.insert(pos, (v, i));
                best.truncate(k);
            }
        });
        best
    }
}

/// Calls `f(flat_index)` for every voxel of a `shape` grid whose center lies
/// in `sphere`.
pub fn for_each_in_sphere(shape: [usize; 3], sphere: &RecistSphere, mut f: impl FnMut(usize)) {
    let Some((lo, hi)) = sphere.voxel_bounds(shape) else {
        return;
    };
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                if sphere.contains([z as f64, y as f64, x as f64]) {
                    f((z * shape[1] + y) * shape[2] + x);
                }
            }
        }
    }
}

/// What [`guarantee_presence`] did.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PresenceOutcome {
    /// Some voxel already had a positive logit; nothing changed.
    AlreadyPresent,
    /// `delta0 * growth^k` was added to every in-sphere voxel.
    Offset { k: u32, offset: f64 },
    /// The schedule ran out; the voxel at `index` was set to +1.
    Fallback { index: usize },
}

/// Ensures the prompt's logits are positive somewhere.
///
/// When no voxel is positive, the smallest `k < max_iters` for which the
/// in-sphere maximum plus `delta0 * growth^k` exceeds zero is chosen and that
/// offset is added to all in-sphere voxels. Voxels outside the sphere are
/// never modified.
pub fn guarantee_presence<T: Scalar>(
    logits: &mut LogitVolume<T>,
    sphere: &RecistSphere,
    sched: &OffsetSchedule,
) -> Result<PresenceOutcome> {
    sched.validate()?;
    let mut global = T::neg_infinity();
    for &v in &logits.data {
        if v > global {
            global = v;
        }
    }
    if global > T::zero() {
        return Ok(PresenceOutcome::AlreadyPresent);
    }

    let mut inside = T::neg_infinity();
    let mut any = false;
    logits.for_each_in_sphere(sphere, |i| {
        any = true;
        let v = logits.data[i];
        if v > inside {
            inside = v;
        }
    });
    if !any {
        return Err(Error::Geometry(format!(
            "sphere at {:?} radius {} misses the {:?} grid",
            sphere.center, sphere.radius_vox, logits.shape
        )));
    }

    for k in 0..sched.max_iters {
        let offset = sched.offset(k);
        let delta = T::from_f64_lossy(offset);
        if inside + delta > T::zero() {
            let data = &mut logits.data;
            for_each_in_sphere(logits.shape, sphere, |i| data[i] += delta);
            return Ok(PresenceOutcome::Offset { k, offset });
        }
    }

    let index = nearest_voxel(sphere.center, logits.shape);
    logits.data[index] = T::one();
    log::warn!(
        "label {}: offset schedule exhausted after {} steps; forcing the voxel nearest the sphere center",
        logits.label,
        sched.max_iters
    );
    Ok(PresenceOutcome::Fallback { index })
}

fn nearest_voxel(center: [f64; 3], shape: [usize; 3]) -> usize {
    let c: [usize; 3] = std::array::from_fn(|a| center[a].round().clamp(0.0, (shape[a] - 1) as f64) as usize);
    (c[0] * shape[1] + c[1]) * shape[2] + c[2]
}

/// Streaming argmax over prompts: a voxel takes the label with the largest
/// positive logit, the smaller label on exact ties, and 0 when none is
/// positive. Holds one best-logit buffer and the label buffer.
#[derive(Clone, Debug)]
pub struct LabelCombiner<T> {
    shape: [usize; 3],
    best: Vec<T>,
    labels: Vec<u16>,
}

impl<T: Scalar> LabelCombiner<T> {
    pub fn new(shape: [usize; 3]) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            best: vec![T::zero(); n],
            labels: vec![0; n],
        }
    }

    pub fn push(&mut self, logits: &LogitVolume<T>) -> Result<()> {
        if logits.shape != self.shape {
            return Err(Error::Shape(format!(
                "logits {:?} do not match the mask grid {:?}",
                logits.shape, self.shape
            )));
        }
        let label = logits.label;
        for ((&v, b), l) in logits.data.iter().zip(&mut self.best).zip(&mut self.labels) {
            if v > T::zero() && (v > *b || (v == *b && label < *l)) {
                *b = v;
                *l = label;
            }
        }
        Ok(())
    }

    pub fn into_labels(self) -> Vec<u16> {
        self.labels
    }
}

/// Batch form of [`LabelCombiner`].
pub fn combine_labels<T: Scalar>(per_prompt: &[LogitVolume<T>], geometry: &Geometry) -> Result<LabelVolume> {
    let mut c = LabelCombiner::new(geometry.shape);
    for l in per_prompt {
        c.push(l)?;
    }
    LabelVolume::new(geometry.clone(), c.into_labels())
}

/// Voxel counts per label value `0..=max(expected)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub histogram: Vec<u64>,
}

impl ClassCounts {
    pub fn count(&self, label: u16) -> u64 {
        self.histogram.get(label as usize).copied().unwrap_or(0)
    }

    pub fn missing<'a>(&'a self, expected: &'a [u16]) -> impl Iterator<Item = u16> + 'a {
        expected.iter().copied().filter(|&l| self.count(l) == 0)
    }
}

/// One counting pass over the mask. The only allocation is the histogram;
/// labels above `max(expected)` are not counted.
pub fn class_presence(mask: &[u16], expected: &[u16]) -> ClassCounts {
    let width = expected.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut histogram = vec![0u64; width];
    for &v in mask {
        if let Some(h) = histogram.get_mut(v as usize) {
            *h += 1;
        }
    }
    ClassCounts { histogram }
}

/// Candidate voxels for a label that lost every voxel in the argmax.
#[derive(Clone, Debug)]
pub struct PresenceCandidates {
    pub label: u16,
    /// `(index)` best first, all inside the label's sphere.
    pub indices: Vec<usize>,
}

/// Assigns every missing label its best candidate voxel that is not the
/// last voxel of another label. Returns the labels that were repaired.
pub fn restore_missing_labels(mask: &mut [u16], candidates: &[PresenceCandidates]) -> Vec<u16> {
    let expected: Vec<u16> = candidates.iter().map(|c| c.label).collect();
    let mut counts = class_presence(mask, &expected);
    let mut repaired = Vec::new();
    for c in candidates {
        if counts.count(c.label) > 0 {
            continue;
        }
        let pick = c
            .indices
            .iter()
            .copied()
            .find(|&i| {
                let owner = mask[i];
                owner == 0 || counts.count(owner) != 1 || !expected.contains(&owner)
            })
            .or_else(|| c.indices.first().copied());
        let Some(i) = pick else {
            log::warn!("label {} has no candidate voxel", c.label);
            continue;
        };
        let owner = mask[i];
        if let Some(h) = counts.histogram.get_mut(owner as usize) {
            *h -= 1;
        }
        mask[i] = c.label;
        counts.histogram[c.label as usize] += 1;
        repaired.push(c.label);
    }
    repaired
}
