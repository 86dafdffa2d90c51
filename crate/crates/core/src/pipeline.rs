//! End-to-end inference: crop and scale the image around the markings, run
//! the network once for all lesions, map the logits back to the full grid
//! and combine them into a label mask.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::efficiency::{trace_memory, EfficiencyReport, DEFAULT_SAMPLE_PERIOD};
use crate::error::{Error, Result};
use crate::model::{load_weights, ModelConfig, Network, DOWNSAMPLE};
use crate::postprocess::{
    guarantee_presence, restore_missing_labels, LabelCombiner, LogitVolume, OffsetSchedule,
    PresenceCandidates, PresenceOutcome,
};
use crate::prompt::{embed_prompts, extract_endpoints, RecistAnnotation, R_MIN};
use crate::scalar::Scalar;
use crate::tensor::{resize_channel, PadSpec, Tensor4};
use crate::volume::{read_nifti, write_nifti, LabelVolume, Volume};

pub const DEFAULT_MARGIN: usize = 32;

/// How a patch was cut from the original volume.
///
/// Patch voxel `j` along an axis covers original voxels
/// `origin + factor * j .. origin + factor * (j + 1)` (clipped to the crop),
/// so its center sits at `origin + factor * j + (factor - 1) / 2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropScaleRecord {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
    pub factor: [usize; 3],
    /// Crop dims after pooling, before padding.
    pub pooled: [usize; 3],
    pub pad: PadSpec,
    pub original_shape: [usize; 3],
}

impl CropScaleRecord {
    /// The crop-free record of a volume whose dims are already multiples of 8.
    pub fn identity(shape: [usize; 3]) -> Self {
        Self {
            origin: [0; 3],
            extent: shape,
            factor: [1; 3],
            pooled: shape,
            pad: PadSpec::default(),
            original_shape: shape,
        }
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        self.pad.padded(self.pooled)
    }

    /// Original voxel coordinate to (unnormalized) patch coordinate. Points
    /// outside the crop are an error.
    pub fn to_patch(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let mut q = [0.0; 3];
        for a in 0..3 {
            let f = self.factor[a] as f64;
            let v = (p[a] - self.origin[a] as f64 - 0.5 * (f - 1.0)) / f;
            let hi = self.pooled[a] as f64 - 0.5;
            if !(v >= -0.5 && v <= hi) {
                return Err(Error::Geometry(format!(
                    "point {p:?} lies outside the crop at {:?} of extent {:?}",
                    self.origin, self.extent
                )));
            }
            q[a] = v.clamp(0.0, self.pooled[a] as f64 - 1.0);
        }
        Ok(q)
    }

    fn check(&self) -> Result<()> {
        for a in 0..3 {
            let ok = self.factor[a] >= 1
                && self.extent[a] >= 1
                && self.origin[a] + self.extent[a] <= self.original_shape[a]
                && self.pooled[a] == self.extent[a].div_ceil(self.factor[a]);
            if !ok {
                return Err(Error::Shape(format!("inconsistent crop record {self:?}")));
            }
        }
        Ok(())
    }
}

/// Crop box around the union of the annotation spheres, widened by `margin`
/// voxels and clamped to the volume: `(origin, extent)`.
pub fn crop_box(anns: &[RecistAnnotation], shape: [usize; 3], margin: usize) -> Result<([usize; 3], [usize; 3])> {
    if anns.is_empty() {
        return Err(Error::Config("no annotations to crop around".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for ann in anns {
        let s = ann.sphere(R_MIN);
        for a in 0..3 {
            lo[a] = lo[a].min(s.center[a] - s.radius_vox);
            hi[a] = hi[a].max(s.center[a] + s.radius_vox);
        }
    }
    let mut origin = [0; 3];
    let mut extent = [0; 3];
    for a in 0..3 {
        let l = (lo[a].floor() - margin as f64).max(0.0);
        let h = (hi[a].ceil() + margin as f64).min(shape[a] as f64 - 1.0);
        if !(l <= h) {
            return Err(Error::Geometry(format!(
                "annotations fall outside the {shape:?} volume"
            )));
        }
        origin[a] = l as usize;
        extent[a] = (h - l) as usize + 1;
    }
    Ok((origin, extent))
}

/// Smallest integer factor per axis bringing `extent` within `max_patch`.
pub fn pool_factor(extent: [usize; 3], max_patch: [usize; 3]) -> Result<[usize; 3]> {
    if max_patch.contains(&0) {
        return Err(Error::Config(format!("max patch {max_patch:?} has a zero entry")));
    }
    Ok(std::array::from_fn(|a| extent[a].div_ceil(max_patch[a]).max(1)))
}

/// Crop, max-pool, min-max normalize to `[0, 1]` and zero-pad to a multiple
/// of 8. Cropping and pooling are fused into one pass over the image, so no
/// full-resolution crop is materialized. Normalization uses the pooled crop's own range; a
/// constant crop becomes all zeros.
pub fn preprocess<T: Scalar>(
    image: &Volume,
    anns: &[RecistAnnotation],
    max_patch: [usize; 3],
    margin: usize,
) -> Result<(Tensor4<T>, CropScaleRecord)> {
    let shape = image.shape();
    let (origin, extent) = crop_box(anns, shape, margin)?;
    let factor = pool_factor(extent, max_patch)?;
    let pooled: [usize; 3] = std::array::from_fn(|a| extent[a].div_ceil(factor[a]));
    let padded: [usize; 3] = pooled.map(|d| d.div_ceil(DOWNSAMPLE) * DOWNSAMPLE);
    let pad = PadSpec {
        before: [0; 3],
        after: std::array::from_fn(|a| padded[a] - pooled[a]),
    };

    let mut buf = vec![f32::NEG_INFINITY; pooled.iter().product()];
    let [_, ph, pw] = pooled;
    for z in 0..extent[0] {
        let oz = z / factor[0];
        for y in 0..extent[1] {
            let oy = y / factor[1];
            let start = image.geometry.index(origin[0] + z, origin[1] + y, origin[2]);
            let src = &image.data[start..start + extent[2]];
            let dst = &mut buf[(oz * ph + oy) * pw..(oz * ph + oy + 1) * pw];
            for (x, &v) in src.iter().enumerate() {
                let o = &mut dst[x / factor[2]];
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    if let Some(v) = buf.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("image value {v} inside the crop")));
    }
    let (lo, hi) = buf
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi as f64 - lo as f64;

    let mut patch = Tensor4::zeros([1, padded[0], padded[1], padded[2]]);
    if range > 0.0 {
        for z in 0..pooled[0] {
            for y in 0..pooled[1] {
                let src = &buf[(z * ph + y) * pw..(z * ph + y + 1) * pw];
                let o = patch.offset(0, z, y, 0);
                for (d, &v) in patch.data_mut()[o..o + pw].iter_mut().zip(src) {
                    *d = T::from_f64_lossy((v as f64 - lo as f64) / range);
                }
            }
        }
    }
    let rec = CropScaleRecord {
        origin,
        extent,
        factor,
        pooled,
        pad,
        original_shape: shape,
    };
    Ok((patch, rec))
}

/// Writes channel `c` of the patch logits back onto the full grid: padding
/// is removed, the pooled crop is trilinearly upsampled by the pool factors,
/// and everything outside the crop is set to negative infinity.
pub fn restore_into<T: Scalar>(
    logits: &Tensor4<T>,
    c: usize,
    rec: &CropScaleRecord,
    out: &mut LogitVolume<T>,
) -> Result<()> {
    rec.check()?;
    if logits.spatial() != rec.patch_shape() || c >= logits.channels() {
        return Err(Error::Shape(format!(
            "logits {:?} (channel {c}) do not fit a {:?} patch",
            logits.shape(),
            rec.patch_shape()
        )));
    }
    if out.shape != rec.original_shape {
        return Err(Error::Shape(format!(
            "output grid {:?} differs from the original {:?}",
            out.shape, rec.original_shape
        )));
    }
    let [_, ph, pw] = logits.spatial();
    let [d, h_in, w_in] = rec.pooled;
    let src = logits.channel(c);
    let mut inner = Vec::with_capacity(d * h_in * w_in);
    for z in 0..d {
        for y in 0..h_in {
            let o = (z * ph + y) * pw;
            inner.extend_from_slice(&src[o..o + w_in]);
        }
    }

    out.data.fill(T::neg_infinity());
    let scaled: [usize; 3] = std::array::from_fn(|a| rec.pooled[a] * rec.factor[a]);
    let [_, h, w] = rec.original_shape;
    let [o0, o1, o2] = rec.origin;
    let [e0, e1, e2] = rec.extent;
    let data = &mut out.data;
    resize_channel(&inner, rec.pooled, scaled, |z, y, row| {
        if z < e0 && y < e1 {
            let start = ((o0 + z) * h + o1 + y) * w + o2;
            data[start..start + e2].copy_from_slice(&row[..e2]);
        }
    });
    Ok(())
}

/// All channels of [`restore_into`], labelled in order.
pub fn restore<T: Scalar>(logits: &Tensor4<T>, rec: &CropScaleRecord, labels: &[u16]) -> Result<Vec<LogitVolume<T>>> {
    if labels.len() != logits.channels() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit channels",
            labels.len(),
            logits.channels()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(c, &l)| {
            let mut v = LogitVolume::filled(l, rec.original_shape, T::zero());
            restore_into(logits, c, rec, &mut v)?;
            Ok(v)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub margin: usize,
    pub max_patch: [usize; 3],
    pub schedule: OffsetSchedule,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            max_patch: ModelConfig::default().max_patch,
            schedule: OffsetSchedule::default(),
        }
    }
}

/// Per-lesion diagnostics of one segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSummary {
    pub label: u16,
    pub presence: PresenceOutcome,
    /// True when the label lost every voxel in the argmax and was
    /// reassigned its best in-sphere voxel.
    pub reassigned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub crop: Option<CropScaleRecord>,
    pub lesions: Vec<LesionSummary>,
}

/// Segments every lesion marked in `marking`. The mask shares the image
/// geometry; an empty marking yields an all-zero mask.
pub fn segment<T: Scalar>(
    image: &Volume,
    marking: &LabelVolume,
    net: &Network<T>,
    opts: &SegmentOptions,
) -> Result<(LabelVolume, Segmentation)> {
    image.geometry.ensure_matches(&marking.geometry)?;
    opts.schedule.validate()?;
    let anns = extract_endpoints(marking);
    if anns.is_empty() {
        log::info!("marking has no lesions; writing an empty mask");
        return Ok((
            LabelVolume::zeros(image.geometry.clone()),
            Segmentation {
                crop: None,
                lesions: Vec::new(),
            },
        ));
    }

    let (patch, rec) = preprocess::<T>(image, &anns, opts.max_patch, opts.margin)?;
    log::debug!("crop {:?} pooled by {:?} to patch {:?}", rec.extent, rec.factor, rec.patch_shape());
    let tokens = embed_prompts(&anns, &rec, &net.prompt)?;
    let logits = net.forward(&patch, &tokens)?;
    drop(patch);

    let shape = image.shape();
    let mut combiner = LabelCombiner::<T>::new(shape);
    let mut buffer = LogitVolume::filled(0, shape, T::zero());
    let mut candidates = Vec::with_capacity(anns.len());
    let mut lesions = Vec::with_capacity(anns.len());
    for (c, ann) in anns.iter().enumerate() {
        buffer.label = ann.label;
        restore_into(&logits, c, &rec, &mut buffer)?;
        let sphere = ann.sphere(R_MIN);
        let presence = guarantee_presence(&mut buffer, &sphere, &opts.schedule)?;
        candidates.push(PresenceCandidates {
            label: ann.label,
            indices: buffer
                .top_in_sphere(&sphere, anns.len())
                .into_iter()
                .map(|(_, i)| i)
                .collect(),
        });
        combiner.push(&buffer)?;
        lesions.push(LesionSummary {
            label: ann.label,
            presence,
            reassigned: false,
        });
    }
    drop(buffer);
    drop(logits);

    let mut labels = combiner.into_labels();
    for l in restore_missing_labels(&mut labels, &candidates) {
        log::warn!("label {l} lost every voxel to overlapping lesions; reassigned its best voxel");
        if let Some(s) = lesions.iter_mut().find(|s| s.label == l) {
            s.reassigned = true;
        }
    }
    let mask = LabelVolume::new(image.geometry.clone(), labels)?;
    Ok((
        mask,
        Segmentation {
            crop: Some(rec),
            lesions,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct InferOptions {
    pub segment: SegmentOptions,
    pub threads: usize,
    pub config: ModelConfig,
    pub trace: Option<PathBuf>,
    pub sample_period: Duration,
    pub case_id: Option<String>,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            segment: SegmentOptions::default(),
            threads: 1,
            config: ModelConfig::default(),
            trace: None,
            sample_period: DEFAULT_SAMPLE_PERIOD,
            case_id: None,
        }
    }
}

/// Reads the inputs, segments, writes the mask and reports time and memory
/// of the whole run.
pub fn infer(
    image_path: &Path,
    marking_path: &Path,
    weights_path: &Path,
    out_path: &Path,
    opts: &InferOptions,
) -> Result<EfficiencyReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut image_shape = [0; 3];
    let (result, trace) = trace_memory(opts.sample_period, || {
        pool.install(|| -> Result<()> {
            let weights = load_weights(weights_path, &opts.config)?;
            let net = Network::<f32>::new(&opts.config, &weights)?;
            drop(weights);
            let image = read_nifti(image_path)?;
            image_shape = image.shape();
            let marking = LabelVolume::from_volume(read_nifti(marking_path)?)?;
            let (mask, _) = segment(&image, &marking, &net, &opts.segment)?;
            drop(image);
            drop(marking);
            write_nifti(&mask, out_path, is_gzip_path(out_path))
        })
    });
    result?;
    if let Some(p) = &opts.trace {
        trace.write_csv(p)?;
    }
    let case_id = opts.case_id.clone().unwrap_or_else(|| case_id_from(image_path));
    Ok(EfficiencyReport::from_trace(case_id, image_shape, &trace))
}

pub fn is_gzip_path(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// File name without `.nii` / `.nii.gz`.
pub fn case_id_from(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}
