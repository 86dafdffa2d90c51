//! Image and label volumes with their voxel geometry.
//!
//! Arrays are indexed `(z, y, x)` with `x` fastest, which is the NIfTI
//! on-disk order (`dim[1]` = x). Spacing is stored in the same `(z, y, x)`
//! order. The affine keeps the NIfTI convention, mapping voxel indices
//! `(i, j, k) = (x, y, z)` to world millimetres, and is never reoriented.

mod nifti;

pub use self::nifti::{read_nifti, read_nifti_from, write_nifti, write_nifti_to, NiftiData};

use crate::error::{Error, Result};

/// Scalar kind a volume was stored as on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    U8,
    I16,
    U16,
    I32,
    F32,
    F64,
}

impl DataKind {
    pub fn nifti_code(self) -> i16 {
        match self {
            DataKind::U8 => 2,
            DataKind::I16 => 4,
            DataKind::I32 => 8,
            DataKind::F32 => 16,
            DataKind::F64 => 64,
            DataKind::U16 => 512,
        }
    }

    pub fn from_nifti_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => DataKind::U8,
            4 => DataKind::I16,
            8 => DataKind::I32,
            16 => DataKind::F32,
            64 => DataKind::F64,
            512 => DataKind::U16,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DataKind::U8 => 1,
            DataKind::I16 | DataKind::U16 => 2,
            DataKind::I32 | DataKind::F32 => 4,
            DataKind::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    /// `(D, H, W)`.
    pub shape: [usize; 3],
    /// Voxel size in mm, `(z, y, x)`.
    pub spacing: [f32; 3],
    pub affine: [[f32; 4]; 4],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let [sz, sy, sx] = spacing;
        let affine = [
            [sx, 0.0, 0.0, 0.0],
            [0.0, sy, 0.0, 0.0],
            [0.0, 0.0, sz, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Self::with_affine(shape, spacing, affine)
    }

    pub fn with_affine(shape: [usize; 3], spacing: [f32; 3], affine: [[f32; 4]; 4]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("volume shape {shape:?} has a zero dimension")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Geometry(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self {
            shape,
            spacing,
            affine,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    /// Same grid: equal shape, spacing and affine up to a relative tolerance.
    pub fn matches(&self, other: &Geometry, rel_tol: f32) -> bool {
        let close = |a: f32, b: f32| (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(1.0);
        self.shape == other.shape
            && self.spacing.iter().zip(&other.spacing).all(|(&a, &b)| close(a, b))
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(&a, &b)| close(a, b))
    }

    pub fn ensure_matches(&self, other: &Geometry) -> Result<()> {
        if self.matches(other, 1e-4) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "shape {:?} spacing {:?} vs shape {:?} spacing {:?}",
                self.shape, self.spacing, other.shape, other.spacing
            )))
        }
    }
}

/// CT image (or any scalar map) as 32-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub data: Vec<f32>,
    pub dtype_on_disk: DataKind,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::Shape(format!(
                "volume {:?} needs {} voxels, got {}",
                geometry.shape,
                geometry.voxel_count(),
                data.len()
            )));
        }
        Ok(Self {
            geometry,
            data,
            dtype_on_disk: DataKind::F32,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.geometry.index(z, y, x)]
    }
}

/// Integer label map, 0 = background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub geometry: Geometry,
    pub data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, data: Vec<u16>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::Shape(format!(
                "label volume {:?} needs {} voxels, got {}",
                geometry.shape,
                geometry.voxel_count(),
                data.len()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.voxel_count();
        Self {
            geometry,
            data: vec![0; n],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u16 {
        self.data[self.geometry.index(z, y, x)]
    }

    /// Converts a scalar volume whose values are whole numbers in `0..=65535`.
    pub fn from_volume(vol: Volume) -> Result<Self> {
        let mut data = Vec::with_capacity(vol.data.len());
        for &v in &vol.data {
            if !(v >= 0.0 && v <= u16::MAX as f32 && v.fract() == 0.0) {
                return Err(Error::Unsupported(format!(
                    "label value {v} is not an integer in 0..=65535"
                )));
            }
            data.push(v as u16);
        }
        Ok(Self {
            geometry: vol.geometry,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_bad_spacing() {
        assert!(Geometry::new([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
        assert!(Geometry::new([2, 0, 2], [1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn label_conversion_rejects_fractions() {
        let g = Geometry::new([1, 1, 2], [1.0; 3]).unwrap();
        assert!(LabelVolume::from_volume(Volume::new(g.clone(), vec![1.0, 2.5]).unwrap()).is_err());
        assert!(LabelVolume::from_volume(Volume::new(g.clone(), vec![-1.0, 2.0]).unwrap()).is_err());
        let l = LabelVolume::from_volume(Volume::new(g, vec![0.0, 7.0]).unwrap()).unwrap();
        assert_eq!(l.data, vec![0, 7]);
    }

    #[test]
    fn geometry_matching() {
        let a = Geometry::new([4, 5, 6], [2.5, 0.8, 0.8]).unwrap();
        let mut b = a.clone();
        assert!(a.matches(&b, 1e-4));
        b.spacing[0] = 3.0;
        assert!(a.ensure_matches(&b).is_err());
        let c = Geometry::new([4, 5, 7], [2.5, 0.8, 0.8]).unwrap();
        assert!(!a.matches(&c, 1e-4));
    }
}
