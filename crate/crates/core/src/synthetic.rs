//! Synthetic CT-like cases: noisy background with bright spherical lesions,
//! an axial diameter marking per lesion, and the exact sphere masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub label: u16,
    pub center: [usize; 3],
    pub radius: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub image: Volume,
    pub marking: LabelVolume,
    pub ground_truth: LabelVolume,
    pub lesions: Vec<Lesion>,
}

/// Places `count` non-overlapping lesions of radius `radius_range` at
/// random inside `shape`.
pub fn random_lesions(shape: [usize; 3], count: usize, radius_range: (usize, usize), seed: u64) -> Result<Vec<Lesion>> {
    let (rmin, rmax) = radius_range;
    if rmin == 0 || rmin > rmax || shape.iter().any(|&d| d < 2 * rmax + 1) {
        return Err(Error::Config(format!(
            "cannot place radius {rmin}..={rmax} lesions in {shape:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Lesion> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(format!("could not fit {count} lesions in {shape:?}")));
        }
        let radius = rng.random_range(rmin..=rmax);
        let center = std::array::from_fn(|a| rng.random_range(radius..shape[a] - radius));
        let clear = out.iter().all(|l: &Lesion| {
            let d2: f64 = (0..3).map(|a| (l.center[a] as f64 - center[a] as f64).powi(2)).sum();
            d2.sqrt() > (l.radius + radius + 2) as f64
        });
        if clear {
            out.push(Lesion {
                label: out.len() as u16 + 1,
                center,
                radius,
            });
        }
    }
    Ok(out)
}

/// Renders `lesions` into a `shape` volume with the given spacing.
pub fn render_case(shape: [usize; 3], spacing: [f32; 3], lesions: &[Lesion], seed: u64) -> Result<SyntheticCase> {
    let g = Geometry::new(shape, spacing)?;
    let n = g.voxel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 15.0).map_err(|e| Error::Internal(e.to_string()))?;
    let mut image: Vec<f32> = (0..n).map(|_| -100.0 + noise.sample(&mut rng)).collect();
    let mut gt = vec![0u16; n];
    let mut marking = vec![0u16; n];
    for l in lesions {
        let r = l.radius as i64;
        let c = l.center.map(|v| v as i64);
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dz * dz + dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let p = [c[0] + dz, c[1] + dy, c[2] + dx];
                    if (0..3).any(|a| p[a] < 0 || p[a] >= shape[a] as i64) {
                        continue;
                    }
                    let i = g.index(p[0] as usize, p[1] as usize, p[2] as usize);
                    gt[i] = l.label;
                    image[i] += 160.0;
                }
            }
        }
        for dx in -r..=r {
            let x = c[2] + dx;
            if (0..shape[2] as i64).contains(&x) {
                marking[g.index(l.center[0], l.center[1], x as usize)] = l.label;
            }
        }
    }
    Ok(SyntheticCase {
        image: Volume::new(g.clone(), image)?,
        marking: LabelVolume::new(g.clone(), marking)?,
        ground_truth: LabelVolume::new(g, gt)?,
        lesions: lesions.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::extract_endpoints;

    #[test]
    fn markings_recover_diameters() {
        let lesions = random_lesions([24, 40, 40], 2, (3, 5), 9).unwrap();
        let case = render_case([24, 40, 40], [2.0, 0.8, 0.8], &lesions, 1).unwrap();
        let anns = extract_endpoints(&case.marking);
        assert_eq!(anns.len(), 2);
        for (a, l) in anns.iter().zip(&lesions) {
            assert_eq!(a.label, l.label);
            assert_eq!(a.length_vox, 2.0 * l.radius as f64);
        }
    }
}
