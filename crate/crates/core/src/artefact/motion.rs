//! Patient-movement artefact: composite k-space assembled from per-segment
//! resampled volumes under a demeaned rigid motion model.

use ndarray::Array3;
use num_complex::Complex64;

use crate::artefact::ops::Axis3;
use crate::error::{Error, Result};
use crate::spectral::{fft3, ifft3, KSpace};
use crate::volume::{resample_affine, Affine3D, Volume};

/// One rigid pose: rotation as an axis-angle vector (radians) plus a
/// translation in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RigidMotion {
    pub rotation: [f64; 3],
    pub translation_mm: [f64; 3],
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self { rotation: [0.0; 3], translation_mm: [0.0; 3] }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { rotation: [0.0; 3], translation_mm: t }
    }

    fn sub(&self, other: &RigidMotion) -> RigidMotion {
        let mut r = *self;
        for i in 0..3 {
            r.rotation[i] -= other.rotation[i];
            r.translation_mm[i] -= other.translation_mm[i];
        }
        r
    }

    /// Voxel-coordinate affine for this pose given the grid spacing.
    pub fn to_affine(&self, spacing: [f64; 3]) -> Affine3D {
        let t_vox = [
            self.translation_mm[0] / spacing[0],
            self.translation_mm[1] / spacing[1],
            self.translation_mm[2] / spacing[2],
        ];
        let rot = rotation_from_axis_angle(self.rotation);
        Affine3D::translation(t_vox).compose(&rot)
    }

    fn is_zero(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation_mm == [0.0; 3]
    }
}

/// Rodrigues rotation from an axis-angle vector; exact identity at zero angle.
fn rotation_from_axis_angle(v: [f64; 3]) -> Affine3D {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if theta == 0.0 {
        return Affine3D::identity();
    }
    let k = [v[0] / theta, v[1] / theta, v[2] / theta];
    let (s, c) = theta.sin_cos();
    let one_c = 1.0 - c;
    let mut m = [[0.0; 4]; 4];
    m[0][0] = c + k[0] * k[0] * one_c;
    m[0][1] = k[0] * k[1] * one_c - k[2] * s;
    m[0][2] = k[0] * k[2] * one_c + k[1] * s;
    m[1][0] = k[1] * k[0] * one_c + k[2] * s;
    m[1][1] = c + k[1] * k[1] * one_c;
    m[1][2] = k[1] * k[2] * one_c - k[0] * s;
    m[2][0] = k[2] * k[0] * one_c - k[1] * s;
    m[2][1] = k[2] * k[1] * one_c + k[0] * s;
    m[2][2] = c + k[2] * k[2] * one_c;
    m[3][3] = 1.0;
    Affine3D::new(m).expect("rotation matrix is always invertible")
}

/// Subtracts the plane-count-weighted mean of the 6 rigid parameters from
/// every segment pose. Identical poses demean to exact zero.
pub fn demean_motions(motions: &[RigidMotion], weights: &[usize]) -> Vec<RigidMotion> {
    let all_equal = motions.windows(2).all(|w| w[0] == w[1]);
    if all_equal {
        return motions.iter().map(|m| m.sub(&motions[0])).collect();
    }
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut mean = RigidMotion::identity();
    for (m, &w) in motions.iter().zip(weights.iter()) {
        let w = w as f64;
        for i in 0..3 {
            mean.rotation[i] += w * m.rotation[i];
            mean.translation_mm[i] += w * m.translation_mm[i];
        }
    }
    for i in 0..3 {
        mean.rotation[i] /= total;
        mean.translation_mm[i] /= total;
    }
    motions.iter().map(|m| m.sub(&mean)).collect()
}

/// Simulates motion during acquisition.
///
/// The phase-encode axis is partitioned into contiguous blocks in centered
/// k-space order by `boundaries` (`boundaries[0] = 0`, last = axis length,
/// strictly increasing, one block per pose). Poses are demeaned, the volume
/// is resampled once per demeaned pose, and the composite k-space takes
/// block `i`'s planes from pose `i`'s spectrum. Returns the magnitude image.
pub fn apply_motion(
    vol: &Volume,
    motions: &[RigidMotion],
    boundaries: &[usize],
    axis: Axis3,
) -> Result<Volume> {
    if motions.is_empty() {
        return Err(Error::InvalidParameter("motion needs at least one pose".into()));
    }
    let n = [vol.shape().0, vol.shape().1, vol.shape().2][axis.index()];
    if boundaries.len() != motions.len() + 1
        || boundaries[0] != 0
        || *boundaries.last().unwrap() != n
        || boundaries.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::InvalidParameter(format!(
            "boundaries {boundaries:?} do not partition axis of length {n} into {} blocks",
            motions.len()
        )));
    }
    let weights: Vec<usize> = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
    let demeaned = demean_motions(motions, &weights);

    if demeaned.iter().all(|m| m.is_zero()) {
        // common motion only; nothing corrupts the composite
        return Ok(vol.clone());
    }

    let spectra: Vec<KSpace> = demeaned
        .iter()
        .map(|m| {
            let affine = m.to_affine(vol.spacing());
            let moved = resample_affine(vol, &affine)?;
            Ok(fft3(&moved))
        })
        .collect::<Result<_>>()?;

    let mut composite: Array3<Complex64> = spectra[0].data().clone();
    let (nx, ny, nz) = vol.shape();
    let half = n / 2;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let plane = [x, y, z][axis.index()];
                // acquisition (centered) position of this plane
                let centered = (plane + half) % n;
                let seg = segment_of(boundaries, centered);
                if seg != 0 {
                    composite[[x, y, z]] = spectra[seg].data()[[x, y, z]];
                }
            }
        }
    }
    Ok(ifft3(&KSpace::new(composite, vol.spacing())))
}

fn segment_of(boundaries: &[usize], pos: usize) -> usize {
    // boundaries is strictly increasing; find the block containing pos
    for i in 0..boundaries.len() - 1 {
        if pos >= boundaries[i] && pos < boundaries[i + 1] {
            return i;
        }
    }
    boundaries.len() - 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use rand::Rng;

    fn blob_volume(shape: (usize, usize, usize)) -> Volume {
        // compact interior blob so integer shifts never touch the boundary
        let (nx, ny, nz) = shape;
        let mut data = Array3::zeros(shape);
        let c = [(nx / 2) as f64, (ny / 2) as f64, (nz / 2) as f64];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let d2 = ((x as f64 - c[0]) / (nx as f64 / 6.0)).powi(2)
                        + ((y as f64 - c[1]) / (ny as f64 / 6.0)).powi(2)
                        + ((z as f64 - c[2]) / (nz as f64 / 6.0)).powi(2);
                    if d2 < 1.0 {
                        data[[x, y, z]] = 1.0 - d2;
                    }
                }
            }
        }
        Volume::from_data(data)
    }

    #[test]
    fn single_segment_identity_pose() {
        let vol = blob_volume((16, 16, 8));
        let out = apply_motion(&vol, &[RigidMotion::identity()], &[0, 16], Axis3::X).unwrap();
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn identical_poses_demean_to_identity() {
        let vol = blob_volume((16, 16, 8));
        let pose = RigidMotion::translation([3.0, -2.0, 1.0]);
        let out = apply_motion(&vol, &[pose, pose, pose], &[0, 5, 9, 16], Axis3::X).unwrap();
        let max_err = out
            .data()
            .iter()
            .zip(vol.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-10, "max err {max_err}");
    }

    #[test]
    fn identical_rotations_also_cancel() {
        let vol = blob_volume((12, 12, 6));
        let pose = RigidMotion { rotation: [0.0, 0.0, 0.2], translation_mm: [1.0, 0.0, 0.0] };
        let out = apply_motion(&vol, &[pose, pose], &[0, 7, 12], Axis3::Y).unwrap();
        let max_err = out
            .data()
            .iter()
            .zip(vol.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-10);
    }

    #[test]
    fn two_segment_translation_produces_phase_ramp() {
        // equal halves, relative shift 4 voxels: demeaned poses are +-2,
        // integer, so each segment spectrum is an exact Fourier ramp
        let n = 16usize;
        let vol = blob_volume((n, n, 8));
        let poses = [
            RigidMotion::identity(),
            RigidMotion::translation([4.0, 0.0, 0.0]),
        ];
        let boundaries = [0usize, n / 2, n];
        let out = apply_motion(&vol, &poses, &boundaries, Axis3::X).unwrap();

        // oracle: composite spectrum from explicitly shifted copies
        let k_clean = fft3(&vol);
        let half = n / 2;
        let mut expect = k_clean.data().clone();
        for x in 0..n {
            let centered = (x + half) % n;
            let d: f64 = if centered < half { -2.0 } else { 2.0 };
            // Fourier shift theorem: shift by d multiplies by e^{-2 pi i k d / N}
            let kx = x as f64;
            let ramp = Complex64::from_polar(
                1.0,
                -2.0 * std::f64::consts::PI * kx * d / n as f64,
            );
            for y in 0..n {
                for z in 0..8 {
                    expect[[x, y, z]] *= ramp;
                }
            }
        }
        let img_expect = ifft3(&KSpace::new(expect, vol.spacing()));
        let max_err = out
            .data()
            .iter()
            .zip(img_expect.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-8, "ramp oracle mismatch {max_err}");
    }

    #[test]
    fn adding_common_motion_changes_nothing() {
        let vol = blob_volume((12, 12, 6));
        let mut rng = rng_stream(60, 0);
        let base: Vec<RigidMotion> = (0..3)
            .map(|_| RigidMotion {
                rotation: [0.0, 0.0, rng.gen_range(-0.05..0.05)],
                translation_mm: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0],
            })
            .collect();
        let common = RigidMotion {
            rotation: [0.0, 0.0, 0.03],
            translation_mm: [0.5, -0.25, 0.0],
        };
        let shifted: Vec<RigidMotion> = base
            .iter()
            .map(|m| RigidMotion {
                rotation: [
                    m.rotation[0] + common.rotation[0],
                    m.rotation[1] + common.rotation[1],
                    m.rotation[2] + common.rotation[2],
                ],
                translation_mm: [
                    m.translation_mm[0] + common.translation_mm[0],
                    m.translation_mm[1] + common.translation_mm[1],
                    m.translation_mm[2] + common.translation_mm[2],
                ],
            })
            .collect();
        let boundaries = [0usize, 4, 8, 12];
        let a = apply_motion(&vol, &base, &boundaries, Axis3::Y).unwrap();
        let b = apply_motion(&vol, &shifted, &boundaries, Axis3::Y).unwrap();
        let max_err = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-10, "demeaning invariance violated: {max_err}");
    }

    #[test]
    fn bad_boundaries_rejected() {
        let vol = blob_volume((8, 8, 4));
        let pose = RigidMotion::identity();
        assert!(apply_motion(&vol, &[pose, pose], &[0, 8], Axis3::X).is_err());
        assert!(apply_motion(&vol, &[pose, pose], &[0, 0, 8], Axis3::X).is_err());
        assert!(apply_motion(&vol, &[pose, pose], &[0, 4, 7], Axis3::X).is_err());
        assert!(apply_motion(&vol, &[], &[0, 8], Axis3::X).is_err());
    }
}
