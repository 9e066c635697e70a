//! Core 3D grid types: scalar volumes, label volumes, and affine transforms.
//!
//! A [`Volume`] is a real-valued grid with voxel spacing in mm; a
//! [`LabelVolume`] carries integer class ids. Both are immutable value types
//! once built. Resampling is trilinear (nearest-neighbour for labels) about
//! the grid centre with zero fill outside the grid.

mod nifti;

pub use nifti::{load_nifti, save_nifti, save_nifti_with_descrip, NiftiMeta};

use ndarray::Array3;

use crate::error::{Error, Result};

/// Real-valued 3D scalar grid with voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f64>,
    spacing: [f64; 3],
}

impl Volume {
    /// Builds a volume from voxel data and spacing (mm/voxel).
    pub fn new(data: Array3<f64>, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Self { data, spacing })
    }

    /// Builds a volume with unit spacing.
    pub fn from_data(data: Array3<f64>) -> Self {
        Self { data, spacing: [1.0, 1.0, 1.0] }
    }

    /// Constant-valued volume.
    pub fn constant(shape: (usize, usize, usize), value: f64) -> Self {
        Self::from_data(Array3::from_elem(shape, value))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    /// Replaces the data grid, keeping spacing. Shapes may differ.
    pub fn with_data(&self, data: Array3<f64>) -> Self {
        Self { data, spacing: self.spacing }
    }

    /// Affine rescale of intensities to [0, 1]; constant volumes map to zeros.
    pub fn normalize(&self) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in self.data.iter() {
            min = min.min(v);
            max = max.max(v);
        }
        let range = max - min;
        let data = if range > 0.0 {
            self.data.mapv(|v| (v - min) / range)
        } else {
            Array3::zeros(self.data.dim())
        };
        self.with_data(data)
    }
}

/// Integer class id per voxel, ids in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    labels: Array3<u8>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(labels: Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
            return Err(Error::LabelOutOfRange { label: bad, num_classes });
        }
        Ok(Self { labels, num_classes })
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    /// Voxel count carrying the given class id.
    pub fn class_count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// 4x4 affine transform over voxel coordinates; last row (0,0,0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine3D {
    m: [[f64; 4]; 4],
}

impl Affine3D {
    /// Validates the last row and invertibility of the linear part.
    pub fn new(m: [[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidParameter(
                "affine last row must be (0,0,0,1)".into(),
            ));
        }
        let a = Self { m };
        let det = a.det3();
        if det.abs() < 1e-12 {
            return Err(Error::SingularTransform { det });
        }
        Ok(a)
    }

    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { m }
    }

    /// Pure translation in voxel units.
    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        for i in 0..3 {
            a.m[i][3] = t[i];
        }
        a
    }

    /// Rotation about one coordinate axis (0=x, 1=y, 2=z), angle in radians.
    pub fn rotation_axis(axis: usize, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (u, v) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        let mut a = Self::identity();
        a.m[u][u] = c;
        a.m[u][v] = -s;
        a.m[v][u] = s;
        a.m[v][v] = c;
        a
    }

    /// Anisotropic scaling.
    pub fn scaling(s: [f64; 3]) -> Self {
        let mut a = Self::identity();
        for i in 0..3 {
            a.m[i][i] = s[i];
        }
        a
    }

    /// Axis flip (improper transform); used by geometric augmentation only.
    pub fn flip(axis: usize) -> Self {
        let mut a = Self::identity();
        a.m[axis][axis] = -1.0;
        a
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    /// Composition `self * other` (apply `other` first).
    pub fn compose(&self, other: &Affine3D) -> Affine3D {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = (0..4).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Affine3D { m }
    }

    fn det3(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via adjugate of the 3x3 linear part.
    pub fn inverse(&self) -> Result<Affine3D> {
        let det = self.det3();
        if det.abs() < 1e-12 {
            return Err(Error::SingularTransform { det });
        }
        let m = &self.m;
        let inv_det = 1.0 / det;
        let mut r = [[0.0; 4]; 4];
        r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
        r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
        r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
        r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
        r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
        r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
        r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
        r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
        r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
        // translation of the inverse: -A^{-1} t
        for i in 0..3 {
            r[i][3] = -(r[i][0] * m[0][3] + r[i][1] * m[1][3] + r[i][2] * m[2][3]);
        }
        r[3][3] = 1.0;
        Ok(Affine3D { m: r })
    }

    /// Applies the transform to a point.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] =
                self.m[i][0] * p[0] + self.m[i][1] * p[1] + self.m[i][2] * p[2] + self.m[i][3];
        }
        out
    }

    /// True when the transform is exactly the identity matrix.
    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Trilinear resampling of `vol` under transform `t` about the grid centre.
///
/// `output(v) = input(t^{-1} (v - c) + c)` in voxel coordinates with centre
/// `c = (shape - 1) / 2`; samples outside the grid read 0.
pub fn resample_affine(vol: &Volume, t: &Affine3D) -> Result<Volume> {
    // Exact identity keeps the data bit-for-bit.
    if t.is_identity() {
        return Ok(vol.clone());
    }
    let inv = t.inverse()?;
    let (nx, ny, nz) = vol.shape();
    let c = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];
    let src = vol.data();
    let mut out = Array3::zeros((nx, ny, nz));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = inv.apply([x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]]);
                let q = [p[0] + c[0], p[1] + c[1], p[2] + c[2]];
                out[[x, y, z]] = trilinear(src, q);
            }
        }
    }
    Ok(vol.with_data(out))
}

/// Nearest-neighbour resampling for label maps; outside reads class 0.
pub fn resample_labels(labels: &LabelVolume, t: &Affine3D) -> Result<LabelVolume> {
    if t.is_identity() {
        return Ok(labels.clone());
    }
    let inv = t.inverse()?;
    let (nx, ny, nz) = labels.shape();
    let c = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];
    let src = labels.labels();
    let mut out = Array3::zeros((nx, ny, nz));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = inv.apply([x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]]);
                let q = [
                    (p[0] + c[0]).round() as i64,
                    (p[1] + c[1]).round() as i64,
                    (p[2] + c[2]).round() as i64,
                ];
                if q[0] >= 0
                    && q[0] < nx as i64
                    && q[1] >= 0
                    && q[1] < ny as i64
                    && q[2] >= 0
                    && q[2] < nz as i64
                {
                    out[[x, y, z]] = src[[q[0] as usize, q[1] as usize, q[2] as usize]];
                }
            }
        }
    }
    LabelVolume::new(out, labels.num_classes())
}

fn trilinear(src: &Array3<f64>, q: [f64; 3]) -> f64 {
    let dims = src.dim();
    let dims = [dims.0 as i64, dims.1 as i64, dims.2 as i64];
    let base = [q[0].floor(), q[1].floor(), q[2].floor()];
    let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    let base = [base[0] as i64, base[1] as i64, base[2] as i64];
    let mut acc = 0.0;
    for dx in 0..2i64 {
        let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
        if wx == 0.0 {
            continue;
        }
        for dy in 0..2i64 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            for dz in 0..2i64 {
                let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
                if wz == 0.0 {
                    continue;
                }
                let (ix, iy, iz) = (base[0] + dx, base[1] + dy, base[2] + dz);
                let v = if ix >= 0
                    && ix < dims[0]
                    && iy >= 0
                    && iy < dims[1]
                    && iz >= 0
                    && iz < dims[2]
                {
                    src[[ix as usize, iy as usize, iz as usize]]
                } else {
                    0.0
                };
                acc += wx * wy * wz * v;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_volume(shape: (usize, usize, usize), at: [usize; 3]) -> Volume {
        let mut d = Array3::zeros(shape);
        d[at] = 1.0;
        Volume::from_data(d)
    }

    #[test]
    fn normalize_linear_rescale() {
        let v = Volume::from_data(Array3::from_shape_vec((3, 1, 1), vec![2.0, 4.0, 6.0]).unwrap());
        let n = v.normalize();
        let got: Vec<f64> = n.data().iter().copied().collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_maps_to_zero() {
        let v = Volume::constant((2, 1, 1), 7.0);
        let n = v.normalize();
        assert!(n.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_idempotent_and_extrema() {
        let mut rng = crate::rng::rng_stream(11, 0);
        use rand::Rng;
        let data = Array3::from_shape_fn((5, 4, 3), |_| rng.gen_range(-3.0..9.0));
        let v = Volume::from_data(data);
        let n1 = v.normalize();
        let n2 = n1.normalize();
        assert_eq!(n1, n2);
        let min = n1.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = n1.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn resample_identity_is_exact() {
        let mut rng = crate::rng::rng_stream(12, 0);
        use rand::Rng;
        let data = Array3::from_shape_fn((6, 5, 4), |_| rng.gen_range(0.0..1.0));
        let v = Volume::from_data(data);
        let r = resample_affine(&v, &Affine3D::identity()).unwrap();
        assert_eq!(v, r);
    }

    #[test]
    fn resample_integer_translation_matches_index_shift() {
        // +1 voxel along x moves content from x to x+1, zero fill at x=0
        let v = delta_volume((8, 8, 8), [3, 4, 5]);
        let t = Affine3D::translation([1.0, 0.0, 0.0]);
        let r = resample_affine(&v, &t).unwrap();
        let mut expect = Array3::zeros((8, 8, 8));
        expect[[4, 4, 5]] = 1.0;
        for (a, b) in r.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "got {a} expect {b}");
        }
    }

    #[test]
    fn four_quarter_turns_return_interior() {
        // axis-aligned bar phantom, interior content only
        let mut d = Array3::zeros((16, 16, 4));
        for x in 5..11 {
            for y in 7..9 {
                for z in 1..3 {
                    d[[x, y, z]] = 1.0;
                }
            }
        }
        let v = Volume::from_data(d);
        let rot = Affine3D::rotation_axis(2, std::f64::consts::FRAC_PI_2);
        let mut cur = v.clone();
        for _ in 0..4 {
            cur = resample_affine(&cur, &rot).unwrap();
        }
        // interior voxels (2 away from edges) must return to original values
        for x in 2..14 {
            for y in 2..14 {
                for z in 0..4 {
                    let a = cur.data()[[x, y, z]];
                    let b = v.data()[[x, y, z]];
                    assert!((a - b).abs() < 1e-3, "at ({x},{y},{z}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn single_quarter_turn_moves_bar() {
        let mut d = Array3::zeros((9, 9, 1));
        for x in 2..7 {
            d[[x, 4, 0]] = 1.0;
        }
        let v = Volume::from_data(d);
        let rot = Affine3D::rotation_axis(2, std::f64::consts::FRAC_PI_2);
        let r = resample_affine(&v, &rot).unwrap();
        // bar along x becomes bar along y
        assert!(r.data()[[4, 2, 0]] > 0.99);
        assert!(r.data()[[4, 6, 0]] > 0.99);
        assert!(r.data()[[2, 4, 0]] < 0.01 || r.data()[[4, 4, 0]] > 0.99);
    }

    #[test]
    fn affine_rejects_bad_last_row() {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        m[3][0] = 0.5;
        assert!(Affine3D::new(m).is_err());
    }

    #[test]
    fn affine_inverse_composes_to_identity() {
        let t = Affine3D::rotation_axis(1, 0.3)
            .compose(&Affine3D::translation([1.5, -2.0, 0.25]))
            .compose(&Affine3D::scaling([1.1, 0.9, 1.0]));
        let inv = t.inverse().unwrap();
        let id = t.compose(&inv);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((id.matrix()[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_transform_rejected() {
        let t = [
            [1.0, 0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert!(matches!(Affine3D::new(t), Err(Error::SingularTransform { .. })));
    }

    #[test]
    fn label_volume_validates_ids() {
        let l = Array3::from_elem((2, 2, 2), 3u8);
        assert!(LabelVolume::new(l, 2).is_err());
    }
}
