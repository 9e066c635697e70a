//! 3D discrete Fourier transforms and k-space grid utilities.
//!
//! Convention (part of the public contract): forward transform is
//! unnormalized, inverse carries the 1/N factor. DC sits at index (0,0,0);
//! [`center_shift`] moves it to the grid centre for mask construction.
//! Mixed-radix shapes are supported.

use ndarray::Array3;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::volume::Volume;

/// Complex-valued 3D frequency grid matching a source [`Volume`] shape.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpace {
    data: Array3<Complex64>,
    spacing: [f64; 3],
}

impl KSpace {
    pub fn new(data: Array3<Complex64>, spacing: [f64; 3]) -> Self {
        Self { data, spacing }
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn num_samples(&self) -> usize {
        self.data.len()
    }

    /// Largest sample modulus over the grid.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Mean image-domain power of the signal this spectrum represents.
    ///
    /// By Parseval with the inverse-1/N convention:
    /// `mean_v |x_v|^2 = (1/N^2) * sum_k |K_k|^2`.
    pub fn mean_image_power(&self) -> f64 {
        let n = self.num_samples() as f64;
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / (n * n)
    }
}

/// Forward unnormalized 3D DFT of a real volume; DC at (0,0,0).
pub fn fft3(vol: &Volume) -> KSpace {
    let data = vol.data().mapv(|v| Complex64::new(v, 0.0));
    let mut k = KSpace::new(data, vol.spacing());
    transform_all_axes(k.data_mut(), Direction::Forward);
    k
}

/// Inverse 3D DFT with 1/N normalization; returns the magnitude per voxel.
pub fn ifft3(k: &KSpace) -> Volume {
    let complex = ifft3_complex(k);
    Volume::new(complex.mapv(|c| c.norm()), k.spacing())
        .expect("spacing validated on construction")
}

/// Inverse 3D DFT with 1/N normalization, keeping complex voxel values.
pub fn ifft3_complex(k: &KSpace) -> Array3<Complex64> {
    let mut data = k.data().clone();
    transform_all_axes(&mut data, Direction::Inverse);
    let scale = 1.0 / (data.len() as f64);
    data.mapv_inplace(|c| c * scale);
    data
}

/// Cyclic half-shift on every axis so DC sits at the grid centre
/// (index floor(N/2) per axis). Involutive for even shapes.
pub fn center_shift(k: &KSpace) -> KSpace {
    KSpace::new(roll3(k.data(), ShiftKind::Forward), k.spacing())
}

/// Inverse of [`center_shift`] for any shape (identical to it for even shapes).
pub fn center_unshift(k: &KSpace) -> KSpace {
    KSpace::new(roll3(k.data(), ShiftKind::Backward), k.spacing())
}

enum ShiftKind {
    Forward,
    Backward,
}

fn roll3(src: &Array3<Complex64>, kind: ShiftKind) -> Array3<Complex64> {
    let (nx, ny, nz) = src.dim();
    let shift = |n: usize| match kind {
        ShiftKind::Forward => n / 2,
        ShiftKind::Backward => n - n / 2,
    };
    let (sx, sy, sz) = (shift(nx), shift(ny), shift(nz));
    let mut out = Array3::zeros((nx, ny, nz));
    for x in 0..nx {
        let tx = (x + sx) % nx;
        for y in 0..ny {
            let ty = (y + sy) % ny;
            for z in 0..nz {
                let tz = (z + sz) % nz;
                out[[tx, ty, tz]] = src[[x, y, z]];
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Inverse,
}

/// Runs 1D transforms along all three axes. Each lane is copied to a scratch
/// buffer, transformed, and copied back; results are independent of any
/// caller-side parallelism because lanes never overlap.
fn transform_all_axes(data: &mut Array3<Complex64>, dir: Direction) {
    let mut planner = FftPlanner::new();
    let (nx, ny, nz) = data.dim();
    for (axis, len) in [(0usize, nx), (1usize, ny), (2usize, nz)] {
        let fft = match dir {
            Direction::Forward => planner.plan_fft_forward(len),
            Direction::Inverse => planner.plan_fft_inverse(len),
        };
        let mut lane = vec![Complex64::default(); len];
        let (da, db) = other_axes(axis, (nx, ny, nz));
        for a in 0..da {
            for b in 0..db {
                for (i, slot) in lane.iter_mut().enumerate() {
                    *slot = data[index_for(axis, i, a, b)];
                }
                fft.process(&mut lane);
                for (i, slot) in lane.iter().enumerate() {
                    data[index_for(axis, i, a, b)] = *slot;
                }
            }
        }
    }
}

fn other_axes(axis: usize, dims: (usize, usize, usize)) -> (usize, usize) {
    match axis {
        0 => (dims.1, dims.2),
        1 => (dims.0, dims.2),
        _ => (dims.0, dims.1),
    }
}

fn index_for(axis: usize, i: usize, a: usize, b: usize) -> [usize; 3] {
    match axis {
        0 => [i, a, b],
        1 => [a, i, b],
        _ => [a, b, i],
    }
}
