//! Procedural phantoms: an elliptical "head" with an annular gray-matter
//! ribbon, exact labels, and a three-tissue QC mask.

use ndarray::Array3;
use rand::Rng;

use crate::error::Result;
use crate::rng::rng_stream;
use crate::volume::{LabelVolume, Volume};

/// Tissue ids in the QC mask.
pub const TISSUE_AIR: u8 = 0;
pub const TISSUE_WHITE: u8 = 1;
pub const TISSUE_GRAY: u8 = 2;

/// Synthetic dataset: images with paired binary labels (gray ribbon vs
/// rest) and a three-class tissue mask for SNR/CNR.
#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub images: Vec<Volume>,
    pub labels: Vec<LabelVolume>,
    pub tissues: Vec<LabelVolume>,
    pub seed: u64,
}

impl PhantomDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Default phantom grid.
pub const DEFAULT_SHAPE: (usize, usize, usize) = (48, 48, 4);

/// Generates `n` deterministic phantoms for a seed.
pub fn generate_phantoms(n: usize, seed: u64, shape: (usize, usize, usize)) -> Result<PhantomDataset> {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut tissues = Vec::with_capacity(n);
    for i in 0..n {
        let (img, lab, tis) = one_phantom(shape, rng_stream(seed, i as u64));
        images.push(img);
        labels.push(LabelVolume::new(lab, 2)?);
        tissues.push(LabelVolume::new(tis, 3)?);
    }
    Ok(PhantomDataset { images, labels, tissues, seed })
}

fn one_phantom(
    shape: (usize, usize, usize),
    mut rng: impl Rng,
) -> (Volume, Array3<u8>, Array3<u8>) {
    let (nx, ny, nz) = shape;
    let cx = nx as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let cy = ny as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let rx = nx as f64 * rng.gen_range(0.30..0.40);
    let ry = ny as f64 * rng.gen_range(0.30..0.40);
    // ribbon between inner_frac * r and r (squared-radius space)
    let inner_frac = rng.gen_range(0.66..0.80);
    let background = rng.gen_range(0.02..0.06);
    let white = rng.gen_range(0.40..0.50);
    let gray = rng.gen_range(0.80..0.92);
    // smooth in-plane intensity drift
    let gx = rng.gen_range(-0.04..0.04);
    let gy = rng.gen_range(-0.04..0.04);
    let taper = rng.gen_range(0.0..0.02);
    let texture = rng.gen_range(0.005..0.015);

    let mut img = Array3::zeros((nx, ny, nz));
    let mut lab = Array3::zeros((nx, ny, nz));
    let mut tis = Array3::zeros((nx, ny, nz));
    let zc = (nz as f64 - 1.0) / 2.0;
    for z in 0..nz {
        // radii shrink slightly towards the outer slices
        let shrink = 1.0 - taper * (z as f64 - zc).abs();
        let (rxz, ryz) = (rx * shrink, ry * shrink);
        for x in 0..nx {
            for y in 0..ny {
                let ex = (x as f64 - cx) / rxz;
                let ey = (y as f64 - cy) / ryz;
                let r2 = ex * ex + ey * ey;
                let (value, label, tissue) = if r2 > 1.0 {
                    (background, 0u8, TISSUE_AIR)
                } else if r2 > inner_frac * inner_frac {
                    (gray, 1u8, TISSUE_GRAY)
                } else {
                    (white, 0u8, TISSUE_WHITE)
                };
                let drift =
                    gx * (x as f64 - cx) / nx as f64 + gy * (y as f64 - cy) / ny as f64;
                let jitter = rng.gen_range(-texture..texture);
                img[[x, y, z]] = (value + drift + jitter).clamp(0.0, 1.0);
                lab[[x, y, z]] = label;
                tis[[x, y, z]] = tissue;
            }
        }
    }
    (Volume::from_data(img), lab, tis)
}

/// Best Dice achievable on a clean image by thresholding intensity;
/// independent check that phantoms are separable.
pub fn threshold_dice(image: &Volume, labels: &LabelVolume) -> f64 {
    let mut best = 0.0f64;
    for t in 1..40 {
        let thr = t as f64 / 40.0;
        let mut p = 0usize;
        let mut tr = 0usize;
        let mut both = 0usize;
        for (&v, &l) in image.data().iter().zip(labels.labels().iter()) {
            let fg = v >= thr;
            let gt = l == 1;
            p += fg as usize;
            tr += gt as usize;
            both += (fg && gt) as usize;
        }
        if p + tr > 0 {
            best = best.max(2.0 * both as f64 / (p + tr) as f64);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let a = generate_phantoms(4, 99, (24, 24, 2)).unwrap();
        let b = generate_phantoms(4, 99, (24, 24, 2)).unwrap();
        for i in 0..4 {
            assert_eq!(a.images[i].data(), b.images[i].data());
            assert_eq!(a.labels[i].labels(), b.labels[i].labels());
        }
        let c = generate_phantoms(1, 100, (24, 24, 2)).unwrap();
        assert_ne!(a.images[0].data(), c.images[0].data());
    }

    #[test]
    fn foreground_fraction_in_range() {
        let ds = generate_phantoms(100, 7, DEFAULT_SHAPE).unwrap();
        for (i, lab) in ds.labels.iter().enumerate() {
            let fg = lab.class_count(1) as f64 / (48 * 48 * 4) as f64;
            assert!(
                (0.02..=0.40).contains(&fg),
                "phantom {i} foreground fraction {fg}"
            );
        }
    }

    #[test]
    fn clean_phantoms_threshold_separable() {
        let ds = generate_phantoms(20, 8, DEFAULT_SHAPE).unwrap();
        for i in 0..ds.len() {
            let d = threshold_dice(&ds.images[i], &ds.labels[i]);
            assert!(d >= 0.95, "phantom {i} best threshold dice {d}");
        }
    }

    #[test]
    fn every_phantom_has_nonempty_foreground_and_tissues() {
        let ds = generate_phantoms(30, 9, (32, 32, 4)).unwrap();
        for i in 0..ds.len() {
            assert!(ds.labels[i].class_count(1) > 0);
            assert!(ds.tissues[i].class_count(TISSUE_WHITE) > 16);
            assert!(ds.tissues[i].class_count(TISSUE_GRAY) > 16);
        }
    }
}
