//! Single-artefact k-space and image-domain operators.

use ndarray::Array3;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::spectral::KSpace;
use crate::volume::Volume;

/// Grid axis selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis3 {
    X,
    Y,
    Z,
}

impl Axis3 {
    pub const ALL: [Axis3; 3] = [Axis3::X, Axis3::Y, Axis3::Z];

    pub fn index(self) -> usize {
        match self {
            Axis3::X => 0,
            Axis3::Y => 1,
            Axis3::Z => 2,
        }
    }
}

/// Kept-line selection pattern for the wrap/aliasing artefact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrapPattern {
    UniformRandom,
    RegularInterval,
}

/// Overwrites one k-space sample with `m * max|k| * e^{i phase}`.
///
/// The Hermitian partner is left untouched; the magnitude image absorbs the
/// resulting asymmetry.
pub fn apply_rf_spike(k: &KSpace, m: f64, loc: [usize; 3], phase: f64) -> Result<KSpace> {
    if loc == [0, 0, 0] {
        return Err(Error::InvalidParameter("spike location must not be DC".into()));
    }
    if m < 0.0 {
        return Err(Error::InvalidParameter(format!("spike magnitude {m} < 0")));
    }
    let (nx, ny, nz) = k.shape();
    if loc[0] >= nx || loc[1] >= ny || loc[2] >= nz {
        return Err(Error::InvalidParameter(format!(
            "spike location {loc:?} out of bounds for shape ({nx},{ny},{nz})"
        )));
    }
    let mut out = k.clone();
    let value = Complex64::from_polar(m * k.max_abs(), phase);
    out.data_mut()[[loc[0], loc[1], loc[2]]] = value;
    Ok(out)
}

/// Adds i.i.d. zero-mean complex Gaussian noise to every k-space sample,
/// calibrated via Parseval so the image-domain SNR matches `target_snr_db`.
///
/// With the inverse-1/N convention, per-sample complex variance `v` in
/// k-space becomes image noise power `v / N`; `v` is solved from the clean
/// mean image power. A `+inf` target is treated as zero noise.
pub fn apply_k_noise<R: Rng>(k: &KSpace, target_snr_db: f64, rng: &mut R) -> Result<KSpace> {
    if target_snr_db.is_nan() || target_snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidParameter(format!(
            "target SNR must be a finite dB value or +inf, got {target_snr_db}"
        )));
    }
    if target_snr_db == f64::INFINITY {
        return Ok(k.clone());
    }
    let signal_power = k.mean_image_power();
    if signal_power <= 0.0 {
        return Err(Error::InvalidParameter(
            "source volume is all-zero; SNR calibration undefined".into(),
        ));
    }
    let n = k.num_samples() as f64;
    let snr_linear = 10f64.powf(target_snr_db / 10.0);
    let complex_variance = n * signal_power / snr_linear;
    let per_component = Normal::new(0.0, (complex_variance / 2.0).sqrt())
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;

    let mut out = k.clone();
    for c in out.data_mut().iter_mut() {
        let re = per_component.sample(rng);
        let im = per_component.sample(rng);
        *c += Complex64::new(re, im);
    }
    Ok(out)
}

/// Low-pass blur: zeros centered frequencies outside the band of width
/// `ceil(N / ratio)` along each chosen axis. Grid size is unchanged.
pub fn apply_blur(k: &KSpace, ratio: f64, axes: &[Axis3]) -> Result<KSpace> {
    if !(ratio >= 1.0) {
        return Err(Error::InvalidParameter(format!("blur ratio {ratio} < 1")));
    }
    if axes.is_empty() {
        return Err(Error::InvalidParameter("blur axis set is empty".into()));
    }
    let dims = [k.shape().0, k.shape().1, k.shape().2];
    let mut out = k.clone();
    for &axis in axes {
        let n = dims[axis.index()];
        let width = ((n as f64) / ratio).ceil() as usize;
        if width >= n {
            continue;
        }
        // kept window in centered coordinates, DC at floor(N/2)
        let start = n / 2 - width / 2;
        let end = start + width;
        zero_where(out.data_mut(), axis, |idx| {
            let centered = (idx + n / 2) % n;
            centered < start || centered >= end
        });
    }
    Ok(out)
}

/// Wrap/aliasing artefact: zeros k-space planes perpendicular to `axis`.
/// The DC plane is always kept.
pub fn apply_wrap<R: Rng>(
    k: &KSpace,
    fraction: f64,
    pattern: WrapPattern,
    axis: Axis3,
    rng: &mut R,
) -> Result<KSpace> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "wrap removal fraction {fraction} outside (0,1)"
        )));
    }
    let n = [k.shape().0, k.shape().1, k.shape().2][axis.index()];
    let removed: Vec<bool> = match pattern {
        WrapPattern::RegularInterval => {
            // keep every s-th plane, s chosen so kept fraction ~= 1 - fraction
            let step = (1.0 / (1.0 - fraction)).round().max(1.0) as usize;
            (0..n).map(|i| i % step != 0).collect()
        }
        WrapPattern::UniformRandom => {
            let count = ((n.saturating_sub(1)) as f64 * fraction).round() as usize;
            let mut pool: Vec<usize> = (1..n).collect();
            // partial Fisher-Yates over the non-DC planes
            let mut flags = vec![false; n];
            for i in 0..count.min(pool.len()) {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
                flags[pool[i]] = true;
            }
            flags
        }
    };
    let mut out = k.clone();
    zero_where(out.data_mut(), axis, |idx| removed[idx]);
    Ok(out)
}

/// Multiplies the volume by `exp(P(x))` where `P` is a polynomial of total
/// degree `order` over coordinates normalized to [-1, 1].
///
/// Coefficients follow [`bias_term_exponents`] order; the field is strictly
/// positive by construction.
pub fn apply_bias_field(vol: &Volume, coeffs: &[f64], order: usize) -> Result<Volume> {
    if order < 1 {
        return Err(Error::InvalidParameter("bias field order must be >= 1".into()));
    }
    let terms = bias_term_exponents(order);
    if coeffs.len() != terms.len() {
        return Err(Error::InvalidParameter(format!(
            "expected {} coefficients for order {order}, got {}",
            terms.len(),
            coeffs.len()
        )));
    }
    let (nx, ny, nz) = vol.shape();
    let xs = normalized_coords(nx);
    let ys = normalized_coords(ny);
    let zs = normalized_coords(nz);
    let mut out = Array3::zeros((nx, ny, nz));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mut p = 0.0;
                for (&c, &(i, j, kk)) in coeffs.iter().zip(terms.iter()) {
                    if c != 0.0 {
                        p += c * xs[x].powi(i as i32) * ys[y].powi(j as i32) * zs[z].powi(kk as i32);
                    }
                }
                out[[x, y, z]] = vol.data()[[x, y, z]] * p.exp();
            }
        }
    }
    Ok(vol.with_data(out))
}

/// Monomial exponents (i, j, k) with i+j+k <= order, in (degree, i, j)
/// lexicographic order. Defines the coefficient layout for the bias field.
pub fn bias_term_exponents(order: usize) -> Vec<(usize, usize, usize)> {
    let mut terms = Vec::new();
    for d in 0..=order {
        for i in 0..=d {
            for j in 0..=(d - i) {
                terms.push((i, j, d - i - j));
            }
        }
    }
    terms
}

fn normalized_coords(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n.max(1)];
    }
    (0..n).map(|i| 2.0 * i as f64 / (n as f64 - 1.0) - 1.0).collect()
}

fn zero_where<F: Fn(usize) -> bool>(data: &mut Array3<Complex64>, axis: Axis3, kill: F) {
    let (nx, ny, nz) = data.dim();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let idx = [x, y, z][axis.index()];
                if kill(idx) {
                    data[[x, y, z]] = Complex64::new(0.0, 0.0);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use crate::spectral::{fft3, ifft3, ifft3_complex};
    use ndarray::Array3;
    use rand::Rng as _;

    fn random_volume(shape: (usize, usize, usize), seed: u64) -> Volume {
        let mut rng = rng_stream(seed, 0);
        Volume::from_data(Array3::from_shape_fn(shape, |_| rng.gen_range(0.1..1.0)))
    }

    #[test]
    fn spike_overwrite_with_existing_value_is_identity() {
        let vol = random_volume((8, 8, 8), 40);
        let k = fft3(&vol);
        let loc = [2, 3, 1];
        let existing = k.data()[[2, 3, 1]];
        let m = existing.norm() / k.max_abs();
        let out = apply_rf_spike(&k, m, loc, existing.arg()).unwrap();
        let max_err = out
            .data()
            .iter()
            .zip(k.data().iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-10);
    }

    #[test]
    fn spike_zero_magnitude_zeroes_sample() {
        let vol = random_volume((6, 6, 6), 41);
        let k = fft3(&vol);
        let out = apply_rf_spike(&k, 0.0, [1, 0, 0], 0.3).unwrap();
        assert_eq!(out.data()[[1, 0, 0]], Complex64::new(0.0, 0.0));
        for (idx, (a, b)) in out.data().iter().zip(k.data().iter()).enumerate() {
            if idx != 6 * 6 {
                // flat index of [1,0,0] in C order is 36
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn spike_on_constant_image_makes_analytic_stripe() {
        // k-space spike at (1,0,0) over a constant image: the image magnitude
        // is |c + a e^{2 pi i x / N}| with c the DC level and a the spike / N.
        let n = 16usize;
        let vol = Volume::constant((n, n, n), 1.0);
        let k = fft3(&vol);
        let m = 0.5;
        let phase = 0.7;
        let out = apply_rf_spike(&k, m, [1, 0, 0], phase).unwrap();
        let img = ifft3(&out);
        let total = (n * n * n) as f64;
        let spike = Complex64::from_polar(m * k.max_abs(), phase);
        for x in 0..n {
            let ramp = Complex64::from_polar(
                1.0,
                2.0 * std::f64::consts::PI * x as f64 / n as f64,
            );
            let expect = (Complex64::new(1.0, 0.0) + spike * ramp / total).norm();
            for y in 0..n {
                for z in 0..n {
                    let got = img.data()[[x, y, z]];
                    assert!((got - expect).abs() < 1e-10, "({x},{y},{z}): {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn spike_rejects_dc_and_out_of_bounds() {
        let k = fft3(&random_volume((4, 4, 4), 42));
        assert!(apply_rf_spike(&k, 2.0, [0, 0, 0], 0.0).is_err());
        assert!(apply_rf_spike(&k, 2.0, [4, 0, 0], 0.0).is_err());
    }

    #[test]
    fn noise_infinite_snr_is_identity() {
        let k = fft3(&random_volume((6, 6, 6), 43));
        let mut rng = rng_stream(43, 1);
        let out = apply_k_noise(&k, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(out.data(), k.data());
    }

    #[test]
    fn noise_rejects_nan_and_all_zero() {
        let k = fft3(&random_volume((4, 4, 4), 44));
        let mut rng = rng_stream(44, 1);
        assert!(apply_k_noise(&k, f64::NAN, &mut rng).is_err());
        let zero = fft3(&Volume::constant((4, 4, 4), 0.0));
        assert!(apply_k_noise(&zero, 10.0, &mut rng).is_err());
    }

    #[test]
    fn noise_hits_target_snr() {
        // constant unit volume, 64^3 is slow in debug; 32^3 has the same math
        let n = 32usize;
        let vol = Volume::constant((n, n, n), 1.0);
        let k = fft3(&vol);
        let clean = ifft3_complex(&k);
        for &target in &[20.0, 0.0] {
            let mut measured = Vec::new();
            for seed in 0..3u64 {
                let mut rng = rng_stream(45, seed);
                let noisy = apply_k_noise(&k, target, &mut rng).unwrap();
                let img = ifft3_complex(&noisy);
                let noise_power: f64 = img
                    .iter()
                    .zip(clean.iter())
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum::<f64>()
                    / (n * n * n) as f64;
                let signal_power: f64 =
                    clean.iter().map(|c| c.norm_sqr()).sum::<f64>() / (n * n * n) as f64;
                measured.push(10.0 * (signal_power / noise_power).log10());
            }
            let mean = measured.iter().sum::<f64>() / measured.len() as f64;
            assert!((mean - target).abs() < 1.0, "target {target} dB, measured {mean} dB");
        }
    }

    #[test]
    fn noise_minus_ten_db_power_ratio() {
        let n = 32usize;
        let vol = Volume::constant((n, n, n), 1.0);
        let k = fft3(&vol);
        let clean = ifft3_complex(&k);
        let signal_power: f64 = clean.iter().map(|c| c.norm_sqr()).sum::<f64>() / (n * n * n) as f64;
        let mut ratios = Vec::new();
        for seed in 0..10u64 {
            let mut rng = rng_stream(46, seed);
            let noisy = apply_k_noise(&k, -10.0, &mut rng).unwrap();
            let img = ifft3_complex(&noisy);
            let noise_power: f64 = img
                .iter()
                .zip(clean.iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                / (n * n * n) as f64;
            ratios.push(noise_power / signal_power);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 10.0).abs() < 1.5, "noise/signal ratio {mean}, want ~10");
    }

    #[test]
    fn blur_ratio_one_is_identity() {
        let k = fft3(&random_volume((8, 6, 4), 47));
        let out = apply_blur(&k, 1.0, &[Axis3::X, Axis3::Y, Axis3::Z]).unwrap();
        assert_eq!(out.data(), k.data());
    }

    #[test]
    fn blur_band_membership() {
        // sinusoid at frequency 1, N=16, ratio 2: width 8 band keeps it
        let n = 16usize;
        let mut data = Array3::zeros((n, 4, 4));
        for x in 0..n {
            for y in 0..4 {
                for z in 0..4 {
                    data[[x, y, z]] =
                        1.0 + 0.5 * (2.0 * std::f64::consts::PI * x as f64 / n as f64).cos();
                }
            }
        }
        let vol = Volume::from_data(data);
        let k = fft3(&vol);
        let kept = apply_blur(&k, 2.0, &[Axis3::X]).unwrap();
        let max_err = kept
            .data()
            .iter()
            .zip(k.data().iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-10, "in-band component altered: {max_err}");

        // frequency 7, ratio 4: width 4 band centred on DC excludes it
        let mut data7 = Array3::zeros((n, 4, 4));
        for x in 0..n {
            for y in 0..4 {
                for z in 0..4 {
                    data7[[x, y, z]] =
                        1.0 + 0.5 * (2.0 * std::f64::consts::PI * 7.0 * x as f64 / n as f64).cos();
                }
            }
        }
        let vol7 = Volume::from_data(data7);
        let out = apply_blur(&fft3(&vol7), 4.0, &[Axis3::X]).unwrap();
        let img = ifft3(&out);
        for &v in img.data().iter() {
            assert!((v - 1.0).abs() < 1e-10, "component not removed: {v}");
        }
    }

    #[test]
    fn blur_rejects_bad_args() {
        let k = fft3(&random_volume((4, 4, 4), 48));
        assert!(apply_blur(&k, 0.5, &[Axis3::X]).is_err());
        assert!(apply_blur(&k, 2.0, &[]).is_err());
    }

    #[test]
    fn wrap_keep_every_second_matches_ghost_superposition() {
        let n = 16usize;
        let vol = random_volume((n, n, 4), 49);
        let k = fft3(&vol);
        let mut rng = rng_stream(49, 1);
        // fraction 0.5 regular => keep every 2nd plane along y
        let out = apply_wrap(&k, 0.5, WrapPattern::RegularInterval, Axis3::Y, &mut rng).unwrap();
        let img = ifft3(&out);
        // oracle: |(orig + orig shifted by N/2 along y) / 2| via direct indexing
        let src = vol.data();
        for x in 0..n {
            for y in 0..n {
                for z in 0..4 {
                    let ghost = 0.5 * (src[[x, y, z]] + src[[x, (y + n / 2) % n, z]]);
                    let got = img.data()[[x, y, z]];
                    assert!(
                        (got - ghost.abs()).abs() < 1e-8,
                        "({x},{y},{z}): {got} vs {ghost}"
                    );
                }
            }
        }
    }

    #[test]
    fn wrap_tiny_fraction_is_identity() {
        let k = fft3(&random_volume((8, 8, 4), 50));
        let mut rng = rng_stream(50, 1);
        let out = apply_wrap(&k, 1e-6, WrapPattern::RegularInterval, Axis3::X, &mut rng).unwrap();
        assert_eq!(out.data(), k.data());
        let mut rng2 = rng_stream(50, 2);
        let out2 = apply_wrap(&k, 1e-6, WrapPattern::UniformRandom, Axis3::X, &mut rng2).unwrap();
        assert_eq!(out2.data(), k.data());
    }

    #[test]
    fn wrap_uniform_random_reproducible_and_keeps_dc() {
        let k = fft3(&random_volume((8, 8, 8), 51));
        let run = |seed| {
            let mut rng = rng_stream(51, seed);
            apply_wrap(&k, 0.5, WrapPattern::UniformRandom, Axis3::Z, &mut rng).unwrap()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a.data(), b.data());
        let c = run(10);
        assert_ne!(c.data(), a.data());
        // DC plane z=0 untouched
        for x in 0..8 {
            for y in 0..8 {
                assert_eq!(a.data()[[x, y, 0]], k.data()[[x, y, 0]]);
            }
        }
        // removed plane count matches fraction of the non-DC pool
        let removed = (0..8)
            .filter(|&z| (0..8).all(|x| (0..8).all(|y| a.data()[[x, y, z]].norm() == 0.0)))
            .count();
        assert_eq!(removed, 4); // round(0.5 * 7) = 4
    }

    #[test]
    fn wrap_rejects_out_of_range_fraction() {
        let k = fft3(&random_volume((4, 4, 4), 52));
        let mut rng = rng_stream(52, 1);
        assert!(apply_wrap(&k, 0.0, WrapPattern::RegularInterval, Axis3::X, &mut rng).is_err());
        assert!(apply_wrap(&k, 1.0, WrapPattern::RegularInterval, Axis3::X, &mut rng).is_err());
    }

    #[test]
    fn bias_zero_coeffs_is_identity() {
        let vol = random_volume((5, 5, 3), 53);
        let coeffs = vec![0.0; bias_term_exponents(3).len()];
        let out = apply_bias_field(&vol, &coeffs, 3).unwrap();
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn bias_constant_polynomial_scales_uniformly() {
        let vol = random_volume((4, 4, 4), 54);
        let mut coeffs = vec![0.0; bias_term_exponents(2).len()];
        coeffs[0] = 0.7; // constant term
        let out = apply_bias_field(&vol, &coeffs, 2).unwrap();
        let scale = 0.7f64.exp();
        for (a, b) in out.data().iter().zip(vol.data().iter()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_field_positive_and_matches_analytic_evaluation() {
        let vol = random_volume((6, 5, 4), 55);
        let terms = bias_term_exponents(3);
        let mut rng = rng_stream(55, 1);
        let coeffs: Vec<f64> = terms.iter().map(|_| rng.gen_range(-0.5..0.5)).collect();
        let out = apply_bias_field(&vol, &coeffs, 3).unwrap();
        let (nx, ny, nz) = vol.shape();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let xn = 2.0 * x as f64 / (nx as f64 - 1.0) - 1.0;
                    let yn = 2.0 * y as f64 / (ny as f64 - 1.0) - 1.0;
                    let zn = 2.0 * z as f64 / (nz as f64 - 1.0) - 1.0;
                    let p: f64 = coeffs
                        .iter()
                        .zip(terms.iter())
                        .map(|(&c, &(i, j, kk))| {
                            c * xn.powi(i as i32) * yn.powi(j as i32) * zn.powi(kk as i32)
                        })
                        .sum();
                    let expect = vol.data()[[x, y, z]] * p.exp();
                    let got = out.data()[[x, y, z]];
                    assert!((got - expect).abs() < 1e-12);
                    assert!(got > 0.0);
                }
            }
        }
    }

    #[test]
    fn bias_term_count_is_binomial() {
        // C(order + 3, 3) terms for total degree <= order
        assert_eq!(bias_term_exponents(1).len(), 4);
        assert_eq!(bias_term_exponents(2).len(), 10);
        assert_eq!(bias_term_exponents(3).len(), 20);
    }
}
