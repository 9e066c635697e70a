//! k-space artefact simulators with parameter sampling, a fixed application
//! order, and full provenance for exact replay.
//!
//! The pipeline applies image-domain augmentations first (geometric, bias
//! field), then the k-space group (RF spike, noise, blur, wrap) inside a
//! single FFT round trip, then motion as its own composite stage, and
//! finally rescales intensities to [0, 1].

mod motion;
mod ops;

pub use motion::{apply_motion, demean_motions, RigidMotion};
pub use ops::{
    apply_bias_field, apply_blur, apply_k_noise, apply_rf_spike, apply_wrap,
    bias_term_exponents, Axis3, WrapPattern,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::spectral::{fft3, ifft3};
use crate::volume::{resample_affine, resample_labels, Affine3D, LabelVolume, Volume};

/// Artefact family tags, in fixed application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtefactKind {
    Geometric,
    BiasField,
    RfSpike,
    KNoise,
    Blur,
    Wrap,
    Motion,
}

impl ArtefactKind {
    /// The five decoupled artefact modes (teacher-per-mode set).
    pub const DECOUPLED: [ArtefactKind; 5] = [
        ArtefactKind::RfSpike,
        ArtefactKind::KNoise,
        ArtefactKind::Blur,
        ArtefactKind::Wrap,
        ArtefactKind::Motion,
    ];

    /// All kinds in canonical application order.
    pub const ALL: [ArtefactKind; 7] = [
        ArtefactKind::Geometric,
        ArtefactKind::BiasField,
        ArtefactKind::RfSpike,
        ArtefactKind::KNoise,
        ArtefactKind::Blur,
        ArtefactKind::Wrap,
        ArtefactKind::Motion,
    ];

    /// Position in the fixed application order.
    pub fn stage(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            ArtefactKind::Geometric => "geometric",
            ArtefactKind::BiasField => "bias_field",
            ArtefactKind::RfSpike => "rf_spike",
            ArtefactKind::KNoise => "k_noise",
            ArtefactKind::Blur => "blur",
            ArtefactKind::Wrap => "wrap",
            ArtefactKind::Motion => "motion",
        }
    }

    pub fn from_name(name: &str) -> Option<ArtefactKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

/// Kind-specific sampled parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ArtefactParams {
    Geometric {
        rotation_z: f64,
        scale: f64,
        flips: [bool; 3],
    },
    BiasField {
        order: usize,
        coeffs: Vec<f64>,
    },
    RfSpike {
        magnitude_factor: f64,
        loc: [usize; 3],
        phase: f64,
    },
    KNoise {
        target_snr_db: f64,
    },
    Blur {
        ratio: f64,
        axes: Vec<Axis3>,
    },
    Wrap {
        fraction: f64,
        pattern: WrapPattern,
        axis: Axis3,
    },
    Motion {
        poses: Vec<RigidMotion>,
        boundaries: Vec<usize>,
        axis: Axis3,
    },
}

impl ArtefactParams {
    pub fn kind(&self) -> ArtefactKind {
        match self {
            ArtefactParams::Geometric { .. } => ArtefactKind::Geometric,
            ArtefactParams::BiasField { .. } => ArtefactKind::BiasField,
            ArtefactParams::RfSpike { .. } => ArtefactKind::RfSpike,
            ArtefactParams::KNoise { .. } => ArtefactKind::KNoise,
            ArtefactParams::Blur { .. } => ArtefactKind::Blur,
            ArtefactParams::Wrap { .. } => ArtefactKind::Wrap,
            ArtefactParams::Motion { .. } => ArtefactKind::Motion,
        }
    }
}

/// One artefact instance: sampled parameters plus its private RNG seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtefactSpec {
    #[serde(flatten)]
    pub params: ArtefactParams,
    pub seed: u64,
}

impl ArtefactSpec {
    pub fn kind(&self) -> ArtefactKind {
        self.params.kind()
    }
}

/// Per-kind gate in the sampling pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindGate {
    pub enabled: bool,
    pub probability: f64,
}

impl KindGate {
    pub fn off() -> Self {
        Self { enabled: false, probability: 0.0 }
    }

    pub fn on(probability: f64) -> Self {
        Self { enabled: true, probability }
    }
}

/// Sampling configuration: which kinds may fire and how often.
///
/// The application order is fixed and not configurable. `rate` is the global
/// probability that a sample carries any artefact at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtefactPipelineConfig {
    pub rate: f64,
    pub geometric: KindGate,
    pub bias_field: KindGate,
    pub rf_spike: KindGate,
    pub k_noise: KindGate,
    pub blur: KindGate,
    pub wrap: KindGate,
    pub motion: KindGate,
}

impl Default for ArtefactPipelineConfig {
    fn default() -> Self {
        Self {
            rate: 0.5,
            geometric: KindGate::off(),
            bias_field: KindGate::off(),
            rf_spike: KindGate::on(0.5),
            k_noise: KindGate::on(0.5),
            blur: KindGate::on(0.5),
            wrap: KindGate::on(0.5),
            motion: KindGate::on(0.5),
        }
    }
}

impl ArtefactPipelineConfig {
    /// Config with exactly the given decoupled kinds enabled (probability 1
    /// within the rate gate) and everything else off.
    pub fn only(kinds: &[ArtefactKind], rate: f64) -> Self {
        let mut cfg = Self {
            rate,
            geometric: KindGate::off(),
            bias_field: KindGate::off(),
            rf_spike: KindGate::off(),
            k_noise: KindGate::off(),
            blur: KindGate::off(),
            wrap: KindGate::off(),
            motion: KindGate::off(),
        };
        for &k in kinds {
            *cfg.gate_mut(k) = KindGate::on(1.0);
        }
        cfg
    }

    pub fn gate(&self, kind: ArtefactKind) -> &KindGate {
        match kind {
            ArtefactKind::Geometric => &self.geometric,
            ArtefactKind::BiasField => &self.bias_field,
            ArtefactKind::RfSpike => &self.rf_spike,
            ArtefactKind::KNoise => &self.k_noise,
            ArtefactKind::Blur => &self.blur,
            ArtefactKind::Wrap => &self.wrap,
            ArtefactKind::Motion => &self.motion,
        }
    }

    pub fn gate_mut(&mut self, kind: ArtefactKind) -> &mut KindGate {
        match kind {
            ArtefactKind::Geometric => &mut self.geometric,
            ArtefactKind::BiasField => &mut self.bias_field,
            ArtefactKind::RfSpike => &mut self.rf_spike,
            ArtefactKind::KNoise => &mut self.k_noise,
            ArtefactKind::Blur => &mut self.blur,
            ArtefactKind::Wrap => &mut self.wrap,
            ArtefactKind::Motion => &mut self.motion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::InvalidParameter(format!("rate {} outside [0,1]", self.rate)));
        }
        for kind in ArtefactKind::ALL {
            let g = self.gate(kind);
            if !(0.0..=1.0).contains(&g.probability) {
                return Err(Error::InvalidParameter(format!(
                    "{} probability {} outside [0,1]",
                    kind.name(),
                    g.probability
                )));
            }
        }
        Ok(())
    }

    fn enabled_kinds(&self) -> Vec<ArtefactKind> {
        ArtefactKind::ALL
            .iter()
            .copied()
            .filter(|&k| self.gate(k).enabled)
            .collect()
    }
}

/// Samples one artefact instance of the given kind for a grid shape.
///
/// Parameter ranges: spike magnitude [1,10]; noise SNR [-10,20] dB; blur
/// ratio [2,12]; wrap removal fraction [0.25,0.75]; motion 2..=8 segments
/// with rotations within +-10 degrees and translations within +-10 mm.
pub fn sample_artefact<R: Rng>(
    kind: ArtefactKind,
    shape: (usize, usize, usize),
    rng: &mut R,
) -> ArtefactSpec {
    let dims = [shape.0, shape.1, shape.2];
    let params = match kind {
        ArtefactKind::Geometric => ArtefactParams::Geometric {
            rotation_z: rng.gen_range(-10.0f64..10.0).to_radians(),
            scale: rng.gen_range(0.9..1.1),
            flips: [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)],
        },
        ArtefactKind::BiasField => {
            let order = 3;
            let coeffs = bias_term_exponents(order)
                .iter()
                .map(|_| rng.gen_range(-0.3..0.3))
                .collect();
            ArtefactParams::BiasField { order, coeffs }
        }
        ArtefactKind::RfSpike => {
            let loc = loop {
                let cand = [
                    rng.gen_range(0..dims[0]),
                    rng.gen_range(0..dims[1]),
                    rng.gen_range(0..dims[2]),
                ];
                if cand != [0, 0, 0] {
                    break cand;
                }
            };
            ArtefactParams::RfSpike {
                magnitude_factor: rng.gen_range(1.0..10.0),
                loc,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        }
        ArtefactKind::KNoise => ArtefactParams::KNoise {
            target_snr_db: rng.gen_range(-10.0..20.0),
        },
        ArtefactKind::Blur => {
            let mut axes: Vec<Axis3> =
                Axis3::ALL.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
            if axes.is_empty() {
                axes.push(Axis3::ALL[rng.gen_range(0..3)]);
            }
            ArtefactParams::Blur { ratio: rng.gen_range(2.0..12.0), axes }
        }
        ArtefactKind::Wrap => ArtefactParams::Wrap {
            fraction: rng.gen_range(0.25..0.75),
            pattern: if rng.gen_bool(0.5) {
                WrapPattern::UniformRandom
            } else {
                WrapPattern::RegularInterval
            },
            axis: Axis3::ALL[rng.gen_range(0..3)],
        },
        ArtefactKind::Motion => {
            let axis = Axis3::ALL[rng.gen_range(0..3)];
            let n = dims[axis.index()];
            let segments = rng.gen_range(2..=8usize).min(n);
            let mut cuts: Vec<usize> = Vec::new();
            while cuts.len() < segments - 1 {
                let c = rng.gen_range(1..n);
                if !cuts.contains(&c) {
                    cuts.push(c);
                }
            }
            cuts.sort_unstable();
            let mut boundaries = vec![0];
            boundaries.extend(cuts);
            boundaries.push(n);
            let poses = (0..segments)
                .map(|_| RigidMotion {
                    rotation: [
                        rng.gen_range(-10.0f64..10.0).to_radians(),
                        rng.gen_range(-10.0f64..10.0).to_radians(),
                        rng.gen_range(-10.0f64..10.0).to_radians(),
                    ],
                    translation_mm: [
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                    ],
                })
                .collect();
            ArtefactParams::Motion { poses, boundaries, axis }
        }
    };
    ArtefactSpec { params, seed: rng.gen() }
}

/// Draws the artefact list for one sample.
///
/// With probability `1 - rate` the list is empty. Otherwise each enabled
/// kind fires with its own probability, and if none fired one enabled kind
/// is forced, so a gated sample always carries at least one artefact. The
/// emitted order is the fixed application order.
pub fn sample_pipeline<R: Rng>(
    cfg: &ArtefactPipelineConfig,
    shape: (usize, usize, usize),
    rng: &mut R,
) -> Result<Vec<ArtefactSpec>> {
    cfg.validate()?;
    let enabled = cfg.enabled_kinds();
    if enabled.is_empty() || !rng.gen_bool(cfg.rate) {
        return Ok(Vec::new());
    }
    let mut fired: Vec<ArtefactKind> = enabled
        .iter()
        .copied()
        .filter(|&k| rng.gen_bool(cfg.gate(k).probability))
        .collect();
    if fired.is_empty() {
        fired.push(enabled[rng.gen_range(0..enabled.len())]);
    }
    // enabled_kinds is already in application order
    Ok(fired.iter().map(|&k| sample_artefact(k, shape, rng)).collect())
}

/// Applies an ordered artefact list to a volume.
///
/// Image-domain augmentations run first, then all k-space artefacts inside a
/// single FFT round trip, then motion, then a final rescale to [0, 1].
/// Deterministic given the specs (each spec replays from its own seed).
pub fn corrupt(vol: &Volume, specs: &[ArtefactSpec]) -> Result<(Volume, Vec<ArtefactSpec>)> {
    let stages: Vec<usize> = specs.iter().map(|s| s.kind().stage()).collect();
    if stages.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter(
            "artefact specs are not in the fixed application order".into(),
        ));
    }

    let mut img = vol.clone();
    for spec in specs {
        match &spec.params {
            ArtefactParams::Geometric { rotation_z, scale, flips } => {
                let t = geometric_affine(*rotation_z, *scale, *flips);
                img = resample_affine(&img, &t)?;
            }
            ArtefactParams::BiasField { order, coeffs } => {
                img = apply_bias_field(&img, coeffs, *order)?;
            }
            _ => {}
        }
    }

    let kspace_specs: Vec<&ArtefactSpec> = specs
        .iter()
        .filter(|s| {
            matches!(
                s.kind(),
                ArtefactKind::RfSpike | ArtefactKind::KNoise | ArtefactKind::Blur | ArtefactKind::Wrap
            )
        })
        .collect();
    if !kspace_specs.is_empty() {
        let mut k = fft3(&img);
        for spec in kspace_specs {
            let mut rng = rng_from_seed(spec.seed);
            k = match &spec.params {
                ArtefactParams::RfSpike { magnitude_factor, loc, phase } => {
                    apply_rf_spike(&k, *magnitude_factor, *loc, *phase)?
                }
                ArtefactParams::KNoise { target_snr_db } => {
                    apply_k_noise(&k, *target_snr_db, &mut rng)?
                }
                ArtefactParams::Blur { ratio, axes } => apply_blur(&k, *ratio, axes)?,
                ArtefactParams::Wrap { fraction, pattern, axis } => {
                    apply_wrap(&k, *fraction, *pattern, *axis, &mut rng)?
                }
                _ => unreachable!(),
            };
        }
        img = ifft3(&k);
    }

    for spec in specs {
        if let ArtefactParams::Motion { poses, boundaries, axis } = &spec.params {
            img = apply_motion(&img, poses, boundaries, *axis)?;
        }
    }

    Ok((img.normalize(), specs.to_vec()))
}

/// Builds the affine for a geometric augmentation (flips, then scale, then
/// in-plane rotation, all about the grid centre).
pub fn geometric_affine(rotation_z: f64, scale: f64, flips: [bool; 3]) -> Affine3D {
    let mut t = Affine3D::identity();
    for (axis, &f) in flips.iter().enumerate() {
        if f {
            t = Affine3D::flip(axis).compose(&t);
        }
    }
    t = Affine3D::scaling([scale, scale, scale]).compose(&t);
    Affine3D::rotation_axis(2, rotation_z).compose(&t)
}

/// Applies the label-space counterpart of the specs (geometric transforms
/// only; every other artefact leaves anatomy in place).
pub fn transform_labels(labels: &LabelVolume, specs: &[ArtefactSpec]) -> Result<LabelVolume> {
    let mut out = labels.clone();
    for spec in specs {
        if let ArtefactParams::Geometric { rotation_z, scale, flips } = &spec.params {
            let t = geometric_affine(*rotation_z, *scale, *flips);
            out = resample_labels(&out, &t)?;
        }
    }
    Ok(out)
}
