//! `artiqc simulate`: corrupt a volume (or a generated phantom) with
//! sampled or explicitly parameterised artefacts.

use std::path::PathBuf;

use anyhow::Context;
use artiqc::artefact::{
    corrupt, sample_artefact, sample_pipeline, ArtefactKind, ArtefactParams, ArtefactSpec,
};
use artiqc::rng::{derive_seed, rng_stream};
use artiqc::toytrain::generate_phantoms;
use artiqc::volume::{load_nifti, save_nifti_with_descrip};
use clap::Args;
use serde::Serialize;

use crate::config::RunConfig;
use crate::provenance::Provenance;
use crate::util::{save_labels, usage};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// input NIfTI volume
    #[arg(long, conflicts_with = "phantom")]
    pub input: Option<PathBuf>,
    /// generate a synthetic phantom as the input
    #[arg(long)]
    pub phantom: bool,
    /// artefact kind to apply (repeatable; "all" selects every kind)
    #[arg(long = "kind")]
    pub kinds: Vec<String>,
    /// inject k-space noise calibrated to this image-domain SNR
    #[arg(long)]
    pub noise_snr_db: Option<f64>,
    /// low-pass blur downsampling ratio (>= 1)
    #[arg(long)]
    pub blur_ratio: Option<f64>,
    /// wrap/aliasing removal fraction in (0,1)
    #[arg(long)]
    pub wrap_fraction: Option<f64>,
    /// RF spike magnitude as a multiple of max |k|
    #[arg(long)]
    pub spike_magnitude: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "sim_out")]
    pub out: PathBuf,
    /// also write the clean input next to the corrupted volume
    #[arg(long)]
    pub save_clean: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    provenance: &'a Provenance,
    specs: &'a [ArtefactSpec],
}

pub fn run(args: &SimulateArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.seed = args.seed;
    let resolved = cfg.to_toml()?;
    let provenance = Provenance::new(args.seed, &resolved);

    let out_dir = RunConfig::resolve_out_dir(&args.out);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    // input volume
    let (clean, truth) = if args.phantom {
        let mut ds = generate_phantoms(1, derive_seed(args.seed, 100), cfg.phantom_shape())?;
        (ds.images.remove(0), Some((ds.labels.remove(0), ds.tissues.remove(0))))
    } else {
        match &args.input {
            Some(path) => {
                let (vol, _) = load_nifti(path)?;
                (vol, None)
            }
            None => return usage("one of --input or --phantom is required"),
        }
    };

    let specs = build_specs(args, &cfg, clean.shape())?;
    let (corrupted, specs) = corrupt(&clean, &specs)?;

    let descrip = provenance.one_line();
    save_nifti_with_descrip(&corrupted, out_dir.join("corrupted.nii"), &descrip)?;
    let sidecar = Sidecar { provenance: &provenance, specs: &specs };
    std::fs::write(
        out_dir.join("corrupted.specs.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    if args.save_clean {
        save_nifti_with_descrip(&clean, out_dir.join("clean.nii"), &descrip)?;
    }
    if let Some((labels, tissues)) = truth {
        save_labels(&labels, &out_dir.join("truth.nii"), &descrip)?;
        save_labels(&tissues, &out_dir.join("mask.nii"), &descrip)?;
    }
    std::fs::write(out_dir.join("resolved_config.toml"), &resolved)?;
    println!(
        "wrote {} ({} artefact{})",
        out_dir.join("corrupted.nii").display(),
        specs.len(),
        if specs.len() == 1 { "" } else { "s" }
    );
    Ok(())
}

/// Builds the spec list: explicit kinds/parameters when given, otherwise a
/// random draw from the pipeline configuration.
fn build_specs(
    args: &SimulateArgs,
    cfg: &RunConfig,
    shape: (usize, usize, usize),
) -> anyhow::Result<Vec<ArtefactSpec>> {
    let mut rng = rng_stream(derive_seed(args.seed, 101), 0);

    let mut requested: Vec<ArtefactKind> = Vec::new();
    for name in &args.kinds {
        if name == "all" {
            for k in ArtefactKind::ALL {
                if !requested.contains(&k) {
                    requested.push(k);
                }
            }
        } else {
            match ArtefactKind::from_name(name) {
                Some(k) if !requested.contains(&k) => requested.push(k),
                Some(_) => {}
                None => return usage(format!("unknown artefact kind {name:?}")),
            }
        }
    }
    // parameter flags imply their kinds
    let implied = [
        (args.noise_snr_db.is_some(), ArtefactKind::KNoise),
        (args.blur_ratio.is_some(), ArtefactKind::Blur),
        (args.wrap_fraction.is_some(), ArtefactKind::Wrap),
        (args.spike_magnitude.is_some(), ArtefactKind::RfSpike),
    ];
    for (flag, kind) in implied {
        if flag && !requested.contains(&kind) {
            requested.push(kind);
        }
    }

    if requested.is_empty() {
        // nothing explicit: draw from the pipeline config
        let mut pipeline = artiqc::artefact::ArtefactPipelineConfig::only(
            &cfg.decoupled_kinds(),
            cfg.artefacts.rate,
        );
        if cfg.artefacts.geometric {
            pipeline.geometric = artiqc::artefact::KindGate::on(0.3);
        }
        if cfg.artefacts.bias_field {
            pipeline.bias_field = artiqc::artefact::KindGate::on(0.3);
        }
        return Ok(sample_pipeline(&pipeline, shape, &mut rng)?);
    }

    requested.sort_by_key(|k| k.stage());
    let mut specs = Vec::with_capacity(requested.len());
    for kind in requested {
        let mut spec = sample_artefact(kind, shape, &mut rng);
        apply_overrides(&mut spec, args)?;
        specs.push(spec);
    }
    Ok(specs)
}

fn apply_overrides(spec: &mut ArtefactSpec, args: &SimulateArgs) -> anyhow::Result<()> {
    match &mut spec.params {
        ArtefactParams::KNoise { target_snr_db } => {
            if let Some(v) = args.noise_snr_db {
                if v.is_nan() {
                    return usage("--noise-snr-db must not be NaN");
                }
                *target_snr_db = v;
            }
        }
        ArtefactParams::Blur { ratio, .. } => {
            if let Some(v) = args.blur_ratio {
                if !(v >= 1.0) {
                    return usage(format!("--blur-ratio {v} must be >= 1"));
                }
                *ratio = v;
            }
        }
        ArtefactParams::Wrap { fraction, .. } => {
            if let Some(v) = args.wrap_fraction {
                if !(v > 0.0 && v < 1.0) {
                    return usage(format!("--wrap-fraction {v} must be in (0,1)"));
                }
                *fraction = v;
            }
        }
        ArtefactParams::RfSpike { magnitude_factor, .. } => {
            if let Some(v) = args.spike_magnitude {
                if !(v >= 0.0) {
                    return usage(format!("--spike-magnitude {v} must be >= 0"));
                }
                *magnitude_factor = v;
            }
        }
        _ => {}
    }
    Ok(())
}
