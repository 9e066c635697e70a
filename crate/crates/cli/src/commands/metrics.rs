//! `artiqc metrics`: QC report for one volume or a CSV over a directory.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use artiqc::qcmetrics::{build_report, QCReport, ReportInputs, ReportProvenance};
use artiqc::toytrain::ToyModel;
use artiqc::uncmath::{scaled_softmax, UncertaintyBundle};
use artiqc::volume::{load_nifti, save_nifti_with_descrip, LabelVolume, Volume};
use clap::Args;
use ndarray::{Array3, Array4};

use crate::config::RunConfig;
use crate::provenance::Provenance;
use crate::util::{csv_float, load_labels, usage};

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// input NIfTI volume (single-volume mode)
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// directory of .nii volumes (batch mode; writes --csv)
    #[arg(long, conflicts_with = "volume")]
    pub batch: Option<PathBuf>,
    /// student checkpoint used to predict probabilities and uncertainty
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// probability map stem: reads <stem>_c0.nii, <stem>_c1.nii, ...
    #[arg(long, conflicts_with = "model")]
    pub probs: Option<PathBuf>,
    /// log-variance map stem: reads <stem>_task.nii and <stem>_aug<i>.nii
    #[arg(long, conflicts_with = "model")]
    pub bundle: Option<PathBuf>,
    /// tissue mask volume for SNR/CNR
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// ground-truth segmentation for Dice
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// cohort-mean summed entropy variance of clean images
    #[arg(long)]
    pub clean_reference: Option<f64>,
    /// clean volume from which to compute the reference variance
    #[arg(long, conflicts_with = "clean_reference")]
    pub reference_volume: Option<PathBuf>,
    /// report JSON path (single mode; stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// batch CSV path
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// write predicted maps next to the report: <stem>_c*.nii etc.
    #[arg(long)]
    pub save_maps: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub tissue_gray: u8,
    #[arg(long, default_value_t = 1)]
    pub tissue_white: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: &MetricsArgs) -> anyhow::Result<()> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let resolved = cfg.to_toml()?;
    let provenance = Provenance::new(args.seed, &resolved);

    match (&args.volume, &args.batch) {
        (Some(volume), None) => single(args, volume, &provenance),
        (None, Some(dir)) => batch(args, dir, &provenance),
        _ => usage("exactly one of --volume or --batch is required"),
    }
}

fn single(args: &MetricsArgs, volume: &Path, provenance: &Provenance) -> anyhow::Result<()> {
    let report = report_for(args, volume, provenance)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "report": report,
        "provenance": provenance,
    }))?;
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, json)?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn batch(args: &MetricsArgs, dir: &Path, provenance: &Provenance) -> anyhow::Result<()> {
    let csv_path = match &args.csv {
        Some(p) => p.clone(),
        None => return usage("--csv is required in batch mode"),
    };
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "nii")
                && !is_aux_volume(p)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return usage(format!("no .nii volumes found in {}", dir.display()));
    }

    if let Some(parent) = csv_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(w, "# {}", provenance.one_line())?;
    writeln!(w, "id,dice,mean_artefact_variance,snr,cnr,volume,sigma")?;
    for path in &entries {
        let report = report_for(args, path, provenance)?;
        let id = path.file_stem().unwrap_or_default().to_string_lossy();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            id,
            report.dice.map(csv_float).unwrap_or_default(),
            csv_float(report.mean_artefact_variance),
            csv_float(report.snr),
            csv_float(report.cnr),
            csv_float(report.volume_estimate),
            csv_float(report.volume_sigma),
        )?;
    }
    w.flush()?;
    println!("wrote {} ({} rows)", csv_path.display(), entries.len());
    Ok(())
}

/// Sibling volumes written by other commands that are not batch inputs.
fn is_aux_volume(p: &Path) -> bool {
    let stem = p.file_stem().unwrap_or_default().to_string_lossy();
    if stem.ends_with(".truth")
        || stem.ends_with(".mask")
        || stem == "truth"
        || stem == "mask"
        || stem == "clean"
        || stem.ends_with("_task")
    {
        return true;
    }
    // channel maps written by --save-maps: <stem>_c<digits>, <stem>_aug<digits>
    for marker in ["_c", "_aug"] {
        if let Some(pos) = stem.rfind(marker) {
            let tail = &stem[pos + marker.len()..];
            if !tail.is_empty() && tail.chars().all(|c| c.is_ascii_digit()) {
                return true;
            }
        }
    }
    false
}

fn report_for(args: &MetricsArgs, volume: &Path, provenance: &Provenance) -> anyhow::Result<QCReport> {
    let (vol, _) = load_nifti(volume)?;
    let vol = vol.normalize();

    let (probs, bundle) = predictions(args, &vol)?;

    let mask = match &args.mask {
        Some(p) => Some(load_labels(p, 2)?),
        None => sibling_labels(volume, "mask")?,
    };
    let truth = match &args.truth {
        Some(p) => Some(load_labels(p, 2)?),
        None => sibling_labels(volume, "truth")?,
    };

    let clean_reference = match (&args.clean_reference, &args.reference_volume) {
        (Some(v), _) => *v,
        (None, Some(path)) => {
            let (reference, _) = load_nifti(path)?;
            let (rp, _) = predictions(args, &reference.normalize())?;
            artiqc::uncmath::volume_error_bars(&rp, 1, 0.0)?.raw_total_variance
        }
        (None, None) => 0.0,
    };

    let specs = sidecar_specs(volume)?;
    let report = build_report(&ReportInputs {
        vol: &vol,
        probs: &probs,
        bundle: &bundle,
        mask: mask.as_ref(),
        tissue_gray: args.tissue_gray,
        tissue_white: args.tissue_white,
        truth: truth.as_ref(),
        foreground_class: 1,
        clean_reference_variance: clean_reference,
        provenance: ReportProvenance {
            input: volume.display().to_string(),
            specs,
        },
    })?;

    if let Some(stem) = &args.save_maps {
        save_maps(stem, &probs, &bundle, &provenance.one_line())?;
    }
    Ok(report)
}

/// Probability and uncertainty inputs: either from a model checkpoint or
/// from map files on disk.
fn predictions(args: &MetricsArgs, vol: &Volume) -> anyhow::Result<(Array4<f64>, UncertaintyBundle)> {
    if let Some(model_path) = &args.model {
        let model = ToyModel::load(model_path)?;
        let (logits, bundle) = model.infer(vol)?;
        let probs = scaled_softmax(&logits, &bundle.total_variance())?;
        return Ok((probs, bundle));
    }
    match (&args.probs, &args.bundle) {
        (Some(probs_stem), Some(bundle_stem)) => {
            let probs = load_probs(probs_stem, vol.shape())?;
            let bundle = load_bundle(bundle_stem, vol.shape())?;
            Ok((probs, bundle))
        }
        _ => usage("provide --model, or both --probs and --bundle"),
    }
}

fn load_probs(stem: &Path, shape: (usize, usize, usize)) -> anyhow::Result<Array4<f64>> {
    let mut channels: Vec<Array3<f64>> = Vec::new();
    loop {
        let path = channel_path(stem, &format!("_c{}", channels.len()));
        if !path.exists() {
            break;
        }
        let (vol, _) = load_nifti(&path)?;
        anyhow::ensure!(vol.shape() == shape, "{} shape mismatch", path.display());
        channels.push(vol.into_data());
    }
    anyhow::ensure!(
        channels.len() >= 2,
        "need at least 2 probability channels at {}_c*.nii",
        stem.display()
    );
    let mut out = Array4::zeros((channels.len(), shape.0, shape.1, shape.2));
    for (c, ch) in channels.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), c).assign(ch);
    }
    Ok(out)
}

fn load_bundle(stem: &Path, shape: (usize, usize, usize)) -> anyhow::Result<UncertaintyBundle> {
    let task_path = channel_path(stem, "_task");
    anyhow::ensure!(task_path.exists(), "missing {}", task_path.display());
    let (task, _) = load_nifti(&task_path)?;
    anyhow::ensure!(task.shape() == shape, "{} shape mismatch", task_path.display());
    let mut aug = Vec::new();
    loop {
        let path = channel_path(stem, &format!("_aug{}", aug.len()));
        if !path.exists() {
            break;
        }
        let (vol, _) = load_nifti(&path)?;
        anyhow::ensure!(vol.shape() == shape, "{} shape mismatch", path.display());
        aug.push(vol.into_data());
    }
    Ok(UncertaintyBundle::new(task.into_data(), aug)?)
}

fn save_maps(
    stem: &Path,
    probs: &Array4<f64>,
    bundle: &UncertaintyBundle,
    descrip: &str,
) -> anyhow::Result<()> {
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let (c, _, _, _) = probs.dim();
    for ch in 0..c {
        let map = probs.index_axis(ndarray::Axis(0), ch).to_owned();
        save_nifti_with_descrip(
            &Volume::from_data(map),
            channel_path(stem, &format!("_c{ch}")),
            descrip,
        )?;
    }
    save_nifti_with_descrip(
        &Volume::from_data(bundle.s_task.clone()),
        channel_path(stem, "_task"),
        descrip,
    )?;
    for (i, ch) in bundle.s_aug.iter().enumerate() {
        save_nifti_with_descrip(
            &Volume::from_data(ch.clone()),
            channel_path(stem, &format!("_aug{i}")),
            descrip,
        )?;
    }
    Ok(())
}

fn channel_path(stem: &Path, suffix: &str) -> PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    name.push(".nii");
    stem.with_file_name(name)
}

/// `<stem>.truth.nii` / `<stem>.mask.nii` conventions for batch inputs,
/// falling back to `truth.nii` / `mask.nii` in the same directory.
fn sibling_labels(volume: &Path, kind: &str) -> anyhow::Result<Option<LabelVolume>> {
    let stem = volume.file_stem().unwrap_or_default().to_string_lossy();
    let with_stem = volume.with_file_name(format!("{stem}.{kind}.nii"));
    if with_stem.exists() {
        return Ok(Some(load_labels(&with_stem, 2)?));
    }
    let shared = volume.with_file_name(format!("{kind}.nii"));
    if shared.exists() {
        return Ok(Some(load_labels(&shared, 2)?));
    }
    Ok(None)
}

fn sidecar_specs(volume: &Path) -> anyhow::Result<Vec<artiqc::artefact::ArtefactSpec>> {
    let stem = volume.file_stem().unwrap_or_default().to_string_lossy();
    let sidecar = volume.with_file_name(format!("{stem}.specs.json"));
    if !sidecar.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&sidecar)?;
    #[derive(serde::Deserialize)]
    struct SidecarIn {
        specs: Vec<artiqc::artefact::ArtefactSpec>,
    }
    let parsed: SidecarIn = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", sidecar.display()))?;
    Ok(parsed.specs)
}
