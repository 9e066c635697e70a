//! `artiqc evaluate`: correlation experiment on artefacted test phantoms —
//! per-image metric CSV, Spearman summary JSON, and scatter plots.

use std::io::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use artiqc::qcmetrics::{spearman, SpearmanResult};
use artiqc::toytrain::{evaluate_cascade, generate_phantoms, EvalRow, ToyModel};
use clap::Args;

use crate::config::RunConfig;
use crate::plot::scatter_svg;
use crate::provenance::Provenance;
use crate::util::{csv_float, usage};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// trained student checkpoint
    #[arg(long)]
    pub model: PathBuf,
    /// number of test phantoms (defaults to the config value)
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value = "eval_out")]
    pub out: PathBuf,
    /// clean-control fraction override
    #[arg(long)]
    pub control_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: &EvaluateArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(f) = args.control_fraction {
        if !(0.0..=1.0).contains(&f) {
            return usage(format!("--control-fraction {f} outside [0,1]"));
        }
        cfg.evaluate.control_fraction = f;
    }
    let resolved = cfg.to_toml()?;
    let provenance = Provenance::new(cfg.seed, &resolved);

    let out_dir = RunConfig::resolve_out_dir(&args.out);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let student = ToyModel::load(&args.model)?;
    let shape = (
        student.header.phantom_shape[0],
        student.header.phantom_shape[1],
        student.header.phantom_shape[2],
    );
    let kinds: Vec<artiqc::artefact::ArtefactKind> = student
        .header
        .aug_kinds
        .iter()
        .filter_map(|n| artiqc::artefact::ArtefactKind::from_name(n))
        .collect();
    if kinds.is_empty() {
        return usage("checkpoint has no augmentation channels; evaluate needs a student model");
    }

    let n = args.n.unwrap_or(cfg.phantom.count_test);
    let test = generate_phantoms(n, artiqc::rng::derive_seed(cfg.seed, 2000), shape)?;
    let rows = evaluate_cascade(
        &student,
        &test,
        &kinds,
        cfg.evaluate.control_fraction,
        cfg.seed,
    )?;

    // per-image CSV
    let csv_path = out_dir.join("per_image.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(w, "# {}", provenance.one_line())?;
    writeln!(
        w,
        "id,kind,dice,mean_artefact_variance,snr,cnr,volume,sigma,mean_entropy"
    )?;
    for row in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            row.id,
            row.artefact_kind.map(|k| k.name()).unwrap_or("clean"),
            csv_float(row.dice),
            csv_float(row.mean_artefact_variance),
            csv_float(row.snr),
            csv_float(row.cnr),
            csv_float(row.volume),
            csv_float(row.sigma),
            csv_float(row.mean_entropy),
        )?;
    }
    w.flush()?;

    // correlations over the artefacted subset
    let art: Vec<&EvalRow> = rows.iter().filter(|r| r.artefact_kind.is_some()).collect();
    if art.len() < 3 {
        return usage("too few artefacted rows for a correlation");
    }
    let dice: Vec<f64> = art.iter().map(|r| r.dice).collect();
    let correlations = serde_json::json!({
        "mean_artefact_variance": corr(&art.iter().map(|r| r.mean_artefact_variance).collect::<Vec<_>>(), &dice)?,
        "snr": corr(&art.iter().map(|r| r.snr).collect::<Vec<_>>(), &dice)?,
        "cnr": corr(&art.iter().map(|r| r.cnr).collect::<Vec<_>>(), &dice)?,
    });
    let summary = serde_json::json!({
        "correlations": correlations,
        "n_artefacted": art.len(),
        "n_clean": rows.len() - art.len(),
        "provenance": provenance,
    });
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    // scatter plots, one per metric
    let prov_line = provenance.one_line();
    let plots = [
        ("dice_vs_variance.svg", "Dice vs mean artefact variance", "mean artefact variance",
            art.iter().map(|r| (r.mean_artefact_variance, r.dice)).collect::<Vec<_>>()),
        ("dice_vs_snr.svg", "Dice vs SNR", "SNR",
            art.iter().map(|r| (r.snr, r.dice)).collect::<Vec<_>>()),
        ("dice_vs_cnr.svg", "Dice vs CNR", "CNR",
            art.iter().map(|r| (r.cnr, r.dice)).collect::<Vec<_>>()),
    ];
    for (file, title, x_label, points) in plots {
        std::fs::write(
            out_dir.join(file),
            scatter_svg(title, x_label, "Dice", &points, &prov_line),
        )?;
    }
    std::fs::write(out_dir.join("resolved_config.toml"), &resolved)?;
    println!(
        "wrote {} rows to {}; summary in {}",
        rows.len(),
        csv_path.display(),
        out_dir.join("summary.json").display()
    );
    Ok(())
}

fn corr(xs: &[f64], ys: &[f64]) -> anyhow::Result<SpearmanResult> {
    Ok(spearman(xs, ys)?)
}
