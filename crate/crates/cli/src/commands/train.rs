//! `artiqc train`: run one stage of the cascade and write a checkpoint
//! plus the training-log CSV.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use artiqc::artefact::ArtefactKind;
use artiqc::toytrain::{
    generate_phantoms, train_stage, Frozen, Stage, ToyModel, TrainLogRow,
};
use clap::Args;

use crate::config::RunConfig;
use crate::provenance::Provenance;
use crate::util::{csv_float, usage};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// stage to train: task, teacher:<kind>, or student
    #[arg(long)]
    pub stage: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// output directory holding checkpoints and logs
    #[arg(long, default_value = "artiqc_run")]
    pub out: PathBuf,
    /// overwrite an existing checkpoint
    #[arg(long)]
    pub force: bool,
    /// exit successfully without retraining when the checkpoint exists
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    /// seed override (defaults to the config seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// iteration-count override for this stage
    #[arg(long)]
    pub iterations: Option<usize>,
}

pub fn parse_stage(text: &str) -> anyhow::Result<Stage> {
    match text {
        "task" => Ok(Stage::Task),
        "student" => Ok(Stage::Student),
        other => {
            if let Some(kind_name) = other.strip_prefix("teacher:") {
                match ArtefactKind::from_name(kind_name) {
                    Some(kind) if ArtefactKind::DECOUPLED.contains(&kind) => {
                        Ok(Stage::Teacher(kind))
                    }
                    _ => usage(format!("unknown teacher kind {kind_name:?}")),
                }
            } else {
                usage(format!(
                    "bad --stage {text:?}; expected task, teacher:<kind>, or student"
                ))
            }
        }
    }
}

pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.ckpt", stage.name()))
}

pub fn run(args: &TrainArgs) -> anyhow::Result<()> {
    let stage = parse_stage(&args.stage)?;
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let resolved = cfg.to_toml()?;
    let provenance = Provenance::new(cfg.seed, &resolved);

    let out_dir = RunConfig::resolve_out_dir(&args.out);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let ckpt_path = checkpoint_path(&out_dir, stage);
    if ckpt_path.exists() {
        if args.resume {
            println!("{} exists; nothing to do", ckpt_path.display());
            return Ok(());
        }
        if !args.force {
            return usage(format!(
                "{} already exists; pass --force to overwrite",
                ckpt_path.display()
            ));
        }
    }

    // prerequisite checkpoints
    let task_model = match stage {
        Stage::Task => None,
        _ => Some(load_prerequisite(&out_dir, Stage::Task)?),
    };
    let teacher_models: Vec<ToyModel> = match stage {
        Stage::Student => cfg
            .decoupled_kinds()
            .iter()
            .map(|&k| load_prerequisite(&out_dir, Stage::Teacher(k)))
            .collect::<anyhow::Result<_>>()?,
        _ => Vec::new(),
    };

    let iterations = args.iterations.unwrap_or(match stage {
        Stage::Task => cfg.train.iterations_task,
        Stage::Teacher(_) => cfg.train.iterations_teacher,
        Stage::Student => cfg.train.iterations_student,
    });
    let train_cfg = cfg.train_config(iterations);

    let data = generate_phantoms(
        cfg.phantom.count_train,
        artiqc::rng::derive_seed(cfg.seed, 1000),
        cfg.phantom_shape(),
    )?;

    let frozen = Frozen {
        task: task_model.as_ref(),
        teachers: teacher_models.iter().collect(),
    };
    let (model, log) = train_stage(stage, &train_cfg, &data, &frozen)?;

    model.save(&ckpt_path)?;
    let log_path = out_dir.join(format!("{}_log.csv", stage.name()));
    write_log(&log_path, &log, &provenance)?;
    std::fs::write(out_dir.join("resolved_config.toml"), &resolved)?;
    println!(
        "wrote {} ({} iterations, final loss {:.4})",
        ckpt_path.display(),
        log.len(),
        log.last().map(|r| r.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_prerequisite(out_dir: &Path, stage: Stage) -> anyhow::Result<ToyModel> {
    let path = checkpoint_path(out_dir, stage);
    if !path.exists() {
        return Err(artiqc::Error::MissingPrerequisite(format!(
            "stage {} checkpoint not found at {}; train it first",
            stage.name(),
            path.display()
        ))
        .into());
    }
    Ok(ToyModel::load(&path)?)
}

fn write_log(path: &Path, log: &[TrainLogRow], provenance: &Provenance) -> anyhow::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# {}", provenance.one_line())?;
    writeln!(
        w,
        "iteration,loss,likelihood_term,consistency_term,epsilon,learning_rate"
    )?;
    for row in log {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.iteration,
            csv_float(row.loss),
            csv_float(row.likelihood_term),
            csv_float(row.consistency_term),
            csv_float(row.epsilon),
            csv_float(row.learning_rate),
        )?;
    }
    w.flush()?;
    Ok(())
}
