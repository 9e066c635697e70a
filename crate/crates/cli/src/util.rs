//! Shared CLI plumbing: usage errors, exit-code mapping, label volume I/O.

use std::fmt;
use std::path::Path;

use artiqc::volume::{load_nifti, LabelVolume, Volume};
use ndarray::Array3;

/// Command-line usage error (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(anyhow::Error::new(Usage(msg.into())))
}

/// Exit-code contract: 0 success, 2 usage, 3 I/O, 4 missing prerequisite.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<artiqc::Error>() {
            return match core {
                artiqc::Error::Io(_)
                | artiqc::Error::MalformedHeader(_)
                | artiqc::Error::Checkpoint(_) => 3,
                artiqc::Error::MissingPrerequisite(_) => 4,
                artiqc::Error::Diverged { .. } => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

/// Loads a NIfTI volume as an integer label map. Values are rounded; the
/// class count is `max + 1` (at least `min_classes`).
pub fn load_labels(path: &Path, min_classes: usize) -> anyhow::Result<LabelVolume> {
    let (vol, _) = load_nifti(path)?;
    let (nx, ny, nz) = vol.shape();
    let mut labels = Array3::zeros((nx, ny, nz));
    let mut max_label = 0usize;
    for ((x, y, z), &v) in vol.data().indexed_iter() {
        let rounded = v.round();
        if !(0.0..=255.0).contains(&rounded) {
            anyhow::bail!(
                "{}: voxel value {v} is not a valid class id",
                path.display()
            );
        }
        let id = rounded as u8;
        max_label = max_label.max(id as usize);
        labels[[x, y, z]] = id;
    }
    Ok(LabelVolume::new(labels, (max_label + 1).max(min_classes))?)
}

/// Writes a label map as a float-valued NIfTI volume.
pub fn save_labels(labels: &LabelVolume, path: &Path, descrip: &str) -> anyhow::Result<()> {
    let data = labels.labels().mapv(|l| l as f64);
    artiqc::volume::save_nifti_with_descrip(&Volume::from_data(data), path, descrip)?;
    Ok(())
}

/// Formats one CSV field; floats use enough digits to round-trip.
pub fn csv_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}
