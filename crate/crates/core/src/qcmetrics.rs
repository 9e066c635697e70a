//! Scalar quality metrics: mean artefact variance, SNR, CNR, Dice, Spearman
//! rank correlation, and QC report assembly.

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::artefact::ArtefactSpec;
use crate::error::{Error, Result};
use crate::uncmath::{entropy_map, volume_error_bars, UncertaintyBundle};
use crate::volume::{LabelVolume, Volume};

/// Mean over voxels of the summed per-augmentation variances
/// `exp(s_aug[i])`. Errors when the bundle has no augmentation channels.
pub fn mean_artefact_variance(bundle: &UncertaintyBundle) -> Result<f64> {
    if bundle.num_aug() == 0 {
        return Err(Error::Metric(
            "mean artefact variance needs at least one augmentation channel".into(),
        ));
    }
    let total = bundle.artefact_variance();
    let sum: f64 = total.iter().sum();
    Ok(sum / total.len() as f64)
}

/// Tissue SNR: mean over population standard deviation of the voxels the
/// mask assigns to `tissue`. Zero deviation reports the +inf sentinel.
pub fn snr(vol: &Volume, mask: &LabelVolume, tissue: u8) -> Result<f64> {
    if vol.shape() != mask.shape() {
        return Err(Error::ShapeMismatch("volume vs mask".into()));
    }
    let values: Vec<f64> = vol
        .data()
        .iter()
        .zip(mask.labels().iter())
        .filter(|(_, &l)| l == tissue)
        .map(|(&v, _)| v)
        .collect();
    if values.len() < 2 {
        return Err(Error::Metric(format!(
            "tissue {tissue} has {} voxels; need at least 2",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(mean / std)
}

/// Contrast-to-noise ratio between two tissues: `|SNR_a - SNR_b|`.
pub fn cnr(vol: &Volume, mask: &LabelVolume, tissue_a: u8, tissue_b: u8) -> Result<f64> {
    Ok((snr(vol, mask, tissue_a)? - snr(vol, mask, tissue_b)?).abs())
}

/// Dice overlap `2|P n T| / (|P| + |T|)` for one class id; both-empty
/// returns 1.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch("pred vs truth".into()));
    }
    let mut p = 0usize;
    let mut t = 0usize;
    let mut both = 0usize;
    for (&a, &b) in pred.labels().iter().zip(truth.labels().iter()) {
        let ia = a == class;
        let ib = b == class;
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Spearman rank correlation with its two-sided p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
}

/// Spearman's rank correlation via Pearson correlation of fractional ranks
/// (average ranks on ties); p-value from the two-sided t approximation
/// `t = rho sqrt((n-2)/(1-rho^2))` with n-2 degrees of freedom.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<SpearmanResult> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch("series lengths differ".into()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::Metric(format!("need at least 3 points, got {n}")));
    }
    let rx = fractional_ranks(xs);
    let ry = fractional_ranks(ys);
    let rho = pearson(&rx, &ry)?;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::Metric(format!("t distribution: {e}")))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(SpearmanResult { rho, p_value })
}

/// Exact permutation p-value for small samples (n <= 10): the fraction of
/// permutations of `ys` whose |rho| reaches the observed one.
pub fn spearman_exact_p(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len();
    if n > 10 {
        return Err(Error::Metric(format!(
            "exact permutation p-value limited to n <= 10, got {n}"
        )));
    }
    let observed = spearman(xs, ys)?.rho.abs();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut count = 0usize;
    let mut total = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let permuted: Vec<f64> = p.iter().map(|&i| ys[i]).collect();
        if let Ok(r) = spearman(xs, &permuted) {
            if r.rho.abs() >= observed - 1e-12 {
                count += 1;
            }
        }
        total += 1;
    });
    Ok(count as f64 / total as f64)
}

fn permute<F: FnMut(&[usize])>(items: &mut Vec<usize>, k: usize, visit: &mut F) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Fractional (average-on-ties) ranks, 1-based.
fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("rank correlation undefined for constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Serializes possibly non-finite floats as strings ("inf", "-inf", "nan")
/// so SNR sentinels survive a JSON round trip.
pub mod float_or_sentinel {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("bad float sentinel {other:?}"))),
            },
        }
    }
}

/// Where a report came from: input path and the artefacts applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportProvenance {
    pub input: String,
    pub specs: Vec<ArtefactSpec>,
}

/// Scalar quality summary for one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QCReport {
    pub mean_artefact_variance: f64,
    #[serde(with = "float_or_sentinel")]
    pub snr: f64,
    #[serde(with = "float_or_sentinel")]
    pub cnr: f64,
    pub mean_entropy: f64,
    pub volume_estimate: f64,
    pub volume_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    pub provenance: ReportProvenance,
}

/// Inputs for [`build_report`]; optional pieces switch their metrics off.
pub struct ReportInputs<'a> {
    pub vol: &'a Volume,
    /// scaled-softmax class probabilities, shape [C, nx, ny, nz]
    pub probs: &'a Array4<f64>,
    pub bundle: &'a UncertaintyBundle,
    /// tissue mask for SNR/CNR (gray, white)
    pub mask: Option<&'a LabelVolume>,
    pub tissue_gray: u8,
    pub tissue_white: u8,
    /// ground-truth segmentation for Dice
    pub truth: Option<&'a LabelVolume>,
    pub foreground_class: u8,
    /// cohort-mean summed entropy variance of clean images
    pub clean_reference_variance: f64,
    pub provenance: ReportProvenance,
}

/// Predicted label map: per-voxel argmax over probability channels.
pub fn argmax_labels(probs: &Array4<f64>) -> Result<LabelVolume> {
    let (c, nx, ny, nz) = probs.dim();
    let mut labels = ndarray::Array3::zeros((nx, ny, nz));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for ch in 0..c {
                    let v = probs[[ch, x, y, z]];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                labels[[x, y, z]] = best as u8;
            }
        }
    }
    LabelVolume::new(labels, c.max(2))
}

/// Assembles every metric computable from the provided inputs; Dice is
/// omitted when no ground truth is given.
pub fn build_report(inputs: &ReportInputs) -> Result<QCReport> {
    let (_, nx, ny, nz) = inputs.probs.dim();
    if (nx, ny, nz) != inputs.vol.shape() || (nx, ny, nz) != inputs.bundle.spatial_shape() {
        return Err(Error::ShapeMismatch("report inputs disagree on grid shape".into()));
    }
    let mean_artefact_variance = mean_artefact_variance(inputs.bundle)?;
    let (snr_v, cnr_v) = match inputs.mask {
        Some(mask) => (
            snr(inputs.vol, mask, inputs.tissue_gray)?,
            cnr(inputs.vol, mask, inputs.tissue_gray, inputs.tissue_white)?,
        ),
        None => (f64::NAN, f64::NAN),
    };
    let mean_entropy = entropy_map(inputs.probs).mean().unwrap_or(0.0);
    let bars = volume_error_bars(
        inputs.probs,
        inputs.foreground_class as usize,
        inputs.clean_reference_variance,
    )?;
    let dice_v = match inputs.truth {
        Some(truth) => {
            let pred = argmax_labels(inputs.probs)?;
            Some(dice(&pred, truth, inputs.foreground_class)?)
        }
        None => None,
    };
    Ok(QCReport {
        mean_artefact_variance,
        snr: snr_v,
        cnr: cnr_v,
        mean_entropy,
        volume_estimate: bars.volume,
        volume_sigma: bars.sigma,
        dice: dice_v,
        provenance: inputs.provenance.clone(),
    })
}
