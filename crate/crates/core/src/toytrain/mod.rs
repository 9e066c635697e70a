//! Three-stage cascaded uncertainty training on synthetic phantoms.
//!
//! Stage 1 trains a task model on clean data (weighted cross entropy with a
//! single task-variance channel). Stage 2 trains one teacher per artefact
//! mode: each sees only its own corruption and learns a decoupled variance
//! channel while its task channel is pinned to the frozen task model's
//! output by the consistency loss. Stage 3 trains a student on all modes,
//! with every uncertainty channel supervised by its respective frozen
//! network. Training is single-threaded and bit-reproducible for a seed.

pub mod autodiff;
pub mod model;
pub mod phantom;

pub use model::{ModelHeader, Param, ToyModel};
pub use phantom::{generate_phantoms, PhantomDataset, DEFAULT_SHAPE, TISSUE_GRAY, TISSUE_WHITE};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::artefact::{
    corrupt, sample_artefact, sample_pipeline, transform_labels, ArtefactKind,
    ArtefactPipelineConfig, ArtefactSpec, KindGate,
};
use crate::error::{Error, Result};
use crate::qcmetrics::{argmax_labels, cnr, dice, mean_artefact_variance, snr};
use crate::rng::{derive_seed, rng_stream};
use crate::toytrain::autodiff::{Tape, Tensor};
use crate::toytrain::model::{array4_to_tensor, tensor_to_array4, volume_to_tensor};
use crate::uncmath::{
    aug_loss, combined_loss_grad, consistency_loss_grad, scaled_softmax, volume_error_bars,
    EpsilonSchedule, LogitField, UncertaintyBundle,
};
use crate::volume::{LabelVolume, Volume};

/// Training stage of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Task,
    Teacher(ArtefactKind),
    Student,
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Task => "task".into(),
            Stage::Teacher(k) => format!("teacher_{}", k.name()),
            Stage::Student => "student".into(),
        }
    }
}

/// Configuration for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// initial learning rate, halved together with epsilon
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epsilon: EpsilonSchedule,
    /// trunk width of the first level
    pub width: usize,
    /// decoupled artefact modes, in channel order (defines N)
    pub aug_kinds: Vec<ArtefactKind>,
    /// global probability that a training sample is corrupted at all
    pub artefact_rate: f64,
    /// per-kind firing probability within a gated student sample
    pub student_kind_probability: f64,
    /// default geometric / bias-field augmentation for every stage
    pub use_geometric: bool,
    pub use_bias_field: bool,
    /// SSIM down-weight inside the consistency loss
    pub consistency_lambda: f64,
    /// initialize teacher/student trunks from the frozen task model; the
    /// desk-scale stand-in for the full-scale iteration budget
    pub warm_start: bool,
    pub seed: u64,
    pub phantom_shape: (usize, usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1200,
            learning_rate: 1e-4,
            batch_size: 2,
            epsilon: EpsilonSchedule::default(),
            width: 8,
            aug_kinds: ArtefactKind::DECOUPLED.to_vec(),
            artefact_rate: 0.5,
            student_kind_probability: 0.35,
            use_geometric: false,
            use_bias_field: true,
            consistency_lambda: 0.1,
            warm_start: true,
            seed: 0,
            phantom_shape: DEFAULT_SHAPE,
        }
    }
}

impl TrainConfig {
    /// Uncertainty head channels for a stage under this config.
    pub fn unc_channels(&self, stage: Stage) -> usize {
        match stage {
            Stage::Task => 1,
            Stage::Teacher(_) => 2,
            Stage::Student => 1 + self.aug_kinds.len(),
        }
    }

    fn pipeline_for(&self, stage: Stage) -> ArtefactPipelineConfig {
        let mut cfg = match stage {
            Stage::Task => ArtefactPipelineConfig::only(&[], self.artefact_rate),
            Stage::Teacher(kind) => ArtefactPipelineConfig::only(&[kind], self.artefact_rate),
            Stage::Student => {
                let mut c = ArtefactPipelineConfig::only(&self.aug_kinds, self.artefact_rate);
                for &k in &self.aug_kinds {
                    c.gate_mut(k).probability = self.student_kind_probability;
                }
                c
            }
        };
        if self.use_geometric {
            cfg.geometric = KindGate::on(0.3);
        }
        if self.use_bias_field {
            cfg.bias_field = KindGate::on(0.3);
        }
        cfg
    }

    fn header_for(&self, stage: Stage) -> ModelHeader {
        let aug_kinds = match stage {
            Stage::Task => vec![],
            Stage::Teacher(k) => vec![k.name().to_string()],
            Stage::Student => self.aug_kinds.iter().map(|k| k.name().to_string()).collect(),
        };
        ModelHeader {
            width: self.width,
            num_classes: 2,
            num_unc: self.unc_channels(stage),
            aug_kinds,
            stage: stage.name(),
            seed: self.seed,
            tool_version: crate::VERSION.into(),
            phantom_shape: [
                self.phantom_shape.0,
                self.phantom_shape.1,
                self.phantom_shape.2,
            ],
        }
    }
}

/// Frozen upstream models for the current stage.
#[derive(Default)]
pub struct Frozen<'a> {
    pub task: Option<&'a ToyModel>,
    /// teachers aligned with `TrainConfig::aug_kinds` (student stage only)
    pub teachers: Vec<&'a ToyModel>,
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub likelihood_term: f64,
    pub consistency_term: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &ToyModel) -> Self {
        let m = model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        let v = model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self { m, v, t: 0 }
    }

    fn step(&mut self, model: &mut ToyModel, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (pi, param) in model.params.iter_mut().enumerate() {
            let g = &grads[pi];
            for (ei, value) in param.tensor.data.iter_mut().enumerate() {
                let grad = g.data[ei] as f64;
                let m = &mut self.m[pi][ei];
                let v = &mut self.v[pi][ei];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * grad;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * grad * grad;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *value -= (lr * m_hat / (v_hat.sqrt() + Self::EPS)) as f32;
            }
        }
    }
}

/// Pseudo-label targets for one corrupted sample.
struct SampleTargets {
    /// frozen task model's s_task on the same input
    pseudo_task: Option<Array3<f64>>,
    /// frozen teacher i's own-mode channel on the same input
    teacher_aug: Vec<Array3<f64>>,
}

struct SampleGrads {
    loss: f64,
    likelihood: f64,
    consistency: f64,
    param_grads: Vec<Tensor>,
}

/// Forward + loss + reverse pass for one (image, labels) sample.
fn compute_sample_grads(
    model: &ToyModel,
    stage: Stage,
    cfg: &TrainConfig,
    epsilon: f64,
    img: &Volume,
    labels: &LabelVolume,
    targets: &SampleTargets,
) -> Result<SampleGrads> {
    let mut tape = Tape::new();
    let input = tape.leaf(volume_to_tensor(img));
    let (seg_id, unc_id, param_ids) = model.forward_tape(&mut tape, input)?;

    let logits = LogitField::new(tensor_to_array4(tape.value(seg_id)))?;
    let unc = tensor_to_array4(tape.value(unc_id));
    let (unc_channels, nx, ny, nz) = unc.dim();
    let channel = |c: usize| -> Array3<f64> {
        let mut a = Array3::zeros((nx, ny, nz));
        a.assign(&unc.index_axis(ndarray::Axis(0), c));
        a
    };
    let s_task = channel(0);

    let mut grad_unc = ndarray::Array4::<f64>::zeros((unc_channels, nx, ny, nz));
    let set_channel = |idx: usize, g: &Array3<f64>, grad_unc: &mut ndarray::Array4<f64>| {
        for ((x, y, z), &v) in g.indexed_iter() {
            grad_unc[[idx, x, y, z]] += v;
        }
    };

    let (loss, likelihood, consistency, grad_logits) = match stage {
        Stage::Task => {
            let bundle = UncertaintyBundle::new(s_task.clone(), vec![])?;
            let out = combined_loss_grad(&logits, labels, &bundle, epsilon)?;
            set_channel(0, &out.grad_s_task, &mut grad_unc);
            (out.loss, out.loss, 0.0, out.grad_logits)
        }
        Stage::Teacher(_) => {
            let pseudo = targets
                .pseudo_task
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite("task pseudo label".into()))?;
            let s_aug = channel(1);
            let out = aug_loss(
                &logits,
                labels,
                &s_task,
                &s_aug,
                pseudo,
                epsilon,
                cfg.consistency_lambda,
            )?;
            // aug_loss returns the combined likelihood + consistency, with
            // the consistency gradient already folded into grad_s_task
            let bundle = UncertaintyBundle::new(s_task.clone(), vec![s_aug.clone()])?;
            let likelihood_only =
                crate::uncmath::combined_loss(&logits, labels, &bundle, epsilon)?.loss;
            set_channel(0, &out.grad_s_task, &mut grad_unc);
            set_channel(1, &out.grad_s_aug[0], &mut grad_unc);
            (out.loss, likelihood_only, out.loss - likelihood_only, out.grad_logits)
        }
        Stage::Student => {
            let pseudo = targets
                .pseudo_task
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite("task pseudo label".into()))?;
            if targets.teacher_aug.len() != cfg.aug_kinds.len() {
                return Err(Error::MissingPrerequisite("teacher pseudo labels".into()));
            }
            let s_aug: Vec<Array3<f64>> = (1..unc_channels).map(channel).collect();
            let bundle = UncertaintyBundle::new(s_task.clone(), s_aug.clone())?;
            let base = combined_loss_grad(&logits, labels, &bundle, epsilon)?;
            let mut loss = base.loss;
            let mut consistency = 0.0;
            set_channel(0, &base.grad_s_task, &mut grad_unc);
            for (i, g) in base.grad_s_aug.iter().enumerate() {
                set_channel(1 + i, g, &mut grad_unc);
            }
            // task channel follows the frozen task net
            let pred_var = s_task.mapv(f64::exp);
            let target_var = pseudo.mapv(f64::exp);
            let (cons, cons_grad) =
                consistency_loss_grad(&pred_var, &target_var, cfg.consistency_lambda)?;
            consistency += cons;
            let chained = &cons_grad * &pred_var;
            set_channel(0, &chained, &mut grad_unc);
            // each augmentation channel follows its teacher
            for (i, teacher_map) in targets.teacher_aug.iter().enumerate() {
                let pred_var = s_aug[i].mapv(f64::exp);
                let target_var = teacher_map.mapv(f64::exp);
                let (cons, cons_grad) =
                    consistency_loss_grad(&pred_var, &target_var, cfg.consistency_lambda)?;
                consistency += cons;
                let chained = &cons_grad * &pred_var;
                set_channel(1 + i, &chained, &mut grad_unc);
            }
            loss += consistency;
            (loss, base.loss, consistency, base.grad_logits)
        }
    };

    if !loss.is_finite() {
        return Err(Error::Diverged { iteration: 0, reason: "non-finite loss".into() });
    }

    let seeds = vec![
        (seg_id, array4_to_tensor(&grad_logits)),
        (unc_id, array4_to_tensor(&grad_unc)),
    ];
    let grads = tape.backward(&seeds);
    let param_grads = param_ids
        .iter()
        .zip(model.params.iter())
        .map(|(id, p)| {
            grads[id.index()]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&p.tensor.shape))
        })
        .collect();
    Ok(SampleGrads { loss, likelihood, consistency, param_grads })
}

/// Pseudo-label forward passes on the frozen models for one input.
fn make_targets(
    stage: Stage,
    frozen: &Frozen,
    img: &Volume,
) -> Result<SampleTargets> {
    match stage {
        Stage::Task => Ok(SampleTargets { pseudo_task: None, teacher_aug: vec![] }),
        Stage::Teacher(_) => {
            let task = frozen
                .task
                .ok_or_else(|| Error::MissingPrerequisite("frozen task model".into()))?;
            let (_, bundle) = task.infer(img)?;
            Ok(SampleTargets { pseudo_task: Some(bundle.s_task), teacher_aug: vec![] })
        }
        Stage::Student => {
            let task = frozen
                .task
                .ok_or_else(|| Error::MissingPrerequisite("frozen task model".into()))?;
            let (_, task_bundle) = task.infer(img)?;
            let mut teacher_aug = Vec::with_capacity(frozen.teachers.len());
            for teacher in &frozen.teachers {
                let (_, tb) = teacher.infer(img)?;
                if tb.s_aug.is_empty() {
                    return Err(Error::MissingPrerequisite(
                        "teacher model lacks an augmentation channel".into(),
                    ));
                }
                teacher_aug.push(tb.s_aug[0].clone());
            }
            Ok(SampleTargets { pseudo_task: Some(task_bundle.s_task), teacher_aug })
        }
    }
}

/// Runs one stage of the cascade and returns the trained model with its log.
pub fn train_stage(
    stage: Stage,
    cfg: &TrainConfig,
    data: &PhantomDataset,
    frozen: &Frozen,
) -> Result<(ToyModel, Vec<TrainLogRow>)> {
    match stage {
        Stage::Teacher(_) if frozen.task.is_none() => {
            return Err(Error::MissingPrerequisite("teacher stage requires the task model".into()));
        }
        Stage::Student => {
            if frozen.task.is_none() {
                return Err(Error::MissingPrerequisite("student stage requires the task model".into()));
            }
            if frozen.teachers.len() != cfg.aug_kinds.len() {
                return Err(Error::MissingPrerequisite(format!(
                    "student stage requires {} teacher models, got {}",
                    cfg.aug_kinds.len(),
                    frozen.teachers.len()
                )));
            }
        }
        _ => {}
    }
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }

    let mut model = ToyModel::new(cfg.header_for(stage))?;
    if cfg.warm_start && !matches!(stage, Stage::Task) {
        if let Some(task) = frozen.task {
            model.warm_start_from(task);
        }
    }
    let mut adam = Adam::new(&model);
    let pipeline = cfg.pipeline_for(stage);
    let mut epsilon = cfg.epsilon;
    let mut lr = cfg.learning_rate;

    let mut order_rng = rng_stream(derive_seed(cfg.seed, 1), stage_tag(stage));
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut order, &mut order_rng);
    let mut cursor = 0usize;

    let mut log = Vec::with_capacity(cfg.iterations);
    let mut window_losses: Vec<f64> = Vec::new();
    let mut prev_window_mean: Option<f64> = None;
    let mut sample_counter = 0u64;

    for iteration in 0..cfg.iterations {
        let mut batch_grads: Option<Vec<Tensor>> = None;
        let mut loss_acc = 0.0;
        let mut like_acc = 0.0;
        let mut cons_acc = 0.0;

        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                shuffle(&mut order, &mut order_rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;

            let mut sample_rng = rng_stream(derive_seed(cfg.seed, 2 + stage_tag(stage)), sample_counter);
            sample_counter += 1;
            let specs = sample_pipeline(&pipeline, cfg.phantom_shape, &mut sample_rng)?;
            let (img, _) = corrupt(&data.images[idx], &specs)?;
            let labels = transform_labels(&data.labels[idx], &specs)?;

            let targets = make_targets(stage, frozen, &img)?;
            let sg = compute_sample_grads(&model, stage, cfg, epsilon.epsilon, &img, &labels, &targets)
                .map_err(|e| match e {
                    Error::Diverged { reason, .. } => Error::Diverged { iteration, reason },
                    other => other,
                })?;
            loss_acc += sg.loss;
            like_acc += sg.likelihood;
            cons_acc += sg.consistency;
            match &mut batch_grads {
                None => batch_grads = Some(sg.param_grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(sg.param_grads.iter()) {
                        for (av, &gv) in a.data.iter_mut().zip(g.data.iter()) {
                            *av += gv;
                        }
                    }
                }
            }
        }

        let scale = 1.0 / cfg.batch_size as f32;
        let mut grads = batch_grads.expect("batch size >= 1");
        for g in &mut grads {
            for v in &mut g.data {
                *v *= scale;
            }
        }
        adam.step(&mut model, &grads, lr);

        let loss = loss_acc / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, reason: "non-finite batch loss".into() });
        }
        log.push(TrainLogRow {
            iteration,
            loss,
            likelihood_term: like_acc / cfg.batch_size as f64,
            consistency_term: cons_acc / cfg.batch_size as f64,
            epsilon: epsilon.epsilon,
            learning_rate: lr,
        });

        // plateau detection over non-overlapping windows
        window_losses.push(loss);
        if window_losses.len() == epsilon.plateau_window {
            let cur = window_losses.iter().sum::<f64>() / window_losses.len() as f64;
            if let Some(prev) = prev_window_mean {
                let improvement = prev - cur;
                if improvement < epsilon.plateau_threshold * prev.abs().max(0.05)
                    && epsilon.halve()
                {
                    lr /= 2.0;
                }
            }
            prev_window_mean = Some(cur);
            window_losses.clear();
        }

        if model.params.iter().any(|p| p.tensor.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { iteration, reason: "non-finite parameters".into() });
        }
    }

    Ok((model, log))
}

fn stage_tag(stage: Stage) -> u64 {
    match stage {
        Stage::Task => 10,
        Stage::Teacher(k) => 20 + k.stage() as u64,
        Stage::Student => 30,
    }
}

fn shuffle<R: rand::Rng>(items: &mut [usize], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// One evaluation row of the cascade experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: usize,
    /// None marks a clean control image
    pub artefact_kind: Option<ArtefactKind>,
    pub dice: f64,
    pub mean_artefact_variance: f64,
    pub snr: f64,
    pub cnr: f64,
    pub volume: f64,
    pub sigma: f64,
    pub mean_entropy: f64,
    /// the exact artefacts applied, for replay
    pub specs: Vec<ArtefactSpec>,
}

/// Corrupts each test phantom with one stratified artefact kind (plus an
/// optional clean control fraction), runs student inference, and assembles
/// the per-image metric table for the correlation analysis.
pub fn evaluate_cascade(
    student: &ToyModel,
    test: &PhantomDataset,
    kinds: &[ArtefactKind],
    control_fraction: f64,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if kinds.is_empty() {
        return Err(Error::InvalidParameter("no artefact kinds to evaluate".into()));
    }
    let n = test.len();
    let n_control = ((n as f64) * control_fraction).round() as usize;

    // clean-cohort reference for the error bars
    let mut clean_reference = 0.0;
    for img in &test.images {
        let (clean, _) = corrupt(img, &[])?;
        let (logits, bundle) = student.infer(&clean)?;
        let probs = scaled_softmax(&logits, &bundle.total_variance())?;
        clean_reference += volume_error_bars(&probs, 1, 0.0)?.raw_total_variance;
    }
    clean_reference /= n.max(1) as f64;

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_stream(derive_seed(seed, 40), i as u64);
        let is_control = i < n_control;
        let specs = if is_control {
            vec![]
        } else {
            let kind = kinds[(i - n_control) % kinds.len()];
            vec![sample_artefact(kind, test.images[i].shape(), &mut rng)]
        };
        let (img, _) = corrupt(&test.images[i], &specs)?;
        let (logits, bundle) = student.infer(&img)?;
        let total = bundle.total_variance();
        let probs = scaled_softmax(&logits, &total)?;
        let pred = argmax_labels(&probs)?;
        let row_dice = dice(&pred, &test.labels[i], 1)?;
        let bars = volume_error_bars(&probs, 1, clean_reference)?;
        let entropy = crate::uncmath::entropy_map(&probs).mean().unwrap_or(0.0);
        rows.push(EvalRow {
            id: i,
            artefact_kind: specs.first().map(|s| s.kind()),
            dice: row_dice,
            mean_artefact_variance: mean_artefact_variance(&bundle)?,
            snr: snr(&img, &test.tissues[i], TISSUE_GRAY)?,
            cnr: cnr(&img, &test.tissues[i], TISSUE_GRAY, TISSUE_WHITE)?,
            volume: bars.volume,
            sigma: bars.sigma,
            mean_entropy: entropy,
            specs,
        });
    }
    Ok(rows)
}
