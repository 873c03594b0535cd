//! Quantization-aware training with knowledge distillation.
//!
//! A frozen full-precision teacher and a fake-quantized student see the same
//! noised batch each step. The student minimizes its own noise-prediction
//! loss plus `kd_weight` times the squared error to the teacher's output.
//! Activation ranges come from moving-max observers and are frozen into the
//! student at the end; scales are not learned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{check_loss, noised_batch, NoiseSchedule, NoisedBatch};
use crate::error::{Error, Result};
use crate::kernels::pool::WorkerPool;
use crate::numerics::PrecisionFormat;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tape;
use crate::unet::{InferenceModel, QuantMode, UnetModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdLoss {
    #[default]
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QatConfig {
    /// Number of training steps.
    pub max_steps: usize,
    /// Weight of the distillation term.
    pub kd_weight: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub kd_loss: KdLoss,
    pub seed: u64,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self { max_steps: 500, kd_weight: 1.0, learning_rate: 1e-5, batch_size: 32, kd_loss: KdLoss::Mse, seed: 0 }
    }
}

impl QatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(Error::Config(format!("qat.kd_weight must be finite and >= 0, got {}", self.kd_weight)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("qat.learning_rate must be finite and > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("qat.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One line of the QAT log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QatStepLog {
    pub step: usize,
    pub task_loss: f32,
    pub kd_loss: f32,
    pub total: f32,
    /// Running activation max per quantized layer.
    pub observer_ranges: Vec<(String, f32)>,
}

pub struct QatState {
    teacher: InferenceModel,
    student: UnetModel,
    optimizer: Adam,
    config: QatConfig,
    step: usize,
    rng: ChaCha8Rng,
}

/// Copies `pretrained` into a quantizer-free teacher and a fake-quantized
/// student with identical weights.
pub fn init_qat(pretrained: &UnetModel, config: QatConfig, pool: WorkerPool) -> Result<QatState> {
    config.validate()?;
    let teacher = InferenceModel::new(pretrained.to_teacher(), pool)?;
    let student = pretrained.to_student();
    let optimizer = Adam::new(AdamConfig { lr: config.learning_rate, ..AdamConfig::default() }, student.params())?;
    let rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(QatState { teacher, student, optimizer, config, step: 0, rng })
}

impl QatState {
    pub fn teacher(&self) -> &UnetModel {
        self.teacher.model()
    }

    pub fn student(&self) -> &UnetModel {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut UnetModel {
        &mut self.student
    }

    pub fn into_student(self) -> UnetModel {
        self.student
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &QatConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// Student and teacher outputs and the three loss values for one batch,
    /// without updating anything but the observers.
    pub fn losses(&mut self, batch: &NoisedBatch, mode: QuantMode) -> Result<(f32, f32, f32)> {
        let (task, kd, total, _) = self.forward_losses(batch, mode)?;
        Ok((task, kd, total))
    }

    fn forward_losses(
        &mut self,
        batch: &NoisedBatch,
        mode: QuantMode,
    ) -> Result<(f32, f32, f32, (Tape, crate::tensor::Var))> {
        let o_t = self.teacher.predict(&batch.x_t, &batch.t, PrecisionFormat::Fp32)?;
        let mut tape = Tape::new(self.teacher.pool().clone());
        let x = tape.constant(batch.x_t.clone());
        let o_s = self.student.forward_tape(&mut tape, x, &batch.t, mode)?;
        let eps = tape.constant(batch.eps.clone());
        let o_t = tape.constant(o_t);
        let task = tape.mse_loss(o_s, eps)?;
        let kd = tape.mse_loss(o_s, o_t)?;
        let weighted = tape.mul_scalar(kd, self.config.kd_weight)?;
        let total = tape.add(task, weighted)?;
        let (tv, kv, sv) = (tape.value(task).item()?, tape.value(kd).item()?, tape.value(total).item()?);
        check_loss(sv, "QAT total loss")?;
        Ok((tv, kv, sv, (tape, total)))
    }

    /// One QAT step on an explicit batch.
    pub fn step_on(&mut self, batch: &NoisedBatch) -> Result<QatStepLog> {
        let (task_loss, kd_loss, total, (tape, loss)) = self.forward_losses(batch, QuantMode::Observe)?;
        let grads = tape.backward(loss)?;
        self.optimizer.step(self.student.params_mut(), &grads);
        self.step += 1;
        Ok(QatStepLog {
            step: self.step,
            task_loss,
            kd_loss,
            total,
            observer_ranges: self
                .student
                .quant()
                .iter()
                .filter_map(|q| q.observer.running_max().map(|m| (q.name.clone(), m)))
                .collect(),
        })
    }
}

/// One QAT step: sample a batch from `data`, noise it, and update
/// the student on task + distillation loss.
pub fn qat_step(state: &mut QatState, data: &crate::tensor::Tensor, schedule: &NoiseSchedule) -> Result<QatStepLog> {
    if state.step >= state.config.max_steps {
        return Err(Error::InvalidArgument(format!("QAT already ran its {} steps", state.config.max_steps)));
    }
    let batch = noised_batch(schedule, data, state.config.batch_size, &mut state.rng)?;
    state.step_on(&batch)
}

/// Runs the remaining steps, then freezes the observed ranges and current
/// weight scales into the student. With zero steps nothing is frozen.
pub fn run_qat(
    state: &mut QatState,
    data: &crate::tensor::Tensor,
    schedule: &NoiseSchedule,
    mut on_step: impl FnMut(&QatStepLog),
) -> Result<Vec<QatStepLog>> {
    let mut logs = Vec::with_capacity(state.config.max_steps - state.step);
    while state.step < state.config.max_steps {
        let log = qat_step(state, data, schedule)?;
        on_step(&log);
        logs.push(log);
    }
    if state.step > 0 {
        state.student.freeze_quant_params()?;
    }
    Ok(logs)
}

/// Post-training quantization baseline: run `batches` calibration forwards
/// of noised data through the student's observers, then freeze. No weights
/// change.
pub fn calibrate_ptq(
    pretrained: &UnetModel,
    data: &crate::tensor::Tensor,
    schedule: &NoiseSchedule,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<UnetModel> {
    if batches == 0 {
        return Err(Error::InvalidArgument("PTQ needs at least one calibration batch".into()));
    }
    let mut student = pretrained.to_student();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..batches {
        let nb = noised_batch(schedule, data, batch_size, &mut rng)?;
        let mut tape = Tape::default();
        let x = tape.constant(nb.x_t);
        student.forward_tape(&mut tape, x, &nb.t, QuantMode::Calibrate)?;
    }
    student.freeze_quant_params()?;
    Ok(student)
}
