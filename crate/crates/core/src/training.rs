//! Optimization: warmup/cosine learning rate, global-norm clipping, Adam
//! with gradient accumulation and a late switch to sparser updates, and the
//! contiguous training loop over two parameter streams.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::Batches;
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::model::{AuxMode, Model};
use crate::params::{ParamKey, ParamStore, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_steps: u64,
    /// Length of the cosine decay; zero keeps `lr_max` after warmup.
    pub decay_steps: u64,
    pub clip_norm: f64,
    pub update_every_initial: u64,
    pub update_every_late: u64,
    pub switch_step: u64,
    /// Windows processed per step with memories kept differentiable between
    /// them when the compressor trains through the task loss.
    pub unroll_windows: usize,
    /// Multiplier on the learning rate of the compression stream.
    pub compression_lr_scale: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule::desk()
    }
}

impl TrainSchedule {
    /// Small-scale defaults.
    pub fn desk() -> Self {
        TrainSchedule {
            lr_min: 1e-6,
            lr_max: 3e-4,
            warmup_steps: 500,
            decay_steps: 20_000,
            clip_norm: 0.1,
            update_every_initial: 1,
            update_every_late: 4,
            switch_step: 5_000,
            unroll_windows: 1,
            compression_lr_scale: 1.0,
        }
    }

    /// The large-scale character language modelling recipe.
    pub fn large_scale() -> Self {
        TrainSchedule {
            warmup_steps: 4_000,
            decay_steps: 100_000,
            switch_step: 60_000,
            ..TrainSchedule::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return err(format!("need 0 <= lr_min ({}) <= lr_max ({})", self.lr_min, self.lr_max));
        }
        if !(self.clip_norm > 0.0) {
            return err(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.update_every_initial == 0 || self.update_every_late == 0 {
            return err("update frequencies must be at least 1".into());
        }
        if self.unroll_windows == 0 {
            return err("unroll_windows must be at least 1".into());
        }
        if !(self.compression_lr_scale >= 0.0 && self.compression_lr_scale.is_finite()) {
            return err(format!("compression_lr_scale {} must be >= 0", self.compression_lr_scale));
        }
        Ok(())
    }
}

/// Linear warmup from `lr_min` to `lr_max`, then cosine decay back to
/// `lr_min`, held there afterwards.
pub fn lr_at(step: u64, sched: &TrainSchedule) -> f64 {
    let span = sched.lr_max - sched.lr_min;
    if step < sched.warmup_steps {
        return sched.lr_min + span * step as f64 / sched.warmup_steps as f64;
    }
    if sched.decay_steps == 0 {
        return sched.lr_max;
    }
    let t = step - sched.warmup_steps;
    if t >= sched.decay_steps {
        return sched.lr_min;
    }
    let phase = std::f64::consts::PI * t as f64 / sched.decay_steps as f64;
    sched.lr_min + 0.5 * span * (1.0 + phase.cos())
}

/// Whether the gradients accumulated up to and including `step` are applied.
pub fn should_apply(step: u64, sched: &TrainSchedule) -> bool {
    if step < sched.switch_step {
        step % sched.update_every_initial == 0
    } else {
        (step - sched.switch_step) % sched.update_every_late == 0
    }
}

pub fn global_norm<T: Scalar>(grads: &[&mut Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut Tensor<T>], max_norm: f64, step: u64) -> Result<f64> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingFault {
            step,
            detail: "non-finite gradient".into(),
        });
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    Ok(norm)
}

fn store_grads<T: Scalar>(store: &mut ParamStore<T>) -> Vec<&mut Tensor<T>> {
    store.iter_mut().map(|p| &mut p.grad).collect()
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one parameter stream, kept in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Tensor<f64>>,
    pub second: Vec<Tensor<f64>>,
    /// Updates applied so far.
    pub updates: u64,
}

impl OptimizerState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        OptimizerState {
            first: zeros(),
            second: zeros(),
            updates: 0,
        }
    }

    pub fn matches<T: Scalar>(&self, store: &ParamStore<T>) -> bool {
        self.first.len() == store.len()
            && self.second.len() == store.len()
            && store
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }
}

/// One bias-corrected Adam update from the stored gradients, which are then
/// cleared.
pub fn adam_apply<T: Scalar>(store: &mut ParamStore<T>, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    if !opt.matches(store) {
        return Err(Error::Contract("optimizer state does not match the parameters".into()));
    }
    opt.updates += 1;
    let t = opt.updates as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (p, (m, v)) in store.iter_mut().zip(opt.first.iter_mut().zip(opt.second.iter_mut())) {
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for (i, (m, v)) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).enumerate() {
            let g = grad[i].to_f64_lossy();
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            value[i] = T::from_f64_lossy(value[i].to_f64_lossy() - update);
        }
    }
    store.zero_grads();
    Ok(())
}

/// Windows of one batch row for one step: inputs and next-token targets.
pub type Windows = [(Vec<usize>, Vec<Option<usize>>)];

/// Gradients of the task loss and of the auxiliary compression loss,
/// computed by separate backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients<T> {
    /// Summed negative log-likelihood in nats.
    pub task_loss: f64,
    /// Summed auxiliary loss over layers and windows.
    pub aux_loss: f64,
    pub task: Vec<(ParamKey, Tensor<T>)>,
    pub aux: Vec<(ParamKey, Tensor<T>)>,
}

impl<T: Scalar> StepGradients<T> {
    pub fn task_grad(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.task.iter().find(|(k, _)| *k == key).map(|(_, t)| t)
    }

    pub fn aux_grad(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.aux.iter().find(|(k, _)| *k == key).map(|(_, t)| t)
    }
}

fn fault(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(op) => Error::TrainingFault {
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        e => e,
    }
}

/// Runs `windows` from `state` with both streams trainable and returns the
/// task gradient (of the task loss times `task_scale`) and the auxiliary
/// gradient (times `aux_scale`); `state` advances past the windows.
pub fn split_gradients<T: Scalar>(
    model: &Model<T>,
    state: &mut MemoryState<T>,
    windows: &Windows,
    task_scale: f64,
    aux_scale: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<StepGradients<T>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true, true);
    let mut live = state.attach(&mut g);
    let (task, aux) = model.unrolled_loss(&mut g, &bound, windows, &mut live, AuxMode::Objective, rng)?;
    let mut out = StepGradients {
        task_loss: 0.0,
        aux_loss: 0.0,
        task: Vec::new(),
        aux: Vec::new(),
    };
    if let Some(task) = task {
        out.task_loss = g.value(task).item().to_f64_lossy();
        let scaled = g.scale(task, T::from_f64_lossy(task_scale))?;
        g.backward(scaled)?;
        out.task = g.param_grads().map(|(k, t)| (k, t.clone())).collect();
    }
    if !aux.is_empty() {
        g.zero_grads();
        let mut total = aux[0];
        for &a in &aux[1..] {
            total = g.add(total, a)?;
        }
        out.aux_loss = g.value(total).item().to_f64_lossy();
        let scaled = g.scale(total, T::from_f64_lossy(aux_scale))?;
        g.backward(scaled)?;
        out.aux = g.param_grads().map(|(k, t)| (k, t.clone())).collect();
    }
    *state = live.detach(&g, state.width());
    Ok(out)
}

/// Losses and counts gathered since the last applied update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pending {
    pub micro_steps: u64,
    pub task_nats: f64,
    pub tokens: u64,
    pub aux: f64,
}

/// One row of the metrics stream, emitted per applied update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateMetrics {
    pub step: u64,
    pub lr: f64,
    /// Mean nats per target token since the previous update.
    pub task_loss_nats: f64,
    /// Mean auxiliary loss per micro-step since the previous update.
    pub aux_loss: f64,
    /// Joint norm of both streams' averaged gradients before clipping.
    pub grad_norm: f64,
    pub tokens: u64,
}

pub const METRICS_HEADER: &str = "step,lr,task_loss_nats,aux_loss,grad_norm,tokens_per_sec";

pub fn metrics_row(m: &UpdateMetrics, tokens_per_sec: f64) -> String {
    format!(
        "{},{:.9e},{:.9},{:.9},{:.9e},{:.1}",
        m.step, m.lr, m.task_loss_nats, m.aux_loss, m.grad_norm, tokens_per_sec
    )
}

/// A model with its optimizers and one carried memory per batch row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub schedule: TrainSchedule,
    pub transformer_opt: OptimizerState,
    pub compression_opt: OptimizerState,
    pub memories: Vec<MemoryState<T>>,
    /// Steps taken so far; the next step has this index.
    pub step: u64,
    pub seed: u64,
    pub pending: Pending,
    /// Steps the compression stream is updated; `false` freezes it.
    pub train_compression: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, schedule: TrainSchedule, rows: usize, seed: u64) -> Result<Self> {
        schedule.validate()?;
        if rows == 0 {
            return Err(Error::Config("batch must have at least one row".into()));
        }
        if model.config().bptt_compression() && schedule.unroll_windows < 2 {
            return Err(Error::Config(
                "a compressor trained through the task loss needs unroll_windows >= 2".into(),
            ));
        }
        Ok(Trainer {
            transformer_opt: OptimizerState::new(model.params()),
            compression_opt: OptimizerState::new(model.compressor().params()),
            memories: vec![model.init_state(); rows],
            model,
            schedule,
            step: 0,
            seed,
            pending: Pending::default(),
            train_compression: true,
        })
    }

    pub fn rows(&self) -> usize {
        self.memories.len()
    }

    /// Random source for dropout at `step`: one stream per step of the seed.
    pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        rng
    }

    /// One micro-step over `windows[row]` for every row. Returns metrics when
    /// this step applies the accumulated update. A failed forward or backward
    /// pass leaves the trainer untouched; a fault found while applying the
    /// update leaves the offending parameters in place for inspection.
    pub fn train_step(&mut self, windows: &[Vec<(Vec<usize>, Vec<Option<usize>>)>]) -> Result<Option<UpdateMetrics>> {
        let step = self.step;
        if windows.len() != self.rows() {
            return Err(Error::dim(
                "train_step",
                format!("{} rows of windows for {} memories", windows.len(), self.rows()),
            ));
        }
        let tokens: usize = windows.iter().flatten().map(|(_, t)| t.iter().flatten().count()).sum();
        let window_count: usize = windows.iter().map(Vec::len).sum();
        let task_scale = if tokens == 0 { 0.0 } else { 1.0 / tokens as f64 };
        let aux_scale = if window_count == 0 { 0.0 } else { 1.0 / window_count as f64 };
        let mut rng = Self::step_rng(self.seed, step);
        let mut memories = self.memories.clone();
        let mut results = Vec::with_capacity(self.rows());
        for (state, w) in memories.iter_mut().zip(windows) {
            let grads = split_gradients(&self.model, state, w, task_scale, aux_scale, Some(&mut rng))
                .map_err(fault(step))?;
            if !grads.task_loss.is_finite() || !grads.aux_loss.is_finite() {
                return Err(Error::TrainingFault {
                    step,
                    detail: "non-finite loss".into(),
                });
            }
            results.push(grads);
        }

        self.memories = memories;
        for grads in &results {
            for (key, t) in &grads.task {
                self.grad_mut(*key).add_assign(t);
            }
            for (key, t) in grads.aux.iter().filter(|(k, _)| k.stream == Stream::Compression) {
                self.grad_mut(*key).add_assign(t);
            }
            self.pending.task_nats += grads.task_loss;
            self.pending.aux += grads.aux_loss * aux_scale;
        }
        self.pending.micro_steps += 1;
        self.pending.tokens += tokens as u64;
        self.step += 1;

        if !should_apply(step, &self.schedule) {
            return Ok(None);
        }
        self.apply(step).map(Some)
    }

    fn grad_mut(&mut self, key: ParamKey) -> &mut Tensor<T> {
        match key.stream {
            Stream::Transformer => &mut self.model.params_mut().get_mut(key.index).grad,
            Stream::Compression => &mut self.model.compressor_mut().params_mut().get_mut(key.index).grad,
        }
    }

    fn apply(&mut self, step: u64) -> Result<UpdateMetrics> {
        let pending = std::mem::take(&mut self.pending);
        let inv = T::from_f64_lossy(1.0 / pending.micro_steps.max(1) as f64);
        let clip = self.schedule.clip_norm;
        self.model.params_mut().scale_grads(inv);
        self.model.compressor_mut().params_mut().scale_grads(inv);
        let main = clip_global_norm(&mut store_grads(self.model.params_mut()), clip, step)?;
        let comp = clip_global_norm(&mut store_grads(self.model.compressor_mut().params_mut()), clip, step)?;
        let lr = lr_at(step, &self.schedule);
        adam_apply(self.model.params_mut(), &mut self.transformer_opt, lr)?;
        if self.train_compression {
            let lr = lr * self.schedule.compression_lr_scale;
            adam_apply(self.model.compressor_mut().params_mut(), &mut self.compression_opt, lr)?;
        } else {
            self.model.compressor_mut().params_mut().zero_grads();
        }
        if !self.model.params().values_finite() || !self.model.compressor().params().values_finite() {
            return Err(Error::TrainingFault {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }
        Ok(UpdateMetrics {
            step,
            lr,
            task_loss_nats: if pending.tokens == 0 {
                0.0
            } else {
                pending.task_nats / pending.tokens as f64
            },
            aux_loss: pending.aux / pending.micro_steps.max(1) as f64,
            grad_norm: main.hypot(comp),
            tokens: pending.tokens,
        })
    }

    /// Windows of micro-step `step`: the next `unroll_windows` batches of
    /// `batches`, cycling at the end.
    pub fn windows_for(&self, batches: &Batches, step: u64) -> Vec<Vec<(Vec<usize>, Vec<Option<usize>>)>> {
        let k = self.schedule.unroll_windows;
        let mut rows = vec![Vec::with_capacity(k); batches.rows()];
        for j in 0..k {
            let index = ((step as usize) * k + j) % batches.len();
            let batch = batches.get(index);
            for (row, (x, y)) in rows.iter_mut().zip(batch.inputs.into_iter().zip(batch.targets)) {
                row.push((x, y.into_iter().map(Some).collect()));
            }
        }
        rows
    }
}

/// Trains until `trainer.step` reaches `until`, calling `on_update` with the
/// metrics and throughput of every applied update.
pub fn train_loop<T, F>(trainer: &mut Trainer<T>, batches: &Batches, until: u64, mut on_update: F) -> Result<()>
where
    T: Scalar,
    F: FnMut(&Trainer<T>, &UpdateMetrics, f64) -> Result<()>,
{
    if batches.rows() != trainer.rows() {
        return Err(Error::Config(format!(
            "{} batch rows for a trainer with {}",
            batches.rows(),
            trainer.rows()
        )));
    }
    if batches.is_empty() {
        return Err(Error::DegenerateInput {
            op: "train_loop",
            detail: "no training windows".into(),
        });
    }
    let mut since = Instant::now();
    while trainer.step < until {
        let windows = trainer.windows_for(batches, trainer.step);
        if let Some(m) = trainer.train_step(&windows)? {
            let secs = since.elapsed().as_secs_f64();
            let tps = if secs > 0.0 { m.tokens as f64 / secs } else { 0.0 };
            on_update(trainer, &m, tps)?;
            since = Instant::now();
        }
    }
    Ok(())
}

/// Accumulates metrics rows into CSV text.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    text: String,
}

impl Default for MetricsLog {
    fn default() -> Self {
        MetricsLog::new()
    }
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog {
            text: format!("{METRICS_HEADER}\n"),
        }
    }

    pub fn push(&mut self, m: &UpdateMetrics, tokens_per_sec: f64) {
        let _ = writeln!(self.text, "{}", metrics_row(m, tokens_per_sec));
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}
