//! Small-scale experiments: long-range recall and character language
//! modelling, each comparing a compressive model against a plain-memory
//! model with the same attention cost.

use std::time::Instant;

use anyhow::{ensure, Result};
use compressive::compression::{CompressionSpec, Objective, Variant};
use compressive::data::{contiguous_batches, synthetic_recall, Episode, SyntheticTaskSpec, TokenStream};
use compressive::evaluation::{evaluate, EvalOptions};
use compressive::memory::attention_cost;
use compressive::model::{Model, ModelConfig, StepRequest};
use compressive::training::{train_loop, TrainSchedule, Trainer};
use log::info;

/// Episodes are cut into windows of the model's sequence length.
fn episode_windows(ep: &Episode, seq_len: usize, supervised: bool) -> Vec<(Vec<usize>, Vec<Option<usize>>)> {
    let targets = if supervised {
        ep.query_targets()
    } else {
        vec![None; ep.tokens.len()]
    };
    ep.tokens
        .chunks(seq_len)
        .zip(targets.chunks(seq_len))
        .map(|(x, y)| (x.to_vec(), y.to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallSetup {
    /// Episode layout; `episodes` and `seed` are set per batch.
    pub task: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub batch: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Stop once held-out accuracy reaches this.
    pub stop_at: Option<f64>,
}

impl RecallSetup {
    /// One layer, 16-token windows, 16 memory and 16 compressed slots at
    /// rate 3, with the pair 40 filler tokens before the query.
    pub fn compressive(variant: Variant) -> Self {
        let task = SyntheticTaskSpec {
            vocab_size: 24,
            payloads: 8,
            distance: 40,
            seq_len: 64,
            pair_position: 6,
            episodes: 0,
            seed: 0,
        };
        let model = ModelConfig {
            layers: 1,
            d_model: 32,
            heads: 4,
            seq_len: 16,
            mem_len: 16,
            cmem_len: 16,
            vocab_size: task.vocab_size,
            mlp_hidden: 64,
            dropout: 0.0,
            mask_empty_memory: true,
            init_std: 0.1,
            compression: CompressionSpec {
                variant,
                rate: 3,
                objective: if variant.is_learnable() {
                    Objective::AttentionReconstruction
                } else {
                    Objective::None
                },
            },
        };
        RecallSetup {
            task,
            model,
            schedule: TrainSchedule {
                lr_min: 1e-5,
                lr_max: 3e-3,
                warmup_steps: 100,
                decay_steps: 20_000,
                switch_step: u64::MAX,
                ..TrainSchedule::desk()
            },
            batch: 16,
            max_steps: 20_000,
            eval_every: 100,
            eval_episodes: 256,
            stop_at: Some(0.95),
        }
    }

    /// The same model with the compressed slots folded into plain memory,
    /// which keeps the attention cost unchanged.
    pub fn cost_matched_baseline(&self) -> Self {
        let mut s = self.clone();
        s.model.mem_len = self.model.mem_len + self.model.cmem_len;
        s.model.cmem_len = 0;
        s.model.compression.objective = Objective::None;
        s.model.compression.variant = Variant::MeanPool;
        debug_assert_eq!(
            attention_cost(s.model.seq_len as u64, s.model.mem_len as u64, 0),
            attention_cost(
                self.model.seq_len as u64,
                self.model.mem_len as u64,
                self.model.cmem_len as u64
            )
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallResult {
    /// Held-out accuracy at each evaluation as `(steps trained, accuracy)`.
    pub curve: Vec<(u64, f64)>,
    pub steps: u64,
    pub seconds: f64,
}

impl RecallResult {
    pub fn final_accuracy(&self) -> f64 {
        self.curve.last().map_or(0.0, |c| c.1)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.curve.iter().map(|c| c.1).fold(0.0, f64::max)
    }
}

/// Fraction of episodes whose most likely token at the query is the payload.
pub fn recall_accuracy(model: &Model<f32>, episodes: &[Episode]) -> Result<f64> {
    let n_s = model.config().seq_len;
    let mut hits = 0usize;
    for ep in episodes {
        let mut state = model.init_state();
        for (w, (x, _)) in episode_windows(ep, n_s, false).into_iter().enumerate() {
            let full = x.len() == n_s;
            let out = model.step(&x, &vec![None; x.len()], &mut state, StepRequest { commit: full, ..Default::default() })?;
            if (w * n_s..w * n_s + x.len()).contains(&ep.query) {
                let row = out.logits.row(ep.query - w * n_s);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
                hits += usize::from(best == ep.payload);
                break;
            }
        }
    }
    Ok(hits as f64 / episodes.len().max(1) as f64)
}

/// Trains on fresh episodes every step, each from zeroed memories, and
/// tracks accuracy on a fixed held-out set.
pub fn run_recall(setup: &RecallSetup, seed: u64, max_steps: u64) -> Result<RecallResult> {
    let start = Instant::now();
    let model = Model::<f32>::new(setup.model.clone(), seed)?;
    let mut trainer = Trainer::new(model, setup.schedule, setup.batch, seed)?;
    let held_out = synthetic_recall(&SyntheticTaskSpec {
        episodes: setup.eval_episodes,
        seed: seed ^ 0x5eed_0000_0000,
        ..setup.task
    })?;
    let mut curve = Vec::new();
    let n_s = setup.model.seq_len;
    while trainer.step < max_steps {
        let batch = synthetic_recall(&SyntheticTaskSpec {
            episodes: setup.batch,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(trainer.step),
            ..setup.task
        })?;
        let windows: Vec<_> = batch.iter().map(|ep| episode_windows(ep, n_s, true)).collect();
        let fresh = trainer.model.init_state();
        trainer.memories.iter_mut().for_each(|m| *m = fresh.clone());
        trainer.train_step(&windows)?;
        if trainer.step % setup.eval_every == 0 || trainer.step == max_steps {
            let acc = recall_accuracy(&trainer.model, &held_out)?;
            info!("recall seed {seed} step {} accuracy {acc:.3}", trainer.step);
            curve.push((trainer.step, acc));
            if setup.stop_at.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    Ok(RecallResult {
        curve,
        steps: trainer.step,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Character language modelling on a fixed corpus split.
#[derive(Debug, Clone, PartialEq)]
pub struct CharLmSetup {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub batch: usize,
    pub steps: u64,
    /// Validation windows scored at the end.
    pub eval_windows: Option<usize>,
}

impl CharLmSetup {
    /// Two layers, 32-token windows, equal plain and compressed memory at
    /// rate 3.
    pub fn compressive(variant: Variant, objective: Objective) -> Self {
        CharLmSetup {
            model: ModelConfig {
                layers: 2,
                d_model: 64,
                heads: 4,
                seq_len: 32,
                mem_len: 32,
                cmem_len: 32,
                vocab_size: compressive::data::BYTE_VOCAB,
                mlp_hidden: 128,
                dropout: 0.0,
                mask_empty_memory: true,
                init_std: 0.1,
                compression: CompressionSpec {
                    variant,
                    rate: 3,
                    objective,
                },
            },
            schedule: TrainSchedule {
                lr_min: 1e-5,
                lr_max: 2e-3,
                warmup_steps: 100,
                decay_steps: 8_000,
                switch_step: u64::MAX,
                ..TrainSchedule::desk()
            },
            batch: 8,
            steps: 8_000,
            eval_windows: None,
        }
    }

    pub fn cost_matched_baseline(&self) -> Self {
        let mut s = self.clone();
        s.model.mem_len += s.model.cmem_len;
        s.model.cmem_len = 0;
        s.model.compression = CompressionSpec {
            variant: Variant::MeanPool,
            rate: self.model.compression.rate,
            objective: Objective::None,
        };
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharLmResult {
    pub valid_bpc: f64,
    pub final_train_loss: f64,
    pub seconds: f64,
}

pub fn run_char_lm(setup: &CharLmSetup, train: &TokenStream, valid: &TokenStream, seed: u64) -> Result<CharLmResult> {
    let start = Instant::now();
    let model = Model::<f32>::new(setup.model.clone(), seed)?;
    let mut trainer = Trainer::new(model, setup.schedule, setup.batch, seed)?;
    let batches = contiguous_batches(&train.ids, setup.batch, setup.model.seq_len)?;
    let mut last = f64::NAN;
    train_loop(&mut trainer, &batches, setup.steps, |t, m, _| {
        last = m.task_loss_nats;
        if m.step % 500 == 0 {
            info!("char lm seed {seed} step {} loss {:.4} ({:?})", t.step, m.task_loss_nats, t.model.config().compression.variant);
        }
        Ok(())
    })?;
    let report = evaluate(
        &trainer.model,
        valid,
        &EvalOptions {
            max_windows: setup.eval_windows,
            ..Default::default()
        },
    )?;
    let bpc = report.bpc();
    ensure!(bpc.is_some(), "validation stream is not character level");
    Ok(CharLmResult {
        valid_bpc: bpc.unwrap_or(f64::NAN),
        final_train_loss: last,
        seconds: start.elapsed().as_secs_f64(),
    })
}
