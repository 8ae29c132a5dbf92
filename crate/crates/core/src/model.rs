//! The layer stack: embedding, attention over `[cmem; mem; sequence]`,
//! post-norm residual blocks, tied output logits, and the per-window memory
//! update with optional compression losses.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multihead_attention, AttentionOptions, AttentionParams, AttentionTrace, RelPosEncoding};
use crate::autograd::{Graph, Reduction, Var, LAYER_NORM_EPS};
use crate::compression::{
    attention_reconstruction_loss, auto_encoding_loss, BoundCompressor, CompressionSpec, Compressor, Objective,
};
use crate::error::{Error, Result};
use crate::memory::{advance_layer, init_state, LayerEviction, LiveMemory, MemoryState};
use crate::params::{ParamStore, Stream};
use crate::tensor::{Scalar, Tensor};

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub mem_len: usize,
    pub cmem_len: usize,
    pub vocab_size: usize,
    pub mlp_hidden: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Hide memory slots that still hold the zero initialisation.
    #[serde(default)]
    pub mask_empty_memory: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    pub compression: CompressionSpec,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.mlp_hidden == 0 {
            return err("layers, d_model, vocab_size and mlp_hidden must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.seq_len == 0 {
            return err("seq_len must be positive".into());
        }
        if self.seq_len > self.mem_len {
            return err(format!("seq_len {} exceeds mem_len {}", self.seq_len, self.mem_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return err(format!("init_std {} must be positive", self.init_std));
        }
        self.compression.validate()?;
        if self.cmem_len > 0 && self.seq_len < self.compression.rate {
            return err(format!(
                "seq_len {} is shorter than the compression rate {}",
                self.seq_len, self.compression.rate
            ));
        }
        Ok(())
    }

    /// Whether the compressed memory is trained through the task loss over
    /// an unroll rather than by an auxiliary objective.
    pub fn bptt_compression(&self) -> bool {
        self.cmem_len > 0 && !self.compression.objective.is_auxiliary() && self.compression.variant.is_learnable()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    query: usize,
    key: usize,
    value: usize,
    output: usize,
    position: usize,
    content_bias: usize,
    position_bias: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_gain: usize,
    ln2_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    compressor: Compressor<T>,
    embedding: usize,
    slots: Vec<LayerSlots>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundLayer {
    pub attention: AttentionParams,
    pub ln1: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2: (Var, Var),
}

/// Model parameters bound into one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundModel {
    pub embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub compressor: BoundCompressor,
}

/// Which compression losses a window computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxMode {
    Off,
    /// The configured auxiliary objective, for training.
    Objective,
    /// The configured objective, or attention reconstruction when there is
    /// none; evaluated for reporting only.
    Diagnostic,
}

pub struct WindowOptions<'a> {
    /// Enables dropout (needs `rng` when the rate is positive).
    pub train: bool,
    /// Evict and push memories after the window.
    pub commit: bool,
    /// Stop gradients at the updated memories.
    pub detach_memory: bool,
    pub aux: AuxMode,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl WindowOptions<'_> {
    pub fn eval() -> Self {
        WindowOptions {
            train: false,
            commit: true,
            detach_memory: true,
            aux: AuxMode::Off,
            rng: None,
        }
    }
}

pub struct WindowOutput {
    /// `n × vocab`.
    pub logits: Var,
    /// Input of every layer.
    pub layer_inputs: Vec<Var>,
    /// Per layer, per head attention weights.
    pub attention: Vec<Vec<Var>>,
    /// Per layer compression loss (empty unless requested and committed).
    pub aux_losses: Vec<Var>,
    pub evictions: Vec<LayerEviction>,
}

/// Value-level result of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub logits: Tensor<T>,
    /// Mean negative log-likelihood in nats over the targeted positions.
    pub loss: f64,
    /// Per-position negative log-likelihood (`None` where untargeted).
    pub token_losses: Vec<Option<f64>>,
    pub aux_losses: Vec<f64>,
    /// One trace per layer when requested.
    pub traces: Vec<AttentionTrace>,
    /// Input of every layer (the rows pushed onto memory).
    pub layer_inputs: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepRequest {
    pub trace: bool,
    pub diagnostics: bool,
    pub commit: bool,
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row[target] - max - z.ln()
}

/// Mean and sum of the per-token negative log-likelihood in nats.
pub fn sequence_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, f64)> {
    if logits.rows() != targets.len() {
        return Err(Error::dim(
            "sequence_loss",
            format!("{} logit rows for {} targets", logits.rows(), targets.len()),
        ));
    }
    let mut sum = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::Data(format!("target {t} outside vocabulary of {}", logits.cols())));
        }
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
        sum -= log_softmax_at(&row, t);
    }
    let mean = if targets.is_empty() { 0.0 } else { sum / targets.len() as f64 };
    Ok((mean, sum))
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.mlp_hidden);
        let std = config.init_std;
        let proj = 1.0 / (d as f64).sqrt();
        let mut params = ParamStore::new(Stream::Transformer);
        let embedding = params.add("embedding", Tensor::randn([config.vocab_size, d], std, &mut rng));
        let mut slots = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut add = |name: &str, t: Tensor<T>| params.add(format!("layer{i}.{name}"), t);
            slots.push(LayerSlots {
                query: add("attn.query", Tensor::randn([d, d], proj, &mut rng)),
                key: add("attn.key", Tensor::randn([d, d], proj, &mut rng)),
                value: add("attn.value", Tensor::randn([d, d], proj, &mut rng)),
                output: add("attn.output", Tensor::randn([d, d], proj, &mut rng)),
                position: add("attn.position", Tensor::randn([d, d], proj, &mut rng)),
                content_bias: add("attn.content_bias", Tensor::zeros([d])),
                position_bias: add("attn.position_bias", Tensor::zeros([d])),
                ln1_gain: add("ln1.gain", Tensor::full([d], T::one())),
                ln1_bias: add("ln1.bias", Tensor::zeros([d])),
                w1: add("mlp.w1", Tensor::randn([d, f], proj, &mut rng)),
                b1: add("mlp.b1", Tensor::zeros([f])),
                w2: add("mlp.w2", Tensor::randn([f, d], 1.0 / (f as f64).sqrt(), &mut rng)),
                b2: add("mlp.b2", Tensor::zeros([d])),
                ln2_gain: add("ln2.gain", Tensor::full([d], T::one())),
                ln2_bias: add("ln2.bias", Tensor::zeros([d])),
            });
        }
        let compressor = Compressor::new(config.compression, config.layers, d)?;
        Ok(Model {
            config,
            params,
            compressor,
            embedding,
            slots,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn compressor(&self) -> &Compressor<T> {
        &self.compressor
    }

    pub fn compressor_mut(&mut self) -> &mut Compressor<T> {
        &mut self.compressor
    }

    /// Scalar parameter counts of the transformer and compression streams.
    pub fn num_params(&self) -> (usize, usize) {
        (self.params.numel(), self.compressor.params().numel())
    }

    pub fn init_state(&self) -> MemoryState<T> {
        init_state(self.config.layers, self.config.mem_len, self.config.cmem_len, self.config.d_model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            compressor: self.compressor.cast(),
            embedding: self.embedding,
            slots: self.slots.clone(),
        }
    }

    /// Binds both parameter streams into `g`; an untrainable stream is bound
    /// as constants.
    pub fn bind(&self, g: &mut Graph<T>, train_transformer: bool, train_compression: bool) -> BoundModel {
        let v = if train_transformer {
            self.params.bind(g)
        } else {
            self.params.bind_frozen(g)
        };
        BoundModel {
            embedding: v[self.embedding],
            layers: self
                .slots
                .iter()
                .map(|s| BoundLayer {
                    attention: AttentionParams {
                        query: v[s.query],
                        key: v[s.key],
                        value: v[s.value],
                        output: v[s.output],
                        position: v[s.position],
                        content_bias: v[s.content_bias],
                        position_bias: v[s.position_bias],
                    },
                    ln1: (v[s.ln1_gain], v[s.ln1_bias]),
                    w1: v[s.w1],
                    b1: v[s.b1],
                    w2: v[s.w2],
                    b2: v[s.b2],
                    ln2: (v[s.ln2_gain], v[s.ln2_bias]),
                })
                .collect(),
            compressor: self.compressor.bind(g, train_compression),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs one window through every layer inside `g`, updating `live` when
    /// `opts.commit` is set.
    pub fn forward_window(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        tokens: &[usize],
        live: &mut LiveMemory,
        opts: WindowOptions<'_>,
    ) -> Result<WindowOutput> {
        self.check_tokens(tokens)?;
        let WindowOptions {
            train,
            commit,
            detach_memory,
            aux,
            mut rng,
        } = opts;
        let n = tokens.len();
        if n == 0 || n > self.config.seq_len {
            return Err(Error::Contract(format!(
                "window of {n} tokens for seq_len {}",
                self.config.seq_len
            )));
        }
        if commit && n != self.config.seq_len {
            return Err(Error::Contract(format!(
                "only full windows of {} tokens update memory, got {n}",
                self.config.seq_len
            )));
        }
        if live.layers.len() != self.config.layers {
            return Err(Error::dim(
                "forward",
                format!("memory for {} layers, model has {}", live.layers.len(), self.config.layers),
            ));
        }
        let (mem_len, cmem_len) = (live.mem_len, live.cmem_len);
        let dropout = if train { self.config.dropout } else { 0.0 };
        if dropout > 0.0 && rng.is_none() {
            return Err(Error::Contract("dropout needs a random source".into()));
        }
        let relpos = g.constant(RelPosEncoding::new(cmem_len + mem_len + n, self.config.d_model).table().clone());
        let spec = self.config.compression;

        let mut x = g.select_rows(bound.embedding, tokens)?;
        let mut out = WindowOutput {
            logits: x,
            layer_inputs: Vec::with_capacity(self.config.layers),
            attention: Vec::with_capacity(self.config.layers),
            aux_losses: Vec::new(),
            evictions: Vec::new(),
        };
        for (i, layer) in bound.layers.iter().enumerate() {
            let h = x;
            out.layer_inputs.push(h);
            let lm = &mut live.layers[i];
            let mem = if cmem_len > 0 {
                g.concat_rows(&[lm.cmem, lm.mem])?
            } else {
                lm.mem
            };
            let mask = self.config.mask_empty_memory.then(|| lm.filled_mask(mem_len, cmem_len));
            let att = multihead_attention(
                g,
                h,
                (cmem_len + mem_len > 0).then_some(mem),
                &layer.attention,
                relpos,
                AttentionOptions {
                    heads: self.config.heads,
                    memory_mask: mask.as_deref(),
                    dropout,
                    rng: rng.as_deref_mut().map(|r| r as &mut dyn RngCore),
                },
            )?;
            let skip = g.add(att.output, h)?;
            let a = g.layer_norm(skip, layer.ln1.0, layer.ln1.1, LAYER_NORM_EPS)?;

            if commit {
                let weights: Vec<&Tensor<T>> = att.weights.iter().map(|&w| g.value(w)).collect();
                lm.accumulate_usage(&weights, cmem_len);
                let ev = advance_layer(
                    g,
                    lm,
                    h,
                    mem_len,
                    cmem_len,
                    &spec,
                    &bound.compressor.layers[i],
                    detach_memory,
                )?;
                if cmem_len > 0 && aux != AuxMode::Off {
                    let objective = match (aux, spec.objective) {
                        (AuxMode::Objective, Objective::None) => None,
                        (AuxMode::Diagnostic, Objective::None) => Some(Objective::AttentionReconstruction),
                        (_, o) => Some(o),
                    };
                    let loss = match objective {
                        Some(Objective::AttentionReconstruction) => Some(attention_reconstruction_loss(
                            g,
                            h,
                            ev.old_mem,
                            &layer.attention,
                            &spec,
                            &bound.compressor.layers[i],
                            Some(&ev.old_usage),
                        )?),
                        Some(Objective::AutoEncoding) => {
                            let decoder = bound.compressor.layers[i]
                                .decoder
                                .ok_or_else(|| Error::Contract("auto-encoding without a decoder".into()))?;
                            let new_cm = ev.new_cm.expect("compressed memory is enabled");
                            Some(auto_encoding_loss(g, ev.old_mem, new_cm, decoder, spec.rate)?)
                        }
                        _ => None,
                    };
                    out.aux_losses.extend(loss);
                }
                out.evictions.push(ev);
            }
            out.attention.push(att.weights);

            let hidden = g.matmul(a, layer.w1)?;
            let hidden = g.add_row(hidden, layer.b1)?;
            let hidden = g.gelu(hidden)?;
            let mlp = g.matmul(hidden, layer.w2)?;
            let mlp = g.add_row(mlp, layer.b2)?;
            let mlp = match rng.as_deref_mut() {
                Some(r) if dropout > 0.0 => g.dropout_with(mlp, dropout, r)?,
                _ => mlp,
            };
            let skip = g.add(mlp, a)?;
            x = g.layer_norm(skip, layer.ln2.0, layer.ln2.1, LAYER_NORM_EPS)?;
        }
        out.logits = g.matmul_t(x, bound.embedding)?;
        Ok(out)
    }

    /// Evaluates one window with frozen parameters, advancing `state` when
    /// `req.commit` is set.
    pub fn step(
        &self,
        tokens: &[usize],
        targets: &[Option<usize>],
        state: &mut MemoryState<T>,
        req: StepRequest,
    ) -> Result<StepOutput<T>> {
        if targets.len() != tokens.len() {
            return Err(Error::dim(
                "step",
                format!("{} targets for {} tokens", targets.len(), tokens.len()),
            ));
        }
        self.check_tokens(&targets.iter().flatten().copied().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false);
        let mut live = state.attach(&mut g);
        let out = self.forward_window(
            &mut g,
            &bound,
            tokens,
            &mut live,
            WindowOptions {
                train: false,
                commit: req.commit,
                detach_memory: true,
                aux: if req.diagnostics { AuxMode::Diagnostic } else { AuxMode::Off },
                rng: None,
            },
        )?;
        let logits = g.value(out.logits).clone();
        let mut token_losses = Vec::with_capacity(tokens.len());
        let (mut sum, mut counted) = (0.0, 0usize);
        for (i, t) in targets.iter().enumerate() {
            let l = t.map(|t| {
                let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
                -log_softmax_at(&row, t)
            });
            if let Some(l) = l {
                sum += l;
                counted += 1;
            }
            token_losses.push(l);
        }
        let traces = if req.trace {
            out.attention
                .iter()
                .map(|heads| AttentionTrace {
                    heads: heads.iter().map(|&w| g.value(w).cast()).collect(),
                })
                .collect()
        } else {
            Vec::new()
        };
        let layer_inputs = out.layer_inputs.iter().map(|&h| g.value(h).clone()).collect();
        let aux_losses = out.aux_losses.iter().map(|&l| g.value(l).item().to_f64_lossy()).collect();
        if req.commit {
            *state = live.detach(&g, state.width());
        }
        Ok(StepOutput {
            logits,
            loss: if counted == 0 { 0.0 } else { sum / counted as f64 },
            token_losses,
            aux_losses,
            traces,
            layer_inputs,
        })
    }

    /// Summed task loss of `windows` processed in order inside `g`, with
    /// memories carried between them.
    pub fn unrolled_loss(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        windows: &[(Vec<usize>, Vec<Option<usize>>)],
        live: &mut LiveMemory,
        aux: AuxMode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Option<Var>, Vec<Var>)> {
        let detach = !self.config.bptt_compression();
        let mut task = Vec::new();
        let mut aux_losses = Vec::new();
        for (tokens, targets) in windows {
            let out = self.forward_window(
                g,
                bound,
                tokens,
                live,
                WindowOptions {
                    train: true,
                    commit: true,
                    detach_memory: detach,
                    aux,
                    rng: rng.as_deref_mut().map(|r| r as &mut dyn RngCore),
                },
            )?;
            task.push(g.cross_entropy(out.logits, targets, Reduction::Sum)?);
            aux_losses.extend(out.aux_losses);
        }
        let total = match task.len() {
            0 => None,
            1 => Some(task[0]),
            _ => {
                let mut acc = task[0];
                for &t in &task[1..] {
                    acc = g.add(acc, t)?;
                }
                Some(acc)
            }
        };
        Ok((total, aux_losses))
    }
}
