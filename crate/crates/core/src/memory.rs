//! Per-layer FIFO memory and compressed memory, their update rule, and the
//! temporal-range / attention-cost arithmetic.

use std::fmt::Write as _;

use crate::autograd::{Graph, Var};
use crate::compression::{compress, CompressionLayer, CompressionSpec, Compressor};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One layer's memories.
///
/// Rows are oldest first. Fill counters count the real (pushed) rows, which
/// always form a suffix; the rows before them are the zero initialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory<T> {
    pub mem: Tensor<T>,
    pub cmem: Tensor<T>,
    /// Attention received by each `mem` slot, averaged over heads and
    /// queries and summed over the windows the slot has been resident.
    pub usage: Vec<f64>,
    pub mem_fill: usize,
    pub cmem_fill: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T> {
    pub layers: Vec<LayerMemory<T>>,
    mem_len: usize,
    cmem_len: usize,
    d: usize,
}

/// All-zero memories with nothing filled.
pub fn init_state<T: Scalar>(layers: usize, mem_len: usize, cmem_len: usize, d: usize) -> MemoryState<T> {
    MemoryState {
        layers: (0..layers)
            .map(|_| LayerMemory {
                mem: Tensor::zeros([mem_len, d]),
                cmem: Tensor::zeros([cmem_len, d]),
                usage: vec![0.0; mem_len],
                mem_fill: 0,
                cmem_fill: 0,
            })
            .collect(),
        mem_len,
        cmem_len,
        d,
    }
}

/// Evicted rows of one layer and what they were compressed into.
#[derive(Debug, Clone, PartialEq)]
pub struct Eviction<T> {
    pub old_mem: Tensor<T>,
    pub new_cm: Option<Tensor<T>>,
}

impl<T: Scalar> MemoryState<T> {
    pub fn mem_len(&self) -> usize {
        self.mem_len
    }

    pub fn cmem_len(&self) -> usize {
        self.cmem_len
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Checks shapes and counters against the declared sizes.
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            let ok = l.mem.shape() == [self.mem_len, self.d]
                && l.cmem.shape() == [self.cmem_len, self.d]
                && l.usage.len() == self.mem_len
                && l.mem_fill <= self.mem_len
                && l.cmem_fill <= self.cmem_len
                && l.usage.iter().all(|&u| u >= 0.0);
            if !ok {
                return Err(Error::dim(
                    "memory_state",
                    format!("layer {i} does not match {}x{}/{}", self.mem_len, self.cmem_len, self.d),
                ));
            }
        }
        Ok(())
    }

    /// Places every layer's tensors into `g` as constants.
    pub fn attach(&self, g: &mut Graph<T>) -> LiveMemory {
        LiveMemory {
            layers: self
                .layers
                .iter()
                .map(|l| LiveLayer {
                    mem: g.constant(l.mem.clone()),
                    cmem: g.constant(l.cmem.clone()),
                    usage: l.usage.clone(),
                    mem_fill: l.mem_fill,
                    cmem_fill: l.cmem_fill,
                })
                .collect(),
            mem_len: self.mem_len,
            cmem_len: self.cmem_len,
        }
    }

    /// Applies one window's update to every layer without tracking
    /// gradients. `h_per_layer[i]` is the input to layer `i`.
    pub fn update_memories(&mut self, h_per_layer: &[Tensor<T>], compressor: &Compressor<T>) -> Result<Vec<Eviction<T>>> {
        if h_per_layer.len() != self.layers.len() {
            return Err(Error::dim(
                "update_memories",
                format!("{} layer inputs for {} layers", h_per_layer.len(), self.layers.len()),
            ));
        }
        let mut g = Graph::new();
        let mut live = self.attach(&mut g);
        let bound = compressor.bind(&mut g, false);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, h) in h_per_layer.iter().enumerate() {
            let hv = g.constant(h.clone());
            let layer = bound.layers.get(i).cloned().unwrap_or_default();
            let ev = advance_layer(
                &mut g,
                &mut live.layers[i],
                hv,
                self.mem_len,
                self.cmem_len,
                &bound.spec,
                &layer,
                true,
            )?;
            out.push(Eviction {
                old_mem: g.value(ev.old_mem).clone(),
                new_cm: ev.new_cm.map(|v| g.value(v).clone()),
            });
        }
        *self = live.detach(&g, self.d);
        Ok(out)
    }

    /// Sum of absolute values of every memory element.
    pub fn abs_sum(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.mem.data().iter().chain(l.cmem.data()))
            .map(|v| v.to_f64_lossy().abs())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> MemoryState<U> {
        MemoryState {
            layers: self
                .layers
                .iter()
                .map(|l| LayerMemory {
                    mem: l.mem.cast(),
                    cmem: l.cmem.cast(),
                    usage: l.usage.clone(),
                    mem_fill: l.mem_fill,
                    cmem_fill: l.cmem_fill,
                })
                .collect(),
            mem_len: self.mem_len,
            cmem_len: self.cmem_len,
            d: self.d,
        }
    }
}

/// A layer's memories while a window is being processed.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveLayer {
    pub mem: Var,
    pub cmem: Var,
    pub usage: Vec<f64>,
    pub mem_fill: usize,
    pub cmem_fill: usize,
}

impl LiveLayer {
    /// Visibility of each slot of `[cmem; mem]`: `false` for slots still
    /// holding the zero initialisation.
    pub fn filled_mask(&self, mem_len: usize, cmem_len: usize) -> Vec<bool> {
        (0..cmem_len)
            .map(|i| i >= cmem_len - self.cmem_fill)
            .chain((0..mem_len).map(|i| i >= mem_len - self.mem_fill))
            .collect()
    }

    /// Adds the attention each `mem` slot received, averaged over heads and
    /// query rows. `weights` are per-head `n × (cmem_len + mem_len + n)`
    /// matrices.
    pub fn accumulate_usage<T: Scalar>(&mut self, weights: &[&Tensor<T>], cmem_len: usize) {
        let mem_len = self.usage.len();
        let mut rows = 0usize;
        let mut acc = vec![0.0f64; mem_len];
        for w in weights {
            for i in 0..w.rows() {
                let row = &w.row(i)[cmem_len..cmem_len + mem_len];
                for (a, &p) in acc.iter_mut().zip(row) {
                    *a += p.to_f64_lossy();
                }
                rows += 1;
            }
        }
        if rows > 0 {
            for (u, a) in self.usage.iter_mut().zip(acc) {
                *u += a / rows as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveMemory {
    pub layers: Vec<LiveLayer>,
    pub mem_len: usize,
    pub cmem_len: usize,
}

impl LiveMemory {
    pub fn detach<T: Scalar>(&self, g: &Graph<T>, d: usize) -> MemoryState<T> {
        MemoryState {
            layers: self
                .layers
                .iter()
                .map(|l| LayerMemory {
                    mem: g.value(l.mem).clone(),
                    cmem: g.value(l.cmem).clone(),
                    usage: l.usage.clone(),
                    mem_fill: l.mem_fill,
                    cmem_fill: l.cmem_fill,
                })
                .collect(),
            mem_len: self.mem_len,
            cmem_len: self.cmem_len,
            d,
        }
    }
}

/// Graph handles of one layer's eviction.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEviction {
    pub old_mem: Var,
    /// Usage of the evicted rows at eviction time.
    pub old_usage: Vec<f64>,
    /// `None` when there is no compressed memory.
    pub new_cm: Option<Var>,
}

/// One FIFO step for one layer: the oldest `n` rows of `mem` are evicted and
/// compressed into `cmem`, and the `n` rows of `h` are pushed onto `mem`.
///
/// With `detach` the updated memories carry no gradient back into this
/// graph.
#[allow(clippy::too_many_arguments)]
pub fn advance_layer<T: Scalar>(
    g: &mut Graph<T>,
    live: &mut LiveLayer,
    h: Var,
    mem_len: usize,
    cmem_len: usize,
    spec: &CompressionSpec,
    compressor: &CompressionLayer,
    detach: bool,
) -> Result<LayerEviction> {
    let n = g.value(h).rows();
    if n > mem_len {
        return Err(Error::Config(format!(
            "window of {n} rows exceeds memory of {mem_len} slots"
        )));
    }
    let old_mem = g.slice_rows(live.mem, 0, n)?;
    let old_usage = live.usage[..n].to_vec();
    let evicted_real = (n + live.mem_fill).saturating_sub(mem_len);

    let new_cm = if cmem_len > 0 {
        Some(compress(g, spec, compressor, old_mem, Some(&old_usage))?)
    } else {
        None
    };

    let pushed = g.concat_rows(&[live.mem, h])?;
    let mut mem = g.slice_rows(pushed, n, mem_len)?;
    if let Some(cm) = new_cm {
        let k = g.value(cm).rows();
        let grown = g.concat_rows(&[live.cmem, cm])?;
        let total = g.value(grown).rows();
        let mut cmem = g.slice_rows(grown, total - cmem_len, cmem_len)?;
        if detach {
            cmem = g.stop_gradient(cmem);
        }
        live.cmem = cmem;
        let real = if evicted_real == n { k } else { evicted_real.div_ceil(spec.rate).min(k) };
        live.cmem_fill = (live.cmem_fill + real).min(cmem_len);
    }
    if detach {
        mem = g.stop_gradient(mem);
    }
    live.mem = mem;
    live.mem_fill = (live.mem_fill + n).min(mem_len);
    live.usage.drain(..n);
    live.usage.resize(mem_len, 0.0);
    Ok(LayerEviction {
        old_mem,
        old_usage,
        new_cm,
    })
}

/// Farthest token distance reachable through the memories: `l·(n_m + c·n_cm)`.
pub fn temporal_range(layers: u64, mem_len: u64, cmem_len: u64, rate: u64) -> u64 {
    layers * (mem_len + rate * cmem_len)
}

/// Attention scores evaluated per layer and head: `n_s² + n_s·(n_m + n_cm)`.
pub fn attention_cost(seq_len: u64, mem_len: u64, cmem_len: u64) -> u64 {
    seq_len * seq_len + seq_len * (mem_len + cmem_len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeRow {
    pub model: String,
    pub mem_len: u64,
    pub cmem_len: u64,
    pub rate: u64,
    pub max_temporal_range: u64,
    pub attention_cost: u64,
}

impl RangeRow {
    pub fn new(model: impl Into<String>, layers: u64, seq_len: u64, mem_len: u64, cmem_len: u64, rate: u64) -> Self {
        RangeRow {
            model: model.into(),
            mem_len,
            cmem_len,
            rate,
            max_temporal_range: temporal_range(layers, mem_len, cmem_len, rate),
            attention_cost: attention_cost(seq_len, mem_len, cmem_len),
        }
    }
}

/// The compressive configuration next to TransformerXL baselines matched
/// on attention cost and on temporal range.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeReport {
    pub rows: Vec<RangeRow>,
    /// Temporal range of the compressive model over that of the cost-matched
    /// baseline.
    pub range_ratio: f64,
    /// Attention cost of the compressive model over that of the cost-matched
    /// baseline.
    pub cost_ratio: f64,
}

impl RangeReport {
    pub fn new(layers: u64, seq_len: u64, mem_len: u64, cmem_len: u64, rate: u64) -> Self {
        let ours = RangeRow::new("compressive", layers, seq_len, mem_len, cmem_len, rate);
        let cost_matched = RangeRow::new("txl_cost_matched", layers, seq_len, mem_len + cmem_len, 0, 1);
        let range_matched = RangeRow::new("txl_range_matched", layers, seq_len, mem_len + rate * cmem_len, 0, 1);
        let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        RangeReport {
            range_ratio: ratio(ours.max_temporal_range, cost_matched.max_temporal_range),
            cost_ratio: ratio(ours.attention_cost, cost_matched.attention_cost),
            rows: vec![ours, cost_matched, range_matched],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,mem_len,cmem_len,rate,max_temporal_range,attention_cost\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.model, r.mem_len, r.cmem_len, r.rate, r.max_temporal_range, r.attention_cost
            );
        }
        out
    }
}
