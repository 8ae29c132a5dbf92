//! Compression functions for evicted memories and their auxiliary
//! objectives.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{content_attention, AttentionParams};
use crate::autograd::{Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MaxPool,
    MeanPool,
    Conv,
    DilatedConv,
    MostUsed,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::MaxPool,
        Variant::MeanPool,
        Variant::Conv,
        Variant::DilatedConv,
        Variant::MostUsed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MaxPool => "max_pool",
            Variant::MeanPool => "mean_pool",
            Variant::Conv => "conv",
            Variant::DilatedConv => "dilated_conv",
            Variant::MostUsed => "most_used",
        }
    }

    pub fn is_learnable(self) -> bool {
        matches!(self, Variant::Conv | Variant::DilatedConv)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the compression network is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// No auxiliary loss; a learnable compressor is trained by the task
    /// loss through memories kept attached over the unroll.
    #[serde(alias = "bptt")]
    None,
    AutoEncoding,
    AttentionReconstruction,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::None => "none",
            Objective::AutoEncoding => "auto_encoding",
            Objective::AttentionReconstruction => "attention_reconstruction",
        }
    }

    pub fn is_auxiliary(self) -> bool {
        self != Objective::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSpec {
    pub variant: Variant,
    pub rate: usize,
    pub objective: Objective,
}

impl Default for CompressionSpec {
    fn default() -> Self {
        CompressionSpec {
            variant: Variant::Conv,
            rate: 3,
            objective: Objective::AttentionReconstruction,
        }
    }
}

impl CompressionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rate == 0 {
            return Err(Error::Config("compression rate must be at least 1".into()));
        }
        if self.objective.is_auxiliary() && !self.variant.is_learnable() {
            return Err(Error::Config(format!(
                "objective {} needs a learnable compressor, not {}",
                self.objective.name(),
                self.variant
            )));
        }
        Ok(())
    }

    /// Compressed slots produced from `n` evicted rows.
    pub fn output_rows(&self, n: usize) -> usize {
        n / self.rate
    }
}

/// Per-layer parameter indices inside [`Compressor::params`].
#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerSlots {
    kernels: Vec<usize>,
    decoder: Option<usize>,
}

/// Compression parameters for every layer, in their own optimizer stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressor<T> {
    spec: CompressionSpec,
    params: ParamStore<T>,
    slots: Vec<LayerSlots>,
}

fn scaled_identity<T: Scalar>(width: usize, d: usize, taps: &[(usize, f64)]) -> Tensor<T> {
    let mut k = Tensor::zeros([width, d, d]);
    for &(tap, s) in taps {
        for i in 0..d {
            k.data_mut()[tap * d * d + i * d + i] = T::from_f64_lossy(s);
        }
    }
    k
}

impl<T: Scalar> Compressor<T> {
    /// Convolutions start as the identity (`c = 1`) or as a mean over each
    /// window (`c > 1`); the decoder starts by copying each slot back to
    /// every row of its window.
    pub fn new(spec: CompressionSpec, layers: usize, d: usize) -> Result<Self> {
        spec.validate()?;
        let c = spec.rate;
        let mean: Vec<(usize, f64)> = (0..c).map(|j| (j, 1.0 / c as f64)).collect();
        let mut params = ParamStore::new(Stream::Compression);
        let mut slots = Vec::with_capacity(layers);
        for layer in 0..layers {
            let kernels = match spec.variant {
                Variant::Conv => vec![params.add(format!("layer{layer}.compress.conv"), scaled_identity(c, d, &mean))],
                Variant::DilatedConv => vec![
                    params.add(format!("layer{layer}.compress.dilated1"), scaled_identity(2, d, &[(1, 1.0)])),
                    params.add(format!("layer{layer}.compress.dilated2"), scaled_identity(2, d, &[(1, 1.0)])),
                    params.add(format!("layer{layer}.compress.aggregate"), scaled_identity(c, d, &mean)),
                ],
                _ => vec![],
            };
            let decoder = (spec.objective == Objective::AutoEncoding).then(|| {
                let copy: Vec<(usize, f64)> = (0..c).map(|j| (j, 1.0)).collect();
                params.add(format!("layer{layer}.compress.decoder"), scaled_identity(c, d, &copy))
            });
            slots.push(LayerSlots { kernels, decoder });
        }
        Ok(Compressor { spec, params, slots })
    }

    pub fn spec(&self) -> &CompressionSpec {
        &self.spec
    }

    pub fn layers(&self) -> usize {
        self.slots.len()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Binds the parameters into `g`; frozen parameters are constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundCompressor {
        let vars = if trainable {
            self.params.bind(g)
        } else {
            self.params.bind_frozen(g)
        };
        BoundCompressor {
            spec: self.spec,
            layers: self
                .slots
                .iter()
                .map(|s| CompressionLayer {
                    kernels: s.kernels.iter().map(|&i| vars[i]).collect(),
                    decoder: s.decoder.map(|i| vars[i]),
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Compressor<U> {
        Compressor {
            spec: self.spec,
            params: self.params.cast(),
            slots: self.slots.clone(),
        }
    }
}

/// One layer's compression parameters bound into a graph.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CompressionLayer {
    pub kernels: Vec<Var>,
    pub decoder: Option<Var>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundCompressor {
    pub spec: CompressionSpec,
    pub layers: Vec<CompressionLayer>,
}

fn left_pad<T: Scalar>(g: &mut Graph<T>, x: Var, rows: usize) -> Result<Var> {
    let pad = g.constant(Tensor::zeros([rows, g.value(x).cols()]));
    g.concat_rows(&[pad, x])
}

/// Pools windows of `c` rows; trailing rows that do not fill a window are
/// folded into the last one.
fn pool_folded<T: Scalar>(g: &mut Graph<T>, x: Var, kind: PoolKind, c: usize) -> Result<Var> {
    let n = g.value(x).rows();
    let (q, r) = (n / c, n % c);
    if r == 0 {
        return g.pool1d(x, kind, c, c);
    }
    let tail_start = (q - 1) * c;
    let tail = g.slice_rows(x, tail_start, n - tail_start)?;
    let tail = g.pool1d(tail, kind, c + r, c + r)?;
    if q == 1 {
        return Ok(tail);
    }
    let head = g.slice_rows(x, 0, tail_start)?;
    let head = g.pool1d(head, kind, c, c)?;
    g.concat_rows(&[head, tail])
}

/// Maps `n_s` evicted rows to `⌊n_s/c⌋` compressed rows.
///
/// `usage` (per evicted row) is only read by the most-used variant.
pub fn compress<T: Scalar>(
    g: &mut Graph<T>,
    spec: &CompressionSpec,
    layer: &CompressionLayer,
    old_mem: Var,
    usage: Option<&[f64]>,
) -> Result<Var> {
    let n = g.value(old_mem).rows();
    let c = spec.rate;
    if c == 0 || n < c {
        return Err(Error::degenerate(
            "compress",
            format!("{n} evicted rows at compression rate {c}"),
        ));
    }
    let kernel = |i: usize| {
        layer
            .kernels
            .get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("{} compressor is missing kernel {i}", spec.variant)))
    };
    match spec.variant {
        Variant::MaxPool => pool_folded(g, old_mem, PoolKind::Max, c),
        Variant::MeanPool => pool_folded(g, old_mem, PoolKind::Mean, c),
        Variant::Conv => g.conv1d(old_mem, kernel(0)?, c, 1),
        Variant::DilatedConv => {
            let x = left_pad(g, old_mem, 1)?;
            let x = g.conv1d(x, kernel(0)?, 1, 1)?;
            let x = left_pad(g, x, 2)?;
            let x = g.conv1d(x, kernel(1)?, 1, 2)?;
            g.conv1d(x, kernel(2)?, c, 1)
        }
        Variant::MostUsed => {
            let usage = usage.ok_or_else(|| Error::Contract("most_used compression needs usage statistics".into()))?;
            most_used_select(g, old_mem, usage, n / c)
        }
    }
}

/// Indices of the `k` largest `usage` values (ties toward the smaller
/// index), in increasing order.
pub fn most_used_indices(usage: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..usage.len()).collect();
    order.sort_by(|&a, &b| usage[b].total_cmp(&usage[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Keeps the `k` most-attended rows of `old_mem` in their original order.
pub fn most_used_select<T: Scalar>(g: &mut Graph<T>, old_mem: Var, usage: &[f64], k: usize) -> Result<Var> {
    let n = g.value(old_mem).rows();
    if usage.len() != n || k > n {
        return Err(Error::dim(
            "most_used_select",
            format!("{} usage values, {n} rows, k = {k}", usage.len()),
        ));
    }
    g.select_rows(old_mem, &most_used_indices(usage, k))
}

/// `‖old_mem − g(new_cm)‖₂` with a transposed-convolution decoder.
///
/// The decoder yields `⌊n_s/c⌋·c` rows; when `c` does not divide `n_s` the
/// trailing evicted rows are not reconstructed. `old_mem` is a target and
/// receives no gradient.
pub fn auto_encoding_loss<T: Scalar>(g: &mut Graph<T>, old_mem: Var, new_cm: Var, decoder: Var, rate: usize) -> Result<Var> {
    let recon = g.conv_transpose1d(new_cm, decoder, rate)?;
    let rows = g.value(recon).rows();
    if rows > g.value(old_mem).rows() {
        return Err(Error::dim(
            "auto_encoding_loss",
            format!("{rows} reconstructed rows for {} evicted", g.value(old_mem).rows()),
        ));
    }
    let target = g.stop_gradient(old_mem);
    let target = g.slice_rows(target, 0, rows)?;
    let diff = g.sub(target, recon)?;
    g.norm(diff)
}

/// `‖attn(h, old_mem) − attn(h, f_c(old_mem))‖₂` with content-only attention.
///
/// Everything except the compression parameters enters behind
/// `stop_gradient`, so only `layer` can receive gradient.
pub fn attention_reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    old_mem: Var,
    attn: &AttentionParams,
    spec: &CompressionSpec,
    layer: &CompressionLayer,
    usage: Option<&[f64]>,
) -> Result<Var> {
    let h = g.stop_gradient(h);
    let old_mem = g.stop_gradient(old_mem);
    let q = g.stop_gradient(attn.query);
    let k = g.stop_gradient(attn.key);
    let v = g.stop_gradient(attn.value);
    let new_cm = compress(g, spec, layer, old_mem, usage)?;
    let full = content_attention(g, h, old_mem, q, k, v)?;
    let compressed = content_attention(g, h, new_cm, q, k, v)?;
    let diff = g.sub(full, compressed)?;
    g.norm(diff)
}

/// Per-layer compression losses at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionLossReport {
    pub step: u64,
    pub variant: Variant,
    pub losses: Vec<f64>,
}

impl CompressionLossReport {
    pub const CSV_HEADER: &'static str = "layer,step,variant,loss";

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (layer, loss) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{layer},{},{},{loss:.9e}", self.step, self.variant);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }
}
