//! Relative-position multi-head attention over `[compressed memory; memory;
//! sequence]`, single-projection content attention, and attention-bucket
//! aggregation.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::RngCore;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Graph handles for one layer's attention weights.
///
/// `query`, `key`, `value`, `output` and `position` are `d × d`; the two
/// biases are length-`d` vectors split across heads like the projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub position: Var,
    pub content_bias: Var,
    pub position_bias: Var,
}

/// Sinusoidal vectors `r_k` for relative distances `k = 0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosEncoding<T> {
    table: Tensor<T>,
}

impl<T: Scalar> RelPosEncoding<T> {
    /// Dimension `j` of `r_k` is `sin(k·f)` for even `j` and `cos(k·f)` for
    /// odd `j`, with `f = 10000^(-2⌊j/2⌋/d)`.
    pub fn new(len: usize, d: usize) -> Self {
        let mut data = Vec::with_capacity(len * d);
        for k in 0..len {
            for j in 0..d {
                let freq = 10000f64.powf(-((2 * (j / 2)) as f64) / d as f64);
                let angle = k as f64 * freq;
                data.push(T::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
            }
        }
        RelPosEncoding {
            table: Tensor::new([len, d], data).expect("table shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.rows() == 0
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }
}

#[derive(Default)]
pub struct AttentionOptions<'a> {
    pub heads: usize,
    /// Per memory slot: `false` hides the slot from every query.
    pub memory_mask: Option<&'a [bool]>,
    /// Post-softmax dropout rate; needs `rng` when positive.
    pub dropout: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

pub struct AttentionOutput {
    /// `n × d`, after the output projection.
    pub output: Var,
    /// Per head, the `n × (mem + n)` attention weights before dropout.
    pub weights: Vec<Var>,
}

impl AttentionOutput {
    pub fn trace<T: Scalar>(&self, g: &Graph<T>) -> AttentionTrace {
        AttentionTrace {
            heads: self.weights.iter().map(|&w| g.value(w).cast()).collect(),
        }
    }
}

/// Attention weights of one layer for one window, one matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub heads: Vec<Tensor<f64>>,
}

/// Causal relative-position attention of the rows of `h` over `mem` followed
/// by `h` itself.
///
/// Key `j` of query `i` sits at distance `mem_len + i - j`; keys with a
/// negative distance are masked. Scores are the sum of the content term
/// `(q + u)·k` and the position term `(q + v)·(W_R r)`, scaled by
/// `1/√d_head`. `relpos` must cover at least `mem_len + n` distances.
pub fn multihead_attention<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    mem: Option<Var>,
    params: &AttentionParams,
    relpos: Var,
    opts: AttentionOptions<'_>,
) -> Result<AttentionOutput> {
    let AttentionOptions {
        heads,
        memory_mask,
        dropout,
        mut rng,
    } = opts;
    let (n, d) = (g.value(h).rows(), g.value(h).cols());
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim("multihead_attention", format!("d = {d} over {heads} heads")));
    }
    let mem_len = match mem {
        Some(m) => {
            if g.value(m).cols() != d {
                return Err(Error::dim(
                    "multihead_attention",
                    format!("memory width {} vs {d}", g.value(m).cols()),
                ));
            }
            g.value(m).rows()
        }
        None => 0,
    };
    if let Some(mask) = memory_mask {
        if mask.len() != mem_len {
            return Err(Error::dim(
                "multihead_attention",
                format!("memory mask of {} for {mem_len} slots", mask.len()),
            ));
        }
    }
    let keys = mem_len + n;
    if g.value(relpos).rows() < keys || g.value(relpos).cols() != d {
        return Err(Error::dim(
            "multihead_attention",
            format!(
                "relative table {:?} for {keys} keys of width {d}",
                g.value(relpos).shape()
            ),
        ));
    }

    let context = match mem {
        Some(m) if mem_len > 0 => g.concat_rows(&[m, h])?,
        _ => h,
    };
    let q = g.matmul(h, params.query)?;
    let k = g.matmul(context, params.key)?;
    let v = g.matmul(context, params.value)?;
    let r = g.slice_rows(relpos, 0, keys)?;
    let rk = g.matmul(r, params.position)?;
    let qu = g.add_row(q, params.content_bias)?;
    let qv = g.add_row(q, params.position_bias)?;

    let mut valid = vec![false; n * keys];
    let mut index = vec![0usize; n * keys];
    for i in 0..n {
        for j in 0..=(mem_len + i) {
            let visible = j >= mem_len || memory_mask.is_none_or(|m| m[j]);
            valid[i * keys + j] = visible;
            index[i * keys + j] = mem_len + i - j;
        }
    }
    let valid: Arc<[bool]> = valid.into();
    let index: Arc<[usize]> = index.into();

    let dh = d / heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut weights = Vec::with_capacity(heads);
    let mut contexts = Vec::with_capacity(heads);
    for head in 0..heads {
        let at = head * dh;
        let kh = g.slice_cols(k, at, dh)?;
        let vh = g.slice_cols(v, at, dh)?;
        let rh = g.slice_cols(rk, at, dh)?;
        let quh = g.slice_cols(qu, at, dh)?;
        let qvh = g.slice_cols(qv, at, dh)?;
        let content = g.matmul_t(quh, kh)?;
        let by_distance = g.matmul_t(qvh, rh)?;
        let position = g.gather_cols(by_distance, index.clone(), keys)?;
        let scores = g.add(content, position)?;
        let scores = g.scale(scores, scale)?;
        let probs = g.masked_softmax(scores, valid.clone())?;
        weights.push(probs);
        let probs = match rng.as_deref_mut() {
            Some(r) if dropout > 0.0 => g.dropout_with(probs, dropout, r)?,
            _ => probs,
        };
        contexts.push(g.matmul(probs, vh)?);
    }
    let joined = if heads == 1 { contexts[0] } else { g.concat_cols(&contexts)? };
    let output = g.matmul(joined, params.output)?;
    Ok(AttentionOutput { output, weights })
}

/// `softmax((hQ)(mK)ᵀ)(mV)`: unscaled, unmasked, single projection, no
/// positional terms.
pub fn content_attention<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    m: Var,
    query: Var,
    key: Var,
    value: Var,
) -> Result<Var> {
    if g.value(m).rows() == 0 {
        return Err(Error::degenerate("content_attention", "no keys to attend to"));
    }
    let q = g.matmul(h, query)?;
    let k = g.matmul(m, key)?;
    let v = g.matmul(m, value)?;
    let scores = g.matmul_t(q, k)?;
    let probs = g.softmax(scores)?;
    g.matmul(probs, v)
}

pub const BUCKETS_PER_REGION: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    CompressedMemory,
    Memory,
    Sequence,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::CompressedMemory, Region::Memory, Region::Sequence];

    pub fn name(self) -> &'static str {
        match self {
            Region::CompressedMemory => "compressed_memory",
            Region::Memory => "memory",
            Region::Sequence => "sequence",
        }
    }
}

/// `[start, end)` of each of `groups` contiguous groups over `len` elements;
/// sizes differ by at most one and earlier groups are the larger ones.
pub fn partition(len: usize, groups: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (len / groups, len % groups);
    let mut start = 0;
    (0..groups)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let span = (start, start + size);
            start += size;
            span
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub region: Region,
    pub index: usize,
    /// Mean weight per key in the bucket; `None` for an empty bucket.
    pub mean: Option<f64>,
    /// Standard error of `mean` over query rows; `None` with fewer than two.
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketReport {
    pub buckets: Vec<Bucket>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.9e}"))
}

impl BucketReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region,bucket_index,mean,stderr\n");
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                b.region.name(),
                b.index,
                fmt_opt(b.mean),
                fmt_opt(b.stderr)
            );
        }
        out
    }
}

/// Averages attention into six contiguous buckets per region.
///
/// Every query row of every head of every trace contributes one sample per
/// bucket: the mean weight it puts on a key of that bucket.
pub fn attention_buckets(traces: &[AttentionTrace], n_cm: usize, n_m: usize, n_s: usize) -> Result<BucketReport> {
    if traces.iter().all(|t| t.heads.is_empty()) {
        return Err(Error::degenerate("attention_buckets", "no attention traces"));
    }
    let keys = n_cm + n_m + n_s;
    let mut spans = Vec::new();
    for (region, (offset, len)) in Region::ALL.into_iter().zip([(0, n_cm), (n_cm, n_m), (n_cm + n_m, n_s)]) {
        for (index, (a, b)) in partition(len, BUCKETS_PER_REGION).into_iter().enumerate() {
            spans.push((region, index, offset + a, offset + b));
        }
    }
    let mut sum = vec![0.0f64; spans.len()];
    let mut sum_sq = vec![0.0f64; spans.len()];
    let mut samples = 0usize;
    for trace in traces {
        for w in &trace.heads {
            if w.cols() != keys {
                return Err(Error::dim(
                    "attention_buckets",
                    format!("trace with {} keys, expected {keys}", w.cols()),
                ));
            }
            for i in 0..w.rows() {
                let row = w.row(i);
                for (s, &(_, _, a, b)) in spans.iter().enumerate() {
                    if b > a {
                        let m = row[a..b].iter().sum::<f64>() / (b - a) as f64;
                        sum[s] += m;
                        sum_sq[s] += m * m;
                    }
                }
                samples += 1;
            }
        }
    }
    let n = samples as f64;
    let buckets = spans
        .iter()
        .enumerate()
        .map(|(s, &(region, index, a, b))| {
            let (mean, stderr) = if b > a && samples > 0 {
                let mean = sum[s] / n;
                let stderr = (samples > 1).then(|| {
                    let var = ((sum_sq[s] - n * mean * mean) / (n - 1.0)).max(0.0);
                    (var / n).sqrt()
                });
                (Some(mean), stderr)
            } else {
                (None, None)
            };
            Bucket {
                region,
                index,
                mean,
                stderr,
            }
        })
        .collect();
    Ok(BucketReport { buckets })
}
