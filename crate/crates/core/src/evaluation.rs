//! Evaluation metrics and the contiguous evaluation pass.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::data::{word_spans, TokenKind, TokenStream};
use crate::error::{Error, Result};
use crate::memory::init_state;
use crate::model::{Model, StepRequest};
use crate::tensor::Scalar;

/// `total_nats / (n_chars · ln 2)`.
pub fn bits_per_character(total_nats: f64, n_chars: u64) -> Result<f64> {
    if n_chars == 0 {
        return Err(Error::DegenerateInput {
            op: "bits_per_character",
            detail: "no characters".into(),
        });
    }
    Ok(total_nats / (n_chars as f64 * std::f64::consts::LN_2))
}

/// `exp(total_nats / n_words)`.
pub fn word_level_perplexity(total_nats: f64, n_words: u64) -> Result<f64> {
    if n_words == 0 {
        return Err(Error::DegenerateInput {
            op: "word_level_perplexity",
            detail: "no words".into(),
        });
    }
    Ok((total_nats / n_words as f64).exp())
}

/// Training-count cut points between the frequency buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketThresholds {
    /// Counts above this are frequent.
    pub high: u64,
    pub mid: u64,
    pub low: u64,
}

impl Default for BucketThresholds {
    fn default() -> Self {
        BucketThresholds {
            high: 10_000,
            mid: 1_000,
            low: 100,
        }
    }
}

pub const BUCKET_LABELS: [&str; 4] = [">10K", "1K-10K", "100-1K", "<100"];
pub const ALL_LABEL: &str = "All";

impl BucketThresholds {
    /// Bucket index of a word seen `count` times in training: `> high`,
    /// `[mid, high]`, `[low, mid)`, `< low`.
    pub fn bucket(&self, count: u64) -> usize {
        if count > self.high {
            0
        } else if count >= self.mid {
            1
        } else if count >= self.low {
            2
        } else {
            3
        }
    }
}

/// Loss of one word of the evaluated text.
#[derive(Debug, Clone, PartialEq)]
pub struct WordLoss {
    pub surface: String,
    pub loss: f64,
}

/// Sums per-token losses into words. A word whose tokens carry no loss
/// (the unpredicted first token) is skipped.
pub fn word_losses(stream: &TokenStream, token_losses: &[Option<f64>]) -> Result<Vec<WordLoss>> {
    if token_losses.len() != stream.len() {
        return Err(Error::dim(
            "word_losses",
            format!("{} losses for {} tokens", token_losses.len(), stream.len()),
        ));
    }
    Ok(word_spans(stream)
        .into_iter()
        .filter_map(|span| {
            let losses: Vec<f64> = token_losses[span.start..span.end].iter().flatten().copied().collect();
            (!losses.is_empty()).then(|| WordLoss {
                surface: span.surface,
                loss: losses.iter().sum(),
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketRow {
    pub label: &'static str,
    /// `None` when no word fell in the bucket.
    pub ppl: Option<f64>,
    pub count: usize,
}

/// Per-bucket `exp(mean word loss)`; words absent from `freq` count as
/// unseen. The last row covers every word.
pub fn bucket_perplexity(words: &[WordLoss], freq: &HashMap<String, u64>, thresholds: BucketThresholds) -> Vec<BucketRow> {
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for w in words {
        let b = thresholds.bucket(freq.get(&w.surface).copied().unwrap_or(0));
        sums[b] += w.loss;
        counts[b] += 1;
    }
    let row = |label, sum: f64, count: usize| BucketRow {
        label,
        ppl: (count > 0).then(|| (sum / count as f64).exp()),
        count,
    };
    let mut rows: Vec<BucketRow> = (0..4).map(|b| row(BUCKET_LABELS[b], sums[b], counts[b])).collect();
    rows.push(row(ALL_LABEL, sums.iter().sum(), counts.iter().sum()));
    rows
}

pub fn bucket_csv(rows: &[BucketRow]) -> String {
    let mut out = String::from("bucket,ppl,count\n");
    for r in rows {
        let ppl = r.ppl.map_or_else(|| "nan".to_string(), |p| format!("{p:.9}"));
        let _ = writeln!(out, "{},{},{}", r.label, ppl, r.count);
    }
    out
}

/// Memory sizes used at evaluation instead of the trained ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOverrides {
    pub mem_len: Option<usize>,
    pub cmem_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    pub overrides: EvalOverrides,
    /// Full windows whose attention is recorded.
    pub trace_windows: usize,
    /// Compute the per-layer compression loss.
    pub layer_losses: bool,
    /// Stop after this many windows.
    pub max_windows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mem_len: usize,
    pub cmem_len: usize,
    /// Summed negative log-likelihood in nats over predicted tokens.
    pub total_nats: f64,
    pub n_tokens: u64,
    /// Predicted characters (character streams only).
    pub n_chars: Option<u64>,
    pub n_words: u64,
    /// Loss of each stream position; the first is never predicted.
    pub token_losses: Vec<Option<f64>>,
    /// Mean compression loss of each layer when requested and defined.
    pub layer_losses: Vec<Option<f64>>,
    /// Attention of every layer of every traced window.
    pub traces: Vec<AttentionTrace>,
}

impl EvalReport {
    pub fn loss_per_token(&self) -> f64 {
        if self.n_tokens == 0 {
            0.0
        } else {
            self.total_nats / self.n_tokens as f64
        }
    }

    pub fn bpc(&self) -> Option<f64> {
        self.n_chars.and_then(|n| bits_per_character(self.total_nats, n).ok())
    }

    pub fn word_ppl(&self) -> Option<f64> {
        word_level_perplexity(self.total_nats, self.n_words).ok()
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.9}"));
        let _ = writeln!(out, "mem_len,{}", self.mem_len);
        let _ = writeln!(out, "cmem_len,{}", self.cmem_len);
        let _ = writeln!(out, "tokens,{}", self.n_tokens);
        let _ = writeln!(out, "words,{}", self.n_words);
        let _ = writeln!(out, "total_nats,{:.9}", self.total_nats);
        let _ = writeln!(out, "loss_per_token,{:.9}", self.loss_per_token());
        let _ = writeln!(out, "bpc,{}", opt(self.bpc()));
        let _ = writeln!(out, "word_ppl,{}", opt(self.word_ppl()));
        out
    }

    pub fn layer_csv(&self) -> String {
        let mut out = String::from("layer,loss\n");
        for (i, l) in self.layer_losses.iter().enumerate() {
            let _ = writeln!(out, "{i},{}", l.map_or_else(|| "nan".to_string(), |x| format!("{x:.9}")));
        }
        out
    }
}

/// Runs `stream` through the model in consecutive non-overlapping windows
/// from zeroed memories of the evaluation sizes; the final partial window is
/// scored without updating memory.
pub fn evaluate<T: Scalar>(model: &Model<T>, stream: &TokenStream, opts: &EvalOptions) -> Result<EvalReport> {
    let cfg = model.config();
    let mem_len = opts.overrides.mem_len.unwrap_or(cfg.mem_len);
    let cmem_len = opts.overrides.cmem_len.unwrap_or(cfg.cmem_len);
    if mem_len < cfg.seq_len {
        return Err(Error::Config(format!(
            "evaluation mem_len {mem_len} is shorter than seq_len {}",
            cfg.seq_len
        )));
    }
    let mut state = init_state(cfg.layers, mem_len, cmem_len, cfg.d_model);
    let ids = &stream.ids;
    let n_s = cfg.seq_len;
    let mut token_losses = vec![None; ids.len()];
    let mut layer_sums = vec![0.0f64; cfg.layers];
    let mut layer_counts = vec![0usize; cfg.layers];
    let mut traces = Vec::new();
    let mut window = 0;
    let mut start = 0;
    while start + 1 < ids.len() && opts.max_windows.is_none_or(|m| window < m) {
        let n = n_s.min(ids.len() - 1 - start);
        let tokens = &ids[start..start + n];
        let targets: Vec<Option<usize>> = ids[start + 1..start + n + 1].iter().map(|&t| Some(t)).collect();
        let full = n == n_s;
        let out = model.step(
            tokens,
            &targets,
            &mut state,
            StepRequest {
                trace: full && window < opts.trace_windows,
                diagnostics: full && opts.layer_losses,
                commit: full,
            },
        )?;
        for (i, l) in out.token_losses.into_iter().enumerate() {
            token_losses[start + 1 + i] = l;
        }
        for (i, l) in out.aux_losses.into_iter().enumerate() {
            layer_sums[i] += l;
            layer_counts[i] += 1;
        }
        traces.extend(out.traces);
        start += n;
        window += 1;
    }
    let total_nats: f64 = token_losses.iter().flatten().sum();
    let n_tokens = token_losses.iter().flatten().count() as u64;
    let n_words = word_losses(stream, &token_losses)?.len() as u64;
    Ok(EvalReport {
        mem_len,
        cmem_len,
        total_nats,
        n_tokens,
        n_chars: (stream.kind() == TokenKind::Char).then_some(n_tokens),
        n_words,
        token_losses,
        layer_losses: layer_sums
            .iter()
            .zip(&layer_counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        traces,
    })
}
