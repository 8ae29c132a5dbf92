//! The work behind each subcommand, kept out of `main` so tests can call it.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use compressive::attention::{attention_buckets, BucketReport};
use compressive::checkpoint::{model_from_checkpoint, read_echo, restore_trainer, trainer_checkpoint, Block, Checkpoint};
use compressive::data::{
    contiguous_batches, frequency_table, tokenize, tokenize_with, TokenStream, Vocabulary, WordVocab,
};
use compressive::evaluation::{
    bucket_csv, bucket_perplexity, evaluate, word_losses, BucketRow, BucketThresholds, EvalOptions, EvalOverrides,
    EvalReport,
};
use compressive::memory::{init_state, RangeReport};
use compressive::model::{Model, StepRequest};
use compressive::sampling::{nucleus_candidates, sample_nucleus, softmax};
use compressive::training::{metrics_row, Trainer, METRICS_HEADER};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{resolve_out, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VALID_FILE: &str = "valid_metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const SWEEP_FILE: &str = "eval.csv";
pub const WORD_BUCKET_FILE: &str = "word_buckets.csv";
pub const ATTENTION_FILE: &str = "attention_buckets.csv";
pub const LAYER_FILE: &str = "compression_loss.csv";
pub const RANGE_FILE: &str = "range.csv";

const RUN_CONFIG_BLOCK: &str = "run_config";
const TOKEN_KIND_BLOCK: &str = "token_kind";
const WORDS_BLOCK: &str = "words";

fn read_corpus(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Adds the run configuration and vocabulary so the file stands alone.
fn full_checkpoint(trainer: &Trainer<f32>, cfg_text: &str, vocab: &Vocabulary) -> Result<Checkpoint> {
    let mut c = trainer_checkpoint(trainer)?;
    c.push(RUN_CONFIG_BLOCK, Block::Text(cfg_text.to_string()));
    match vocab {
        Vocabulary::Bytes => c.push(TOKEN_KIND_BLOCK, Block::Text("char".into())),
        Vocabulary::Words(w) => {
            c.push(TOKEN_KIND_BLOCK, Block::Text("word".into()));
            c.push(WORDS_BLOCK, Block::Text(w.words().join("\n")));
        }
    }
    Ok(c)
}

/// Writes next to the target and renames, so a crash never leaves half a file.
fn save_atomically(c: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    c.save(&tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("moving checkpoint into {}", path.display()))
}

pub fn checkpoint_vocab(c: &Checkpoint) -> Result<Arc<Vocabulary>> {
    Ok(Arc::new(match c.text(TOKEN_KIND_BLOCK)? {
        "char" => Vocabulary::Bytes,
        "word" => {
            let words = c.text(WORDS_BLOCK)?.split('\n').map(str::to_string).collect();
            Vocabulary::Words(WordVocab::from_words(words)?)
        }
        other => bail!("checkpoint names an unknown token kind {other:?}"),
    }))
}

/// The run configuration a checkpoint was trained with.
pub fn checkpoint_config(c: &Checkpoint) -> Result<RunConfig> {
    toml::from_str(c.text(RUN_CONFIG_BLOCK)?).context("checkpoint carries an unreadable run configuration")
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Reloads a checkpoint into a trainer and serializes it again.
pub fn reserialize(c: &Checkpoint) -> Result<Checkpoint> {
    let trainer: Trainer<f32> = restore_trainer(c)?;
    full_checkpoint(&trainer, c.text(RUN_CONFIG_BLOCK)?, &*checkpoint_vocab(c)?)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub step: u64,
    pub checkpoint: PathBuf,
    pub valid: EvalReport,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.check_paths()?;
    let train = tokenize(&read_corpus(&cfg.data.train)?, cfg.data.kind)?;
    let valid = tokenize_with(&read_corpus(&cfg.data.valid)?, &train.vocab)?;
    ensure!(
        cfg.model.vocab_size >= train.vocab.len(),
        "model.vocab_size {} is smaller than the {} token vocabulary of data.train",
        cfg.model.vocab_size,
        train.vocab.len()
    );
    let batches = contiguous_batches(&train.ids, cfg.run.batch, cfg.model.seq_len)
        .context("data.train is too short for one batch")?;
    let out_dir = resolve_out(args.out.as_deref(), cfg.out_dir.as_deref(), "runs/train");
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let cfg_text = cfg.to_toml()?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let c = load_checkpoint(path)?;
            let echo = read_echo(&c)?;
            ensure!(
                echo.model == cfg.model && echo.schedule == cfg.schedule && echo.seed == cfg.seed && echo.rows == cfg.run.batch,
                "checkpoint {} was trained with a different model, schedule, seed or batch",
                path.display()
            );
            ensure!(
                checkpoint_vocab(&c)? == train.vocab,
                "checkpoint vocabulary differs from the one built from data.train"
            );
            let t: Trainer<f32> = restore_trainer(&c)?;
            info!("resuming at step {}", t.step);
            t
        }
        None => {
            let model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
            let mut t = Trainer::new(model, cfg.schedule, cfg.run.batch, cfg.seed)?;
            t.train_compression = cfg.run.train_compression;
            t
        }
    };
    write_file(&out_dir.join(CONFIG_ECHO_FILE), &cfg_text)?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let append = args.resume.is_some() && metrics_path.is_file();
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    if !append {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }

    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut since = Instant::now();
    while trainer.step < cfg.run.steps {
        let windows = trainer.windows_for(&batches, trainer.step);
        let applied = match trainer.train_step(&windows) {
            Ok(m) => m,
            Err(e) => {
                let diag = out_dir.join(DIAGNOSTIC_FILE);
                match full_checkpoint(&trainer, &cfg_text, &train.vocab).and_then(|c| save_atomically(&c, &diag)) {
                    Ok(()) => warn!("diagnostic checkpoint written to {}", diag.display()),
                    Err(save) => warn!("could not write a diagnostic checkpoint: {save:#}"),
                }
                return Err(e).context(format!("training stopped; diagnostics in {}", diag.display()));
            }
        };
        if let Some(m) = applied {
            let secs = since.elapsed().as_secs_f64();
            let tps = if secs > 0.0 { m.tokens as f64 / secs } else { 0.0 };
            writeln!(metrics, "{}", metrics_row(&m, tps))?;
            if cfg.run.log_every > 0 && m.step / cfg.run.log_every != (m.step + 1) / cfg.run.log_every {
                info!(
                    "step {} lr {:.3e} loss {:.4} aux {:.4} grad {:.3e} {tps:.0} tok/s",
                    m.step + 1,
                    m.lr,
                    m.task_loss_nats,
                    m.aux_loss,
                    m.grad_norm
                );
            }
            since = Instant::now();
            let updates = trainer.transformer_opt.updates;
            if cfg.run.checkpoint_every > 0 && updates % cfg.run.checkpoint_every == 0 {
                save_atomically(&full_checkpoint(&trainer, &cfg_text, &train.vocab)?, &ckpt_path)?;
            }
        }
    }
    metrics.flush()?;
    save_atomically(&full_checkpoint(&trainer, &cfg_text, &train.vocab)?, &ckpt_path)?;

    let valid_report = evaluate(
        &trainer.model,
        &valid,
        &EvalOptions {
            max_windows: cfg.run.eval_windows,
            ..Default::default()
        },
    )?;
    write_file(&out_dir.join(VALID_FILE), &valid_report.metrics_csv())?;
    info!(
        "step {} validation loss {:.6} nats/token",
        trainer.step,
        valid_report.loss_per_token()
    );
    Ok(TrainOutcome {
        out_dir,
        step: trainer.step,
        checkpoint: ckpt_path,
        valid: valid_report,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    /// Plain memory sizes to sweep; the trained size when empty.
    pub n_m_eval: Vec<usize>,
    /// Compressed memory sizes to sweep; the trained size when empty.
    pub n_cm_eval: Vec<usize>,
    pub max_windows: Option<usize>,
    /// Training corpus for word-frequency buckets.
    pub frequency_corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub const SWEEP_HEADER: &str = "mem_len,cmem_len,tokens,total_nats,loss_per_token,bpc,word_ppl";

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.9}"))
}

pub fn sweep_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{:.9},{:.9},{},{}",
        r.mem_len,
        r.cmem_len,
        r.n_tokens,
        r.total_nats,
        r.loss_per_token(),
        opt_cell(r.bpc()),
        opt_cell(r.word_ppl())
    )
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub reports: Vec<EvalReport>,
    pub buckets: Option<Vec<BucketRow>>,
    pub out_dir: PathBuf,
}

fn corpus_stream(c: &Checkpoint, path: &Path) -> Result<TokenStream> {
    Ok(tokenize_with(&read_corpus(path)?, &checkpoint_vocab(c)?)?)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let c = load_checkpoint(&args.checkpoint)?;
    let model: Model<f32> = model_from_checkpoint(&c)?;
    let stream = corpus_stream(&c, &args.corpus)?;
    let sizes = |v: &[usize]| -> Vec<Option<usize>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().copied().map(Some).collect()
        }
    };
    let mut reports = Vec::new();
    for mem_len in sizes(&args.n_m_eval) {
        for cmem_len in sizes(&args.n_cm_eval) {
            let opts = EvalOptions {
                overrides: EvalOverrides { mem_len, cmem_len },
                max_windows: args.max_windows,
                ..Default::default()
            };
            let report = evaluate(&model, &stream, &opts)?;
            info!("{}", sweep_row(&report));
            reports.push(report);
        }
    }
    let buckets = match &args.frequency_corpus {
        Some(path) => {
            let train = corpus_stream(&c, path)?;
            let freq = frequency_table(&train);
            let words = word_losses(&stream, &reports[0].token_losses)?;
            Some(bucket_perplexity(&words, &freq, BucketThresholds::default()))
        }
        None => None,
    };
    let out_dir = resolve_out(args.out.as_deref(), None, "runs/eval");
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut table = format!("{SWEEP_HEADER}\n");
    for r in &reports {
        let _ = writeln!(table, "{}", sweep_row(r));
    }
    write_file(&out_dir.join(SWEEP_FILE), &table)?;
    if let Some(rows) = &buckets {
        write_file(&out_dir.join(WORD_BUCKET_FILE), &bucket_csv(rows))?;
    }
    Ok(EvalOutcome {
        reports,
        buckets,
        out_dir,
    })
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    /// Full windows traced and scored.
    pub windows: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct AnalyzeOutcome {
    pub buckets: BucketReport,
    pub report: EvalReport,
    pub out_dir: PathBuf,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalyzeOutcome> {
    ensure!(args.windows > 0, "--windows must be positive");
    let c = load_checkpoint(&args.checkpoint)?;
    let model: Model<f32> = model_from_checkpoint(&c)?;
    let stream = corpus_stream(&c, &args.corpus)?;
    let report = evaluate(
        &model,
        &stream,
        &EvalOptions {
            trace_windows: args.windows,
            layer_losses: true,
            max_windows: Some(args.windows),
            ..Default::default()
        },
    )?;
    ensure!(
        !report.traces.is_empty(),
        "{} is shorter than one full window",
        args.corpus.display()
    );
    let cfg = model.config();
    let buckets = attention_buckets(&report.traces, cfg.cmem_len, cfg.mem_len, cfg.seq_len)?;
    let out_dir = resolve_out(args.out.as_deref(), None, "runs/analyze");
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_file(&out_dir.join(ATTENTION_FILE), &buckets.to_csv())?;
    write_file(&out_dir.join(LAYER_FILE), &report.layer_csv())?;
    Ok(AnalyzeOutcome {
        buckets,
        report,
        out_dir,
    })
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub prefix: String,
    pub length: usize,
    pub p: f64,
    pub seed: u64,
}

fn last_row(logits: &compressive::Tensor<f32>) -> Vec<f64> {
    logits.row(logits.rows() - 1).iter().map(|&v| v as f64).collect()
}

fn decode(vocab: &Vocabulary, ids: &[usize]) -> String {
    match vocab {
        Vocabulary::Bytes => {
            let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        Vocabulary::Words(w) => ids
            .iter()
            .map(|&i| w.word(i).unwrap_or(compressive::data::UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

/// Feeds `prefix` through the model, then draws `length` tokens from the
/// nucleus of each next-token distribution. Returns only the continuation.
pub fn cmd_sample(args: &SampleArgs) -> Result<String> {
    // rejects p outside (0, 1] before any work
    nucleus_candidates(&[1.0], args.p)?;
    let c = load_checkpoint(&args.checkpoint)?;
    let model: Model<f32> = model_from_checkpoint(&c)?;
    let vocab = checkpoint_vocab(&c)?;
    let prefix = tokenize_with(args.prefix.as_bytes(), &vocab)?;
    ensure!(!prefix.is_empty(), "the prefix must contain at least one token");
    let cfg = model.config();
    let n_s = cfg.seq_len;
    let mut state = init_state(cfg.layers, cfg.mem_len, cfg.cmem_len, cfg.d_model);
    let mut pending: Vec<usize> = Vec::with_capacity(n_s);
    let advance = |pending: &mut Vec<usize>, state: &mut _| -> Result<Vec<f64>> {
        let full = pending.len() == n_s;
        let out = model.step(
            pending,
            &vec![None; pending.len()],
            state,
            StepRequest {
                commit: full,
                ..Default::default()
            },
        )?;
        if full {
            pending.clear();
        }
        Ok(last_row(&out.logits))
    };
    let mut logits = Vec::new();
    for (i, &t) in prefix.ids.iter().enumerate() {
        pending.push(t);
        if pending.len() == n_s || i + 1 == prefix.len() {
            logits = advance(&mut pending, &mut state)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut generated = Vec::with_capacity(args.length);
    for _ in 0..args.length {
        let next = sample_nucleus(&softmax(&logits), args.p, &mut rng)?;
        generated.push(next);
        pending.push(next);
        logits = advance(&mut pending, &mut state)?;
    }
    Ok(decode(&vocab, &generated))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeArgs {
    pub layers: u64,
    pub mem_len: u64,
    pub cmem_len: u64,
    pub rate: u64,
    pub seq_len: u64,
}

pub fn range_table(report: &RangeReport) -> String {
    format!(
        "{}\nrange_ratio,cost_ratio\n{},{}\n",
        report.to_csv().trim_end(),
        report.range_ratio,
        report.cost_ratio
    )
}

pub fn cmd_range(args: &RangeArgs, out: Option<&Path>) -> Result<RangeReport> {
    let report = RangeReport::new(args.layers, args.seq_len, args.mem_len, args.cmem_len, args.rate);
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(&dir.join(RANGE_FILE), &range_table(&report))?;
    }
    Ok(report)
}

/// Which exit status an error deserves: 2 for faults raised while computing,
/// 1 for everything the user can fix.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use compressive::Error as E;
    let fault = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<E>(),
            Some(E::TrainingFault { .. } | E::NonFinite(_) | E::Contract(_))
        )
    });
    if fault {
        2
    } else {
        1
    }
}
