use std::collections::HashMap;

use compressive::compression::{CompressionSpec, Objective, Variant};
use compressive::data::{frequency_table, tokenize, tokenize_with, TokenKind, TokenStream};
use compressive::evaluation::{
    bits_per_character, bucket_csv, bucket_perplexity, evaluate, word_level_perplexity, word_losses, BucketThresholds,
    EvalOptions, EvalOverrides, WordLoss,
};
use compressive::model::{Model, ModelConfig, StepRequest};
use compressive::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn bpc_examples() {
    assert!((bits_per_character(std::f64::consts::LN_2, 1).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(bits_per_character(0.0, 10).unwrap(), 0.0);
    let n = 1234;
    let uniform = n as f64 * 256f64.ln();
    assert!((bits_per_character(uniform, n).unwrap() - 8.0).abs() < 1e-12);
    assert!(matches!(bits_per_character(1.0, 0), Err(Error::DegenerateInput { .. })));
}

#[test]
fn word_perplexity_examples() {
    assert_eq!(word_level_perplexity(0.0, 5).unwrap(), 1.0);
    let n_words = 6_966_499u64;
    let ppl = word_level_perplexity(n_words as f64 * 33.6f64.ln(), n_words).unwrap();
    assert!(rel(ppl, 33.6) < 1e-9, "{ppl}");
    assert!(matches!(word_level_perplexity(1.0, 0), Err(Error::DegenerateInput { .. })));
}

#[test]
fn bpc_and_word_perplexity_agree_on_random_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..500 {
        let n_chars: u64 = rng.random_range(1..100_000);
        let n_words: u64 = rng.random_range(1..=n_chars);
        let total: f64 = (0..rng.random_range(1..50)).map(|_| rng.random_range(0.0..3.0)).sum();
        let bpc = bits_per_character(total, n_chars).unwrap();
        let ppl = word_level_perplexity(total, n_words).unwrap();
        let via_bpc = 2f64.powf(bpc * n_chars as f64 / n_words as f64);
        assert!(rel(via_bpc, ppl) < 1e-9);
    }
}

fn words(pairs: &[(&str, f64)]) -> Vec<WordLoss> {
    pairs
        .iter()
        .map(|&(s, loss)| WordLoss {
            surface: s.to_string(),
            loss,
        })
        .collect()
}

#[test]
fn single_bucket_matches_overall_perplexity() {
    let w = words(&[("a", 1.0), ("b", 2.0), ("a", 0.5)]);
    let freq = HashMap::from([("a".to_string(), 20_000), ("b".to_string(), 10_001)]);
    let rows = bucket_perplexity(&w, &freq, BucketThresholds::default());
    let overall = word_level_perplexity(3.5, 3).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].count, 3);
    assert!(rel(rows[0].ppl.unwrap(), overall) < 1e-12);
    assert!(rel(rows[4].ppl.unwrap(), overall) < 1e-12);
    assert!(rows[1..4].iter().all(|r| r.ppl.is_none() && r.count == 0));
    let csv = bucket_csv(&rows);
    assert!(csv.starts_with("bucket,ppl,count\n>10K,"));
    assert!(csv.contains("\n<100,nan,0\n"));
}

#[test]
fn bucket_boundaries() {
    let t = BucketThresholds::default();
    let got: Vec<usize> = [0, 99, 100, 999, 1_000, 10_000, 10_001].iter().map(|&c| t.bucket(c)).collect();
    assert_eq!(got, vec![3, 3, 2, 2, 1, 1, 0]);
}

#[test]
fn buckets_match_grouping_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let freq: HashMap<String, u64> = vocab
        .iter()
        .take(35)
        .map(|w| (w.clone(), 10u64.pow(rng.random_range(0..6)) + rng.random_range(0..5)))
        .collect();
    let list: Vec<WordLoss> = (0..2_000)
        .map(|_| WordLoss {
            surface: vocab[rng.random_range(0..40)].clone(),
            loss: rng.random_range(0.0..6.0),
        })
        .collect();
    let rows = bucket_perplexity(&list, &freq, BucketThresholds::default());
    let bucket_of = |c: u64| match c {
        c if c > 10_000 => ">10K",
        c if c >= 1_000 => "1K-10K",
        c if c >= 100 => "100-1K",
        _ => "<100",
    };
    let mut groups: HashMap<&str, Vec<f64>> = HashMap::new();
    for w in &list {
        groups.entry(bucket_of(*freq.get(&w.surface).unwrap_or(&0))).or_default().push(w.loss);
    }
    for r in &rows[..4] {
        match groups.get(r.label) {
            Some(l) => {
                assert_eq!(r.count, l.len());
                let ppl = (l.iter().sum::<f64>() / l.len() as f64).exp();
                assert!(rel(r.ppl.unwrap(), ppl) < 1e-12);
            }
            None => assert!(r.ppl.is_none()),
        }
    }
    assert_eq!(rows[..4].iter().map(|r| r.count).sum::<usize>(), rows[4].count);
    assert_eq!(rows[4].count, list.len());
}

fn config(vocab: usize, mask: bool) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        seq_len: 4,
        mem_len: 4,
        cmem_len: 2,
        vocab_size: vocab,
        mlp_hidden: 16,
        dropout: 0.0,
        mask_empty_memory: mask,
        init_std: 0.5,
        compression: CompressionSpec {
            variant: Variant::Conv,
            rate: 2,
            objective: Objective::AttentionReconstruction,
        },
    }
}

fn word_corpus() -> (TokenStream, TokenStream) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", ".", ","];
    let text = |n: usize, rng: &mut ChaCha8Rng| {
        // skewed toward the front of the pool so the buckets differ
        (0..n)
            .map(|_| {
                let k = rng.random_range(1..=pool.len());
                pool[rng.random_range(0..k)]
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let train = tokenize(text(3_000, &mut rng).as_bytes(), TokenKind::Word).unwrap();
    let test = tokenize_with(text(101, &mut rng).as_bytes(), &train.vocab).unwrap();
    (train, test)
}

#[test]
fn uniform_model_has_vocabulary_perplexity_in_every_bucket() {
    let (train, test) = word_corpus();
    let v = train.vocab.len();
    let mut model = Model::<f64>::new(config(v, false), 0).unwrap();
    let e = model.params().find("embedding").unwrap();
    model.params_mut().get_mut(e).value.fill(0.0);
    let report = evaluate(&model, &test, &EvalOptions::default()).unwrap();
    let freq = frequency_table(&train);
    let thresholds = BucketThresholds {
        high: 1_000,
        mid: 400,
        low: 200,
    };
    let rows = bucket_perplexity(&word_losses(&test, &report.token_losses).unwrap(), &freq, thresholds);
    assert!(rows.iter().filter(|r| r.count > 0).count() >= 3);
    for r in rows.iter().filter(|r| r.count > 0) {
        assert!(rel(r.ppl.unwrap(), v as f64) < 1e-9, "{} {:?}", r.label, r.ppl);
    }
    assert_eq!(rows[4].count as u64, report.n_words);
    assert!(rel(report.word_ppl().unwrap(), v as f64) < 1e-9);
    assert_eq!(report.bpc(), None);
}

fn char_stream(len: usize, seed: u64) -> TokenStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text: String = (0..len).map(|_| if rng.random_bool(0.2) { ' ' } else { rng.random_range('a'..='g') }).collect();
    tokenize(text.as_bytes(), TokenKind::Char).unwrap()
}

fn char_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        ..config(256, false)
    }
}

#[test]
fn evaluation_at_training_sizes_matches_a_plain_forward_pass() {
    let stream = char_stream(43, 3);
    let model = Model::<f64>::new(char_config(), 4).unwrap();
    let before = model.clone();
    let report = evaluate(&model, &stream, &EvalOptions { layer_losses: true, ..Default::default() }).unwrap();
    assert_eq!(model, before);

    let mut state = model.init_state();
    let mut total = 0.0;
    let ids = &stream.ids;
    let mut start = 0;
    while start + 1 < ids.len() {
        let n = 4.min(ids.len() - 1 - start);
        let targets: Vec<Option<usize>> = ids[start + 1..start + 1 + n].iter().map(|&t| Some(t)).collect();
        let out = model
            .step(&ids[start..start + n], &targets, &mut state, StepRequest { commit: n == 4, ..Default::default() })
            .unwrap();
        total += out.token_losses.iter().flatten().sum::<f64>();
        start += n;
    }
    assert_eq!(report.n_tokens, 42);
    assert!((report.total_nats - total).abs() < 1e-12 * total);
    assert_eq!(report.n_chars, Some(42));
    assert_eq!(report.layer_losses.len(), 2);
    assert!(report.layer_losses.iter().all(|l| l.is_some_and(|l| l >= 0.0)));
    let bpc = report.bpc().unwrap();
    assert!(rel(bpc, total / (42.0 * std::f64::consts::LN_2)) < 1e-12);
    let csv = report.metrics_csv();
    assert!(csv.starts_with("metric,value\n"));
    assert_eq!(report.layer_csv().lines().count(), 3);
}

#[test]
fn larger_compressed_memory_is_invisible_before_eviction() {
    let stream = char_stream(9, 5);
    let model = Model::<f64>::new(ModelConfig { mask_empty_memory: true, ..char_config() }, 6).unwrap();
    let base = evaluate(&model, &stream, &EvalOptions::default()).unwrap();
    for cmem in [3, 8, 30] {
        for mem in [4, 8] {
            let opts = EvalOptions {
                overrides: EvalOverrides {
                    mem_len: Some(mem),
                    cmem_len: Some(cmem),
                },
                ..Default::default()
            };
            let r = evaluate(&model, &stream, &opts).unwrap();
            assert_eq!((r.mem_len, r.cmem_len), (mem, cmem));
            for (a, b) in r.token_losses.iter().zip(&base.token_losses) {
                match (a, b) {
                    (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}"),
                    _ => assert_eq!(a, b),
                }
            }
        }
    }
    // without masking, the zero slots draw attention and change the output
    let unmasked = Model::<f64>::new(char_config(), 6).unwrap();
    let a = evaluate(&unmasked, &stream, &EvalOptions::default()).unwrap();
    let opts = EvalOptions {
        overrides: EvalOverrides {
            mem_len: None,
            cmem_len: Some(8),
        },
        ..Default::default()
    };
    let b = evaluate(&unmasked, &stream, &opts).unwrap();
    assert_ne!(a.total_nats, b.total_nats);
}

#[test]
fn evaluation_memory_must_hold_a_window() {
    let model = Model::<f64>::new(char_config(), 0).unwrap();
    let opts = EvalOptions {
        overrides: EvalOverrides {
            mem_len: Some(3),
            cmem_len: None,
        },
        ..Default::default()
    };
    assert!(matches!(evaluate(&model, &char_stream(20, 0), &opts), Err(Error::Config(_))));
}

#[test]
fn traces_cover_requested_windows() {
    let model = Model::<f64>::new(char_config(), 7).unwrap();
    let report = evaluate(&model, &char_stream(30, 8), &EvalOptions { trace_windows: 3, ..Default::default() }).unwrap();
    assert_eq!(report.traces.len(), 3 * 2);
    assert!(report.traces.iter().all(|t| t.heads.len() == 2 && t.heads[0].shape() == [4, 10]));
}

#[test]
fn char_word_alignment_sums_token_losses() {
    let stream = tokenize(b"ab c", TokenKind::Char).unwrap();
    let losses = [None, Some(1.0), Some(2.0), Some(4.0)];
    let w = word_losses(&stream, &losses).unwrap();
    assert_eq!(w, words(&[("ab", 1.0), ("c", 6.0)]));
    assert!(matches!(word_losses(&stream, &losses[..2]), Err(Error::Dimension { .. })));
}
