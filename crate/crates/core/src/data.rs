//! Corpus tokenization, training-set word frequencies, contiguous batching
//! and the synthetic long-range recall task.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Char,
    Word,
}

/// Id reserved for words missing from the training vocabulary.
pub const UNK: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Number of ids in the character vocabulary: one per byte value.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vocabulary {
    Bytes,
    Words(WordVocab),
}

impl Vocabulary {
    pub fn kind(&self) -> TokenKind {
        match self {
            Vocabulary::Bytes => TokenKind::Char,
            Vocabulary::Words(_) => TokenKind::Word,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Vocabulary::Bytes => BYTE_VOCAB,
            Vocabulary::Words(w) => w.words.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Closed word vocabulary: `<unk>` first, then training words by
/// descending count (ties in byte order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Data(format!("word vocabulary must start with {UNK_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(WordVocab { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
    pub vocab: Arc<Vocabulary>,
}

impl TokenStream {
    pub fn kind(&self) -> TokenKind {
        self.vocab.kind()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Surface text of token `i`.
    pub fn surface(&self, i: usize) -> String {
        match &*self.vocab {
            Vocabulary::Bytes => String::from_utf8_lossy(&[self.ids[i] as u8]).into_owned(),
            Vocabulary::Words(w) => w.word(self.ids[i]).unwrap_or(UNK_TOKEN).to_string(),
        }
    }
}

/// Splits on whitespace and cuts every punctuation character out as a token
/// of its own.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if is_punct(c) {
                if i > start {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace())
}

fn utf8(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| Error::Data(format!("invalid UTF-8 at byte {}", e.valid_up_to())))
}

/// Tokenizes a training split, building its vocabulary from the text.
pub fn tokenize(bytes: &[u8], kind: TokenKind) -> Result<TokenStream> {
    let text = utf8(bytes)?;
    match kind {
        TokenKind::Char => Ok(TokenStream {
            ids: bytes.iter().map(|&b| b as usize).collect(),
            vocab: Arc::new(Vocabulary::Bytes),
        }),
        TokenKind::Word => {
            let words = split_words(text);
            let mut counts: HashMap<&str, u64> = HashMap::new();
            for &w in &words {
                *counts.entry(w).or_default() += 1;
            }
            let mut ranked: Vec<(&str, u64)> = counts.into_iter().filter(|(w, _)| *w != UNK_TOKEN).collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            let list = std::iter::once(UNK_TOKEN.to_string())
                .chain(ranked.into_iter().map(|(w, _)| w.to_string()))
                .collect();
            let vocab = WordVocab::from_words(list)?;
            Ok(TokenStream {
                ids: words.iter().map(|w| vocab.id(w)).collect(),
                vocab: Arc::new(Vocabulary::Words(vocab)),
            })
        }
    }
}

/// Tokenizes held-out text with a training vocabulary; unknown words map to
/// [`UNK`].
pub fn tokenize_with(bytes: &[u8], vocab: &Arc<Vocabulary>) -> Result<TokenStream> {
    let text = utf8(bytes)?;
    let ids = match &**vocab {
        Vocabulary::Bytes => bytes.iter().map(|&b| b as usize).collect(),
        Vocabulary::Words(w) => split_words(text).into_iter().map(|t| w.id(t)).collect(),
    };
    Ok(TokenStream {
        ids,
        vocab: Arc::clone(vocab),
    })
}

/// Inverse of character tokenization.
pub fn detokenize_chars(ids: &[usize]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&i| u8::try_from(i).map_err(|_| Error::Data(format!("id {i} is not a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("invalid UTF-8: {e}")))
}

/// A word of the evaluated text as a token range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

/// Groups tokens into words. Word tokens are words by themselves; character
/// tokens form words from maximal non-whitespace runs, with each whitespace
/// run attached to the word that follows it (trailing whitespace goes to
/// the last word). Every token lands in exactly one span when the stream
/// contains a word.
pub fn word_spans(stream: &TokenStream) -> Vec<WordSpan> {
    match &*stream.vocab {
        Vocabulary::Words(_) => (0..stream.len())
            .map(|i| WordSpan {
                start: i,
                end: i + 1,
                surface: stream.surface(i),
            })
            .collect(),
        Vocabulary::Bytes => {
            let is_space = |id: usize| u8::try_from(id).is_ok_and(|b| b.is_ascii_whitespace());
            let ids = &stream.ids;
            let mut spans: Vec<WordSpan> = Vec::new();
            let mut start = 0;
            let mut i = 0;
            while i < ids.len() {
                while i < ids.len() && is_space(ids[i]) {
                    i += 1;
                }
                if i == ids.len() {
                    break;
                }
                let word_start = i;
                while i < ids.len() && !is_space(ids[i]) {
                    i += 1;
                }
                let bytes: Vec<u8> = ids[word_start..i].iter().map(|&b| b as u8).collect();
                spans.push(WordSpan {
                    start,
                    end: i,
                    surface: String::from_utf8_lossy(&bytes).into_owned(),
                });
                start = i;
            }
            if let Some(last) = spans.last_mut() {
                last.end = ids.len();
            }
            spans
        }
    }
}

/// Word counts over a training stream.
pub fn frequency_table(train: &TokenStream) -> HashMap<String, u64> {
    let mut table = HashMap::new();
    for span in word_spans(train) {
        *table.entry(span.surface).or_default() += 1;
    }
    table
}

/// One step of `rows` parallel windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Contiguous windows over `rows` equal shards of a stream; window `i` of a
/// row starts `i·n_s` tokens into its shard.
#[derive(Debug, Clone)]
pub struct Batches {
    ids: Arc<[usize]>,
    rows: usize,
    seq_len: usize,
    shard_len: usize,
    count: usize,
}

impl Batches {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn shard_len(&self) -> usize {
        self.shard_len
    }

    /// Offset of the first token of shard `row`.
    pub fn shard_start(&self, row: usize) -> usize {
        row * self.shard_len
    }

    pub fn get(&self, index: usize) -> Batch {
        assert!(index < self.count, "batch {index} of {}", self.count);
        let mut batch = Batch {
            inputs: Vec::with_capacity(self.rows),
            targets: Vec::with_capacity(self.rows),
        };
        for row in 0..self.rows {
            let at = self.shard_start(row) + index * self.seq_len;
            batch.inputs.push(self.ids[at..at + self.seq_len].to_vec());
            batch.targets.push(self.ids[at + 1..at + self.seq_len + 1].to_vec());
        }
        batch
    }

    pub fn iter(&self) -> impl Iterator<Item = Batch> + '_ {
        (0..self.count).map(|i| self.get(i))
    }
}

/// Splits `ids` into `rows` contiguous shards and cuts each into windows of
/// `seq_len` inputs with next-token targets; a final partial window is
/// dropped.
pub fn contiguous_batches(ids: &[usize], rows: usize, seq_len: usize) -> Result<Batches> {
    if rows == 0 || seq_len == 0 {
        return Err(Error::Config("batch rows and window length must be positive".into()));
    }
    if ids.len() < rows * (seq_len + 1) {
        return Err(Error::DegenerateInput {
            op: "contiguous_batches",
            detail: format!(
                "{} tokens cannot fill {rows} rows of {} tokens",
                ids.len(),
                seq_len + 1
            ),
        });
    }
    let shard_len = ids.len() / rows;
    Ok(Batches {
        ids: ids.into(),
        rows,
        seq_len,
        shard_len,
        count: (shard_len - 1) / seq_len,
    })
}

/// Layout of the recall task. Token 0 is the cue, tokens `1..=payloads` are
/// payloads and the rest of the vocabulary are fillers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub payloads: usize,
    /// Filler tokens between the payload and the repeated cue.
    pub distance: usize,
    pub seq_len: usize,
    /// Position of the first cue.
    pub pair_position: usize,
    pub episodes: usize,
    pub seed: u64,
}

pub const CUE: usize = 0;

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.payloads == 0 || self.vocab_size < self.payloads + 2 {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold a cue, {} payloads and a filler",
                self.vocab_size, self.payloads
            )));
        }
        if self.query_position() >= self.seq_len {
            return Err(Error::Config(format!(
                "query at {} does not fit an episode of {}",
                self.query_position(),
                self.seq_len
            )));
        }
        Ok(())
    }

    /// Position of the repeated cue; the model must emit the payload there.
    pub fn query_position(&self) -> usize {
        self.pair_position + 2 + self.distance
    }

    pub fn chance(&self) -> f64 {
        1.0 / self.payloads as f64
    }
}

/// Whether a gap of `distance` tokens lies beyond the plain memory but
/// within reach of the compressed memory.
pub fn recall_reachable(distance: usize, mem_len: usize, cmem_len: usize, rate: usize) -> bool {
    mem_len < distance && distance <= mem_len + rate * cmem_len
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub tokens: Vec<usize>,
    pub payload: usize,
    pub query: usize,
}

impl Episode {
    /// Next-token targets with only the query position supervised.
    pub fn query_targets(&self) -> Vec<Option<usize>> {
        let mut t = vec![None; self.tokens.len()];
        t[self.query] = Some(self.payload);
        t
    }
}

/// Generates episodes: random fillers, the cue and a random payload at
/// `pair_position`, `distance` fillers, then the cue again followed by the
/// payload.
pub fn synthetic_recall(spec: &SyntheticTaskSpec) -> Result<Vec<Episode>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fillers = spec.payloads + 1..spec.vocab_size;
    let query = spec.query_position();
    Ok((0..spec.episodes)
        .map(|_| {
            let mut tokens: Vec<usize> = (0..spec.seq_len).map(|_| rng.random_range(fillers.clone())).collect();
            let payload = rng.random_range(1..=spec.payloads);
            tokens[spec.pair_position] = CUE;
            tokens[spec.pair_position + 1] = payload;
            tokens[query] = CUE;
            if query + 1 < spec.seq_len {
                tokens[query + 1] = payload;
            }
            Episode { tokens, payload, query }
        })
        .collect())
}
