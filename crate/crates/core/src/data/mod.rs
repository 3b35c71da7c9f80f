//! Corpus loading, tokenization and the deterministic batch stream.

mod synthetic;

pub use synthetic::synthetic_text;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A short public-domain text shipped for tests and smoke runs.
pub const SAMPLE_TEXT: &str = include_str!("../../assets/gettysburg.txt");

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
const MAX_VOCAB_JSON: usize = 64 << 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// One token per byte, vocabulary 256.
    #[default]
    Byte,
    /// Whitespace-separated words with a frequency-ordered vocabulary.
    Word,
}

/// Word vocabulary. Ids 0 and 1 are `<unk>` and `<eos>`; the remaining words
/// follow by descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build(text: &str) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for w in text.split_whitespace() {
            if w != UNK && w != EOS {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = [UNK, EOS]
            .into_iter()
            .chain(ranked.into_iter().map(|(w, _)| w))
            .map(String::from)
            .collect();
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Words of each line followed by `<eos>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let eos = self.id(EOS);
        let mut ids = Vec::new();
        for line in text.lines() {
            let before = ids.len();
            ids.extend(line.split_whitespace().map(|w| self.id(w)));
            if ids.len() > before {
                ids.push(eos);
            }
        }
        ids
    }

    /// `{token: id}` as JSON, keys sorted.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self.words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        serde_json::to_string_pretty(&map).expect("vocab serializes")
    }

    /// Inverse of [`Vocab::to_json`]. Ids must be a permutation of `0..len`
    /// with the two specials at 0 and 1.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        if bytes.len() > MAX_VOCAB_JSON {
            return Err(Error::Format("vocab file too large".into()));
        }
        let map: BTreeMap<String, usize> = serde_json::from_slice(bytes)?;
        let mut words = vec![None; map.len()];
        for (w, id) in map {
            let slot = words
                .get_mut(id)
                .ok_or_else(|| Error::Format(format!("vocab id {id} out of range")))?;
            if slot.is_some() {
                return Err(Error::Format(format!("vocab id {id} assigned twice")));
            }
            *slot = Some(w);
        }
        let words: Vec<String> = words.into_iter().map(|w| w.expect("ids form a permutation")).collect();
        if words.len() < 2 || words[0] != UNK || words[1] != EOS {
            return Err(Error::Format("vocab must map <unk> to 0 and <eos> to 1".into()));
        }
        Ok(Self::from_words(words))
    }
}

/// A tokenized corpus split by position into a training head and a
/// validation tail.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub ids: Vec<usize>,
    pub vocab_size: usize,
    pub kind: TokenizerKind,
    pub vocab: Option<Vocab>,
    split: usize,
}

impl Corpus {
    /// Tokenizes `bytes`; `valid_fraction` of the tokens (from the end) form
    /// the validation split.
    pub fn from_bytes(bytes: &[u8], kind: TokenizerKind, valid_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::Config(format!("valid_fraction {valid_fraction} outside [0, 1)")));
        }
        let (ids, vocab_size, vocab) = match kind {
            TokenizerKind::Byte => (bytes.iter().map(|&b| b as usize).collect::<Vec<_>>(), 256, None),
            TokenizerKind::Word => {
                let text = std::str::from_utf8(bytes).map_err(|e| Error::Data(format!("corpus is not UTF-8: {e}")))?;
                let vocab = Vocab::build(text);
                (vocab.encode(text), vocab.len(), Some(vocab))
            }
        };
        if ids.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        let split = ids.len() - (ids.len() as f64 * valid_fraction).round() as usize;
        Ok(Corpus {
            ids,
            vocab_size,
            kind,
            vocab,
            split,
        })
    }

    pub fn train(&self) -> &[usize] {
        &self.ids[..self.split]
    }

    pub fn valid(&self) -> &[usize] {
        &self.ids[self.split..]
    }
}

pub fn load_corpus(path: &Path, kind: TokenizerKind, valid_fraction: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_bytes(&bytes, kind, valid_fraction)
}

/// `batch` rows of `seq_len` inputs and their next-token targets, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

fn chunk_count(len: usize, seq_len: usize) -> usize {
    len / (seq_len + 1)
}

fn gather(ids: &[usize], starts: &[usize], seq_len: usize) -> Batch {
    let mut tokens = Vec::with_capacity(starts.len() * seq_len);
    let mut targets = Vec::with_capacity(starts.len() * seq_len);
    for &s in starts {
        tokens.extend_from_slice(&ids[s..s + seq_len]);
        targets.extend_from_slice(&ids[s + 1..s + seq_len + 1]);
    }
    Batch {
        tokens,
        targets,
        batch: starts.len(),
        seq_len,
    }
}

/// Endless stream of training batches.
///
/// Each epoch cuts the sequence into non-overlapping chunks of `seq_len + 1`
/// tokens and visits them in an order shuffled by `(seed, epoch)`; a trailing
/// partial batch is dropped.
#[derive(Clone, Debug)]
pub struct Batches<'a> {
    ids: &'a [usize],
    seq_len: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Batches<'a> {
    pub fn new(ids: &'a [usize], seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 || batch == 0 {
            return Err(Error::Config("seq_len and batch_size must be positive".into()));
        }
        if chunk_count(ids.len(), seq_len) < batch {
            return Err(Error::Data(format!(
                "{} tokens give fewer than {batch} chunks of {}",
                ids.len(),
                seq_len + 1
            )));
        }
        let mut b = Batches {
            ids,
            seq_len,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        b.order = b.epoch_order(0);
        Ok(b)
    }

    /// Chunk start offsets in the order epoch `epoch` visits them.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut starts: Vec<usize> = (0..chunk_count(self.ids.len(), self.seq_len))
            .map(|c| c * (self.seq_len + 1))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        starts.shuffle(&mut rng);
        starts
    }

    pub fn batches_per_epoch(&self) -> usize {
        chunk_count(self.ids.len(), self.seq_len) / self.batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor + self.batch > self.order.len() {
            self.epoch += 1;
            self.order = self.epoch_order(self.epoch);
            self.cursor = 0;
        }
        let starts = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        Some(gather(self.ids, starts, self.seq_len))
    }
}

/// Up to `count` unshuffled batches from the start of `ids`.
pub fn validation_batches(ids: &[usize], seq_len: usize, batch: usize, count: usize) -> Result<Vec<Batch>> {
    let chunks = chunk_count(ids.len(), seq_len);
    let full = (chunks / batch.max(1)).min(count);
    if full == 0 || batch == 0 {
        return Err(Error::Data(format!(
            "validation split of {} tokens holds no full batch of {batch}x{}",
            ids.len(),
            seq_len + 1
        )));
    }
    Ok((0..full)
        .map(|i| {
            let starts: Vec<usize> = (i * batch..(i + 1) * batch).map(|c| c * (seq_len + 1)).collect();
            gather(ids, &starts, seq_len)
        })
        .collect())
}
