//! Tokenization, vocabulary, padding, and word-embedding tables.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub const PAD: &str = "<pad>";
pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";

/// Dense 0-based token indices. The four reserved tokens occupy 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const START_ID: usize = 1;
    pub const END_ID: usize = 2;
    pub const UNK_ID: usize = 3;

    fn reserved() -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for t in [PAD, START, END, UNK] {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: &str) {
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
    }

    /// Builds a vocabulary from an ordered token list (reserved tokens first).
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        let mut v = Vocabulary::reserved();
        for (i, want) in [PAD, START, END, UNK].iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::Input(format!("vocabulary must start with {PAD} {START} {END} {UNK}")));
            }
        }
        for t in &tokens[4..] {
            if v.index.contains_key(t) {
                return Err(Error::Input(format!("duplicate vocabulary token {t}")));
            }
            v.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn words(phrase: &str) -> impl Iterator<Item = String> + '_ {
    phrase.split_whitespace().map(|w| w.to_lowercase())
}

/// Counts lowercased whitespace tokens; those seen at least `min_count` times
/// get indices ordered by descending frequency, then lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Input("build_vocab: empty corpus".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for phrase in corpus {
        for w in words(phrase.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count.max(1) && ![PAD, START, END, UNK].contains(&w.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut v = Vocabulary::reserved();
    for (w, _) in ranked {
        v.push(&w);
    }
    Ok(v)
}

/// Fixed-length id sequence: `<start> words… <end> <pad>…`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPhrase {
    pub token_ids: Vec<usize>,
    /// Count of non-pad positions, sentinels included.
    pub true_length: usize,
}

impl TokenizedPhrase {
    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }
}

/// Lowercases, splits on whitespace, keeps the first `t_max − 2` words, wraps
/// them in sentinels and pads to `t_max`. Unknown words map to `<unk>`.
pub fn tokenize(phrase: &str, vocab: &Vocabulary, t_max: usize) -> Result<TokenizedPhrase> {
    if t_max < 3 {
        return Err(Error::config(format!("T_max must be at least 3, got {t_max}")));
    }
    let mut ids = Vec::with_capacity(t_max);
    ids.push(Vocabulary::START_ID);
    ids.extend(
        words(phrase)
            .take(t_max - 2)
            .map(|w| vocab.id(&w).unwrap_or(Vocabulary::UNK_ID)),
    );
    ids.push(Vocabulary::END_ID);
    let true_length = ids.len();
    ids.resize(t_max, Vocabulary::PAD_ID);
    Ok(TokenizedPhrase { token_ids: ids, true_length })
}

/// Words between the sentinels, joined by single spaces.
pub fn detokenize(tokens: &TokenizedPhrase, vocab: &Vocabulary) -> String {
    tokens.token_ids[1..tokens.true_length.saturating_sub(1)]
        .iter()
        .filter_map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `|V|×D_w` word vectors plus which rows came from random initialization.
#[derive(Clone, Debug)]
pub struct EmbeddingTable<T> {
    pub matrix: Tensor<T>,
    pub random_rows: Vec<bool>,
}

impl<T: Real> EmbeddingTable<T> {
    /// Every row drawn from `N(0, std²)`; trainable.
    pub fn random(vocab: &Vocabulary, dim: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let data = (0..vocab.len() * dim).map(|_| T::of(normal.sample(rng))).collect();
        Ok(EmbeddingTable {
            matrix: Tensor::new(vec![vocab.len(), dim], data)?.trainable(),
            random_rows: vec![true; vocab.len()],
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn trainable(&self) -> bool {
        self.matrix.requires_grad
    }
}

/// Reads a GloVe-style text file (`token v1 … v_D` per line). Rows for tokens
/// found in the file are copied verbatim; every other row, reserved tokens
/// included, is drawn from `N(0, 0.01²)`. The loaded table is frozen.
pub fn load_embeddings<T: Real>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingTable<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_embeddings(std::io::BufReader::new(file), vocab, dim, rng)
}

pub fn read_embeddings<T: Real>(
    reader: impl BufRead,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingTable<T>> {
    let mut table = EmbeddingTable::<T>::random(vocab, dim, 0.01, rng)?;
    let data = table.matrix.data_mut();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading embeddings", e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected {dim} values for {token:?}, found {}", values.len()),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for v in values {
            let x: f64 = v.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("non-numeric value {v:?}"),
            })?;
            row.push(T::of(x));
        }
        if let Some(id) = vocab.id(token) {
            if id >= 4 {
                data[id * dim..(id + 1) * dim].copy_from_slice(&row);
                table.random_rows[id] = false;
            }
        }
    }
    table.matrix.requires_grad = false;
    Ok(table)
}

/// Looks up one row per position: output is `[T_max × D_w]`.
pub fn embed<T: Real>(tape: &mut Tape<T>, table: Var, tokens: &TokenizedPhrase) -> Result<Var> {
    tape.embedding(table, &tokens.token_ids)
}
