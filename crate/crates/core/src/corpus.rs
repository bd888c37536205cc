//! Corpus loading, vocabulary construction, monolingual splitting,
//! bucketed batching and the synthetic cipher language pair.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Lang, TokenSequence, Vocabulary, RESERVED};

/// Whitespace-normalised sentences of one language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCorpus {
    pub lang: Lang,
    pub sentences: Vec<String>,
}

pub fn normalize(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokenize(sentence: &str) -> Vec<&str> {
    sentence.split_whitespace().collect()
}

pub fn detokenize(tokens: &[&str]) -> String {
    tokens.join(" ")
}

/// Split raw bytes into normalised non-empty lines, accepting LF or CRLF.
fn lines(bytes: &[u8], origin: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let text = std::str::from_utf8(raw)
            .map_err(|e| Error::Input(format!("{}:{}: invalid UTF-8 ({e})", origin.display(), i + 1)))?;
        let norm = normalize(text);
        if !norm.is_empty() {
            out.push(norm);
        }
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, lang: Lang) -> Result<RawCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(RawCorpus { lang, sentences: lines(&bytes, path)? })
}

/// Read `source<TAB>reference` lines.
pub fn load_parallel(path: &Path) -> Result<Vec<(String, String)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let text = std::str::from_utf8(raw)
            .map_err(|e| Error::Input(format!("{}:{}: invalid UTF-8 ({e})", path.display(), i + 1)))?;
        if text.trim().is_empty() {
            continue;
        }
        let (src, tgt) = text
            .split_once('\t')
            .ok_or_else(|| Error::Input(format!("{}:{}: expected source<TAB>reference", path.display(), i + 1)))?;
        pairs.push((normalize(src), normalize(tgt)));
    }
    Ok(pairs)
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_parallel(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let lines: Vec<String> = pairs.iter().map(|(a, b)| format!("{a}\t{b}")).collect();
    write_lines(path, &lines)
}

/// Frequency-ranked vocabulary over all corpora; ties broken
/// lexicographically. `max_size` counts the reserved entries.
pub fn build_vocab(corpora: &[&RawCorpus], max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    if max_size < RESERVED.len() {
        return Err(Error::Config(format!(
            "vocabulary max_size {max_size} is smaller than the {} reserved entries",
            RESERVED.len()
        )));
    }
    if corpora.iter().all(|c| c.sentences.is_empty()) {
        return Err(Error::Usage("cannot build a vocabulary from empty corpora".into()));
    }
    let mut counts: HashMap<&str, (usize, u8)> = HashMap::new();
    for c in corpora {
        let bit = 1u8 << c.lang.index();
        for s in &c.sentences {
            for t in s.split_whitespace() {
                let e = counts.entry(t).or_insert((0, 0));
                e.0 += 1;
                e.1 |= bit;
            }
        }
    }
    let mut ranked: Vec<(&str, usize, u8)> = counts
        .into_iter()
        .filter(|&(t, (n, _))| n >= min_freq && !RESERVED.contains(&t))
        .map(|(t, (n, m))| (t, n, m))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _, m)| (t.to_string(), m)).collect())
}

/// Result of dividing a parallel corpus into two non-overlapping monolingual halves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonolingualSplit {
    pub l1_indices: Vec<usize>,
    pub l2_indices: Vec<usize>,
}

impl MonolingualSplit {
    pub fn corpora(&self, pairs: &[(String, String)]) -> (RawCorpus, RawCorpus) {
        (
            RawCorpus { lang: Lang::L1, sentences: self.l1_indices.iter().map(|&i| pairs[i].0.clone()).collect() },
            RawCorpus { lang: Lang::L2, sentences: self.l2_indices.iter().map(|&i| pairs[i].1.clone()).collect() },
        )
    }
}

pub fn monolingual_split(pairs: &[(String, String)], seed: u64) -> Result<(RawCorpus, RawCorpus, MonolingualSplit)> {
    if pairs.len() < 2 {
        return Err(Error::Usage(format!("monolingual_split needs at least 2 pairs, got {}", pairs.len())));
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = pairs.len().div_ceil(2);
    let split = MonolingualSplit { l1_indices: idx[..half].to_vec(), l2_indices: idx[half..].to_vec() };
    let (a, b) = split.corpora(pairs);
    Ok((a, b, split))
}

/// Group sentence indices into batches of similar length. Order within
/// equal lengths and the batch order are shuffled with `rng`.
pub fn bucket_batches<R: Rng + ?Sized>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Encode a corpus, truncating sentences to fit `max_len` with framing.
pub fn encode_corpus(vocab: &Vocabulary, corpus: &RawCorpus, max_len: usize) -> Vec<TokenSequence> {
    corpus
        .sentences
        .iter()
        .map(|s| {
            let seq = vocab.encode(s, corpus.lang);
            if seq.len() <= max_len {
                seq
            } else {
                TokenSequence::from_interior(&seq.interior()[..max_len - 2], corpus.lang).expect("valid interior")
            }
        })
        .collect()
}

// ---- cipher language pair ---------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CipherSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Monolingual sentences per language.
    pub sentences: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Successors per token in the bigram model.
    pub branching: usize,
    /// Zipf exponent for unigram and successor weights.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for CipherSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            min_len: 5,
            max_len: 12,
            sentences: 2000,
            valid_size: 200,
            test_size: 200,
            branching: 6,
            zipf: 1.0,
            seed: 7,
        }
    }
}

impl CipherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 10 {
            return Err(Error::Config(format!("cipher vocab_size must be at least 10, got {}", self.vocab_size)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("cipher lengths need 1 <= min_len <= max_len".into()));
        }
        if self.sentences == 0 {
            return Err(Error::Config("cipher corpus size must be positive".into()));
        }
        if self.branching == 0 || self.branching > self.vocab_size {
            return Err(Error::Config("cipher branching must lie in 1..=vocab_size".into()));
        }
        if !(self.zipf >= 0.0) {
            return Err(Error::Config("cipher zipf exponent must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generated cipher corpora plus the held-out parallel sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CipherData {
    pub l1: RawCorpus,
    pub l2: RawCorpus,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
    /// `l1 token → l2 token`.
    pub mapping: Vec<(String, String)>,
    pub split: MonolingualSplit,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: CipherSpec,
    mapping: Vec<(String, String)>,
    split: MonolingualSplit,
}

impl CipherData {
    pub fn cipher(&self, sentence: &str) -> String {
        let map: HashMap<&str, &str> = self.mapping.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        sentence.split_whitespace().map(|t| map.get(t).copied().unwrap_or(t)).collect::<Vec<_>>().join(" ")
    }

    /// Write `train.l1`, `train.l2`, `valid.tsv`, `test.tsv` and `manifest.json`.
    pub fn write(&self, dir: &Path, spec: &CipherSpec) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join("train.l1"), &self.l1.sentences)?;
        write_lines(&dir.join("train.l2"), &self.l2.sentences)?;
        write_parallel(&dir.join("valid.tsv"), &self.valid)?;
        write_parallel(&dir.join("test.tsv"), &self.test)?;
        let manifest = Manifest { spec: spec.clone(), mapping: self.mapping.clone(), split: self.split.clone() };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
            .map_err(|e| Error::io(&path, e))
    }
}

/// Monolingual training corpora and the validation set of a data directory.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub l1: RawCorpus,
    pub l2: RawCorpus,
    pub valid: Vec<(String, String)>,
}

impl DataDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let valid_path = dir.join("valid.tsv");
        let valid = if valid_path.exists() { load_parallel(&valid_path)? } else { Vec::new() };
        let data = Self {
            l1: load_corpus(&dir.join("train.l1"), Lang::L1)?,
            l2: load_corpus(&dir.join("train.l2"), Lang::L2)?,
            valid,
        };
        if data.l1.sentences.is_empty() || data.l2.sentences.is_empty() {
            return Err(Error::Input(format!("{}: both training corpora must be non-empty", dir.display())));
        }
        Ok(data)
    }
}

/// Sparse bigram language model with Zipf-distributed weights.
struct BigramLm {
    start: Vec<f64>,
    successors: Vec<Vec<(usize, f64)>>,
}

fn sample_weighted<R: Rng + ?Sized>(items: impl Iterator<Item = (usize, f64)> + Clone, rng: &mut R) -> usize {
    let total: f64 = items.clone().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in items {
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}

impl BigramLm {
    fn new<R: Rng + ?Sized>(spec: &CipherSpec, rng: &mut R) -> Self {
        let v = spec.vocab_size;
        let zipf = |rank: usize| 1.0 / ((rank + 1) as f64).powf(spec.zipf);
        let mut order: Vec<usize> = (0..v).collect();
        order.shuffle(rng);
        let mut start = vec![0.0; v];
        for (rank, &tok) in order.iter().enumerate() {
            start[tok] = zipf(rank);
        }
        let successors = (0..v)
            .map(|_| {
                let mut cand: Vec<usize> = (0..v).collect();
                cand.shuffle(rng);
                cand.truncate(spec.branching);
                cand.into_iter().enumerate().map(|(rank, t)| (t, zipf(rank))).collect()
            })
            .collect();
        Self { start, successors }
    }

    fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut cur = sample_weighted(self.start.iter().copied().enumerate(), rng);
        out.push(cur);
        while out.len() < len {
            cur = sample_weighted(self.successors[cur].iter().copied(), rng);
            out.push(cur);
        }
        out
    }
}

pub fn generate_cipher_pair(spec: &CipherSpec) -> Result<CipherData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let v = spec.vocab_size;
    let width = (v - 1).to_string().len();
    let src_tok: Vec<String> = (0..v).map(|i| format!("w{i:0width$}")).collect();
    let mut perm: Vec<usize> = (0..v).collect();
    perm.shuffle(&mut rng);
    let tgt_tok: Vec<String> = perm.iter().map(|&j| format!("c{j:0width$}")).collect();
    let lm = BigramLm::new(spec, &mut rng);

    let sample_pairs = |n: usize, rng: &mut ChaCha8Rng| -> Vec<(String, String)> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let ids = lm.sample(len, rng);
                let a = ids.iter().map(|&i| src_tok[i].as_str()).collect::<Vec<_>>().join(" ");
                let b = ids.iter().map(|&i| tgt_tok[i].as_str()).collect::<Vec<_>>().join(" ");
                (a, b)
            })
            .collect()
    };
    let train_pairs = sample_pairs(2 * spec.sentences, &mut rng);
    let valid = sample_pairs(spec.valid_size, &mut rng);
    let test = sample_pairs(spec.test_size, &mut rng);
    let (l1, l2, split) = monolingual_split(&train_pairs, rng.random())?;
    let mapping = src_tok.into_iter().zip(tgt_tok).collect();
    Ok(CipherData { l1, l2, valid, test, mapping, split })
}
