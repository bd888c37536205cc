//! Corpus-level BLEU with clipped n-gram precision and brevity penalty.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    /// Score on a 0–100 scale.
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuOptions {
    pub max_n: usize,
    /// Add-one smoothing of the n > 1 precisions.
    pub smooth: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        Self { max_n: 4, smooth: false }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(
    hyps: &[H],
    refs: &[R],
    opts: BleuOptions,
) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Usage(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::Usage("BLEU needs at least one sentence pair".into()));
    }
    if opts.max_n == 0 {
        return Err(Error::Usage("max_n must be positive".into()));
    }
    let mut matched = vec![0usize; opts.max_n];
    let mut total = vec![0usize; opts.max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for n in 1..=opts.max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, &k) in &hc {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = (0..opts.max_n)
        .map(|i| {
            if opts.smooth && i > 0 {
                (matched[i] + 1) as f64 / (total[i] + 1) as f64
            } else if total[i] == 0 {
                0.0
            } else {
                matched[i] as f64 / total[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / opts.max_n as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, hyp_len: c, ref_len: r })
}

/// BLEU over whitespace-tokenised sentences.
pub fn bleu_text<S: AsRef<str>>(hyps: &[S], refs: &[S], opts: BleuOptions) -> Result<BleuReport> {
    let h: Vec<Vec<&str>> = hyps.iter().map(|s| s.as_ref().split_whitespace().collect()).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|s| s.as_ref().split_whitespace().collect()).collect();
    bleu(&h, &r, opts)
}
