//! Shared finite-difference oracles for the integration tests.
#![allow(dead_code)]

use flowmt::autograd::{Graph, Var};
use flowmt::config::{Config, ModelConfig};
use flowmt::flow::{FlowConfig, FlowKind, FlowStack};
use flowmt::seq2seq::TranslationModel;
use flowmt::tensor::{ParamId, ParamStore, Tensor};
use flowmt::vocab::{Lang, TokenSequence, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gradient magnitudes below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// `Σ (v ⊙ R)` for a fixed pseudo-random `R`, so every output entry matters.
pub fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let (r, c) = g.shape(v);
    let w = g.constant(Tensor::randn(r, c, 1.0, &mut rng(seed)));
    let p = g.mul(v, w);
    g.sum_all(p)
}

/// Worst relative error between analytic and central-difference gradients
/// over every entry of the listed parameters.
pub fn max_param_grad_error<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, loss: F) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        let grads = g.backward(l);
        ids.iter()
            .map(|&id| {
                grads.param(id).cloned().unwrap_or_else(|| {
                    let (r, c) = store.get(id).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::inference(store);
        let l = loss(&mut g);
        g.scalar(l)
    };
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        let n = store.get(id).data().len();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Overwrite every parameter with small Gaussian noise so that
/// zero-initialised heads do not mask gradient paths.
pub fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let (rows, cols) = store.get(id).shape();
        *store.get_mut(id) = Tensor::randn(rows, cols, std, &mut r);
    }
}

/// `ln|det J|` of `f: R^d → R^d` at `x` by central differences.
pub fn fd_log_abs_det<F>(f: F, x: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let d = x.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += step;
        xm[j] -= step;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..d {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    log_abs_det(jac)
}

/// Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        let piv = a[k][k];
        if piv == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += piv.abs().ln();
        for i in k + 1..n {
            let f = a[i][k] / piv;
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    acc
}

/// Vocabulary with `n` tokens `aN` in l1 and `n` tokens `bN` in l2.
pub fn toy_vocab(n: usize) -> Vocabulary {
    let mut toks: Vec<(String, u8)> = (0..n).map(|i| (format!("a{i}"), 1)).collect();
    toks.extend((0..n).map(|i| (format!("b{i}"), 2)));
    Vocabulary::from_tokens(toks).unwrap()
}

/// A tiny model configuration suitable for finite differences.
pub fn toy_config(kind: FlowKind) -> Config {
    let mut cfg = Config::default();
    cfg.model = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        dropout: 0.0,
        max_len: 12,
        d_z: 4,
        ..ModelConfig::default()
    };
    cfg.flow = FlowConfig { kind, layers: 2, hidden: 6, ..FlowConfig::default() };
    cfg
}

pub fn toy_model(cfg: &Config, n: usize) -> TranslationModel {
    TranslationModel::new(cfg, toy_vocab(n)).unwrap()
}

/// Random sentence of `len` tokens from the toy vocabulary of `lang`.
pub fn toy_sentence(vocab: &Vocabulary, lang: Lang, len: usize, r: &mut ChaCha8Rng) -> TokenSequence {
    use rand::seq::IndexedRandom;
    let pool = vocab.lang_tokens(lang);
    let ids: Vec<usize> = (0..len).map(|_| *pool.choose(r).unwrap()).collect();
    TokenSequence::from_interior(&ids, lang).unwrap()
}

/// Stack with every parameter drawn at random (actnorm initialised from
/// a wide random batch for Glow).
pub fn random_stack(kind: FlowKind, dim: usize, layers: usize, seed: u64) -> (ParamStore, FlowStack) {
    let mut store = ParamStore::new();
    let stack = random_stack_in(&mut store, "x", kind, dim, layers, seed);
    (store, stack)
}

/// Adds a randomized stack under `tag` to an existing store.
pub fn random_stack_in(
    store: &mut ParamStore,
    tag: &str,
    kind: FlowKind,
    dim: usize,
    layers: usize,
    seed: u64,
) -> FlowStack {
    let cfg = FlowConfig { kind, layers, hidden: 16, s_max: 2.0, dropout: 0.0 };
    let first = store.len();
    let mut stack = FlowStack::new(store, tag, dim, &cfg, &mut rng(seed)).unwrap();
    let ids: Vec<_> = store.ids().skip(first).collect();
    let mut r = rng(seed + 1);
    for id in ids {
        let name = store.name(id).to_string();
        let t = store.get_mut(id);
        // Triangular factors shrink with width; otherwise the product of
        // dense random triangles is numerically singular at d = 100.
        let std = if name.ends_with("log_scale") || name.ends_with("log_s") {
            0.2
        } else if name.ends_with("lower") || name.ends_with("upper") {
            0.3 / (dim as f64).sqrt()
        } else {
            0.3
        };
        *t = Tensor::randn(t.rows(), t.cols(), std, &mut r);
    }
    if kind == FlowKind::Glow {
        let batch = Tensor::randn(64, dim, 1.5, &mut r);
        stack.init_actnorm(store, &batch).unwrap();
    }
    stack
}

/// Clipped counts by exhaustive pairwise comparison of every n-gram window.
pub fn brute_force_bleu(hyps: &[Vec<u8>], refs: &[Vec<u8>], max_n: usize) -> f64 {
    let (mut c, mut r) = (0usize, 0usize);
    let mut logs = 0.0;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            if h.len() < n {
                continue;
            }
            let hw: Vec<&[u8]> = h.windows(n).collect();
            let rw: Vec<&[u8]> = if rf.len() >= n { rf.windows(n).collect() } else { Vec::new() };
            total[n - 1] += hw.len();
            let mut seen: Vec<&[u8]> = Vec::new();
            for g in &hw {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_h = hw.iter().filter(|x| *x == g).count();
                let in_r = rw.iter().filter(|x| *x == g).count();
                matched[n - 1] += in_h.min(in_r);
            }
        }
    }
    for n in 0..max_n {
        if matched[n] == 0 {
            return 0.0;
        }
        logs += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (logs / max_n as f64).exp()
}

fn random_sentence(rng: &mut ChaCha8Rng, alphabet: u8) -> Vec<u8> {
    let len = rng.random_range(0..12);
    (0..len).map(|_| rng.random_range(0..alphabet)).collect()
}

/// A small random corpus; half the hypotheses are perturbed references so
/// that high scores occur too.
pub fn random_bleu_case(rng: &mut ChaCha8Rng, trial: usize) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let alphabet = 2 + (trial % 5) as u8;
    let size = rng.random_range(1..8);
    let refs: Vec<Vec<u8>> = (0..size).map(|_| random_sentence(rng, alphabet)).collect();
    let hyps: Vec<Vec<u8>> = refs
        .iter()
        .map(|r| {
            if rng.random_bool(0.5) {
                let mut h = r.clone();
                if !h.is_empty() {
                    let i = rng.random_range(0..h.len());
                    h[i] = rng.random_range(0..alphabet);
                }
                h
            } else {
                random_sentence(rng, alphabet)
            }
        })
        .collect();
    (hyps, refs)
}

/// Toy model with every weight randomised so that zero-initialised heads
/// and gates carry signal.
pub fn busy_model(kind: FlowKind, seed: u64) -> TranslationModel {
    let mut model = toy_model(&toy_config(kind), 6);
    let mut store = model.params().clone();
    randomize(&mut store, 0.4, seed);
    model.set_params(store);
    model
}

/// Parameter classes of the toy model for gradient checks:
/// `(label, name prefixes, required substring)`.
pub type ParamClass<'a> = (&'a str, &'a [&'a str], &'a str);

pub const REALNVP_CLASSES: &[ParamClass] = &[
    ("embeddings", &["embed"], ""),
    ("encoder attention", &["enc."], ".attn."),
    ("decoder self attention", &["dec"], ".self."),
    ("cross attention", &["dec"], ".cross."),
    ("feed-forward and norms", &["enc.0.ff", "dec1.0.ln", "enc.norm"], ""),
    ("projection", &["proj"], ""),
    ("gate", &["gate"], ""),
    ("coupling", &["flow."], ""),
];

pub const GLOW_CLASSES: &[ParamClass] = &[
    ("actnorm", &["flow."], "actnorm"),
    ("invertible linear", &["flow."], "linear"),
    ("glow coupling", &["flow."], "coupling"),
];

/// Worst relative finite-difference error per class for a loss made of a
/// cross-language sequence loss, a same-language one and both flow
/// likelihoods, so every class lies on a gradient path.
pub fn model_gradient_errors(kind: FlowKind, classes: &[ParamClass]) -> Vec<(String, f64)> {
    let model = busy_model(kind, 21);
    let mut r = rng(22);
    let src: Vec<TokenSequence> = [4, 2].iter().map(|&n| toy_sentence(model.vocab(), Lang::L1, n, &mut r)).collect();
    let tgt: Vec<TokenSequence> = [3, 5].iter().map(|&n| toy_sentence(model.vocab(), Lang::L2, n, &mut r)).collect();
    let (s, t): (Vec<&TokenSequence>, Vec<&TokenSequence>) = (src.iter().collect(), tgt.iter().collect());
    let loss = |g: &mut Graph| {
        let (ce, z) = model.seq_loss(g, &s, Lang::L1, &t, Lang::L2).unwrap();
        let (ce2, z2) = model.seq_loss(g, &t, Lang::L2, &t, Lang::L2).unwrap();
        let m1 = model.mle_graph(g, z, Lang::L1).unwrap().unwrap();
        let m2 = model.mle_graph(g, z2, Lang::L2).unwrap().unwrap();
        let a = g.add(ce, ce2);
        let b = g.add(m1, m2);
        let b = g.scale(b, 0.1);
        g.add(a, b)
    };
    let mut store = model.params().clone();
    classes
        .iter()
        .map(|(label, prefixes, contains)| {
            let ids: Vec<ParamId> = model
                .params()
                .iter()
                .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)) && n.contains(contains))
                .map(|(id, _, _)| id)
                .collect();
            assert!(!ids.is_empty(), "no parameters for {label}");
            (label.to_string(), max_param_grad_error(&mut store, &ids, 1e-5, loss))
        })
        .collect()
}
