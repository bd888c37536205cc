//! Unsupervised training: denoising steps with the integrated flow
//! likelihood, iterative back-translation, and the epoch loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::bleu::{bleu, BleuOptions};
use crate::config::Config;
use crate::corpus::bucket_batches;
use crate::error::{Error, Result};
use crate::noise::add_noise;
use crate::optim::Adam;
use crate::seq2seq::{FlowFixedState, TranslationModel};
use crate::tensor::{ParamStore, Tensor};
use crate::vocab::{Lang, TokenSequence};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub dae_loss_l1: f64,
    pub dae_loss_l2: f64,
    pub mle_l1: Option<f64>,
    pub mle_l2: Option<f64>,
    pub bt_l1l2: Option<f64>,
    pub bt_l2l1: Option<f64>,
    pub valid_bleu_l1l2: Option<f64>,
    pub valid_bleu_l2l1: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// Mean of the two validation directions, when both were scored.
    pub fn mean_valid_bleu(&self) -> Option<f64> {
        Some((self.valid_bleu_l1l2? + self.valid_bleu_l2l1?) / 2.0)
    }
}

#[derive(Debug)]
pub struct DaeOutput {
    pub reconstruction: f64,
    pub mle: Option<f64>,
    pub total: f64,
    pub grads: Vec<Option<Tensor>>,
}

#[derive(Debug)]
pub struct BtOutput {
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
    pub grads: Vec<Option<Tensor>>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, parts…)`.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Reconstruct `batch` from its noised version; adds `λ·mle` of the pooled
/// latents under the language's flow when the model has an adapter.
pub fn dae_step(
    model: &TranslationModel,
    batch: &[&TokenSequence],
    lang: Lang,
    cfg: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<DaeOutput> {
    let noisy: Vec<TokenSequence> = batch.iter().map(|x| add_noise(x, &cfg.noise, rng)).collect();
    let noisy_refs: Vec<&TokenSequence> = noisy.iter().collect();
    let mut g = Graph::training(model.params(), ChaCha8Rng::seed_from_u64(rng.random()));
    let (rec, z) = model.seq_loss(&mut g, &noisy_refs, lang, batch, lang)?;
    let z_in = if cfg.train.mle_stop_grad { g.detach(z) } else { z };
    let mle = model.mle_graph(&mut g, z_in, lang)?;
    let total = match mle {
        Some(m) => {
            let w = g.scale(m, cfg.train.lambda_mle);
            g.add(rec, w)
        }
        None => rec,
    };
    let total_v = g.scalar(total);
    if !total_v.is_finite() {
        return Err(Error::Numeric(format!("non-finite denoising loss for {lang}")));
    }
    let reconstruction = g.scalar(rec);
    let mle_v = mle.map(|m| g.scalar(m));
    let grads = g.backward(total).into_param_grads(model.params().len());
    Ok(DaeOutput { reconstruction, mle: mle_v, total: total_v, grads })
}

/// Translate `batch` into `to` without gradients, then train the reverse
/// direction to recover the originals. Samples whose synthetic translation
/// is empty are skipped.
pub fn bt_step(
    model: &TranslationModel,
    batch: &[&TokenSequence],
    from: Lang,
    to: Lang,
    rng: &mut ChaCha8Rng,
) -> Result<Option<BtOutput>> {
    let owned: Vec<TokenSequence> = batch.iter().map(|s| (*s).clone()).collect();
    let synthetic = model.translate(&owned, from, to)?;
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for (y, x) in synthetic.iter().zip(batch) {
        if !y.is_empty() {
            src.push(y);
            tgt.push(*x);
        }
    }
    let skipped = batch.len() - src.len();
    if src.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::training(model.params(), ChaCha8Rng::seed_from_u64(rng.random()));
    let (loss, _) = model.seq_loss(&mut g, &src, to, &tgt, from)?;
    let loss_v = g.scalar(loss);
    let grads = g.backward(loss).into_param_grads(model.params().len());
    Ok(Some(BtOutput { loss: loss_v, used: src.len(), skipped, grads }))
}

#[derive(Debug)]
pub struct TrainOutput {
    /// The model with the best mean validation BLEU (or the last one when
    /// no validation set was given).
    pub model: TranslationModel,
    pub metrics: Vec<MetricsRecord>,
    pub best_epoch: Option<usize>,
    pub iterations: usize,
    pub dae_steps: usize,
    pub bt_steps: usize,
    pub bt_skipped: usize,
}

/// Parallel validation data as token sequences.
#[derive(Clone, Debug, Default)]
pub struct ValidSet {
    pub l1: Vec<TokenSequence>,
    pub l2: Vec<TokenSequence>,
}

impl ValidSet {
    pub fn from_pairs(model: &TranslationModel, pairs: &[(String, String)], limit: usize) -> Self {
        let n = if limit == 0 { pairs.len() } else { limit.min(pairs.len()) };
        let max_len = model.config().max_len;
        let fit = |s: &str, lang: Lang| {
            let seq = model.vocab().encode(s, lang);
            if seq.len() <= max_len {
                seq
            } else {
                TokenSequence::from_interior(&seq.interior()[..max_len - 2], lang).expect("valid interior")
            }
        };
        Self {
            l1: pairs[..n].iter().map(|(a, _)| fit(a, Lang::L1)).collect(),
            l2: pairs[..n].iter().map(|(_, b)| fit(b, Lang::L2)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.l1.is_empty()
    }
}

/// Corpus BLEU of translating `src` from `from` to `to` against `refs`.
pub fn evaluate_bleu(
    model: &TranslationModel,
    src: &[TokenSequence],
    refs: &[TokenSequence],
    from: Lang,
    to: Lang,
) -> Result<f64> {
    let hyps = model.translate(src, from, to)?;
    let h: Vec<&[usize]> = hyps.iter().map(|s| s.interior()).collect();
    let r: Vec<&[usize]> = refs.iter().map(|s| s.interior()).collect();
    Ok(bleu(&h, &r, BleuOptions::default())?.bleu)
}

/// Data-dependent actnorm initialisation from the first batch of each language.
pub fn init_flows(model: &mut TranslationModel, l1: &[TokenSequence], l2: &[TokenSequence], n: usize) -> Result<()> {
    let mut latents = Vec::new();
    for data in [l1, l2] {
        let refs: Vec<&TokenSequence> = data.iter().take(n).collect();
        if refs.is_empty() {
            latents.push(None);
            continue;
        }
        let enc = model.encode(&refs)?;
        latents.push(Some(model.pool(&enc)));
    }
    if let Some((flows, store)) = model.flows_mut() {
        for (stack, z) in flows.iter_mut().zip(latents) {
            if let Some(z) = z {
                stack.init_actnorm(store, &z)?;
            }
        }
    }
    Ok(())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct Snapshot {
    params: ParamStore,
    flow: Vec<FlowFixedState>,
}

/// Run the full schedule. `on_epoch` sees the current model, the epoch's
/// record and whether it is the best so far.
pub fn train(
    mut model: TranslationModel,
    l1: &[TokenSequence],
    l2: &[TokenSequence],
    valid: &ValidSet,
    cfg: &Config,
    on_epoch: &mut dyn FnMut(&TranslationModel, &MetricsRecord, bool) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let vocab_len = model.vocab().len();
    for s in l1.iter().chain(l2).chain(&valid.l1).chain(&valid.l2) {
        if s.ids().iter().any(|&t| t >= vocab_len) {
            return Err(Error::Config("corpus token ids exceed the model vocabulary".into()));
        }
    }
    if l1.iter().any(|s| s.lang() != Lang::L1) || l2.iter().any(|s| s.lang() != Lang::L2) {
        return Err(Error::Config("corpus language tags do not match their slots".into()));
    }
    let tc = &cfg.train;
    let mut out = TrainOutput {
        model: model.clone(),
        metrics: Vec::new(),
        best_epoch: None,
        iterations: 0,
        dae_steps: 0,
        bt_steps: 0,
        bt_skipped: 0,
    };
    if tc.epochs == 0 {
        return Ok(out);
    }
    if l1.is_empty() || l2.is_empty() {
        return Err(Error::Usage("training needs non-empty corpora for both languages".into()));
    }
    init_flows(&mut model, l1, l2, tc.batch_size.max(64))?;
    let mut opt = Adam::new(model.params(), tc);
    let mut best: Option<(f64, Snapshot)> = None;

    for epoch in 0..tc.epochs {
        let mut order_rng = derive_rng(tc.seed, &[epoch as u64, 0]);
        let b1 = bucket_batches(&l1.iter().map(|s| s.len()).collect::<Vec<_>>(), tc.batch_size, &mut order_rng);
        let b2 = bucket_batches(&l2.iter().map(|s| s.len()).collect::<Vec<_>>(), tc.batch_size, &mut order_rng);
        let iters = b1.len().max(b2.len());
        let (mut dae1, mut dae2, mut mle1, mut mle2, mut bt12, mut bt21) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for it in 0..iters {
            let bt_on = tc.bt_enabled
                && match tc.warmup_steps {
                    Some(ws) => out.iterations >= ws,
                    None => epoch >= tc.warmup_epochs,
                };
            let mut step_rng = derive_rng(tc.seed, &[epoch as u64, it as u64 + 1]);
            let batch1: Vec<&TokenSequence> = b1[it % b1.len()].iter().map(|&i| &l1[i]).collect();
            let batch2: Vec<&TokenSequence> = b2[it % b2.len()].iter().map(|&i| &l2[i]).collect();
            for (lang, batch) in [(Lang::L1, &batch1), (Lang::L2, &batch2)] {
                let r = dae_step(&model, batch, lang, cfg, &mut step_rng)?;
                opt.step(model.params_mut(), &r.grads)?;
                out.dae_steps += 1;
                let (d, m) = if lang == Lang::L1 { (&mut dae1, &mut mle1) } else { (&mut dae2, &mut mle2) };
                d.push(r.reconstruction);
                if let Some(v) = r.mle {
                    m.push(v);
                }
            }
            if bt_on {
                for (from, batch) in [(Lang::L1, &batch1), (Lang::L2, &batch2)] {
                    let to = from.other();
                    out.bt_steps += 1;
                    if let Some(r) = bt_step(&model, batch, from, to, &mut step_rng)? {
                        if !r.loss.is_finite() {
                            return Err(Error::Numeric(format!("non-finite back-translation loss ({from}→{to})")));
                        }
                        opt.step(model.params_mut(), &r.grads)?;
                        out.bt_skipped += r.skipped;
                        if from == Lang::L1 { &mut bt12 } else { &mut bt21 }.push(r.loss);
                    } else {
                        out.bt_skipped += batch.len();
                    }
                }
            }
            out.iterations += 1;
        }
        let (vb12, vb21) = if valid.is_empty() {
            (None, None)
        } else {
            (
                Some(evaluate_bleu(&model, &valid.l1, &valid.l2, Lang::L1, Lang::L2)?),
                Some(evaluate_bleu(&model, &valid.l2, &valid.l1, Lang::L2, Lang::L1)?),
            )
        };
        let rec = MetricsRecord {
            epoch,
            step: opt.steps(),
            dae_loss_l1: mean(&dae1).unwrap_or(0.0),
            dae_loss_l2: mean(&dae2).unwrap_or(0.0),
            mle_l1: mean(&mle1),
            mle_l2: mean(&mle2),
            bt_l1l2: mean(&bt12),
            bt_l2l1: mean(&bt21),
            valid_bleu_l1l2: vb12,
            valid_bleu_l2l1: vb21,
        };
        let score = rec.mean_valid_bleu();
        let is_best = match (score, &best) {
            (Some(s), Some((b, _))) => s > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if is_best {
            best = Some((score.unwrap(), Snapshot { params: model.params().clone(), flow: model.flow_state() }));
            out.best_epoch = Some(epoch);
        }
        on_epoch(&model, &rec, is_best)?;
        out.metrics.push(rec);
    }
    if let Some((_, snap)) = best {
        model.set_params(snap.params);
        model.restore_flow_state(&snap.flow)?;
    }
    out.model = model;
    Ok(out)
}
