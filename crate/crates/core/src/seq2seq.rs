//! Pre-LN transformer encoder/decoder with per-language bos conditioning,
//! tied output embeddings, gated latent fusion and the flow adapter.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttnLayout, Graph, Segment, Var};
use crate::config::{Config, ModelConfig, VocabMode};
use crate::error::{Error, Result};
use crate::flow::{transform_latent_graph, BaseDistribution, FlowLayer, FlowStack};
use crate::sentrep::{pool_graph, GateParams, ProjectionMap};
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::vocab::{bos, Lang, TokenSequence, Vocabulary, EOS, PAD, UNK};

const LN_EPS: f64 = 1e-5;

/// A padded batch laid out row-major as `batch × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl Batch {
    pub fn new(seqs: &[&TokenSequence]) -> Self {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * width];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * width..b * width + s.len()].copy_from_slice(s.ids());
        }
        Self { ids, lens: seqs.iter().map(|s| s.len()).collect(), width }
    }

    pub fn size(&self) -> usize {
        self.lens.len()
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.lens.iter().enumerate().map(|(b, &len)| Segment { start: b * self.width, len }).collect()
    }
}

/// Encoder outputs for a batch: `(batch·width) × d_model` rows.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub states: Tensor,
    pub width: usize,
    pub lens: Vec<usize>,
}

impl EncoderStates {
    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    /// The `(S+1) × d_model` states of sentence `b`.
    pub fn sentence(&self, b: usize) -> Tensor {
        let d = self.states.cols();
        let start = b * self.width * d;
        Tensor::from_vec(self.lens[b], d, self.states.data()[start..start + self.lens[b] * d].to_vec())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::glorot(din, dout, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, dout)),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, d, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, d)),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    fn apply(&self, g: &mut Graph, xq: Var, xkv: Var, layout: AttnLayout) -> Var {
        let q = self.q.apply(g, xq);
        let k = self.k.apply(g, xkv);
        let v = self.v.apply(g, xkv);
        let a = g.attention(q, k, v, layout);
        self.o.apply(g, a)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn apply(&self, g: &mut Graph, x: Var, dropout: f64) -> Var {
        let h = self.up.apply(g, x);
        let h = g.relu(h);
        let h = g.dropout(h, dropout);
        self.down.apply(g, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Decoder {
    layers: Vec<DecoderLayer>,
    ln_f: Norm,
}

/// Per-decoder key/value caches for incremental greedy decoding.
struct DecodeCache {
    cap: usize,
    self_k: Vec<Tensor>,
    self_v: Vec<Tensor>,
    cross_k: Vec<Tensor>,
    cross_v: Vec<Tensor>,
}

/// Call counters used to verify pipeline contracts.
#[derive(Debug, Default)]
pub struct Instrumentation {
    transform_calls: AtomicUsize,
    /// `routes[decoder][lang]`: decoder passes per target language.
    routes: [[AtomicUsize; 2]; 2],
}

impl Instrumentation {
    pub fn transform_calls(&self) -> usize {
        self.transform_calls.load(Ordering::Relaxed)
    }

    pub fn routes(&self, decoder: usize, lang: Lang) -> usize {
        self.routes[decoder][lang.index()].load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.transform_calls.store(0, Ordering::Relaxed);
        for row in &self.routes {
            for c in row {
                c.store(0, Ordering::Relaxed);
            }
        }
    }
}

impl Clone for Instrumentation {
    fn clone(&self) -> Self {
        let out = Instrumentation::default();
        out.transform_calls.store(self.transform_calls(), Ordering::Relaxed);
        for d in 0..2 {
            for l in Lang::BOTH {
                out.routes[d][l.index()].store(self.routes(d, l), Ordering::Relaxed);
            }
        }
        out
    }
}

/// How the decoder latent is derived from the pooled source latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentRoute {
    /// Data → base → data through the source language's own flow.
    Roundtrip,
    /// Source flow to base, then target flow back to data.
    Transform,
    /// Use the pooled latent unchanged.
    Plain,
}

/// Options for inference-time translation.
#[derive(Clone, Copy, Debug, Default)]
pub struct TranslateOptions {
    /// Feed the untransformed source latent even when languages differ.
    pub ablate_transform: bool,
}

#[derive(Clone, Debug)]
pub struct TranslationModel {
    cfg: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    embed: ParamId,
    positions: Tensor,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoders: Vec<Decoder>,
    proj: ProjectionMap,
    gate: GateParams,
    flows: Option<[FlowStack; 2]>,
    base: BaseDistribution,
    /// Candidate output token ids per target language (eos first).
    candidates: [Vec<usize>; 2],
    /// `cand_index[lang][token]` = position of `token` among the candidates.
    cand_index: [Vec<Option<usize>>; 2],
    pub instrumentation: Instrumentation,
}

fn sinusoids(max_len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
    }
    pe
}

impl TranslationModel {
    /// Fresh model; all randomness comes from `cfg.train.seed`.
    pub fn new(cfg: &Config, vocab: Vocabulary) -> Result<Self> {
        cfg.model.validate()?;
        let m = cfg.model.clone();
        let d = m.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut store = ParamStore::new();
        let embed = store.add("embed", Tensor::randn(vocab.len(), d, 1.0 / (d as f64).sqrt(), &mut rng));
        let ff = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, m.d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), m.d_ff, d, rng),
        };
        let encoder = (0..m.n_layers)
            .map(|i| {
                let p = format!("enc.{i}");
                EncoderLayer {
                    ln1: Norm::new(&mut store, &format!("{p}.ln1"), d),
                    attn: Attention::new(&mut store, &format!("{p}.attn"), d, &mut rng),
                    ln2: Norm::new(&mut store, &format!("{p}.ln2"), d),
                    ff: ff(&mut store, &format!("{p}.ff"), &mut rng),
                }
            })
            .collect();
        let enc_norm = Norm::new(&mut store, "enc.norm", d);
        let n_dec = if m.shared_decoder { 1 } else { 2 };
        let decoders = (0..n_dec)
            .map(|j| {
                let layers = (0..m.n_layers)
                    .map(|i| {
                        let p = format!("dec{j}.{i}");
                        DecoderLayer {
                            ln1: Norm::new(&mut store, &format!("{p}.ln1"), d),
                            self_attn: Attention::new(&mut store, &format!("{p}.self"), d, &mut rng),
                            ln2: Norm::new(&mut store, &format!("{p}.ln2"), d),
                            cross_attn: Attention::new(&mut store, &format!("{p}.cross"), d, &mut rng),
                            ln3: Norm::new(&mut store, &format!("{p}.ln3"), d),
                            ff: ff(&mut store, &format!("{p}.ff"), &mut rng),
                        }
                    })
                    .collect();
                Decoder { layers, ln_f: Norm::new(&mut store, &format!("dec{j}.norm"), d) }
            })
            .collect();
        let proj = ProjectionMap::new(&mut store, "proj", d, m.d_z, &mut rng);
        let gate = GateParams::new(&mut store, "gate", d, m.d_z, &mut rng);
        let flows = if m.adapter {
            let a = FlowStack::new(&mut store, "l1", m.d_z, &cfg.flow, &mut rng)?;
            let b = FlowStack::new(&mut store, "l2", m.d_z, &cfg.flow, &mut rng)?;
            Some([a, b])
        } else {
            None
        };
        let candidates = Lang::BOTH.map(|lang| {
            let mut c = vec![EOS, UNK];
            match m.vocab_mode {
                VocabMode::PerLanguage => c.extend(vocab.lang_tokens(lang)),
                VocabMode::Joint => c.extend((crate::vocab::RESERVED.len()..vocab.len()).collect::<Vec<_>>()),
            }
            c
        });
        let cand_index = Lang::BOTH.map(|lang| {
            let mut idx = vec![None; vocab.len()];
            for (i, &t) in candidates[lang.index()].iter().enumerate() {
                idx[t] = Some(i);
            }
            idx
        });
        Ok(Self {
            positions: sinusoids(m.max_len, d),
            base: BaseDistribution::new(m.d_z),
            cfg: m,
            vocab,
            params: store,
            embed,
            encoder,
            enc_norm,
            decoders,
            proj,
            gate,
            flows,
            candidates,
            cand_index,
            instrumentation: Instrumentation::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    pub fn projection(&self) -> &ProjectionMap {
        &self.proj
    }

    pub fn gate(&self) -> &GateParams {
        &self.gate
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.base
    }

    pub fn flow(&self, lang: Lang) -> Option<&FlowStack> {
        self.flows.as_ref().map(|f| &f[lang.index()])
    }

    pub fn has_adapter(&self) -> bool {
        self.flows.is_some()
    }

    pub fn num_decoders(&self) -> usize {
        self.decoders.len()
    }

    pub fn candidates(&self, lang: Lang) -> &[usize] {
        &self.candidates[lang.index()]
    }

    /// Parameter ids belonging to the flow stacks.
    pub fn flow_param_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, n, _)| n.starts_with("flow.")).map(|(id, _, _)| id).collect()
    }

    /// Parameter ids belonging to the encoder (embeddings excluded).
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, n, _)| n.starts_with("enc.")).map(|(id, _, _)| id).collect()
    }

    /// The output projection for `lang`: candidate rows of the embedding table.
    pub fn output_projection(&self, lang: Lang) -> Tensor {
        let e = self.params.get(self.embed);
        let rows: Vec<Vec<f64>> = self.candidates[lang.index()].iter().map(|&t| e.row(t).to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    pub(crate) fn flows_mut(&mut self) -> Option<(&mut [FlowStack; 2], &mut ParamStore)> {
        match &mut self.flows {
            Some(f) => Some((f, &mut self.params)),
            None => None,
        }
    }

    pub fn set_params(&mut self, params: ParamStore) {
        assert_eq!(params.len(), self.params.len(), "parameter layout mismatch");
        self.params = params;
    }

    fn check_batch(&self, seqs: &[&TokenSequence], lang: Lang) -> Result<()> {
        for s in seqs {
            if s.lang() != lang {
                return Err(Error::Usage(format!("sequence tagged {} where {lang} was expected", s.lang())));
            }
            if s.len() > self.cfg.max_len {
                return Err(Error::Input(format!(
                    "sequence of length {} exceeds max_len {}",
                    s.len(),
                    self.cfg.max_len
                )));
            }
            if s.ids().iter().any(|&t| t >= self.vocab.len()) {
                return Err(Error::Input("token id outside the vocabulary".into()));
            }
        }
        Ok(())
    }

    fn embed_rows(&self, g: &mut Graph, ids: &[usize], positions: &[usize]) -> Var {
        let d = self.cfg.d_model;
        let e = g.param(self.embed);
        let x = g.gather_rows(e, ids);
        let x = g.scale(x, (d as f64).sqrt());
        let mut pe = Tensor::zeros(ids.len(), d);
        for (r, &p) in positions.iter().enumerate() {
            pe.row_mut(r).copy_from_slice(self.positions.row(p));
        }
        let pe = g.constant(pe);
        let x = g.add(x, pe);
        g.dropout(x, self.cfg.dropout)
    }

    /// Encode a batch; returns the `(B·width) × d_model` state node.
    pub fn encode_graph(&self, g: &mut Graph, batch: &Batch) -> Var {
        let positions: Vec<usize> = (0..batch.ids.len()).map(|r| r % batch.width).collect();
        let mut x = self.embed_rows(g, &batch.ids, &positions);
        let layout = AttnLayout {
            batch: batch.size(),
            q_len: batch.width,
            k_len: batch.width,
            heads: self.cfg.n_heads,
            key_lens: batch.lens.clone(),
            causal: false,
        };
        for layer in &self.encoder {
            let h = layer.ln1.apply(g, x);
            let a = layer.attn.apply(g, h, h, layout.clone());
            let a = g.dropout(a, self.cfg.dropout);
            x = g.add(x, a);
            let h = layer.ln2.apply(g, x);
            let f = layer.ff.apply(g, h, self.cfg.dropout);
            let f = g.dropout(f, self.cfg.dropout);
            x = g.add(x, f);
        }
        self.enc_norm.apply(g, x)
    }

    /// Pooled sentence latents, `B × d_z`.
    pub fn pool_graph(&self, g: &mut Graph, states: Var, batch: &Batch) -> Var {
        pool_graph(g, states, &batch.segments(), &self.proj)
    }

    /// Map a pooled latent towards the decoder language.
    pub fn route_latent(&self, g: &mut Graph, z: Var, from: Lang, to: Lang, route: LatentRoute) -> Result<Var> {
        let Some(flows) = &self.flows else { return Ok(z) };
        match route {
            LatentRoute::Plain => Ok(z),
            LatentRoute::Roundtrip => {
                let stack = &flows[from.index()];
                let (eps, _) = stack.forward(g, z)?;
                let (back, _) = stack.inverse(g, eps)?;
                Ok(back)
            }
            LatentRoute::Transform => {
                self.instrumentation.transform_calls.fetch_add(1, Ordering::Relaxed);
                transform_latent_graph(g, &flows[from.index()], &flows[to.index()], z)
            }
        }
    }

    /// The route used for a given language pair.
    pub fn default_route(&self, from: Lang, to: Lang) -> LatentRoute {
        match (self.flows.is_some(), from == to) {
            (false, _) => LatentRoute::Plain,
            (true, true) => LatentRoute::Roundtrip,
            (true, false) => LatentRoute::Transform,
        }
    }

    /// Negative mean log-likelihood of latents under a language's flow.
    pub fn mle_graph(&self, g: &mut Graph, z: Var, lang: Lang) -> Result<Option<Var>> {
        match &self.flows {
            Some(f) => f[lang.index()].mle_loss(g, &self.base, z).map(Some),
            None => Ok(None),
        }
    }

    fn decoder(&self, lang: Lang) -> (usize, &Decoder) {
        let j = if self.decoders.len() == 1 { 0 } else { lang.index() };
        self.instrumentation.routes[j][lang.index()].fetch_add(1, Ordering::Relaxed);
        (j, &self.decoders[j])
    }

    fn fuse_and_score(&self, g: &mut Graph, s: Var, z_rows: Var, lang: Lang) -> Var {
        let o = self.gate.fuse(g, s, z_rows);
        let e = g.param(self.embed);
        let out = g.gather_rows(e, &self.candidates[lang.index()]);
        g.matmul_t(o, out)
    }

    /// Teacher-forced decoder logits over the language's candidates.
    /// Row `b·(width−1) + t` predicts token `t+1` of sentence `b`.
    pub fn decode_logits(&self, g: &mut Graph, states: Var, src: &Batch, latent: Var, tgt: &Batch, lang: Lang) -> Var {
        let (_, dec) = self.decoder(lang);
        let w = tgt.width - 1;
        let b = tgt.size();
        let mut ids = Vec::with_capacity(b * w);
        let mut positions = Vec::with_capacity(b * w);
        for s in 0..b {
            ids.extend_from_slice(&tgt.ids[s * tgt.width..s * tgt.width + w]);
            positions.extend(0..w);
        }
        let mut x = self.embed_rows(g, &ids, &positions);
        let self_layout = AttnLayout {
            batch: b,
            q_len: w,
            k_len: w,
            heads: self.cfg.n_heads,
            key_lens: tgt.lens.iter().map(|l| l - 1).collect(),
            causal: true,
        };
        let cross_layout = AttnLayout {
            batch: b,
            q_len: w,
            k_len: src.width,
            heads: self.cfg.n_heads,
            key_lens: src.lens.clone(),
            causal: false,
        };
        let p = self.cfg.dropout;
        for layer in &dec.layers {
            let h = layer.ln1.apply(g, x);
            let a = layer.self_attn.apply(g, h, h, self_layout.clone());
            let a = g.dropout(a, p);
            x = g.add(x, a);
            let h = layer.ln2.apply(g, x);
            let a = layer.cross_attn.apply(g, h, states, cross_layout.clone());
            let a = g.dropout(a, p);
            x = g.add(x, a);
            let h = layer.ln3.apply(g, x);
            let f = layer.ff.apply(g, h, p);
            let f = g.dropout(f, p);
            x = g.add(x, f);
        }
        let s = dec.ln_f.apply(g, x);
        let rows: Vec<usize> = (0..b * w).map(|r| r / w).collect();
        let z_rows = g.gather_rows(latent, &rows);
        self.fuse_and_score(g, s, z_rows, lang)
    }

    /// Candidate-index targets aligned with [`TranslationModel::decode_logits`] rows.
    pub fn targets(&self, tgt: &Batch, lang: Lang) -> Vec<Option<usize>> {
        let w = tgt.width - 1;
        let idx = &self.cand_index[lang.index()];
        let mut out = Vec::with_capacity(tgt.size() * w);
        for s in 0..tgt.size() {
            for t in 0..w {
                out.push(if t + 1 < tgt.lens[s] {
                    let tok = tgt.ids[s * tgt.width + t + 1];
                    Some(idx[tok].unwrap_or(idx[UNK].expect("unk is always a candidate")))
                } else {
                    None
                });
            }
        }
        out
    }

    /// Full sequence cross-entropy of producing `tgt` from `src`.
    /// Returns `(loss, pooled source latent)`.
    pub fn seq_loss(
        &self,
        g: &mut Graph,
        src: &[&TokenSequence],
        from: Lang,
        tgt: &[&TokenSequence],
        to: Lang,
    ) -> Result<(Var, Var)> {
        self.check_batch(src, from)?;
        self.check_batch(tgt, to)?;
        let sb = Batch::new(src);
        let tb = Batch::new(tgt);
        let states = self.encode_graph(g, &sb);
        let z = self.pool_graph(g, states, &sb);
        let latent = self.route_latent(g, z, from, to, self.default_route(from, to))?;
        let logits = self.decode_logits(g, states, &sb, latent, &tb, to);
        let loss = g.cross_entropy(logits, &self.targets(&tb, to));
        if !g.value(loss).all_finite() {
            return Err(Error::Numeric("non-finite sequence loss".into()));
        }
        Ok((loss, z))
    }

    /// Inference-mode encoder states for a batch of sentences.
    pub fn encode(&self, xs: &[&TokenSequence]) -> Result<EncoderStates> {
        let lang = xs.first().map_or(Lang::L1, |s| s.lang());
        self.check_batch(xs, lang)?;
        let batch = Batch::new(xs);
        let mut g = Graph::inference(&self.params);
        let h = self.encode_graph(&mut g, &batch);
        Ok(EncoderStates { states: g.value(h).clone(), width: batch.width, lens: batch.lens })
    }

    /// Pooled latents for encoder states, `B × d_z`.
    pub fn pool(&self, enc: &EncoderStates) -> Tensor {
        let mut g = Graph::inference(&self.params);
        let h = g.constant(enc.states.clone());
        let segs: Vec<Segment> =
            enc.lens.iter().enumerate().map(|(b, &len)| Segment { start: b * enc.width, len }).collect();
        let z = pool_graph(&mut g, h, &segs, &self.proj);
        g.value(z).clone()
    }

    /// Generation budget (interior tokens) for a source of `src_len` ids.
    pub fn generation_cap(&self, src_len: usize, max_len: usize) -> usize {
        (max_len.min(self.cfg.max_len) - 2).min(2 * src_len + 4)
    }

    pub fn greedy_decode(&self, enc: &EncoderStates, z: &Tensor, lang: Lang, max_len: usize) -> Vec<TokenSequence> {
        self.greedy_decode_with(enc, z, lang, max_len, &|_| {})
    }

    /// Greedy decoding with a hook that may rewrite each step's logits.
    pub fn greedy_decode_with(
        &self,
        enc: &EncoderStates,
        z: &Tensor,
        lang: Lang,
        max_len: usize,
        adjust: &dyn Fn(&mut [f64]),
    ) -> Vec<TokenSequence> {
        let b = enc.batch_size();
        if b == 0 {
            return Vec::new();
        }
        let caps: Vec<usize> = enc.lens.iter().map(|&l| self.generation_cap(l, max_len)).collect();
        let steps = caps.iter().copied().max().unwrap_or(0) + 1;
        let (_, dec) = self.decoder(lang);
        let mut cache = self.decode_cache(dec, enc, steps);
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let mut current = vec![bos(lang); b];
        let cands = &self.candidates[lang.index()];
        for t in 0..steps {
            let logits = self.decode_step(dec, &mut cache, enc, z, &current, t, lang);
            for s in 0..b {
                if done[s] {
                    continue;
                }
                let mut row = logits.row(s).to_vec();
                adjust(&mut row);
                let best = argmax(&row);
                let tok = cands[best];
                if tok == EOS || out[s].len() >= caps[s] {
                    done[s] = true;
                } else {
                    out[s].push(tok);
                    current[s] = tok;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        out.into_iter()
            .map(|ids| TokenSequence::from_interior(&ids, lang).expect("decoder emits no framing ids"))
            .collect()
    }

    fn decode_cache(&self, dec: &Decoder, enc: &EncoderStates, cap: usize) -> DecodeCache {
        let d = self.cfg.d_model;
        let b = enc.batch_size();
        let mut g = Graph::inference(&self.params);
        let h = g.constant(enc.states.clone());
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for layer in &dec.layers {
            let k = layer.cross_attn.k.apply(&mut g, h);
            let v = layer.cross_attn.v.apply(&mut g, h);
            cross_k.push(g.value(k).clone());
            cross_v.push(g.value(v).clone());
        }
        DecodeCache {
            cap,
            self_k: vec![Tensor::zeros(b * cap, d); dec.layers.len()],
            self_v: vec![Tensor::zeros(b * cap, d); dec.layers.len()],
            cross_k,
            cross_v,
        }
    }

    /// One incremental decoder step at position `t` for the whole batch.
    #[allow(clippy::too_many_arguments)]
    fn decode_step(
        &self,
        dec: &Decoder,
        cache: &mut DecodeCache,
        enc: &EncoderStates,
        z: &Tensor,
        current: &[usize],
        t: usize,
        lang: Lang,
    ) -> Tensor {
        let b = current.len();
        let d = self.cfg.d_model;
        let mut g = Graph::inference(&self.params);
        let mut x = self.embed_rows(&mut g, current, &vec![t; b]);
        let self_layout = AttnLayout {
            batch: b,
            q_len: 1,
            k_len: cache.cap,
            heads: self.cfg.n_heads,
            key_lens: vec![t + 1; b],
            causal: false,
        };
        let cross_layout = AttnLayout {
            batch: b,
            q_len: 1,
            k_len: enc.width,
            heads: self.cfg.n_heads,
            key_lens: enc.lens.clone(),
            causal: false,
        };
        for (i, layer) in dec.layers.iter().enumerate() {
            let h = layer.ln1.apply(&mut g, x);
            let q = layer.self_attn.q.apply(&mut g, h);
            let k = layer.self_attn.k.apply(&mut g, h);
            let v = layer.self_attn.v.apply(&mut g, h);
            for s in 0..b {
                let r = s * cache.cap + t;
                cache.self_k[i].row_mut(r).copy_from_slice(g.value(k).row(s));
                cache.self_v[i].row_mut(r).copy_from_slice(g.value(v).row(s));
            }
            let kc = g.constant(cache.self_k[i].clone());
            let vc = g.constant(cache.self_v[i].clone());
            let a = g.attention(q, kc, vc, self_layout.clone());
            let a = layer.self_attn.o.apply(&mut g, a);
            x = g.add(x, a);
            let h = layer.ln2.apply(&mut g, x);
            let q = layer.cross_attn.q.apply(&mut g, h);
            let kc = g.constant(cache.cross_k[i].clone());
            let vc = g.constant(cache.cross_v[i].clone());
            let a = g.attention(q, kc, vc, cross_layout.clone());
            let a = layer.cross_attn.o.apply(&mut g, a);
            x = g.add(x, a);
            let h = layer.ln3.apply(&mut g, x);
            let f = layer.ff.apply(&mut g, h, 0.0);
            x = g.add(x, f);
        }
        debug_assert_eq!(g.shape(x), (b, d));
        let s = dec.ln_f.apply(&mut g, x);
        let zc = g.constant(z.clone());
        let logits = self.fuse_and_score(&mut g, s, zc, lang);
        g.value(logits).clone()
    }

    /// Translate sentences from `from` into `to` with greedy decoding.
    pub fn translate(&self, xs: &[TokenSequence], from: Lang, to: Lang) -> Result<Vec<TokenSequence>> {
        self.translate_opts(xs, from, to, TranslateOptions::default())
    }

    pub fn translate_opts(
        &self,
        xs: &[TokenSequence],
        from: Lang,
        to: Lang,
        opts: TranslateOptions,
    ) -> Result<Vec<TokenSequence>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CHUNK) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            self.check_batch(&refs, from)?;
            let enc = self.encode(&refs)?;
            let z = self.pool(&enc);
            let route =
                if from == to || opts.ablate_transform { LatentRoute::Plain } else { self.default_route(from, to) };
            let latent = {
                let mut g = Graph::inference(&self.params);
                let zv = g.constant(z);
                let l = self.route_latent(&mut g, zv, from, to, route)?;
                g.value(l).clone()
            };
            out.extend(self.greedy_decode(&enc, &latent, to, self.cfg.max_len));
        }
        Ok(out)
    }

    /// Flow state that is not a trainable parameter, for checkpointing.
    pub fn flow_state(&self) -> Vec<FlowFixedState> {
        let Some(flows) = &self.flows else { return Vec::new() };
        flows
            .iter()
            .map(|stack| FlowFixedState {
                actnorm_initialized: stack.actnorm_flags(),
                permutations: stack
                    .layers()
                    .iter()
                    .map(|l| match l {
                        FlowLayer::Glow(gl) => gl.linear.permutation().to_vec(),
                        FlowLayer::Coupling(_) => Vec::new(),
                    })
                    .collect(),
                signs: stack
                    .layers()
                    .iter()
                    .map(|l| match l {
                        FlowLayer::Glow(gl) => gl.linear.signs().to_vec(),
                        FlowLayer::Coupling(_) => Vec::new(),
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn restore_flow_state(&mut self, state: &[FlowFixedState]) -> Result<()> {
        let Some(flows) = &mut self.flows else {
            return if state.is_empty() {
                Ok(())
            } else {
                Err(Error::Input("checkpoint carries flow state for a model without flows".into()))
            };
        };
        if state.len() != 2 {
            return Err(Error::Input("checkpoint flow state must cover both languages".into()));
        }
        for (stack, st) in flows.iter_mut().zip(state) {
            let k = stack.layers().len();
            if st.actnorm_initialized.len() != k || st.permutations.len() != k || st.signs.len() != k {
                return Err(Error::Input("checkpoint flow state has the wrong number of layers".into()));
            }
            stack.set_actnorm_flags(&st.actnorm_initialized);
            for (i, layer) in stack.layers_mut().iter_mut().enumerate() {
                if let FlowLayer::Glow(gl) = layer {
                    gl.linear.restore_fixed(st.permutations[i].clone(), st.signs[i].clone());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowFixedState {
    pub actnorm_initialized: Vec<bool>,
    pub permutations: Vec<Vec<usize>>,
    pub signs: Vec<Vec<f64>>,
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
