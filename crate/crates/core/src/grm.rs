//! Generative recommender: a small decoder-only transformer over identifier
//! tokens, trained with teacher forcing on the target item's tokens and
//! decoded with trie-constrained beam search.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{layer_norm_rows, softmax_rows, Grads, Mat, ParamId, ParamStore, StoreRef, Tape, Var};
use crate::checkpoint;
use crate::data::{ItemId, Window};
use crate::error::{DactError, Result};
use crate::nn::{normal_matrix, Adam, AdamConfig, Linear};
use crate::par;
use crate::tokenizer::{Identifiers, TokenSequence};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const N_SPECIAL: usize = 3;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Most recent history items fed as context.
    pub max_items: usize,
    pub max_suffix: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_std: f64,
    pub beam_width: usize,
}

impl Default for GrmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            layers: 2,
            d_ff: 256,
            max_items: 10,
            max_suffix: 32,
            epochs: 3,
            batch_size: 32,
            lr: 1e-3,
            init_std: 0.02,
            beam_width: 20,
        }
    }
}

impl GrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(DactError::config("d_model must be a positive multiple of heads"));
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_items == 0 || self.max_suffix == 0 {
            return Err(DactError::config("layers, d_ff, max_items and max_suffix must be positive"));
        }
        Ok(())
    }
}

/// Token layout: specials, then one block of `codes` tokens per level, then suffixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub levels: usize,
    pub codes: usize,
    pub max_suffix: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        N_SPECIAL + self.levels * self.codes + self.max_suffix
    }

    pub fn path_len(&self) -> usize {
        self.levels + 1
    }

    pub fn level_token(&self, level: usize, code: usize) -> usize {
        N_SPECIAL + level * self.codes + code
    }

    pub fn suffix_token(&self, suffix: usize) -> usize {
        N_SPECIAL + self.levels * self.codes + suffix
    }

    pub fn item_tokens(&self, t: &TokenSequence) -> Result<Vec<usize>> {
        if t.codes.len() != self.levels || t.codes.iter().any(|&c| c >= self.codes) {
            return Err(DactError::config(format!("identifier {:?} does not fit the vocabulary", t.codes)));
        }
        if t.suffix >= self.max_suffix {
            return Err(DactError::config(format!(
                "dedup suffix {} exceeds max_suffix {}",
                t.suffix, self.max_suffix
            )));
        }
        let mut out: Vec<usize> = t.codes.iter().enumerate().map(|(l, &c)| self.level_token(l, c)).collect();
        out.push(self.suffix_token(t.suffix));
        Ok(out)
    }
}

/// `[BOS, tokens of the last max_items items…, EOS]`.
pub fn encode_history(vocab: &Vocab, ids: &Identifiers, history: &[ItemId], max_items: usize) -> Result<Vec<usize>> {
    let start = history.len().saturating_sub(max_items);
    let mut out = vec![BOS];
    for item in &history[start..] {
        let t = ids
            .get(item)
            .ok_or_else(|| DactError::Missing(format!("identifier for item {item}")))?;
        out.extend(vocab.item_tokens(t)?);
    }
    out.push(EOS);
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    item: Option<ItemId>,
}

/// Prefix tree over the token paths of live identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Trie {
    nodes: Vec<TrieNode>,
    depth: usize,
    n_items: usize,
}

impl Trie {
    pub fn build(vocab: &Vocab, ids: &Identifiers) -> Result<Self> {
        let mut nodes = vec![TrieNode::default()];
        for (item, t) in ids {
            let mut node = 0;
            for tok in vocab.item_tokens(t)? {
                node = match nodes[node].children.get(&tok) {
                    Some(&c) => c,
                    None => {
                        nodes.push(TrieNode::default());
                        let c = nodes.len() - 1;
                        nodes[node].children.insert(tok, c);
                        c
                    }
                };
            }
            if let Some(other) = nodes[node].item {
                return Err(DactError::config(format!("items {other} and {item} share an identifier")));
            }
            nodes[node].item = Some(*item);
        }
        Ok(Self {
            nodes,
            depth: vocab.path_len(),
            n_items: ids.len(),
        })
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &c)| (t, c))
    }

    pub fn child(&self, node: usize, token: usize) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub fn item(&self, node: usize) -> Option<ItemId> {
        self.nodes[node].item
    }

    pub fn lookup(&self, path: &[usize]) -> Option<ItemId> {
        let mut node = self.root();
        for &t in path {
            node = self.child(node, t)?;
        }
        self.item(node)
    }

    /// Splits a concatenation of item paths back into items.
    pub fn decode_sequence(&self, tokens: &[usize]) -> Option<Vec<ItemId>> {
        if tokens.len() % self.depth != 0 {
            return None;
        }
        tokens.chunks(self.depth).map(|c| self.lookup(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: Linear,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1: Linear,
    ff2: Linear,
}

/// Per-layer key/value rows for incremental decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    k: Vec<Mat>,
    v: Vec<Mat>,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrmTrainLog {
    pub steps: usize,
    pub probe_initial: f64,
    pub probe_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grm {
    pub config: GrmConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    pub period_index: usize,
}

/// One teacher-forced example: model input tokens and the positions whose
/// next-token prediction is scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Grm {
    pub fn new(config: GrmConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.max_suffix != config.max_suffix {
            return Err(DactError::config("vocabulary suffix capacity differs from config"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = config.init_std;
        let mut store = ParamStore::new();
        let tok_emb = store.add("tok_emb", normal_matrix(vocab.size(), d, std, &mut rng));
        let max_pos = Self::max_positions(&config, &vocab);
        let pos_emb = store.add("pos_emb", normal_matrix(max_pos, d, std, &mut rng));
        let ones = || Array2::from_elem((1, d), 1.0);
        let zeros = || Array2::zeros((1, d));
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("block{l}");
                Block {
                    ln1_g: store.add(format!("{p}.ln1.g"), ones()),
                    ln1_b: store.add(format!("{p}.ln1.b"), zeros()),
                    wq: store.add(format!("{p}.wq"), normal_matrix(d, d, std, &mut rng)),
                    wk: store.add(format!("{p}.wk"), normal_matrix(d, d, std, &mut rng)),
                    wv: store.add(format!("{p}.wv"), normal_matrix(d, d, std, &mut rng)),
                    wo: Linear::from_values(&mut store, &format!("{p}.wo"), normal_matrix(d, d, std, &mut rng), zeros()),
                    ln2_g: store.add(format!("{p}.ln2.g"), ones()),
                    ln2_b: store.add(format!("{p}.ln2.b"), zeros()),
                    ff1: Linear::new(&mut store, &format!("{p}.ff1"), d, config.d_ff, &mut rng),
                    ff2: Linear::from_values(
                        &mut store,
                        &format!("{p}.ff2"),
                        normal_matrix(config.d_ff, d, std, &mut rng),
                        zeros(),
                    ),
                }
            })
            .collect();
        let lnf_g = store.add("lnf.g", ones());
        let lnf_b = store.add("lnf.b", zeros());
        Ok(Self {
            config,
            vocab,
            store,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            period_index: 0,
        })
    }

    fn max_positions(config: &GrmConfig, vocab: &Vocab) -> usize {
        2 + (config.max_items + 1) * vocab.path_len()
    }

    /// Builds the teacher-forcing example for a window.
    pub fn example(&self, ids: &Identifiers, w: &Window) -> Result<Example> {
        let ctx = encode_history(&self.vocab, ids, &w.context, self.config.max_items)?;
        let target = ids
            .get(&w.target)
            .ok_or_else(|| DactError::Missing(format!("identifier for item {}", w.target)))?;
        let target = self.vocab.item_tokens(target)?;
        let mut full = ctx.clone();
        full.extend(&target);
        let input = full[..full.len() - 1].to_vec();
        let positions = (ctx.len() - 1..input.len()).collect();
        Ok(Example {
            input,
            positions,
            targets: target,
        })
    }

    fn tape_ln(&self, tape: &mut Tape, s: StoreRef, x: Var, g: ParamId, b: ParamId) -> Var {
        let n = tape.layer_norm_rows(x, LN_EPS);
        let g = tape.param(s, g);
        let b = tape.param(s, b);
        let n = tape.mul_row(n, g);
        tape.add_row(n, b)
    }

    /// Final hidden states (after the last layer norm) for every input position.
    pub fn tape_hidden(&self, tape: &mut Tape, s: StoreRef, tokens: &[usize]) -> Var {
        let t = tokens.len();
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let emb = tape.param(s, self.tok_emb);
        let pos = tape.param(s, self.pos_emb);
        let te = tape.gather_rows(emb, tokens);
        let pos_idx: Vec<usize> = (0..t).collect();
        let pe = tape.gather_rows(pos, &pos_idx);
        let mut x = tape.add(te, pe);
        let mask = Array2::from_shape_fn((t, t), |(i, j)| if j > i { -1e30 } else { 0.0 });
        let mask = tape.constant(mask);
        for b in &self.blocks {
            let h = self.tape_ln(tape, s, x, b.ln1_g, b.ln1_b);
            let wq = tape.param(s, b.wq);
            let wk = tape.param(s, b.wk);
            let wv = tape.param(s, b.wv);
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, (hd + 1) * dh);
                let kh = tape.slice_cols(k, hd * dh, (hd + 1) * dh);
                let vh = tape.slice_cols(v, hd * dh, (hd + 1) * dh);
                let sc = tape.matmul_bt(qh, kh);
                let sc = tape.scale(sc, 1.0 / (dh as f64).sqrt());
                let sc = tape.add(sc, mask);
                let a = tape.softmax_rows(sc);
                outs.push(tape.matmul(a, vh));
            }
            let att = tape.concat_cols(&outs);
            let att = b.wo.forward(tape, s, att);
            x = tape.add(x, att);
            let h2 = self.tape_ln(tape, s, x, b.ln2_g, b.ln2_b);
            let f = b.ff1.forward(tape, s, h2);
            let f = tape.relu(f);
            let f = b.ff2.forward(tape, s, f);
            x = tape.add(x, f);
        }
        self.tape_ln(tape, s, x, self.lnf_g, self.lnf_b)
    }

    /// Summed target-token NLL of one example.
    pub fn tape_nll(&self, tape: &mut Tape, s: StoreRef, ex: &Example) -> Var {
        let h = self.tape_hidden(tape, s, &ex.input);
        let sel = tape.gather_rows(h, &ex.positions);
        let emb = tape.param(s, self.tok_emb);
        let logits = tape.matmul_bt(sel, emb);
        let ls = tape.log_softmax_rows(logits);
        let picked = tape.pick_cols(ls, &ex.targets);
        let total = tape.sum(picked);
        tape.scale(total, -1.0)
    }

    fn batch_grads(&self, examples: &[&Example]) -> (f64, usize, Grads) {
        let n_params = self.store.len();
        let chunk = examples.len().div_ceil(4).max(1);
        let chunks: Vec<&[&Example]> = examples.chunks(chunk).collect();
        let parts = par::map(&chunks, |exs| {
            let mut tape = Tape::new();
            let s = tape.bind(&self.store);
            let mut total: Option<Var> = None;
            let mut count = 0;
            for ex in exs.iter() {
                let l = self.tape_nll(&mut tape, s, ex);
                count += ex.targets.len();
                total = Some(match total {
                    Some(t) => tape.add(t, l),
                    None => l,
                });
            }
            let total = total.expect("chunks are non-empty");
            let value = tape.scalar(total);
            let mut g = tape.backward(total);
            (value, count, g.params(s))
        });
        let loss: f64 = parts.iter().map(|p| p.0).sum();
        let count: usize = parts.iter().map(|p| p.1).sum();
        let mut grads = Grads::sum(n_params, parts.iter().map(|p| &p.2));
        grads.scale(1.0 / count.max(1) as f64);
        (loss, count, grads)
    }

    /// Mean per-token target NLL over `examples`.
    pub fn mean_nll(&self, examples: &[Example]) -> f64 {
        let parts = par::map(examples, |ex| {
            let mut tape = Tape::new();
            let s = tape.bind(&self.store);
            let l = self.tape_nll(&mut tape, s, ex);
            (tape.scalar(l), ex.targets.len())
        });
        let (sum, n) = parts.iter().fold((0.0, 0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Teacher-forced training over `windows` for `epochs` passes.
    pub fn train(&mut self, windows: &[Window], ids: &Identifiers, epochs: usize, seed: u64) -> Result<GrmTrainLog> {
        let examples: Vec<Example> = windows.iter().map(|w| self.example(ids, w)).collect::<Result<_>>()?;
        let probe: Vec<Example> = examples.iter().take(64).cloned().collect();
        let probe_initial = self.mean_nll(&probe);
        if epochs == 0 || examples.is_empty() {
            return Ok(GrmTrainLog {
                steps: 0,
                probe_initial,
                probe_final: probe_initial,
            });
        }
        let mut opt = Adam::new(
            AdamConfig {
                clip_norm: 1.0,
                ..AdamConfig::with_lr(self.config.lr)
            },
            &self.store,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let bs = self.config.batch_size.max(1);
        let mut steps = 0;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(bs) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
                let (loss, count, grads) = self.batch_grads(&batch);
                let mean = loss / count.max(1) as f64;
                if !mean.is_finite() {
                    return Err(DactError::Divergence {
                        step: steps,
                        term: "recommender NLL".into(),
                        value: mean,
                    });
                }
                opt.step(&mut self.store, &grads);
                steps += 1;
            }
        }
        Ok(GrmTrainLog {
            steps,
            probe_initial,
            probe_final: self.mean_nll(&probe),
        })
    }

    pub fn new_cache(&self) -> KvCache {
        let d = self.config.d_model;
        KvCache {
            k: vec![Array2::zeros((0, d)); self.blocks.len()],
            v: vec![Array2::zeros((0, d)); self.blocks.len()],
            len: 0,
        }
    }

    fn ln_plain(&self, x: &Mat, g: ParamId, b: ParamId) -> Mat {
        layer_norm_rows(x, LN_EPS) * self.store.get(g) + self.store.get(b)
    }

    /// Appends one token and returns the final hidden state at its position.
    pub fn step(&self, cache: &mut KvCache, token: usize) -> Result<Array1<f64>> {
        let pos = cache.len;
        let pos_table = self.store.get(self.pos_emb);
        if pos >= pos_table.nrows() {
            return Err(DactError::config("sequence longer than the position table"));
        }
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let emb = self.store.get(self.tok_emb);
        let mut x: Mat = (&emb.row(token) + &pos_table.row(pos)).insert_axis(Axis(0));
        for (l, b) in self.blocks.iter().enumerate() {
            let h = self.ln_plain(&x, b.ln1_g, b.ln1_b);
            let q = h.dot(self.store.get(b.wq));
            let k = h.dot(self.store.get(b.wk));
            let v = h.dot(self.store.get(b.wv));
            cache.k[l].push_row(k.row(0)).map_err(|e| DactError::config(e.to_string()))?;
            cache.v[l].push_row(v.row(0)).map_err(|e| DactError::config(e.to_string()))?;
            let mut att = Array2::zeros((1, d));
            for hd in 0..heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let kh = cache.k[l].slice(cols);
                let vh = cache.v[l].slice(cols);
                let sc = q.slice(cols).dot(&kh.t()) / (dh as f64).sqrt();
                let a = softmax_rows(&sc);
                att.slice_mut(cols).assign(&a.dot(&vh));
            }
            x = x + b.wo.forward_plain(&self.store, att.view());
            let h2 = self.ln_plain(&x, b.ln2_g, b.ln2_b);
            let f = b.ff1.forward_plain(&self.store, h2.view()).mapv(|z| z.max(0.0));
            x = x + b.ff2.forward_plain(&self.store, f.view());
        }
        cache.len += 1;
        Ok(self.ln_plain(&x, self.lnf_g, self.lnf_b).row(0).to_owned())
    }

    pub fn logits(&self, hidden: ArrayView1<f64>) -> Array1<f64> {
        self.store.get(self.tok_emb).dot(&hidden)
    }

    /// Top-`k` items by constrained beam search, best first, with path log-probabilities.
    pub fn recommend(&self, trie: &Trie, context: &[usize], k: usize, beam_width: usize) -> Result<Vec<(ItemId, f64)>> {
        if trie.n_items() == 0 {
            return Err(DactError::Degenerate("recommendation over an empty trie".into()));
        }
        if beam_width < k {
            return Err(DactError::config("beam width must be at least k"));
        }
        let mut cache = self.new_cache();
        let mut hidden = None;
        for &t in context {
            hidden = Some(self.step(&mut cache, t)?);
        }
        let hidden = hidden.ok_or_else(|| DactError::Degenerate("empty context".into()))?;
        struct Beam {
            node: usize,
            score: f64,
            tokens: Vec<usize>,
            cache: KvCache,
            logits: Array1<f64>,
        }
        let mut beams = vec![Beam {
            node: trie.root(),
            score: 0.0,
            tokens: Vec::new(),
            logits: self.logits(hidden.view()),
            cache,
        }];
        for depth in 0..self.vocab.path_len() {
            let mut cand: Vec<(f64, usize, usize, usize)> = Vec::new();
            for (bi, b) in beams.iter().enumerate() {
                let kids: Vec<(usize, usize)> = trie.children(b.node).collect();
                let max = kids.iter().map(|&(t, _)| b.logits[t]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + kids.iter().map(|&(t, _)| (b.logits[t] - max).exp()).sum::<f64>().ln();
                for (t, child) in kids {
                    cand.push((b.score + b.logits[t] - lse, bi, t, child));
                }
            }
            cand.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then_with(|| beams[a.1].tokens.cmp(&beams[b.1].tokens))
                    .then(a.2.cmp(&b.2))
            });
            cand.truncate(beam_width);
            let last = depth + 1 == self.vocab.path_len();
            let mut next = Vec::with_capacity(cand.len());
            for (score, bi, t, child) in cand {
                let parent = &beams[bi];
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                let (cache, logits) = if last {
                    (self.new_cache(), Array1::zeros(0))
                } else {
                    let mut c = parent.cache.clone();
                    let h = self.step(&mut c, t)?;
                    let lg = self.logits(h.view());
                    (c, lg)
                };
                next.push(Beam {
                    node: child,
                    score,
                    tokens,
                    cache,
                    logits,
                });
            }
            beams = next;
        }
        let mut out: Vec<(ItemId, f64)> = beams
            .iter()
            .filter_map(|b| trie.item(b.node).map(|i| (i, b.score)))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut seen = BTreeSet::new();
        out.retain(|(i, _)| seen.insert(*i));
        out.truncate(k);
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "vocab": self.vocab });
        checkpoint::save_store(dir, "grm", Some(self.period_index), meta, &[("grm.", &self.store)])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = checkpoint::read_arrays(dir)?;
        let config: GrmConfig = serde_json::from_value(manifest.meta["config"].clone())?;
        let vocab: Vocab = serde_json::from_value(manifest.meta["vocab"].clone())?;
        let mut g = Self::new(config, vocab, 0)?;
        checkpoint::load_into_store(&arrays, "grm.", &mut g.store)?;
        g.period_index = manifest.period_index.unwrap_or(0);
        Ok(g)
    }
}

/// Hit rate and NDCG at 5 and 10.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "H@5")]
    pub h5: f64,
    #[serde(rename = "H@10")]
    pub h10: f64,
    #[serde(rename = "N@5")]
    pub n5: f64,
    #[serde(rename = "N@10")]
    pub n10: f64,
    pub users: usize,
}

impl Metrics {
    /// Means over per-user ranks (1-based; `None` when the target was not returned).
    pub fn from_ranks(ranks: &[Option<usize>]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return Self::default();
        }
        let hit = |k: usize| ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / n as f64;
        let ndcg = |k: usize| {
            ranks
                .iter()
                .map(|r| match r {
                    Some(r) if *r <= k => 1.0 / ((*r + 1) as f64).log2(),
                    _ => 0.0,
                })
                .sum::<f64>()
                / n as f64
        };
        Self {
            h5: hit(5),
            h10: hit(10),
            n5: ndcg(5),
            n10: ndcg(10),
            users: n,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub all: Metrics,
    pub warm: Metrics,
    pub cold: Metrics,
}

/// Rank (1-based) of each window's target among the top-10 recommendations.
pub fn target_ranks(grm: &Grm, trie: &Trie, ids: &Identifiers, windows: &[Window], beam_width: usize) -> Result<Vec<Option<usize>>> {
    par::try_map(windows, |w| {
        let ctx = encode_history(&grm.vocab, ids, &w.context, grm.config.max_items)?;
        let recs = grm.recommend(trie, &ctx, 10.min(beam_width), beam_width)?;
        Ok(recs.iter().position(|(i, _)| *i == w.target).map(|p| p + 1))
    })
}

/// Metrics over test windows, split by whether the target is a warm item.
pub fn evaluate(
    grm: &Grm,
    trie: &Trie,
    ids: &Identifiers,
    windows: &[Window],
    warm: &BTreeSet<ItemId>,
    beam_width: usize,
) -> Result<Evaluation> {
    let ranks = target_ranks(grm, trie, ids, windows, beam_width)?;
    let split = |want_warm: bool| -> Vec<Option<usize>> {
        windows
            .iter()
            .zip(&ranks)
            .filter(|(w, _)| warm.contains(&w.target) == want_warm)
            .map(|(_, r)| *r)
            .collect()
    };
    Ok(Evaluation {
        all: Metrics::from_ranks(&ranks),
        warm: Metrics::from_ranks(&split(true)),
        cold: Metrics::from_ranks(&split(false)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab {
            levels: 3,
            codes: 4,
            max_suffix: 2,
        }
    }

    fn ids(paths: &[(u32, [usize; 3], usize)]) -> Identifiers {
        paths
            .iter()
            .map(|(i, c, s)| {
                (
                    ItemId(*i),
                    TokenSequence {
                        codes: c.to_vec(),
                        suffix: *s,
                    },
                )
            })
            .collect()
    }

    fn tiny_config() -> GrmConfig {
        GrmConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            d_ff: 16,
            max_items: 3,
            max_suffix: 2,
            init_std: 0.3,
            ..GrmConfig::default()
        }
    }

    #[test]
    fn vocab_layout_is_level_disjoint() {
        let v = vocab();
        assert_eq!(v.size(), 3 + 12 + 2);
        assert_ne!(v.level_token(0, 1), v.level_token(1, 1));
        assert_eq!(v.suffix_token(1), 16);
    }

    #[test]
    fn history_encoding_lengths() {
        let v = vocab();
        let m = ids(&[(1, [0, 1, 2], 0), (2, [3, 3, 3], 1)]);
        assert_eq!(encode_history(&v, &m, &[], 5).unwrap(), vec![BOS, EOS]);
        let x = encode_history(&v, &m, &[ItemId(1), ItemId(2)], 5).unwrap();
        assert_eq!(x.len(), 10);
        let trie = Trie::build(&v, &m).unwrap();
        assert_eq!(trie.decode_sequence(&x[1..9]).unwrap(), vec![ItemId(1), ItemId(2)]);
        assert!(encode_history(&v, &m, &[ItemId(7)], 5).is_err());
    }

    #[test]
    fn trie_rejects_duplicate_paths() {
        let v = vocab();
        assert!(Trie::build(&v, &ids(&[(1, [0, 1, 2], 0), (2, [0, 1, 2], 0)])).is_err());
    }

    #[test]
    fn metrics_closed_forms() {
        let m = Metrics::from_ranks(&[Some(3)]);
        assert!((m.n10 - 0.5).abs() < 1e-12);
        assert_eq!(m.h5, 1.0);
        let m = Metrics::from_ranks(&[Some(1); 4]);
        assert_eq!((m.h5, m.n5), (1.0, 1.0));
        let m = Metrics::from_ranks(&[None, Some(11)]);
        assert_eq!((m.h10, m.n10), (0.0, 0.0));
    }

    #[test]
    fn cached_decoding_matches_tape_forward() {
        let v = vocab();
        let g = Grm::new(tiny_config(), v, 3).unwrap();
        let tokens = [BOS, 3, 8, 13, 15, EOS, 4, 9];
        let mut tape = Tape::new();
        let s = tape.bind(&g.store);
        let h = g.tape_hidden(&mut tape, s, &tokens);
        let full = tape.value(h).clone();
        let mut cache = g.new_cache();
        for (i, &t) in tokens.iter().enumerate() {
            let step = g.step(&mut cache, t).unwrap();
            for j in 0..8 {
                assert!((step[j] - full[[i, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_item_trie_always_recommends_it() {
        let v = vocab();
        let g = Grm::new(tiny_config(), v, 1).unwrap();
        let m = ids(&[(42, [1, 2, 3], 0)]);
        let trie = Trie::build(&v, &m).unwrap();
        let r = g.recommend(&trie, &[BOS, EOS], 1, 5).unwrap();
        assert_eq!(r[0].0, ItemId(42));
        assert!(r[0].1.abs() < 1e-12);
        assert!(g.recommend(&Trie::build(&v, &Identifiers::new()).unwrap(), &[BOS, EOS], 1, 5).is_err());
    }
}
