//! Continual tokenizer update: confidence-ranked drift/stationary split with
//! straight-through gates, differentiated losses, a layer-1 KL constraint
//! against the previous period, and the naive fine-tuning baseline.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, StoreRef, Tape, Var};
use crate::cdim::{build_query, CdimConfig, PatternMemory};
use crate::data::ItemId;
use crate::error::{check_dim, DactError, Result};
use crate::nn::{Adam, AdamConfig};
use crate::table::EmbeddingTable;
use crate::tokenizer::{StopGrad, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub theta: f64,
    pub beta: f64,
    pub zeta: f64,
    pub k_ratio: f64,
    pub t_global: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.02,
            mu: 0.25,
            alpha: 1.0,
            theta: 0.1,
            beta: 5.0,
            zeta: 0.001,
            k_ratio: 0.3,
            t_global: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda, self.mu, self.alpha, self.theta, self.beta, self.zeta];
        if w.iter().any(|x| !(*x >= 0.0)) {
            return Err(DactError::config("loss weights must be non-negative"));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio < 1.0) {
            return Err(DactError::config("k_ratio must lie strictly between 0 and 1"));
        }
        if !(self.t_global > 0.0) {
            return Err(DactError::config("t_global must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub cdim: CdimConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            lr: 1e-4,
            weights: LossWeights::default(),
            cdim: CdimConfig::default(),
        }
    }
}

/// Hard top-K split of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriftPartition {
    /// Batch positions in the drifting set, highest confidence first.
    pub drift: Vec<usize>,
    /// `mask[i]` is true iff position `i` is drifting.
    pub mask: Vec<bool>,
}

impl DriftPartition {
    pub fn n_drift(&self) -> usize {
        self.drift.len()
    }

    pub fn n_stable(&self) -> usize {
        self.mask.len() - self.drift.len()
    }
}

/// Top-`ceil(k_ratio · B)` positions by confidence; ties go to the lower item id.
pub fn split_topk(confidences: &[f64], items: &[ItemId], k_ratio: f64) -> Result<DriftPartition> {
    check_dim(confidences.len(), items.len())?;
    let b = confidences.len();
    if b < 2 {
        return Err(DactError::Degenerate("top-K split needs at least two items".into()));
    }
    if !(k_ratio > 0.0 && k_ratio < 1.0) {
        return Err(DactError::config("k_ratio must lie strictly between 0 and 1"));
    }
    let k = ((k_ratio * b as f64).ceil() as usize).min(b);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&x, &y| {
        confidences[y]
            .total_cmp(&confidences[x])
            .then(items[x].cmp(&items[y]))
    });
    order.truncate(k);
    let mut mask = vec![false; b];
    for &i in &order {
        mask[i] = true;
    }
    Ok(DriftPartition { drift: order, mask })
}

/// Row-wise `KL(p || q)` in nats, with `q` given as log-probabilities.
pub fn kl_rows(p: &Mat, log_q: &Mat) -> Result<Array1<f64>> {
    check_dim(p.nrows(), log_q.nrows())?;
    check_dim(p.ncols(), log_q.ncols())?;
    for row in p.rows() {
        if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0) {
            return Err(DactError::Degenerate("distribution does not sum to one".into()));
        }
    }
    Ok(Array1::from_iter(p.rows().into_iter().zip(log_q.rows()).map(|(pr, qr)| {
        pr.iter()
            .zip(qr.iter())
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &lq)| a * (a.ln() - lq))
            .sum()
    })))
}

/// Previous-period latents and layer-1 distributions, computed once per period.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub items: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
    pub latents: Mat,
    pub layer1: Mat,
    pub t_global: f64,
}

impl Snapshot {
    pub fn build(prev: &Tokenizer, semantic: &EmbeddingTable, items: &[ItemId], t_global: f64) -> Result<Self> {
        let z = semantic.rows(items)?;
        let latents = prev.encode(z.view())?;
        let logp = layer1_log_probs(&latents, prev.codebook(0), t_global);
        Ok(Self {
            items: items.to_vec(),
            index: items.iter().enumerate().map(|(r, i)| (*i, r)).collect(),
            latents,
            layer1: logp.mapv(f64::exp),
            t_global,
        })
    }

    pub fn rows(&self, items: &[ItemId]) -> Result<(Mat, Mat)> {
        let idx: Vec<usize> = items
            .iter()
            .map(|i| {
                self.index
                    .get(i)
                    .copied()
                    .ok_or_else(|| DactError::Missing(format!("item {i} in adaptation snapshot")))
            })
            .collect::<Result<_>>()?;
        Ok((self.latents.select(Axis(0), &idx), self.layer1.select(Axis(0), &idx)))
    }
}

/// `log softmax(-||r - e_m||^2 / t)` over layer-1 codes, via the expanded
/// distance `||r||^2 + ||e||^2 - 2 r·e` used on the tape as well.
pub fn layer1_log_probs(latent: &Mat, codebook: &Mat, t: f64) -> Mat {
    let rn = latent.map_axis(Axis(1), |r| r.dot(&r));
    let en = codebook.map_axis(Axis(1), |e| e.dot(&e));
    let mut logits = latent.dot(&codebook.t()) * 2.0;
    for ((i, m), x) in logits.indexed_iter_mut() {
        *x = -(rn[i] + en[m] - *x) / t;
    }
    crate::autograd::log_softmax_rows(&logits)
}

fn tape_layer1_log_probs(tape: &mut Tape, latent: Var, codebook: Var, t: f64) -> Var {
    let rsq = tape.square(latent);
    let rn = tape.sum_rows(rsq);
    let esq = tape.square(codebook);
    let en = tape.sum_rows(esq);
    let en = tape.transpose(en);
    let cross = tape.matmul_bt(latent, codebook);
    let cross = tape.scale(cross, -2.0);
    let d = tape.add_col(cross, rn);
    let d = tape.add_row(d, en);
    let logits = tape.scale(d, -1.0 / t);
    tape.log_softmax_rows(logits)
}

/// How the hard top-K mask enters the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// `m + d − sg[d]` (and its mirror for the stationary branch).
    StraightThrough,
    /// Detached hard mask; CDIM then only sees the regularizer.
    Hard,
}

/// Everything one objective evaluation needs besides parameters.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub items: Vec<ItemId>,
    pub z: Mat,
    pub h: Mat,
    pub r_prev: Mat,
    pub p_prev: Mat,
    pub sg: StopGrad,
    /// Pins the partition and `sg[d]`; computed from current confidences when absent.
    pub gate: Option<(DriftPartition, Array1<f64>)>,
}

/// Tape handles of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub drift: Var,
    pub stable: Var,
    pub global: Var,
    pub reg: Var,
    pub anchor: Var,
    pub d: Var,
    pub per_item: Var,
}

/// Records `L_drift + θ L_stable + β L_global + ζ L_reg` for a batch.
#[allow(clippy::too_many_arguments)]
pub fn tape_objective(
    tape: &mut Tape,
    tok: &Tokenizer,
    s_tok: StoreRef,
    mem: &PatternMemory,
    s_mem: StoreRef,
    batch: &BatchInputs,
    w: &LossWeights,
    mode: GateMode,
) -> Result<(ObjectiveVars, DriftPartition)> {
    let n = batch.z.nrows();
    let l = tok.tape_losses(tape, s_tok, &batch.z, Some(&batch.h), &batch.sg)?;

    let q = build_query(batch.r_prev.view(), batch.sg.latent.view(), batch.h.view())?;
    let q = tape.constant(q);
    let out = mem.tape_confidence(tape, s_mem, q);
    let (part, d_sg) = match &batch.gate {
        Some(g) => g.clone(),
        None => {
            let d = tape.value(out.d).column(0).to_owned();
            (split_topk(d.as_slice().expect("contiguous"), &batch.items, w.k_ratio)?, d)
        }
    };
    let m = Array2::from_shape_fn((n, 1), |(i, _)| if part.mask[i] { 1.0 } else { 0.0 });
    let (g_d, g_s) = match mode {
        GateMode::StraightThrough => {
            let m_c = tape.constant(m.clone());
            let d_c = tape.constant(d_sg.clone().insert_axis(Axis(1)));
            let t = tape.sub(out.d, d_c);
            let g_d = tape.add(m_c, t);
            let one_minus = tape.constant(m.mapv(|x| 1.0 - x));
            let g_s = tape.sub(one_minus, t);
            (g_d, g_s)
        }
        GateMode::Hard => (tape.constant(m.clone()), tape.constant(m.mapv(|x| 1.0 - x))),
    };

    let rp = tape.constant(batch.r_prev.clone());
    let diff = tape.sub(l.latent, rp);
    let sq = tape.square(diff);
    let anchor = tape.sum_rows(sq);

    let wd = tape.mul(g_d, l.per_item);
    let drift_sum = tape.sum(wd);
    let drift = tape.scale(drift_sum, 1.0 / part.n_drift().max(1) as f64);
    let anchored = tape.scale(anchor, w.alpha);
    let stable_item = tape.add(l.per_item, anchored);
    let ws = tape.mul(g_s, stable_item);
    let stable_sum = tape.sum(ws);
    let stable = if part.n_stable() > 0 {
        tape.scale(stable_sum, 1.0 / part.n_stable() as f64)
    } else {
        tape.scale(stable_sum, 0.0)
    };

    let cb = tape.param(s_tok, tok.codebooks[0]);
    let log_q = tape_layer1_log_probs(tape, l.latent, cb, w.t_global);
    let p = tape.constant(batch.p_prev.clone());
    let cross = tape.mul(p, log_q);
    let cross = tape.sum_rows(cross);
    let plogp: f64 = batch.p_prev.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum();
    let cross_mean = tape.mean(cross);
    let neg = tape.scale(cross_mean, -1.0);
    let ent = tape.constant(Array2::from_elem((1, 1), plogp / n as f64));
    let global = tape.add(ent, neg);

    let dsq = tape.square(out.d);
    let reg = tape.mean(dsq);

    let t1 = tape.scale(stable, w.theta);
    let t2 = tape.scale(global, w.beta);
    let t3 = tape.scale(reg, w.zeta);
    let total = tape.add(drift, t1);
    let total = tape.add(total, t2);
    let total = tape.add(total, t3);
    Ok((
        ObjectiveVars {
            total,
            drift,
            stable,
            global,
            reg,
            anchor,
            d: out.d,
            per_item: l.per_item,
        },
        part,
    ))
}

/// Assembles batch inputs from tables and the snapshot.
pub fn batch_inputs(
    tok: &Tokenizer,
    semantic: &EmbeddingTable,
    cf: &EmbeddingTable,
    snapshot: &Snapshot,
    items: &[ItemId],
) -> Result<BatchInputs> {
    let z = semantic.rows(items)?;
    let h = cf.rows(items)?;
    let (r_prev, p_prev) = snapshot.rows(items)?;
    let sg = tok.stop_grad(z.view())?;
    Ok(BatchInputs {
        items: items.to_vec(),
        z,
        h,
        r_prev,
        p_prev,
        sg,
        gate: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptLog {
    pub steps: usize,
    pub first_total: f64,
    pub last_total: f64,
    pub final_global_kl: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub tokenizer: Tokenizer,
    pub memory: PatternMemory,
    pub confidences: BTreeMap<ItemId, f64>,
    pub log: AdaptLog,
}

/// Mean layer-1 KL between the snapshot and `tok` over `items`.
pub fn global_kl(tok: &Tokenizer, semantic: &EmbeddingTable, snapshot: &Snapshot, items: &[ItemId]) -> Result<f64> {
    let z = semantic.rows(items)?;
    let latent = tok.encode(z.view())?;
    let (_, p_prev) = snapshot.rows(items)?;
    let log_q = layer1_log_probs(&latent, tok.codebook(0), snapshot.t_global);
    Ok(kl_rows(&p_prev, &log_q)?.mean().unwrap_or(0.0))
}

/// Drift confidences for `items` under the given tokenizer and memory.
pub fn item_confidences(
    tok: &Tokenizer,
    mem: &PatternMemory,
    semantic: &EmbeddingTable,
    cf: &EmbeddingTable,
    snapshot: &Snapshot,
    items: &[ItemId],
) -> Result<BTreeMap<ItemId, f64>> {
    let z = semantic.rows(items)?;
    let h = cf.rows(items)?;
    let (r_prev, _) = snapshot.rows(items)?;
    let r_cur = tok.encode(z.view())?;
    let q = build_query(r_prev.view(), r_cur.view(), h.view())?;
    let c = mem.confidence(q.view())?;
    Ok(items.iter().copied().zip(c.d.iter().copied()).collect())
}

/// Joint training of tokenizer and drift memory for one period.
#[allow(clippy::too_many_arguments)]
pub fn adapt_period(
    prev: &Tokenizer,
    mem_prev: Option<&PatternMemory>,
    semantic: &EmbeddingTable,
    cf: &EmbeddingTable,
    items: &[ItemId],
    cfg: &AdaptConfig,
    period_index: usize,
    seed: u64,
) -> Result<AdaptOutcome> {
    cfg.weights.validate()?;
    if items.len() < 2 {
        return Err(DactError::Degenerate("adaptation needs at least two items".into()));
    }
    let mut cdim_cfg = cfg.cdim.clone();
    cdim_cfg.d_c = prev.config.d_c;
    let mut mem = match mem_prev {
        Some(m) => PatternMemory::warm_start(m, &cdim_cfg)?,
        None => PatternMemory::new(cdim_cfg, seed ^ 0xC0D1)?,
    };
    let mut tok = prev.clone();
    tok.config.lambda = cfg.weights.lambda;
    tok.config.mu = cfg.weights.mu;
    tok.period_index = period_index;
    let snapshot = Snapshot::build(prev, semantic, items, cfg.weights.t_global)?;

    let mut opt_tok = Adam::new(AdamConfig::with_lr(cfg.lr), &tok.store);
    let mut opt_mem = Adam::new(AdamConfig::with_lr(cfg.lr), &mem.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = items.len();
    let bs = cfg.batch_size.clamp(2, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut first_total = f64::NAN;
    let mut last_total = f64::NAN;
    for step in 0..cfg.steps {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch_items: Vec<ItemId> = order[cursor..cursor + bs].iter().map(|&i| items[i]).collect();
        cursor += bs;
        let batch = batch_inputs(&tok, semantic, cf, &snapshot, &batch_items)?;
        let (g_tok, g_mem) = {
            let mut tape = Tape::new();
            let s_tok = tape.bind(&tok.store);
            let s_mem = tape.bind(&mem.store);
            let (v, _) = tape_objective(
                &mut tape,
                &tok,
                s_tok,
                &mem,
                s_mem,
                &batch,
                &cfg.weights,
                GateMode::StraightThrough,
            )?;
            for (name, var) in [
                ("drift loss", v.drift),
                ("stable loss", v.stable),
                ("global KL", v.global),
                ("confidence regularizer", v.reg),
            ] {
                let value = tape.scalar(var);
                if !value.is_finite() {
                    return Err(DactError::Divergence {
                        step,
                        term: name.into(),
                        value,
                    });
                }
            }
            let total = tape.scalar(v.total);
            if step == 0 {
                first_total = total;
            }
            last_total = total;
            let mut g = tape.backward(v.total);
            (g.params(s_tok), g.params(s_mem))
        };
        opt_tok.step(&mut tok.store, &g_tok);
        opt_mem.step(&mut mem.store, &g_mem);
    }
    let confidences = item_confidences(&tok, &mem, semantic, cf, &snapshot, items)?;
    let final_global_kl = global_kl(&tok, semantic, &snapshot, items)?;
    Ok(AdaptOutcome {
        tokenizer: tok,
        memory: mem,
        confidences,
        log: AdaptLog {
            steps: cfg.steps,
            first_total,
            last_total,
            final_global_kl,
        },
    })
}

/// Naive continual update: the base objective on the period's items with the
/// same step budget and learning rate, no drift handling and no code re-seeding.
pub fn naive_finetune(
    prev: &Tokenizer,
    semantic: &EmbeddingTable,
    cf: &EmbeddingTable,
    items: &[ItemId],
    cfg: &AdaptConfig,
    period_index: usize,
    seed: u64,
) -> Result<Tokenizer> {
    if items.is_empty() {
        return Err(DactError::EmptyCorpus);
    }
    let mut tok = prev.clone();
    tok.config.lambda = cfg.weights.lambda;
    tok.config.mu = cfg.weights.mu;
    tok.period_index = period_index;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &tok.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = items.len();
    let bs = cfg.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for step in 0..cfg.steps {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch_items: Vec<ItemId> = order[cursor..cursor + bs].iter().map(|&i| items[i]).collect();
        cursor += bs;
        let z = semantic.rows(&batch_items)?;
        let h = cf.rows(&batch_items)?;
        let sg = tok.stop_grad(z.view())?;
        let grads = {
            let mut tape = Tape::new();
            let s = tape.bind(&tok.store);
            let l = tok.tape_losses(&mut tape, s, &z, Some(&h), &sg)?;
            let loss = tape.mean(l.per_item);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(DactError::Divergence {
                    step,
                    term: "tokenizer loss".into(),
                    value,
                });
            }
            tape.backward(loss).params(s)
        };
        opt.step(&mut tok.store, &grads);
    }
    Ok(tok)
}
