//! Collaboration-aware RQ-VAE tokenizer: encoder, residual codebooks,
//! decoder, the base training objective and identifier assignment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamId, ParamStore, StoreRef, Tape, Var};
use crate::checkpoint;
use crate::data::ItemId;
use crate::error::{check_dim, DactError, Result};
use crate::nn::{Activation, Adam, AdamConfig, Linear, Mlp};
use crate::table::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub d_sem: usize,
    pub hidden: Vec<usize>,
    pub d_c: usize,
    pub levels: usize,
    pub codes: usize,
    /// Assignment temperature for the code distributions.
    pub temperature: f64,
    pub mu: f64,
    pub lambda: f64,
    pub d_cf: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            d_sem: 64,
            hidden: vec![128, 64],
            d_c: 32,
            levels: 3,
            codes: 64,
            temperature: 1.0,
            mu: 0.25,
            lambda: 0.02,
            d_cf: 32,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.codes < 2 {
            return Err(DactError::config("need at least one level and two codes per level"));
        }
        if !(self.temperature > 0.0) {
            return Err(DactError::config("assignment temperature must be positive"));
        }
        if self.d_sem == 0 || self.d_c == 0 || self.d_cf == 0 || self.mu < 0.0 || self.lambda < 0.0 {
            return Err(DactError::config("dimensions must be positive and loss weights non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Re-seed codes that went unused for a full epoch.
    pub reseed_dead: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            reseed_dead: true,
        }
    }
}

/// Result of one level of residual quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub index: usize,
    pub probs: Array1<f64>,
    pub next_residual: Array1<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distances from every row of `v` to every code: `n x M`.
pub fn code_distances(codebook: &Mat, v: ArrayView2<f64>) -> Mat {
    Array2::from_shape_fn((v.nrows(), codebook.nrows()), |(i, m)| sq_dist(v.row(i), codebook.row(m)))
}

fn argmin_lowest(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (m, &d) in row.iter().enumerate() {
        if d < row[best] {
            best = m;
        }
    }
    best
}

fn softmax_neg(dists: ArrayView1<f64>, t: f64) -> Array1<f64> {
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let w = dists.mapv(|d| (-(d - min) / t).exp());
    let s = w.sum();
    w / s
}

/// Picks the nearest code for one residual (ties go to the lowest index).
pub fn assign_level(codebook: &Mat, v: ArrayView1<f64>, temperature: f64) -> Result<Assignment> {
    check_dim(codebook.ncols(), v.len())?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(DactError::NonFinite("residual passed to assign_level".into()));
    }
    let dists = Array1::from_iter(codebook.rows().into_iter().map(|e| sq_dist(v, e)));
    let index = argmin_lowest(dists.view());
    Ok(Assignment {
        index,
        probs: softmax_neg(dists.view(), temperature),
        next_residual: &v - &codebook.row(index),
    })
}

/// Codes, quantized vectors and the residual chain for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    /// `codes[i][l]`.
    pub codes: Vec<Vec<usize>>,
    pub r_hat: Mat,
    /// `residuals[l]` holds `v_{l+1}` for every row; `residuals[0]` is the latent.
    pub residuals: Vec<Mat>,
}

/// Plain residual quantization of latents against a codebook stack.
pub fn quantize(codebooks: &[&Mat], latent: &Mat) -> Quantized {
    let n = latent.nrows();
    let mut codes = vec![Vec::with_capacity(codebooks.len()); n];
    let mut residuals = vec![latent.clone()];
    let mut r_hat = Array2::zeros(latent.dim());
    for cb in codebooks {
        let v = residuals.last().expect("non-empty");
        let d = code_distances(cb, v.view());
        let mut next = v.clone();
        for i in 0..n {
            let c = argmin_lowest(d.row(i));
            codes[i].push(c);
            let e = cb.row(c);
            next.row_mut(i).scaled_add(-1.0, &e);
            r_hat.row_mut(i).scaled_add(1.0, &e);
        }
        residuals.push(next);
    }
    Quantized { codes, r_hat, residuals }
}

/// Values held fixed by stop-gradients during one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StopGrad {
    pub latent: Mat,
    pub codes: Vec<Vec<usize>>,
    pub codebooks: Vec<Mat>,
}

/// Tape handles produced by [`Tokenizer::tape_losses`]; per-item terms are `n x 1`.
#[derive(Debug, Clone, Copy)]
pub struct TokLosses {
    pub latent: Var,
    pub r_hat: Var,
    pub recon: Var,
    pub rq: Var,
    pub cf: Option<Var>,
    pub per_item: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    pub probe_initial: f64,
    pub probe_final: f64,
    pub recon_initial: f64,
    pub recon_final: f64,
    pub reseeded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub store: ParamStore,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: Vec<ParamId>,
    pub cf_proj: Option<Linear>,
    pub period_index: usize,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut enc_dims = vec![config.d_sem];
        enc_dims.extend(&config.hidden);
        enc_dims.push(config.d_c);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let encoder = Mlp::new(&mut store, "encoder", &enc_dims, Activation::Relu, rng);
        let decoder = Mlp::new(&mut store, "decoder", &dec_dims, Activation::Relu, rng);
        let codebooks = (0..config.levels)
            .map(|l| {
                let e = crate::nn::normal_matrix(config.codes, config.d_c, 0.1, rng);
                store.add(format!("codebook.{l}"), e)
            })
            .collect();
        let cf_proj = (config.d_cf != config.d_c)
            .then(|| Linear::new(&mut store, "cf_proj", config.d_c, config.d_cf, rng));
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            codebooks,
            cf_proj,
            period_index: 0,
        })
    }

    pub fn codebook(&self, level: usize) -> &Mat {
        self.store.get(self.codebooks[level])
    }

    fn codebook_refs(&self) -> Vec<&Mat> {
        self.codebooks.iter().map(|&id| self.store.get(id)).collect()
    }

    pub fn encode(&self, z: ArrayView2<f64>) -> Result<Mat> {
        check_dim(self.config.d_sem, z.ncols())?;
        Ok(self.encoder.forward_plain(&self.store, z))
    }

    pub fn decode(&self, r: ArrayView2<f64>) -> Result<Mat> {
        check_dim(self.config.d_c, r.ncols())?;
        Ok(self.decoder.forward_plain(&self.store, r))
    }

    pub fn quantize_latent(&self, latent: &Mat) -> Quantized {
        quantize(&self.codebook_refs(), latent)
    }

    /// Encodes and quantizes a batch of semantic vectors.
    pub fn tokenize(&self, z: ArrayView2<f64>) -> Result<Quantized> {
        let latent = self.encode(z)?;
        if latent.iter().any(|x| !x.is_finite()) {
            return Err(DactError::NonFinite("encoder output".into()));
        }
        Ok(self.quantize_latent(&latent))
    }

    /// Assignment distributions `p(m | v)` at one level for a batch of residuals.
    pub fn distributions(&self, v: ArrayView2<f64>, level: usize) -> Mat {
        let d = code_distances(self.codebook(level), v);
        let mut out = Array2::zeros(d.dim());
        for (i, row) in d.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&softmax_neg(row, self.config.temperature));
        }
        out
    }

    pub fn stop_grad(&self, z: ArrayView2<f64>) -> Result<StopGrad> {
        let q = self.tokenize(z)?;
        Ok(StopGrad {
            latent: q.residuals[0].clone(),
            codes: q.codes,
            codebooks: self.codebook_refs().into_iter().cloned().collect(),
        })
    }

    /// Records the base tokenizer objective for a batch on `tape`.
    ///
    /// `h` holds the batch's collaborative embeddings; it is ignored when
    /// `lambda == 0`. All stop-gradient values come from `sg`.
    pub fn tape_losses(
        &self,
        tape: &mut Tape,
        s: StoreRef,
        z: &Mat,
        h: Option<&Mat>,
        sg: &StopGrad,
    ) -> Result<TokLosses> {
        check_dim(self.config.d_sem, z.ncols())?;
        let n = z.nrows();
        let zc = tape.constant(z.clone());
        let latent = self.encoder.forward(tape, s, zc);

        let mut prefix = Array2::<f64>::zeros((n, self.config.d_c));
        let mut rq: Option<Var> = None;
        let mut e_sum: Option<Var> = None;
        for (l, &cb_id) in self.codebooks.iter().enumerate() {
            let idx: Vec<usize> = sg.codes.iter().map(|c| c[l]).collect();
            let cb = tape.param(s, cb_id);
            let e = tape.gather_rows(cb, &idx);
            let e_sg = sg.codebooks[l].select(Axis(0), &idx);

            // Codebook term: ||sg[v_l] - e_l||^2.
            let v_sg = tape.constant(&sg.latent - &prefix);
            let d1 = tape.sub(v_sg, e);
            let d1 = tape.square(d1);
            let t1 = tape.sum_rows(d1);
            // Commitment term: mu ||v_l - sg[e_l]||^2 with v_l = r - sum_{k<l} sg[e_k].
            let pre = tape.constant(prefix.clone());
            let v = tape.sub(latent, pre);
            let e_c = tape.constant(e_sg.clone());
            let d2 = tape.sub(v, e_c);
            let d2 = tape.square(d2);
            let t2 = tape.sum_rows(d2);
            let t2 = tape.scale(t2, self.config.mu);
            let term = tape.add(t1, t2);
            rq = Some(match rq {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
            e_sum = Some(match e_sum {
                Some(acc) => tape.add(acc, e),
                None => e,
            });
            prefix += &e_sg;
        }
        let rq = rq.expect("at least one level");
        // Straight-through: forward value r_hat, gradient copied to the latent.
        let lat_sg = tape.constant(sg.latent.clone());
        let st = tape.sub(latent, lat_sg);
        let r_hat = tape.add(e_sum.expect("at least one level"), st);

        let z_hat = self.decoder.forward(tape, s, r_hat);
        let diff = tape.sub(zc, z_hat);
        let sq = tape.square(diff);
        let recon = tape.sum_rows(sq);

        let mut per_item = tape.add(recon, rq);
        let mut cf = None;
        if self.config.lambda > 0.0 {
            if let Some(h) = h {
                let c = self.tape_cf_loss(tape, s, r_hat, h)?;
                let weighted = tape.scale(c, self.config.lambda);
                per_item = tape.add(per_item, weighted);
                cf = Some(c);
            }
        }
        Ok(TokLosses {
            latent,
            r_hat,
            recon,
            rq,
            cf,
            per_item,
        })
    }

    /// Per-anchor contrastive loss between quantized vectors and CF embeddings.
    pub fn tape_cf_loss(&self, tape: &mut Tape, s: StoreRef, r_hat: Var, h: &Mat) -> Result<Var> {
        check_dim(self.config.d_cf, h.ncols())?;
        let a = match &self.cf_proj {
            Some(p) => p.forward(tape, s, r_hat),
            None => r_hat,
        };
        check_dim(tape.value(a).nrows(), h.nrows())?;
        cf_loss_on_tape(tape, a, h)
    }

    /// Full-batch objective values `(mean total, mean recon)` without gradients.
    pub fn objective(&self, z: &Mat, h: Option<&Mat>) -> Result<(f64, f64)> {
        let sg = self.stop_grad(z.view())?;
        let mut tape = Tape::new();
        let s = tape.bind(&self.store);
        let l = self.tape_losses(&mut tape, s, z, h, &sg)?;
        let total = tape.value(l.per_item).mean().unwrap_or(0.0);
        let recon = tape.value(l.recon).mean().unwrap_or(0.0);
        Ok((total, recon))
    }

    /// Sets each level's codes to randomly chosen residuals of the data.
    pub fn init_codebooks_from_data(&mut self, z: &Mat, rng: &mut impl Rng) -> Result<()> {
        let mut v = self.encode(z.view())?;
        let n = v.nrows();
        if n == 0 {
            return Err(DactError::EmptyCorpus);
        }
        for l in 0..self.config.levels {
            let mut pick: Vec<usize> = (0..n).collect();
            pick.shuffle(rng);
            let cb = Array2::from_shape_fn((self.config.codes, self.config.d_c), |(m, j)| {
                let row = if m < n { pick[m] } else { rng.random_range(0..n) };
                v[[row, j]] + if m < n { 0.0 } else { 1e-3 * (rng.random::<f64>() - 0.5) }
            });
            let q = quantize(&[&cb], &v);
            *self.store.get_mut(self.codebooks[l]) = cb;
            v = q.residuals[1].clone();
        }
        Ok(())
    }

    /// Trains encoder, decoder and codebooks on the base objective.
    pub fn pretrain(
        &mut self,
        semantic: &EmbeddingTable,
        cf: Option<&EmbeddingTable>,
        items: &[ItemId],
        cfg: &PretrainConfig,
        seed: u64,
    ) -> Result<TrainLog> {
        let z_all = semantic.rows(items)?;
        let h_all = match cf {
            Some(t) if self.config.lambda > 0.0 => Some(t.rows(items)?),
            _ => None,
        };
        let (probe_initial, recon_initial) = self.objective(&z_all, h_all.as_ref())?;
        if cfg.steps == 0 {
            return Ok(TrainLog {
                steps: 0,
                probe_initial,
                probe_final: probe_initial,
                recon_initial,
                recon_final: recon_initial,
                reseeded: 0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_codebooks_from_data(&z_all, &mut rng)?;
        let (probe_initial, recon_initial) = self.objective(&z_all, h_all.as_ref())?;

        let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &self.store);
        let n = items.len();
        let bs = cfg.batch_size.clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut used = vec![vec![false; self.config.codes]; self.config.levels];
        let mut reseeded = 0;
        for step in 0..cfg.steps {
            if cursor + bs > n {
                if step > 0 && cfg.reseed_dead {
                    reseeded += self.reseed_dead(&z_all, &used, &mut rng)?;
                }
                used.iter_mut().for_each(|u| u.fill(false));
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let z = z_all.select(Axis(0), idx);
            let h = h_all.as_ref().map(|h| h.select(Axis(0), idx));
            let sg = self.stop_grad(z.view())?;
            for codes in &sg.codes {
                for (l, &c) in codes.iter().enumerate() {
                    used[l][c] = true;
                }
            }
            let grads = {
                let mut tape = Tape::new();
                let s = tape.bind(&self.store);
                let l = self.tape_losses(&mut tape, s, &z, h.as_ref(), &sg)?;
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
            opt.step(&mut self.store, &grads);
        }
        let (probe_final, recon_final) = self.objective(&z_all, h_all.as_ref())?;
        Ok(TrainLog {
            steps: cfg.steps,
            probe_initial,
            probe_final,
            recon_initial,
            recon_final,
            reseeded,
        })
    }

    fn reseed_dead(&mut self, z_all: &Mat, used: &[Vec<bool>], rng: &mut impl Rng) -> Result<usize> {
        let q = self.tokenize(z_all.view())?;
        let n = z_all.nrows();
        let mut count = 0;
        for (l, used_l) in used.iter().enumerate() {
            let residual = &q.residuals[l];
            let cb = self.store.get_mut(self.codebooks[l]);
            for (m, &u) in used_l.iter().enumerate() {
                if !u {
                    cb.row_mut(m).assign(&residual.row(rng.random_range(0..n)));
                    count += 1;
                }
            }
        }
        Ok(count)
    }

    /// Tokenizes `items` and resolves code collisions with suffixes.
    pub fn assign_identifiers(&self, semantic: &EmbeddingTable, items: &[ItemId]) -> Result<Identifiers> {
        let z = semantic.rows(items)?;
        let q = self.tokenize(z.view())?;
        Ok(dedup_in_order(items.iter().copied().zip(q.codes).collect()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config });
        checkpoint::save_store(dir, "tokenizer", Some(self.period_index), meta, &[("tokenizer.", &self.store)])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = checkpoint::read_arrays(dir)?;
        let config: TokenizerConfig = serde_json::from_value(manifest.meta["config"].clone())?;
        let mut tok = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        checkpoint::load_into_store(&arrays, "tokenizer.", &mut tok.store)?;
        tok.period_index = manifest.period_index.unwrap_or(0);
        Ok(tok)
    }
}

/// `-log softmax_j cos(a_j, h_i)` at `j = i` for every anchor `i`, as `n x 1`.
pub fn cf_loss_on_tape(tape: &mut Tape, a: Var, h: &Mat) -> Result<Var> {
    let zero_row = |m: &Mat| m.rows().into_iter().any(|r| r.dot(&r) <= 1e-24);
    if zero_row(tape.value(a)) || zero_row(h) {
        return Err(DactError::Degenerate("zero-norm vector in collaborative loss".into()));
    }
    let n = h.nrows();
    let a_n = tape.normalize_rows(a);
    let hc = tape.constant(h.clone());
    let h_n = tape.normalize_rows(hc);
    let sims = tape.matmul_bt(h_n, a_n);
    let ls = tape.log_softmax_rows(sims);
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.pick_cols(ls, &diag);
    Ok(tape.scale(picked, -1.0))
}

/// An item's identifier: `L` codes plus a collision suffix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence {
    pub codes: Vec<usize>,
    pub suffix: usize,
}

pub type Identifiers = BTreeMap<ItemId, TokenSequence>;

/// Gives colliding code paths suffixes `0, 1, …` in item-id order.
pub fn dedup_in_order(mut raw: Vec<(ItemId, Vec<usize>)>) -> Identifiers {
    raw.sort_by_key(|(id, _)| *id);
    let mut next: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    raw.into_iter()
        .map(|(id, codes)| {
            let slot = next.entry(codes.clone()).or_insert(0);
            let suffix = *slot;
            *slot += 1;
            (id, TokenSequence { codes, suffix })
        })
        .collect()
}

/// Fraction of items whose code path is shared with another item.
pub fn collision_rate(ids: &Identifiers) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    for t in ids.values() {
        *counts.entry(&t.codes).or_default() += 1;
    }
    let colliding: usize = counts.values().filter(|&&c| c > 1).sum();
    colliding as f64 / ids.len() as f64
}

pub fn write_identifiers_tsv(path: &Path, ids: &Identifiers) -> Result<()> {
    let mut text = String::new();
    for (item, t) in ids {
        text.push_str(&item.to_string());
        for c in &t.codes {
            text.push_str(&format!("\t{c}"));
        }
        text.push_str(&format!("\t{}\n", t.suffix));
    }
    fs::write(path, text).map_err(|e| DactError::io(path, e))
}

pub fn read_identifiers_tsv(path: &Path) -> Result<Identifiers> {
    let text = fs::read_to_string(path).map_err(|e| DactError::io(path, e))?;
    let mut out = Identifiers::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| DactError::Parse {
                line: n as u64 + 1,
                reason: format!("invalid integer `{s}`"),
            })
        };
        if fields.len() < 3 {
            return Err(DactError::Parse {
                line: n as u64 + 1,
                reason: "identifier rows need an item id, codes and a suffix".into(),
            });
        }
        let item = ItemId(parse(fields[0])? as u32);
        let codes = fields[1..fields.len() - 1].iter().map(|s| parse(s)).collect::<Result<_>>()?;
        let suffix = parse(fields[fields.len() - 1])?;
        out.insert(item, TokenSequence { codes, suffix });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_config() -> TokenizerConfig {
        TokenizerConfig {
            d_sem: 6,
            hidden: vec![8],
            d_c: 4,
            levels: 3,
            codes: 5,
            d_cf: 4,
            ..TokenizerConfig::default()
        }
    }

    #[test]
    fn nearest_of_three_codes() {
        let cb = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let a = assign_level(&cb, array![0.9, 0.1].view(), 1.0).unwrap();
        assert_eq!(a.index, 1);
        assert!((a.next_residual[0] + 0.1).abs() < 1e-12);
        assert!((a.next_residual[1] - 0.1).abs() < 1e-12);
        assert!((a.probs.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equidistant_point_gives_uniform_probs_and_index_zero() {
        let cb = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let a = assign_level(&cb, array![0.0, 0.0].view(), 1.0).unwrap();
        assert_eq!(a.index, 0);
        assert!(a.probs.iter().all(|p| (p - 0.25).abs() < 1e-12));
        assert!(assign_level(&cb, array![f64::NAN, 0.0].view(), 1.0).is_err());
    }

    #[test]
    fn zero_encoder_maps_everything_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tok = Tokenizer::new(small_config(), &mut rng).unwrap();
        for layer in tok.encoder.layers.clone() {
            tok.store.get_mut(layer.weight).fill(0.0);
            tok.store.get_mut(layer.bias).fill(0.0);
        }
        let z = crate::nn::normal_matrix(3, 6, 1.0, &mut rng);
        assert!(tok.encode(z.view()).unwrap().iter().all(|&x| x == 0.0));
        assert!(tok.encode(Array2::zeros((1, 5)).view()).is_err());
    }

    #[test]
    fn single_level_r_hat_is_the_chosen_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tok = Tokenizer::new(TokenizerConfig { levels: 1, ..small_config() }, &mut rng).unwrap();
        let z = crate::nn::normal_matrix(4, 6, 1.0, &mut rng);
        let q = tok.tokenize(z.view()).unwrap();
        for i in 0..4 {
            assert_eq!(q.r_hat.row(i), tok.codebook(0).row(q.codes[i][0]));
        }
    }

    #[test]
    fn cf_loss_single_and_uniform_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0]]);
        let l = cf_loss_on_tape(&mut tape, a, &array![[0.5, -1.0]]).unwrap();
        assert_eq!(tape.value(l)[[0, 0]], 0.0);

        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let h = array![[0.0, 1.0], [0.0, 2.0], [0.0, 3.0]];
        let l = cf_loss_on_tape(&mut tape, a, &h).unwrap();
        assert!(tape.value(l).iter().all(|x| (x - 3f64.ln()).abs() < 1e-12));

        let mut tape = Tape::new();
        let a = tape.constant(array![[0.0, 0.0]]);
        assert!(cf_loss_on_tape(&mut tape, a, &array![[1.0, 0.0]]).is_err());
    }

    #[test]
    fn dedup_assigns_suffixes_in_item_order() {
        let ids = dedup_in_order(vec![
            (ItemId(5), vec![1, 2, 3]),
            (ItemId(2), vec![1, 2, 3]),
            (ItemId(9), vec![0, 0, 0]),
        ]);
        assert_eq!(ids[&ItemId(2)].suffix, 0);
        assert_eq!(ids[&ItemId(5)].suffix, 1);
        assert_eq!(ids[&ItemId(9)].suffix, 0);
        assert!((collision_rate(&ids) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identifiers_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids = dedup_in_order(vec![(ItemId(3), vec![4, 0, 1]), (ItemId(1), vec![4, 0, 1])]);
        let path = dir.path().join("ids.tsv");
        write_identifiers_tsv(&path, &ids).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "1\t4\t0\t1\t0\n3\t4\t0\t1\t1\n");
        assert_eq!(read_identifiers_tsv(&path).unwrap(), ids);
    }

    #[test]
    fn checkpoint_round_trip_rounds_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tok = Tokenizer::new(small_config(), &mut rng).unwrap();
        tok.store.round_to_f32();
        tok.period_index = 2;
        tok.save(dir.path()).unwrap();
        assert_eq!(Tokenizer::load(dir.path()).unwrap(), tok);
    }
}
