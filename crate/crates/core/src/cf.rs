//! Collaborative item embeddings from skip-gram with negative sampling over
//! user sequences, plus a check of how well embedding movement tracks
//! planted drift.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::data::{ItemId, PeriodDataset};
use crate::error::{DactError, Result};
use crate::table::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfConfig {
    pub d_cf: usize,
    pub epochs: usize,
    pub lr: f64,
    pub window: usize,
    pub negatives: usize,
    /// Start from the previous period's table when one is given. When false
    /// every period is trained from scratch and `prev` only supplies vectors
    /// for items absent from the period.
    pub warm_start: bool,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            d_cf: 32,
            epochs: 5,
            lr: 0.025,
            window: 3,
            negatives: 5,
            warm_start: true,
        }
    }
}

fn normalized(v: ArrayView1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v.mapv(|x| x / n)
    } else {
        v.to_owned()
    }
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Trains (or fine-tunes) item embeddings on one period.
///
/// The output covers every item of `pd` and of `prev`; items missing from
/// `pd` keep their previous vectors. All rows are unit-normalized.
pub fn train_cf(
    pd: &PeriodDataset,
    prev: Option<&EmbeddingTable>,
    cfg: &CfConfig,
    seed: u64,
) -> Result<EmbeddingTable> {
    if cfg.d_cf == 0 {
        return Err(DactError::config("d_cf must be positive"));
    }
    if let Some(p) = prev {
        crate::error::check_dim(cfg.d_cf, p.dim())?;
    }
    let mut vocab: BTreeSet<ItemId> = pd.item_set.clone();
    if let Some(p) = prev {
        vocab.extend(p.ids().iter().copied());
    }
    if vocab.is_empty() {
        return Err(DactError::EmptyCorpus);
    }
    let ids: Vec<ItemId> = vocab.into_iter().collect();
    let index: HashMap<ItemId, usize> = ids.iter().enumerate().map(|(r, id)| (*id, r)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1.0 / (cfg.d_cf as f64).sqrt()).expect("valid normal");
    let mut w_in = Array2::from_shape_fn((ids.len(), cfg.d_cf), |_| init.sample(&mut rng));
    let mut w_out = Array2::from_shape_fn((ids.len(), cfg.d_cf), |_| init.sample(&mut rng));
    if let (Some(p), true) = (prev, cfg.warm_start) {
        for (r, id) in ids.iter().enumerate() {
            if let Some(v) = p.get(*id) {
                w_in.row_mut(r).assign(&v);
                w_out.row_mut(r).assign(&v);
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut counts = vec![0.0f64; ids.len()];
    for seq in pd.user_sequences.values() {
        let rows: Vec<usize> = seq.iter().map(|i| index[i]).collect();
        for (a, &ra) in rows.iter().enumerate() {
            counts[ra] += 1.0;
            let lo = a.saturating_sub(cfg.window);
            let hi = (a + cfg.window + 1).min(rows.len());
            for (b, &rb) in rows.iter().enumerate().take(hi).skip(lo) {
                if b != a && rb != ra {
                    pairs.push((ra, rb));
                }
            }
        }
    }

    if !pairs.is_empty() {
        let noise = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75)))
            .map_err(|e| DactError::Degenerate(e.to_string()))?;
        let total = (cfg.epochs * pairs.len()).max(1) as f64;
        let mut done = 0.0;
        let mut grad_in = Array1::<f64>::zeros(cfg.d_cf);
        for _ in 0..cfg.epochs {
            pairs.shuffle(&mut rng);
            for &(center, ctx) in &pairs {
                let lr = cfg.lr * (1.0 - done / total).max(1e-4);
                done += 1.0;
                grad_in.fill(0.0);
                let mut targets = Vec::with_capacity(cfg.negatives + 1);
                targets.push((ctx, 1.0));
                for _ in 0..cfg.negatives {
                    let neg = noise.sample(&mut rng);
                    if neg != ctx && neg != center {
                        targets.push((neg, 0.0));
                    }
                }
                for (t, label) in targets {
                    let score = sigmoid(w_in.row(center).dot(&w_out.row(t)));
                    let g = lr * (label - score);
                    grad_in.scaled_add(g, &w_out.row(t));
                    let vin = w_in.row(center).to_owned();
                    w_out.row_mut(t).scaled_add(g, &vin);
                }
                w_in.row_mut(center).scaled_add(1.0, &grad_in);
            }
        }
    }

    let mut out = Array2::zeros((ids.len(), cfg.d_cf));
    for (r, id) in ids.iter().enumerate() {
        let keep_prev = !pd.item_set.contains(id) && prev.is_some_and(|p| p.contains(*id));
        let v = if keep_prev {
            prev.and_then(|p| p.get(*id)).expect("checked above").to_owned()
        } else {
            normalized(w_in.row(r))
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DactError::NonFinite(format!("cf vector for item {id}")));
        }
        out.row_mut(r).assign(&v);
    }
    EmbeddingTable::new(ids, out)
}

/// Mann-Whitney AUC of `scores` against binary `labels`; ties earn half credit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    crate::error::check_dim(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DactError::Degenerate(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tied groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// AUC of the drift score `1 − cos(cf_p[i], cf_prev[i])` against planted labels,
/// over items present in both tables and in `labels`.
pub fn drift_ground_truth_check(
    cf_p: &EmbeddingTable,
    cf_prev: &EmbeddingTable,
    labels: &BTreeMap<ItemId, bool>,
) -> Result<f64> {
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for (&item, &label) in labels {
        if let (Some(a), Some(b)) = (cf_p.get(item), cf_prev.get(item)) {
            // Quantized so that numerically identical vectors tie exactly.
            let score = 1.0 - cosine(a, b);
            scores.push((score * 1e12).round() / 1e12);
            truth.push(label);
        }
    }
    if scores.is_empty() {
        return Err(DactError::Degenerate("tables share no labeled items".into()));
    }
    auc(&scores, &truth)
}

/// Random-feature stand-in used when a seed-specific table is needed in tests.
pub fn random_table(items: &[ItemId], dim: usize, rng: &mut impl Rng) -> EmbeddingTable {
    let dist = Normal::<f64>::new(0.0, 1.0).expect("valid normal");
    let mut data: Array2<f64> = Array2::from_shape_fn((items.len(), dim), |_| dist.sample(rng));
    for mut row in data.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|x| x / n);
    }
    EmbeddingTable::new(items.to_vec(), data).expect("ids are distinct")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_periods, InteractionEvent, UserId};

    fn pd_from(seqs: &[Vec<u32>]) -> PeriodDataset {
        let mut events = Vec::new();
        let mut t = 0;
        for (u, seq) in seqs.iter().enumerate() {
            for &i in seq {
                events.push(InteractionEvent {
                    user: UserId(u as u32),
                    item: ItemId(i),
                    timestamp: t,
                });
                t += 1;
            }
        }
        // Put everything into P0 by building periods and merging.
        let periods = build_periods(events.clone());
        let mut pd = periods[0].clone();
        pd.events = events.clone();
        pd.item_set = events.iter().map(|e| e.item).collect();
        pd.user_sequences.clear();
        for e in &events {
            pd.user_sequences.entry(e.user).or_default().push(e.item);
        }
        pd
    }

    #[test]
    fn auc_matches_pair_counting() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4];
        let labels = [false, true, false, true, false];
        // Oracle: count positive/negative pairs directly.
        let mut wins = 0.0;
        let mut n = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    n += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        assert!((auc(&scores, &labels).unwrap() - wins / n).abs() < 1e-12);
    }

    #[test]
    fn identical_tables_give_half_auc() {
        let items: Vec<ItemId> = (0..6).map(ItemId).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_table(&items, 4, &mut rng);
        let labels = items.iter().map(|&i| (i, i.0 % 2 == 0)).collect();
        assert!((drift_ground_truth_check(&t, &t, &labels).unwrap() - 0.5).abs() < 1e-12);
        let stationary = items.iter().map(|&i| (i, false)).collect();
        assert!(drift_ground_truth_check(&t, &t, &stationary).is_err());
    }

    #[test]
    fn co_occurring_pair_ends_up_closer() {
        let mut seqs = Vec::new();
        for _ in 0..40 {
            seqs.push(vec![0, 1]);
            seqs.push(vec![2]);
            seqs.push(vec![3]);
        }
        seqs.push(vec![2, 3, 2, 3, 2, 3]);
        let pd = pd_from(&seqs);
        let cfg = CfConfig {
            d_cf: 8,
            epochs: 30,
            ..CfConfig::default()
        };
        let t = train_cf(&pd, None, &cfg, 3).unwrap();
        let v = |i: u32| t.get(ItemId(i)).unwrap();
        let pair = cosine(v(0), v(1));
        let off = [(0, 2), (0, 3), (1, 2), (1, 3)]
            .iter()
            .map(|&(a, b)| cosine(v(a), v(b)))
            .sum::<f64>()
            / 4.0;
        assert!(pair > off, "pair {pair} vs off {off}");
    }

    #[test]
    fn warm_start_on_empty_period_is_identity() {
        let items: Vec<ItemId> = (0..5).map(ItemId).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prev = random_table(&items, 6, &mut rng);
        let mut pd = pd_from(&[]);
        pd.item_set.clear();
        let cfg = CfConfig {
            d_cf: 6,
            ..CfConfig::default()
        };
        let out = train_cf(&pd, Some(&prev), &cfg, 0).unwrap();
        assert_eq!(out, prev);
    }

    #[test]
    fn outputs_are_unit_norm_and_deterministic() {
        let pd = pd_from(&[vec![0, 1, 2, 3], vec![3, 2, 4], vec![7]]);
        let cfg = CfConfig {
            d_cf: 5,
            ..CfConfig::default()
        };
        let a = train_cf(&pd, None, &cfg, 9).unwrap();
        let b = train_cf(&pd, None, &cfg, 9).unwrap();
        assert_eq!(a, b);
        for row in a.matrix().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(train_cf(&pd, None, &CfConfig { d_cf: 0, ..cfg }, 0).is_err());
    }
}
