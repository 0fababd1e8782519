//! Period-to-period identifier maintenance: hierarchical reassignment that
//! only recomputes deeper codes when the first-layer code moves, plus the
//! full re-tokenization and extend-only policies used by the baselines.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ItemId;
use crate::error::{DactError, Result};
use crate::par;
use crate::table::EmbeddingTable;
use crate::tokenizer::{dedup_in_order, Identifiers, TokenSequence, Tokenizer};

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Layer-1 always recomputed; deeper codes only when layer 1 changed.
    Hierarchical,
    /// Every item re-tokenized from scratch, suffixes rebuilt in item order.
    Full,
    /// Existing identifiers kept verbatim; only new items are tokenized.
    ExtendOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemChange {
    pub item: ItemId,
    pub old: TokenSequence,
    pub new: TokenSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReassignmentReport {
    /// Fraction of previously identified items whose code at each layer changed.
    pub layer_rates: Vec<f64>,
    /// Fraction whose code path changed at one or more layers.
    pub overall: f64,
    pub n_existing: usize,
    pub n_new: usize,
    pub changes: Vec<ItemChange>,
}

impl ReassignmentReport {
    pub fn changed_items(&self) -> Vec<ItemId> {
        self.changes.iter().map(|c| c.item).collect()
    }
}

/// Code paths for `items` under `tok`, tokenized in parallel chunks.
pub fn fresh_codes(tok: &Tokenizer, semantic: &EmbeddingTable, items: &[ItemId]) -> Result<Vec<Vec<usize>>> {
    let z = semantic.rows(items)?;
    let n = z.nrows();
    let chunks = n.div_ceil(CHUNK);
    let parts = par::map_range(chunks, |c| {
        let rows = z.slice(s![c * CHUNK..((c + 1) * CHUNK).min(n), ..]);
        tok.tokenize(rows).map(|q| q.codes)
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Layer-1 codes only (what the hierarchical rule compares first).
pub fn layer1_codes(tok: &Tokenizer, semantic: &EmbeddingTable, items: &[ItemId]) -> Result<Vec<usize>> {
    let z = semantic.rows(items)?;
    let latent = tok.encode(z.view())?;
    let d = crate::tokenizer::code_distances(tok.codebook(0), latent.view());
    Ok(d.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (m, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = m;
                }
            }
            best
        })
        .collect())
}

/// Compares two identifier maps over the items present in both.
pub fn compare(prev: &Identifiers, next: &Identifiers, levels: usize) -> ReassignmentReport {
    let mut layer_changes = vec![0usize; levels];
    let mut n_existing = 0;
    let mut changes = Vec::new();
    let mut any = 0;
    for (item, new) in next {
        let Some(old) = prev.get(item) else { continue };
        n_existing += 1;
        let mut changed = false;
        for (l, count) in layer_changes.iter_mut().enumerate() {
            if old.codes.get(l) != new.codes.get(l) {
                *count += 1;
                changed = true;
            }
        }
        if changed {
            any += 1;
        }
        if old != new {
            changes.push(ItemChange {
                item: *item,
                old: old.clone(),
                new: new.clone(),
            });
        }
    }
    let rate = |c: usize| if n_existing == 0 { 0.0 } else { c as f64 / n_existing as f64 };
    ReassignmentReport {
        layer_rates: layer_changes.into_iter().map(rate).collect(),
        overall: rate(any),
        n_existing,
        n_new: next.keys().filter(|i| !prev.contains_key(i)).count(),
        changes,
    }
}

/// Gives each pending item the smallest suffix not already taken for its codes.
fn allocate(kept: &mut Identifiers, pending: Vec<(ItemId, Vec<usize>)>) {
    let mut taken: BTreeSet<(Vec<usize>, usize)> = kept.values().map(|t| (t.codes.clone(), t.suffix)).collect();
    for (item, codes) in pending {
        let mut suffix = 0;
        while taken.contains(&(codes.clone(), suffix)) {
            suffix += 1;
        }
        taken.insert((codes.clone(), suffix));
        kept.insert(item, TokenSequence { codes, suffix });
    }
}

/// Produces period-`p` identifiers for `items` from the previous map.
pub fn reassign(
    tok: &Tokenizer,
    prev: &Identifiers,
    semantic: &EmbeddingTable,
    items: &[ItemId],
    policy: Policy,
) -> Result<(Identifiers, ReassignmentReport)> {
    let mut items: Vec<ItemId> = items.to_vec();
    items.sort();
    items.dedup();
    for i in &items {
        if !prev.contains_key(i) && !semantic.contains(*i) {
            return Err(DactError::Missing(format!(
                "item {i} has neither a previous identifier nor a semantic embedding"
            )));
        }
    }
    let next = match policy {
        Policy::Full => dedup_in_order(items.iter().copied().zip(fresh_codes(tok, semantic, &items)?).collect()),
        Policy::ExtendOnly => {
            let new: Vec<ItemId> = items.iter().copied().filter(|i| !prev.contains_key(i)).collect();
            let codes = if new.is_empty() {
                Vec::new()
            } else {
                fresh_codes(tok, semantic, &new)?
            };
            let mut kept: Identifiers = items
                .iter()
                .filter_map(|i| prev.get(i).map(|t| (*i, t.clone())))
                .collect();
            allocate(&mut kept, new.into_iter().zip(codes).collect());
            kept
        }
        Policy::Hierarchical => {
            let fresh = fresh_codes(tok, semantic, &items)?;
            let mut kept = Identifiers::new();
            let mut pending = Vec::new();
            for (item, codes) in items.iter().zip(fresh) {
                match prev.get(item) {
                    Some(old) if old.codes.first() == codes.first() => {
                        kept.insert(*item, old.clone());
                    }
                    _ => pending.push((*item, codes)),
                }
            }
            allocate(&mut kept, pending);
            kept
        }
    };
    let report = compare(prev, &next, tok.config.levels);
    Ok((next, report))
}

/// Checks that `(codes, suffix)` pairs are unique.
pub fn is_unique(ids: &Identifiers) -> bool {
    let mut seen = BTreeSet::new();
    ids.values().all(|t| seen.insert((t.codes.clone(), t.suffix)))
}

/// Per-layer and overall change rates as a flat row for tables.
pub fn rates_row(r: &ReassignmentReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (l, v) in r.layer_rates.iter().enumerate() {
        out.insert(format!("layer{}", l + 1), *v);
    }
    out.insert("overall".into(), r.overall);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(codes: &[usize], suffix: usize) -> TokenSequence {
        TokenSequence {
            codes: codes.to_vec(),
            suffix,
        }
    }

    #[test]
    fn allocation_never_disturbs_kept_items() {
        let mut kept: Identifiers = [(ItemId(1), ts(&[1, 2, 3], 0)), (ItemId(2), ts(&[1, 2, 3], 2))]
            .into_iter()
            .collect();
        allocate(
            &mut kept,
            vec![(ItemId(7), vec![1, 2, 3]), (ItemId(8), vec![1, 2, 3]), (ItemId(9), vec![0, 0, 0])],
        );
        assert_eq!(kept[&ItemId(1)].suffix, 0);
        assert_eq!(kept[&ItemId(2)].suffix, 2);
        assert_eq!(kept[&ItemId(7)].suffix, 1);
        assert_eq!(kept[&ItemId(8)].suffix, 3);
        assert_eq!(kept[&ItemId(9)].suffix, 0);
        assert!(is_unique(&kept));
    }

    #[test]
    fn compare_counts_value_changes() {
        let prev: Identifiers = [
            (ItemId(0), ts(&[1, 2, 3], 0)),
            (ItemId(1), ts(&[1, 2, 3], 1)),
            (ItemId(2), ts(&[4, 5, 6], 0)),
            (ItemId(3), ts(&[7, 8, 9], 0)),
        ]
        .into_iter()
        .collect();
        let mut next = prev.clone();
        next.insert(ItemId(2), ts(&[0, 5, 1], 0));
        next.insert(ItemId(3), ts(&[7, 8, 9], 1));
        next.insert(ItemId(9), ts(&[0, 0, 0], 0));
        let r = compare(&prev, &next, 3);
        assert_eq!(r.n_existing, 4);
        assert_eq!(r.n_new, 1);
        assert_eq!(r.layer_rates, vec![0.25, 0.0, 0.25]);
        assert_eq!(r.overall, 0.25);
        assert_eq!(r.changed_items(), vec![ItemId(2), ItemId(3)]);
    }
}
