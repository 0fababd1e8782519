//! Interaction streams: synthetic drifting corpora, TSV ingestion with k-core
//! filtering, the chronological 60/10/10/10/10 period split, leave-one-out
//! splits and sliding training windows.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json};
use crate::error::{DactError, Result};
use crate::table::EmbeddingTable;

/// Number of chronological periods (P0 pretraining + four continual updates).
pub const N_PERIODS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
}

impl InteractionEvent {
    fn sort_key(&self) -> (i64, UserId, ItemId) {
        (self.timestamp, self.user, self.item)
    }
}

/// Per-user view of one period: earlier-period history plus the in-period
/// train prefix and the two held-out targets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub history: Vec<ItemId>,
    pub train: Vec<ItemId>,
    pub valid: Option<ItemId>,
    pub test: Option<ItemId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodDataset {
    pub period_index: usize,
    pub events: Vec<InteractionEvent>,
    pub item_set: BTreeSet<ItemId>,
    pub user_sequences: BTreeMap<UserId, Vec<ItemId>>,
    pub splits: BTreeMap<UserId, UserSplit>,
    /// Items whose first appearance in the stream is in this period (empty for P0).
    pub cold_items: BTreeSet<ItemId>,
}

impl PeriodDataset {
    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.user_sequences.keys().copied()
    }

    /// Users with a held-out test target.
    pub fn evaluable_users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.splits
            .iter()
            .filter(|(_, s)| s.test.is_some())
            .map(|(u, _)| *u)
    }
}

/// Sizes of the five chronological periods for a stream of `n` events.
///
/// P0 receives `floor(0.6·n)` events; the remainder is split into four parts
/// whose sizes differ by at most one, extra events going to earlier periods.
pub fn period_sizes(n: usize) -> [usize; N_PERIODS] {
    let p0 = n * 6 / 10;
    let rest = n - p0;
    let q = rest / 4;
    let r = rest % 4;
    let mut out = [p0, q, q, q, q];
    for k in 0..r {
        out[k + 1] += 1;
    }
    out
}

/// Cumulative event-index boundaries `[0, b1, …, n]`.
pub fn period_boundaries(n: usize) -> [usize; N_PERIODS + 1] {
    let sizes = period_sizes(n);
    let mut b = [0; N_PERIODS + 1];
    for k in 0..N_PERIODS {
        b[k + 1] = b[k] + sizes[k];
    }
    b
}

/// Sorts events chronologically (ties by user then item).
pub fn sort_events(events: &mut [InteractionEvent]) {
    events.sort_by_key(|e| e.sort_key());
}

/// Splits a stream into the five period datasets with leave-one-out splits.
pub fn build_periods(mut events: Vec<InteractionEvent>) -> Vec<PeriodDataset> {
    sort_events(&mut events);
    let bounds = period_boundaries(events.len());
    let mut history: BTreeMap<UserId, Vec<ItemId>> = BTreeMap::new();
    let mut seen_items: HashSet<ItemId> = HashSet::new();
    let mut out = Vec::with_capacity(N_PERIODS);

    for p in 0..N_PERIODS {
        let slice = events[bounds[p]..bounds[p + 1]].to_vec();
        let mut user_sequences: BTreeMap<UserId, Vec<ItemId>> = BTreeMap::new();
        let mut item_set = BTreeSet::new();
        let mut cold_items = BTreeSet::new();
        for e in &slice {
            user_sequences.entry(e.user).or_default().push(e.item);
            item_set.insert(e.item);
            if p > 0 && !seen_items.contains(&e.item) {
                cold_items.insert(e.item);
            }
        }
        let splits = user_sequences
            .iter()
            .map(|(u, seq)| {
                let hist = history.get(u).cloned().unwrap_or_default();
                (*u, leave_one_out(hist, seq))
            })
            .collect();
        for (u, seq) in &user_sequences {
            history.entry(*u).or_default().extend(seq.iter().copied());
        }
        seen_items.extend(item_set.iter().copied());
        out.push(PeriodDataset {
            period_index: p,
            events: slice,
            item_set,
            user_sequences,
            splits,
            cold_items,
        });
    }
    out
}

fn leave_one_out(history: Vec<ItemId>, seq: &[ItemId]) -> UserSplit {
    let n = seq.len();
    if n >= 3 {
        UserSplit {
            history,
            train: seq[..n - 2].to_vec(),
            valid: Some(seq[n - 2]),
            test: Some(seq[n - 1]),
        }
    } else {
        UserSplit {
            history,
            train: seq.to_vec(),
            valid: None,
            test: None,
        }
    }
}

/// One (context, next item) training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub user: UserId,
    pub context: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WindowSet {
    pub train: Vec<Window>,
    pub valid: Vec<Window>,
    pub test: Vec<Window>,
}

fn tail(items: &[ItemId], max_len: usize) -> Vec<ItemId> {
    items[items.len().saturating_sub(max_len)..].to_vec()
}

/// Sliding windows over each user's period sequence.
///
/// Contexts may reach back into earlier periods (`history`) but every target
/// lies inside the period. Validation and test each yield one window ending
/// at the held-out item.
pub fn build_training_windows(pd: &PeriodDataset, max_len: usize) -> WindowSet {
    let max_len = max_len.max(1);
    let mut set = WindowSet::default();
    for (user, split) in &pd.splits {
        let mut full: Vec<ItemId> = split.history.clone();
        for &target in &split.train {
            if !full.is_empty() {
                set.train.push(Window {
                    user: *user,
                    context: tail(&full, max_len),
                    target,
                });
            }
            full.push(target);
        }
        if let Some(valid) = split.valid {
            if !full.is_empty() {
                set.valid.push(Window {
                    user: *user,
                    context: tail(&full, max_len),
                    target: valid,
                });
            }
            full.push(valid);
        }
        if let Some(test) = split.test {
            set.test.push(Window {
                user: *user,
                context: tail(&full, max_len),
                target: test,
            });
        }
    }
    set
}

/// Generator parameters for a synthetic drifting corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub drift_fraction: f64,
    pub drift_period: usize,
    pub popularity_shift: f64,
    pub seed: u64,
    #[serde(default = "defaults::events_per_user")]
    pub events_per_user: usize,
    /// Probability that an interaction ignores the user's interest cluster.
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    /// Fraction of items first released after P0.
    #[serde(default = "defaults::cold_fraction")]
    pub cold_fraction: f64,
    #[serde(default = "defaults::d_sem")]
    pub d_sem: usize,
    #[serde(default = "defaults::sem_noise")]
    pub sem_noise: f64,
    #[serde(default = "defaults::centroid_std")]
    pub centroid_std: f64,
}

mod defaults {
    pub fn events_per_user() -> usize {
        50
    }
    pub fn noise() -> f64 {
        0.05
    }
    pub fn cold_fraction() -> f64 {
        0.1
    }
    pub fn d_sem() -> usize {
        64
    }
    pub fn sem_noise() -> f64 {
        0.1
    }
    pub fn centroid_std() -> f64 {
        0.3
    }
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 200,
            n_clusters: 10,
            drift_fraction: 0.2,
            drift_period: 1,
            popularity_shift: 0.5,
            seed: 0,
            events_per_user: defaults::events_per_user(),
            noise: defaults::noise(),
            cold_fraction: defaults::cold_fraction(),
            d_sem: defaults::d_sem(),
            sem_noise: defaults::sem_noise(),
            centroid_std: defaults::centroid_std(),
        }
    }
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drift_fraction) {
            return Err(DactError::config(format!(
                "drift_fraction {} outside [0, 1]",
                self.drift_fraction
            )));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            return Err(DactError::config(format!(
                "n_clusters {} must be in [1, n_items = {}]",
                self.n_clusters, self.n_items
            )));
        }
        if self.n_users == 0 || self.events_per_user == 0 {
            return Err(DactError::config("n_users and events_per_user must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..1.0).contains(&self.cold_fraction) {
            return Err(DactError::config("noise must be in [0,1] and cold_fraction in [0,1)"));
        }
        if self.popularity_shift < 0.0 || self.d_sem == 0 || self.drift_period == 0 {
            return Err(DactError::config(
                "popularity_shift must be >= 0, d_sem > 0 and drift_period >= 1",
            ));
        }
        Ok(())
    }

    pub fn n_drifting(&self) -> usize {
        (self.drift_fraction * self.n_items as f64).round() as usize
    }

    /// Fraction of a drifting item's behavior that has moved to its new
    /// cluster during period `p`.
    pub fn drift_progress(&self, p: usize) -> f64 {
        if p < self.drift_period || self.drift_period >= N_PERIODS {
            return 0.0;
        }
        let span = (N_PERIODS - 1 - self.drift_period) as f64;
        if span == 0.0 {
            return 1.0;
        }
        0.6 + 0.4 * (p - self.drift_period) as f64 / span
    }
}

/// Ground truth attached to a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTruth {
    pub drifting: BTreeMap<ItemId, bool>,
    pub cluster: BTreeMap<ItemId, usize>,
    pub new_cluster: BTreeMap<ItemId, usize>,
    pub release_period: BTreeMap<ItemId, usize>,
}

impl DriftTruth {
    pub fn is_drifting(&self, item: ItemId) -> bool {
        self.drifting.get(&item).copied().unwrap_or(false)
    }
}

/// A full corpus: periods, static semantic features and optional drift truth.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub periods: Vec<PeriodDataset>,
    pub semantic: EmbeddingTable,
    pub truth: Option<DriftTruth>,
}

impl Corpus {
    pub fn all_events(&self) -> impl Iterator<Item = &InteractionEvent> {
        self.periods.iter().flat_map(|p| p.events.iter())
    }

    /// Items seen in periods `0..=p`.
    pub fn live_items(&self, p: usize) -> BTreeSet<ItemId> {
        self.periods[..=p]
            .iter()
            .flat_map(|pd| pd.item_set.iter().copied())
            .collect()
    }

    pub fn warm_items(&self) -> &BTreeSet<ItemId> {
        &self.periods[0].item_set
    }
}

/// Generates a synthetic drifting corpus; a pure function of `spec`.
pub fn generate_synthetic(spec: &DriftSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_items = spec.n_items;
    let items: Vec<ItemId> = (0..n_items as u32).map(ItemId).collect();

    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng);
    let mut cluster = vec![0usize; n_items];
    for (pos, &i) in order.iter().enumerate() {
        cluster[i] = pos % spec.n_clusters;
    }

    let n_cold = (spec.cold_fraction * n_items as f64).round() as usize;
    let mut release = vec![0usize; n_items];
    let mut shuffled: Vec<usize> = (0..n_items).collect();
    shuffled.shuffle(&mut rng);
    for (k, &i) in shuffled.iter().take(n_cold).enumerate() {
        release[i] = 1 + k % (N_PERIODS - 1);
    }
    let warm: Vec<usize> = shuffled[n_cold..].to_vec();

    let n_drift = spec.n_drifting();
    if n_drift > warm.len() {
        return Err(DactError::config(format!(
            "{n_drift} drifting items requested but only {} warm items exist",
            warm.len()
        )));
    }
    let mut warm_shuffled = warm.clone();
    warm_shuffled.shuffle(&mut rng);
    let mut new_cluster: Vec<Option<usize>> = vec![None; n_items];
    for &i in warm_shuffled.iter().take(n_drift) {
        let c = if spec.n_clusters > 1 {
            let offset = rng.random_range(1..spec.n_clusters);
            (cluster[i] + offset) % spec.n_clusters
        } else {
            cluster[i]
        };
        new_cluster[i] = Some(c);
    }

    let pop_dist = Normal::<f64>::new(0.0, 0.75).expect("valid normal");
    let popularity: Vec<f64> = (0..n_items).map(|_| pop_dist.sample(&mut rng).exp()).collect();

    let centroid_dist = Normal::new(0.0, spec.centroid_std).map_err(|e| DactError::config(e.to_string()))?;
    let noise_dist = Normal::new(0.0, spec.sem_noise).map_err(|e| DactError::config(e.to_string()))?;
    let centroids = Array2::from_shape_fn((spec.n_clusters, spec.d_sem), |_| centroid_dist.sample(&mut rng));
    let semantic = Array2::from_shape_fn((n_items, spec.d_sem), |(i, j)| {
        centroids[[cluster[i], j]] + noise_dist.sample(&mut rng)
    });

    let home: Vec<usize> = (0..spec.n_users)
        .map(|_| rng.random_range(0..spec.n_clusters))
        .collect();

    let total = spec.n_users * spec.events_per_user;
    let sizes = period_sizes(total);
    let mut events = Vec::with_capacity(total);
    let mut clock: i64 = 1_600_000_000;

    for (p, &size) in sizes.iter().enumerate() {
        let g = spec.drift_progress(p);
        let available: Vec<usize> = (0..n_items).filter(|&i| release[i] <= p).collect();
        let tables: Vec<Option<(Vec<usize>, WeightedIndex<f64>)>> = (0..spec.n_clusters)
            .map(|c| {
                let mut members = Vec::new();
                let mut weights = Vec::new();
                for &i in &available {
                    let w = match new_cluster[i] {
                        Some(nc) => {
                            let boosted = popularity[i] * (1.0 + spec.popularity_shift * g);
                            let mut w = 0.0;
                            if cluster[i] == c {
                                w += boosted * (1.0 - g);
                            }
                            if nc == c {
                                w += boosted * g;
                            }
                            w
                        }
                        None if cluster[i] == c => popularity[i],
                        None => 0.0,
                    };
                    if w > 0.0 {
                        members.push(i);
                        weights.push(w);
                    }
                }
                WeightedIndex::new(&weights).ok().map(|wi| (members, wi))
            })
            .collect();

        let mut emitted = 0;
        while emitted < size {
            let user = rng.random_range(0..spec.n_users);
            let len = rng.random_range(3..=8).min(size - emitted);
            let mut session: Vec<usize> = Vec::with_capacity(len);
            for _ in 0..len {
                let mut pick = 0;
                for _attempt in 0..8 {
                    pick = match &tables[home[user]] {
                        Some((members, wi)) if rng.random::<f64>() >= spec.noise => members[wi.sample(&mut rng)],
                        _ => available[rng.random_range(0..available.len())],
                    };
                    if !session.contains(&pick) {
                        break;
                    }
                }
                session.push(pick);
                events.push(InteractionEvent {
                    user: UserId(user as u32),
                    item: items[pick],
                    timestamp: clock,
                });
                clock += 60;
            }
            emitted += len;
        }
    }

    let periods = build_periods(events);
    let truth = DriftTruth {
        drifting: (0..n_items).map(|i| (items[i], new_cluster[i].is_some())).collect(),
        cluster: (0..n_items).map(|i| (items[i], cluster[i])).collect(),
        new_cluster: (0..n_items)
            .filter_map(|i| new_cluster[i].map(|c| (items[i], c)))
            .collect(),
        release_period: (0..n_items).map(|i| (items[i], release[i])).collect(),
    };
    Ok(Corpus {
        periods,
        semantic: EmbeddingTable::new(items, semantic)?,
        truth: Some(truth),
    })
}

/// Reads `user \t item \t timestamp` lines.
pub fn read_tsv_events(path: &Path) -> Result<Vec<InteractionEvent>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DactError::io(path, std::io::Error::other(e.to_string())),
            _ => DactError::Csv(e),
        })?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DactError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(DactError::Parse {
                line,
                reason: format!("expected 3 tab-separated fields, found {}", record.len()),
            });
        }
        let field = |i: usize| record[i].trim();
        let parse_err = |what: &str, raw: &str| DactError::Parse {
            line,
            reason: format!("invalid {what} `{raw}`"),
        };
        let user = field(0).parse::<u32>().map_err(|_| parse_err("user_id", field(0)))?;
        let item = field(1).parse::<u32>().map_err(|_| parse_err("item_id", field(1)))?;
        let timestamp = field(2).parse::<i64>().map_err(|_| parse_err("timestamp", field(2)))?;
        out.push(InteractionEvent {
            user: UserId(user),
            item: ItemId(item),
            timestamp,
        });
    }
    Ok(out)
}

/// Iterated k-core filter: drops users and items with fewer than `min_count`
/// events until no more removals happen.
pub fn k_core_filter(mut events: Vec<InteractionEvent>, min_count: usize) -> Vec<InteractionEvent> {
    loop {
        let mut users: HashMap<UserId, usize> = HashMap::new();
        let mut items: HashMap<ItemId, usize> = HashMap::new();
        for e in &events {
            *users.entry(e.user).or_default() += 1;
            *items.entry(e.item).or_default() += 1;
        }
        let before = events.len();
        events.retain(|e| users[&e.user] >= min_count && items[&e.item] >= min_count);
        if events.len() == before {
            return events;
        }
    }
}

pub fn ingest_tsv(path: &Path, min_count: usize) -> Result<Vec<PeriodDataset>> {
    let events = k_core_filter(read_tsv_events(path)?, min_count);
    if events.is_empty() {
        return Err(DactError::EmptyCorpus);
    }
    Ok(build_periods(events))
}

/// Summary counts of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

pub fn corpus_stats(periods: &[PeriodDataset]) -> CorpusStats {
    let mut users = HashSet::new();
    let mut items = HashSet::new();
    let mut n = 0;
    for p in periods {
        for e in &p.events {
            users.insert(e.user);
            items.insert(e.item);
            n += 1;
        }
    }
    CorpusStats {
        users: users.len(),
        items: items.len(),
        interactions: n,
    }
}

/// Deterministic stand-in features for corpora without content embeddings:
/// each item gets a Gaussian vector seeded by its id.
pub fn hashed_semantic_features(items: &BTreeSet<ItemId>, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let ids: Vec<ItemId> = items.iter().copied().collect();
    let dist = Normal::new(0.0, 0.3).expect("valid normal");
    let mut data = Array2::zeros((ids.len(), dim));
    for (r, id) in ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id.0)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for c in 0..dim {
            data[[r, c]] = dist.sample(&mut rng);
        }
    }
    EmbeddingTable::new(ids, data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusManifest {
    n_periods: usize,
    period_counts: Vec<usize>,
    boundaries: Vec<usize>,
    stats: CorpusStats,
    #[serde(default)]
    truth: Option<DriftTruth>,
    #[serde(default)]
    spec: Option<DriftSpec>,
}

fn write_events(path: &Path, events: &[InteractionEvent]) -> Result<()> {
    let mut text = String::with_capacity(events.len() * 24);
    for e in events {
        text.push_str(&format!("{}\t{}\t{}\n", e.user, e.item, e.timestamp));
    }
    fs::write(path, text).map_err(|e| DactError::io(path, e))
}

/// Writes `period_{p}.tsv` files, `manifest.json` and the semantic table.
pub fn write_corpus(dir: &Path, corpus: &Corpus, spec: Option<&DriftSpec>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DactError::io(dir, e))?;
    for pd in &corpus.periods {
        write_events(&dir.join(format!("period_{}.tsv", pd.period_index)), &pd.events)?;
    }
    let counts: Vec<usize> = corpus.periods.iter().map(|p| p.n_events()).collect();
    let mut boundaries = vec![0];
    for c in &counts {
        boundaries.push(boundaries.last().unwrap() + c);
    }
    let manifest = CorpusManifest {
        n_periods: corpus.periods.len(),
        period_counts: counts,
        boundaries,
        stats: corpus_stats(&corpus.periods),
        truth: corpus.truth.clone(),
        spec: spec.cloned(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    corpus.semantic.save(&dir.join("semantic"), "semantic", None)
}

/// Reads a corpus written by [`write_corpus`]. Periods are rebuilt from the
/// concatenated event files, so splits are recomputed deterministically.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest = read_json(&dir.join("manifest.json"))?;
    let mut events = Vec::new();
    for p in 0..manifest.n_periods {
        events.extend(read_tsv_events(&dir.join(format!("period_{p}.tsv")))?);
    }
    let periods = build_periods(events);
    let semantic_dir = dir.join("semantic");
    let semantic = if semantic_dir.join("manifest.json").exists() {
        EmbeddingTable::load(&semantic_dir)?.0
    } else {
        let items = periods.iter().flat_map(|p| p.item_set.iter().copied()).collect();
        hashed_semantic_features(&items, defaults::d_sem(), 0)?
    };
    Ok(Corpus {
        periods,
        semantic,
        truth: manifest.truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(u: u32, i: u32, t: i64) -> InteractionEvent {
        InteractionEvent {
            user: UserId(u),
            item: ItemId(i),
            timestamp: t,
        }
    }

    #[test]
    fn period_sizes_follow_count_arithmetic() {
        assert_eq!(period_sizes(100), [60, 10, 10, 10, 10]);
        assert_eq!(period_sizes(103), [61, 11, 11, 10, 10]);
        assert_eq!(period_sizes(0), [0; 5]);
        for n in 0..500 {
            let s = period_sizes(n);
            assert_eq!(s.iter().sum::<usize>(), n);
            assert_eq!(s[0], n * 6 / 10);
            assert!(s[1..].iter().max().unwrap() - s[1..].iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn windows_for_three_item_train_sequence() {
        let a = ItemId(1);
        let b = ItemId(2);
        let c = ItemId(3);
        let mut splits = BTreeMap::new();
        splits.insert(
            UserId(0),
            UserSplit {
                history: vec![],
                train: vec![a, b, c],
                valid: None,
                test: None,
            },
        );
        let pd = PeriodDataset {
            period_index: 0,
            events: vec![],
            item_set: [a, b, c].into_iter().collect(),
            user_sequences: [(UserId(0), vec![a, b, c])].into_iter().collect(),
            splits,
            cold_items: BTreeSet::new(),
        };
        let w = build_training_windows(&pd, 5);
        let pairs: Vec<_> = w.train.iter().map(|w| (w.context.clone(), w.target)).collect();
        assert_eq!(pairs, vec![(vec![a], b), (vec![a, b], c)]);
        assert!(w.valid.is_empty() && w.test.is_empty());
    }

    #[test]
    fn single_item_sequence_has_no_windows() {
        let pd = &build_periods(vec![ev(0, 1, 0)])[0];
        assert_eq!(pd.n_events(), 0);
        let all = build_periods(vec![ev(0, 1, 0), ev(1, 2, 1), ev(2, 3, 2), ev(3, 4, 3), ev(4, 5, 4)]);
        for p in &all {
            let w = build_training_windows(p, 4);
            assert!(w.train.is_empty());
        }
    }

    #[test]
    fn ties_broken_by_user_then_item() {
        let mut events = vec![ev(2, 1, 5), ev(1, 9, 5), ev(1, 3, 5), ev(0, 0, 6)];
        sort_events(&mut events);
        assert_eq!(events, vec![ev(1, 3, 5), ev(1, 9, 5), ev(2, 1, 5), ev(0, 0, 6)]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = DriftSpec {
            drift_fraction: 1.5,
            ..DriftSpec::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = DriftSpec {
            n_clusters: 500,
            ..DriftSpec::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn k_core_identity_when_dense() {
        let mut events = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                events.push(ev(u, i, (u * 10 + i) as i64));
            }
        }
        let filtered = k_core_filter(events.clone(), 5);
        assert_eq!(filtered, events);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        fs::write(&path, "1\t2\t3\n4\tfoo\t6\n").unwrap();
        match read_tsv_events(&path) {
            Err(DactError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, "1\t2\n").unwrap();
        assert!(matches!(read_tsv_events(&path), Err(DactError::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_after_filtering_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        fs::write(&path, "1\t2\t3\n").unwrap();
        assert!(matches!(ingest_tsv(&path, 5), Err(DactError::EmptyCorpus)));
    }
}
