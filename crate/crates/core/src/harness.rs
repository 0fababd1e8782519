//! Period-wise experiment driver: P0 pretraining, P1..P4 continual updates
//! per mode, evaluation, checkpoints and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_period, naive_finetune, AdaptConfig};
use crate::cdim::PatternMemory;
use crate::cf::{auc, cosine, train_cf, CfConfig};
use crate::checkpoint::{read_json, write_json};
use crate::data::{build_training_windows, generate_synthetic, read_corpus, Corpus, DriftSpec, ItemId, WindowSet};
use crate::error::{DactError, Result};
use crate::grm::{evaluate, target_ranks, Evaluation, Grm, GrmConfig, GrmTrainLog, Metrics, Trie, Vocab};
use crate::plot;
use crate::reassign::{reassign, Policy, ReassignmentReport};
use crate::table::EmbeddingTable;
use crate::tokenizer::{
    read_identifiers_tsv, write_identifiers_tsv, Identifiers, PretrainConfig, Tokenizer, TokenizerConfig,
};

pub const N_PERIODS: usize = crate::data::N_PERIODS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Frozen,
    FtTok,
    FtGrm,
    FtBoth,
    Dact,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Frozen, Mode::FtTok, Mode::FtGrm, Mode::FtBoth, Mode::Dact];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Frozen => "frozen",
            Mode::FtTok => "ft-tok",
            Mode::FtGrm => "ft-grm",
            Mode::FtBoth => "ft-both",
            Mode::Dact => "dact",
        }
    }

    pub fn trains_grm(self) -> bool {
        matches!(self, Mode::FtGrm | Mode::FtBoth | Mode::Dact)
    }

    pub fn track(self) -> Track {
        match self {
            Mode::Frozen | Mode::FtGrm => Track::Frozen,
            Mode::FtTok | Mode::FtBoth => Track::Naive,
            Mode::Dact => Track::Dact,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = DactError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DactError::config(format!("unknown mode `{s}`")))
    }
}

/// Tokenizer lineage shared by modes: the P0 tokenizer, the naive
/// fine-tuning chain, or the drift-aware chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Track {
    Frozen,
    Naive,
    Dact,
}

impl Track {
    pub fn name(self) -> &'static str {
        match self {
            Track::Frozen => "frozen",
            Track::Naive => "naive",
            Track::Dact => "dact",
        }
    }

    pub fn policy(self) -> Policy {
        match self {
            Track::Frozen => Policy::ExtendOnly,
            Track::Naive => Policy::Full,
            Track::Dact => Policy::Hierarchical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Corpus directory written by `data gen` or `data ingest`; the synthetic
    /// spec is used when absent, re-seeded per run seed.
    pub data_dir: Option<PathBuf>,
    pub synthetic: DriftSpec,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Last continual period to run (1..=4).
    pub max_period: usize,
    /// Longest context kept in training windows.
    pub max_len: usize,
    pub cf: CfConfig,
    pub tokenizer: TokenizerConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    /// Learning rate of the naive tokenizer fine-tuning baseline; it keeps the
    /// step budget of `adapt` and defaults to the pretraining rate.
    pub naive_lr: f64,
    pub grm: GrmConfig,
    pub grm_pretrain_epochs: usize,
    pub grm_finetune_epochs: usize,
    /// Also evaluate on the previous period's test split (not a paper metric).
    pub backward_transfer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            synthetic: DriftSpec::default(),
            modes: Mode::ALL.to_vec(),
            seeds: (0..5).collect(),
            out_dir: PathBuf::from("out"),
            max_period: N_PERIODS - 1,
            max_len: 20,
            cf: CfConfig::default(),
            tokenizer: TokenizerConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            naive_lr: PretrainConfig::default().lr,
            grm: GrmConfig::default(),
            grm_pretrain_epochs: 10,
            grm_finetune_epochs: 3,
            backward_transfer: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DactError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(DactError::config("at least one mode and one seed are required"));
        }
        if self.max_period == 0 || self.max_period >= N_PERIODS {
            return Err(DactError::config(format!("max_period must be in 1..={}", N_PERIODS - 1)));
        }
        if self.tokenizer.d_cf != self.cf.d_cf {
            return Err(DactError::config("tokenizer.d_cf must equal cf.d_cf"));
        }
        if self.tokenizer.lambda != self.adapt.weights.lambda || self.tokenizer.mu != self.adapt.weights.mu {
            return Err(DactError::config(
                "tokenizer.lambda/mu must equal adapt.weights.lambda/mu",
            ));
        }
        if self.grm.max_suffix == 0 {
            return Err(DactError::config("grm.max_suffix must be positive"));
        }
        self.tokenizer.validate()?;
        self.adapt.weights.validate()?;
        self.grm.validate()?;
        if self.data_dir.is_none() {
            self.synthetic.validate()?;
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            levels: self.tokenizer.levels,
            codes: self.tokenizer.codes,
            max_suffix: self.grm.max_suffix,
        }
    }

    fn tracks(&self) -> BTreeSet<Track> {
        self.modes.iter().map(|m| m.track()).collect()
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed_{seed}"))
    }

    pub fn period_dir(&self, seed: u64, period: usize) -> PathBuf {
        self.seed_dir(seed).join(format!("period_{period}"))
    }
}

/// Parses a `DACT_SEED` value: one seed or a comma-separated list.
pub fn parse_seed_list(value: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| DactError::config(format!("invalid seed `{s}`"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(DactError::config("empty seed list"));
    }
    Ok(seeds)
}

fn stage_seed(seed: u64, period: usize, tag: u64) -> u64 {
    seed.wrapping_mul(1_000_003) ^ ((period as u64) << 32) ^ tag
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub tokenizer: f64,
    pub reassign: f64,
    pub grm: f64,
    pub eval: f64,
}

impl Timing {
    /// Wall clock of the per-period update (evaluation excluded).
    pub fn update(&self) -> f64 {
        self.tokenizer + self.reassign + self.grm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRates {
    pub layer_rates: Vec<f64>,
    pub overall: f64,
    pub n_existing: usize,
    pub n_new: usize,
}

impl From<&ReassignmentReport> for ChangeRates {
    fn from(r: &ReassignmentReport) -> Self {
        Self {
            layer_rates: r.layer_rates.clone(),
            overall: r.overall,
            n_existing: r.n_existing,
            n_new: r.n_new,
        }
    }
}

/// One (seed, period, mode) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodReport {
    pub seed: u64,
    pub period: usize,
    pub mode: Mode,
    pub metrics: Evaluation,
    /// Metrics on the previous period's test split after this update (not a paper metric).
    pub backward: Option<Metrics>,
    pub change: ChangeRates,
    /// Mean cosine between quantized vectors and current CF embeddings over warm items.
    pub cosine: f64,
    pub drift_auc: Option<f64>,
    pub seconds: Timing,
    pub grm_log: Option<GrmTrainLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub metrics: Evaluation,
    pub collision_rate: f64,
    pub cosine: f64,
    pub recon_initial: f64,
    pub recon_final: f64,
    pub grm_log: GrmTrainLog,
    pub seconds: f64,
    pub tokenizer_seconds: f64,
    pub grm_seconds: f64,
}

/// Everything persisted when a period completes; its presence marks the period done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: usize,
    pub pretrain: Option<PretrainReport>,
    pub reports: Vec<PeriodReport>,
    pub cosine_frozen: f64,
    pub cosine_dact: Option<f64>,
    /// Wall clock of this period's CF teacher update.
    pub cf_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<PeriodRecord>,
}

impl SeedRun {
    pub fn reports(&self) -> impl Iterator<Item = &PeriodReport> {
        self.records.iter().flat_map(|r| r.reports.iter())
    }

    pub fn report(&self, period: usize, mode: Mode) -> Option<&PeriodReport> {
        self.reports().find(|r| r.period == period && r.mode == mode)
    }

    pub fn cosine_curve(&self, dact: bool) -> Vec<Option<f64>> {
        self.records
            .iter()
            .map(|r| if dact { r.cosine_dact } else { Some(r.cosine_frozen) })
            .collect()
    }
}

/// Mean cosine between each item's quantized vector (projected when the
/// tokenizer has a CF projection) and its CF embedding.
pub fn quantized_cf_cosine(tok: &Tokenizer, semantic: &EmbeddingTable, cf: &EmbeddingTable, items: &[ItemId]) -> Result<f64> {
    let items: Vec<ItemId> = items.iter().copied().filter(|i| cf.contains(*i)).collect();
    if items.is_empty() {
        return Err(DactError::EmptyCorpus);
    }
    let z = semantic.rows(&items)?;
    let q = tok.tokenize(z.view())?;
    let a = match &tok.cf_proj {
        Some(p) => p.forward_plain(&tok.store, q.r_hat.view()),
        None => q.r_hat,
    };
    let h = cf.rows(&items)?;
    let total: f64 = a
        .axis_iter(Axis(0))
        .zip(h.axis_iter(Axis(0)))
        .map(|(x, y)| cosine(x, y))
        .sum();
    Ok(total / items.len() as f64)
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Mutable per-seed state carried from one period to the next.
struct SeedState {
    cf: EmbeddingTable,
    tok0: Tokenizer,
    grm0: Grm,
    tokenizers: BTreeMap<Track, Tokenizer>,
    memory: Option<PatternMemory>,
    ids: BTreeMap<Track, Identifiers>,
    grms: BTreeMap<Mode, Grm>,
}

impl SeedState {
    fn tokenizer(&self, t: Track) -> &Tokenizer {
        self.tokenizers.get(&t).unwrap_or(&self.tok0)
    }

    fn grm(&self, m: Mode) -> &Grm {
        self.grms.get(&m).unwrap_or(&self.grm0)
    }

    fn save(&self, dir: &Path, period: usize, cfg: &RunConfig) -> Result<()> {
        self.cf.save(&dir.join("cf"), "cf", Some(period))?;
        if period == 0 {
            self.tok0.save(&dir.join("tokenizer"))?;
            self.grm0.save(&dir.join("grm"))?;
        }
        for (track, tok) in &self.tokenizers {
            tok.save(&dir.join(format!("tokenizer_{}", track.name())))?;
        }
        if let Some(m) = &self.memory {
            m.save(&dir.join("cdim"), period)?;
        }
        for (track, ids) in &self.ids {
            write_identifiers_tsv(&dir.join(format!("ids_{}.tsv", track.name())), ids)?;
        }
        if period > 0 {
            for (mode, g) in &self.grms {
                if cfg.modes.contains(mode) {
                    g.save(&dir.join(format!("grm_{}", mode.name())))?;
                }
            }
        }
        Ok(())
    }

    fn load(cfg: &RunConfig, seed: u64, period: usize) -> Result<Self> {
        let p0 = cfg.period_dir(seed, 0);
        let dir = cfg.period_dir(seed, period);
        let (cf, _) = EmbeddingTable::load(&dir.join("cf"))?;
        let tok0 = Tokenizer::load(&p0.join("tokenizer"))?;
        let grm0 = Grm::load(&p0.join("grm"))?;
        let mut s = SeedState {
            cf,
            tok0,
            grm0,
            tokenizers: BTreeMap::new(),
            memory: None,
            ids: BTreeMap::new(),
            grms: BTreeMap::new(),
        };
        for track in cfg.tracks() {
            s.ids.insert(track, read_identifiers_tsv(&dir.join(format!("ids_{}.tsv", track.name())))?);
            if period > 0 && track != Track::Frozen {
                s.tokenizers
                    .insert(track, Tokenizer::load(&dir.join(format!("tokenizer_{}", track.name())))?);
            }
        }
        if period > 0 && cfg.tracks().contains(&Track::Dact) {
            s.memory = Some(PatternMemory::load(&dir.join("cdim"))?);
        }
        if period > 0 {
            for mode in cfg.modes.iter().filter(|m| m.trains_grm()) {
                s.grms.insert(*mode, Grm::load(&dir.join(format!("grm_{}", mode.name())))?);
            }
        }
        Ok(s)
    }

    fn round_to_f32(&mut self) {
        self.cf.round_to_f32();
        self.tok0.store.round_to_f32();
        self.grm0.store.round_to_f32();
        for t in self.tokenizers.values_mut() {
            t.store.round_to_f32();
        }
        if let Some(m) = &mut self.memory {
            m.store.round_to_f32();
        }
        for g in self.grms.values_mut() {
            g.store.round_to_f32();
        }
    }
}

/// Loads or generates the corpus for one seed.
pub fn corpus_for_seed(cfg: &RunConfig, seed: u64) -> Result<Corpus> {
    match &cfg.data_dir {
        Some(dir) => read_corpus(dir),
        None => generate_synthetic(&DriftSpec {
            seed,
            ..cfg.synthetic.clone()
        }),
    }
}

fn drift_auc(corpus: &Corpus, confidences: &BTreeMap<ItemId, f64>) -> Option<f64> {
    let truth = corpus.truth.as_ref()?;
    let warm = corpus.warm_items();
    let (scores, labels): (Vec<f64>, Vec<bool>) = confidences
        .iter()
        .filter(|(i, _)| warm.contains(i))
        .map(|(i, d)| (*d, truth.is_drifting(*i)))
        .unzip();
    auc(&scores, &labels).ok()
}

fn write_confidences(path: &Path, confidences: &BTreeMap<ItemId, f64>) -> Result<()> {
    let mut out = String::from("item_id\td_i\n");
    for (i, d) in confidences {
        out.push_str(&format!("{i}\t{d}\n"));
    }
    std::fs::write(path, out).map_err(|e| DactError::io(path, e))
}

fn pretrain_period(cfg: &RunConfig, corpus: &Corpus, windows: &WindowSet, seed: u64) -> Result<(SeedState, PeriodRecord)> {
    let start = Instant::now();
    let p0 = &corpus.periods[0];
    let items: Vec<ItemId> = p0.item_set.iter().copied().collect();
    let (cf, cf_seconds) = timed(|| train_cf(p0, None, &cfg.cf, stage_seed(seed, 0, 1))).map_err(|e| e.in_stage("cf P0"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, 0, 2));
    let mut tok0 = stage("tokenizer P0", Tokenizer::new(cfg.tokenizer.clone(), &mut rng))?;
    let ((log, ids), tokenizer_seconds) = timed(|| {
        let log = tok0.pretrain(&corpus.semantic, Some(&cf), &items, &cfg.pretrain, stage_seed(seed, 0, 3))?;
        Ok((log, tok0.assign_identifiers(&corpus.semantic, &items)?))
    })
    .map_err(|e| e.in_stage("tokenizer P0"))?;
    let mut grm0 = stage("grm P0", Grm::new(cfg.grm.clone(), cfg.vocab(), stage_seed(seed, 0, 4)))?;
    let (grm_log, grm_seconds) = timed(|| grm0.train(&windows.train, &ids, cfg.grm_pretrain_epochs, stage_seed(seed, 0, 5)))
        .map_err(|e| e.in_stage("grm P0"))?;
    let trie = stage("evaluate P0", Trie::build(&grm0.vocab, &ids))?;
    let warm = corpus.warm_items();
    let metrics = stage(
        "evaluate P0",
        evaluate(&grm0, &trie, &ids, &windows.test, warm, cfg.grm.beam_width),
    )?;
    let cosine = stage("cosine P0", quantized_cf_cosine(&tok0, &corpus.semantic, &cf, &items))?;
    let collision_rate = crate::tokenizer::collision_rate(&ids);
    let mut state = SeedState {
        cf,
        tok0,
        grm0,
        tokenizers: BTreeMap::new(),
        memory: None,
        ids: cfg.tracks().into_iter().map(|t| (t, ids.clone())).collect(),
        grms: BTreeMap::new(),
    };
    state.round_to_f32();
    let record = PeriodRecord {
        period: 0,
        pretrain: Some(PretrainReport {
            seed,
            metrics,
            collision_rate,
            cosine,
            recon_initial: log.recon_initial,
            recon_final: log.recon_final,
            grm_log,
            seconds: start.elapsed().as_secs_f64(),
            tokenizer_seconds,
            grm_seconds,
        }),
        reports: Vec::new(),
        cosine_frozen: cosine,
        cosine_dact: cfg.tracks().contains(&Track::Dact).then_some(cosine),
        cf_seconds,
    };
    Ok((state, record))
}

fn continual_period(
    cfg: &RunConfig,
    corpus: &Corpus,
    windows: &[WindowSet],
    state: &mut SeedState,
    seed: u64,
    p: usize,
    dir: &Path,
) -> Result<PeriodRecord> {
    let pd = &corpus.periods[p];
    let (cf, cf_seconds) = timed(|| train_cf(pd, Some(&state.cf), &cfg.cf, stage_seed(seed, p, 1)))
        .map_err(|e| e.in_stage(format!("cf P{p}")))?;
    let live: Vec<ItemId> = corpus.live_items(p).into_iter().collect();
    let warm: Vec<ItemId> = corpus.warm_items().iter().copied().collect();

    let mut track_time: BTreeMap<Track, Timing> = BTreeMap::new();
    let mut changes: BTreeMap<Track, ChangeRates> = BTreeMap::new();
    let mut confidences = None;
    for track in cfg.tracks() {
        let mut t = Timing::default();
        match track {
            Track::Frozen => {}
            Track::Naive => {
                let prev = state.tokenizer(Track::Naive);
                let naive_cfg = AdaptConfig {
                    lr: cfg.naive_lr,
                    ..cfg.adapt.clone()
                };
                let (tok, secs) = timed(|| {
                    naive_finetune(prev, &corpus.semantic, &cf, &live, &naive_cfg, p, stage_seed(seed, p, 6))
                })
                .map_err(|e| e.in_stage(format!("naive tokenizer P{p}")))?;
                t.tokenizer = secs;
                state.tokenizers.insert(Track::Naive, tok);
            }
            Track::Dact => {
                let prev = state.tokenizer(Track::Dact);
                let (out, secs) = timed(|| {
                    adapt_period(
                        prev,
                        state.memory.as_ref(),
                        &corpus.semantic,
                        &cf,
                        &live,
                        &cfg.adapt,
                        p,
                        stage_seed(seed, p, 7),
                    )
                })
                .map_err(|e| e.in_stage(format!("adapt P{p}")))?;
                t.tokenizer = secs;
                state.tokenizers.insert(Track::Dact, out.tokenizer);
                state.memory = Some(out.memory);
                confidences = Some(out.confidences);
            }
        }
        let tok = state.tokenizer(track);
        let prev_ids = &state.ids[&track];
        let ((ids, report), secs) = timed(|| reassign(tok, prev_ids, &corpus.semantic, &live, track.policy()))
            .map_err(|e| e.in_stage(format!("reassign {} P{p}", track.name())))?;
        t.reassign = secs;
        changes.insert(track, ChangeRates::from(&report));
        state.ids.insert(track, ids);
        track_time.insert(track, t);
    }

    let cosine_of = |track: Track| quantized_cf_cosine(state.tokenizer(track), &corpus.semantic, &cf, &warm);
    let cosine_frozen = stage("cosine", cosine_of(Track::Frozen))?;
    let mut track_cosine = BTreeMap::new();
    for track in cfg.tracks() {
        track_cosine.insert(track, stage("cosine", cosine_of(track))?);
    }
    let auc_p = confidences.as_ref().and_then(|c| drift_auc(corpus, c));
    if let Some(c) = &confidences {
        std::fs::create_dir_all(dir).map_err(|e| DactError::io(dir, e))?;
        write_confidences(&dir.join("confidences.tsv"), c)?;
    }

    let warm_set = corpus.warm_items();
    let mut reports = Vec::new();
    for &mode in &cfg.modes {
        let track = mode.track();
        let ids = &state.ids[&track];
        let mut seconds = track_time[&track];
        let mut grm_log = None;
        if mode.trains_grm() {
            let mut g = state.grm(mode).clone();
            g.period_index = p;
            let (log, secs) = timed(|| g.train(&windows[p].train, ids, cfg.grm_finetune_epochs, stage_seed(seed, p, 8)))
                .map_err(|e| e.in_stage(format!("grm {mode} P{p}")))?;
            seconds.grm = secs;
            grm_log = Some(log);
            state.grms.insert(mode, g);
        }
        let grm = state.grm(mode);
        let trie = stage("evaluate", Trie::build(&grm.vocab, ids))?;
        let ((metrics, backward), secs) = timed(|| {
            let m = evaluate(grm, &trie, ids, &windows[p].test, warm_set, cfg.grm.beam_width)?;
            let b = if cfg.backward_transfer {
                Some(evaluate(grm, &trie, ids, &windows[p - 1].test, warm_set, cfg.grm.beam_width)?.all)
            } else {
                None
            };
            Ok((m, b))
        })
        .map_err(|e| e.in_stage(format!("evaluate {mode} P{p}")))?;
        seconds.eval = secs;
        reports.push(PeriodReport {
            seed,
            period: p,
            mode,
            metrics,
            backward,
            change: changes[&track].clone(),
            cosine: track_cosine[&track],
            drift_auc: if mode == Mode::Dact { auc_p } else { None },
            seconds,
            grm_log,
        });
    }
    state.cf = cf;
    state.round_to_f32();
    Ok(PeriodRecord {
        period: p,
        pretrain: None,
        reports,
        cosine_frozen,
        cosine_dact: track_cosine.get(&Track::Dact).copied(),
        cf_seconds,
    })
}

/// Runs (or resumes) every period for one seed.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let corpus = stage("data", corpus_for_seed(cfg, seed))?;
    if corpus.periods.len() < cfg.max_period + 1 {
        return Err(DactError::config("corpus has fewer periods than max_period"));
    }
    let windows: Vec<WindowSet> = corpus
        .periods
        .iter()
        .map(|pd| build_training_windows(pd, cfg.max_len))
        .collect();
    let mut records = Vec::new();
    let mut state: Option<SeedState> = None;
    for p in 0..=cfg.max_period {
        let dir = cfg.period_dir(seed, p);
        let marker = dir.join("record.json");
        if marker.exists() {
            records.push(read_json::<PeriodRecord>(&marker)?);
            state = None;
            continue;
        }
        let mut st = match state.take() {
            Some(s) => s,
            None if p == 0 => {
                let (s, record) = pretrain_period(cfg, &corpus, &windows[0], seed)?;
                s.save(&dir, 0, cfg)?;
                write_json(&marker, &record)?;
                records.push(record);
                state = Some(s);
                continue;
            }
            None => stage("resume", SeedState::load(cfg, seed, p - 1))?,
        };
        let record = continual_period(cfg, &corpus, &windows, &mut st, seed, p, &dir)?;
        st.save(&dir, p, cfg)?;
        write_json(&marker, &record)?;
        records.push(record);
        state = Some(st);
    }
    Ok(SeedRun { seed, records })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len().max(1) as f64;
    Metrics {
        h5: ms.iter().map(|m| m.h5).sum::<f64>() / n,
        h10: ms.iter().map(|m| m.h10).sum::<f64>() / n,
        n5: ms.iter().map(|m| m.n5).sum::<f64>() / n,
        n10: ms.iter().map(|m| m.n10).sum::<f64>() / n,
        users: ms.iter().map(|m| m.users).sum(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricStd {
    #[serde(rename = "H@5")]
    pub h5: f64,
    #[serde(rename = "H@10")]
    pub h10: f64,
    #[serde(rename = "N@5")]
    pub n5: f64,
    #[serde(rename = "N@10")]
    pub n10: f64,
}

/// Seed-aggregated report for one (period, mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedReport {
    pub period: usize,
    pub mode: Mode,
    #[serde(rename = "H@5")]
    pub h5: f64,
    #[serde(rename = "H@10")]
    pub h10: f64,
    #[serde(rename = "N@5")]
    pub n5: f64,
    #[serde(rename = "N@10")]
    pub n10: f64,
    pub std: MetricStd,
    pub warm: Metrics,
    pub cold: Metrics,
    pub backward_h10: Option<f64>,
    pub change_layer_rates: Vec<f64>,
    pub change_overall: f64,
    pub cosine: MeanStd,
    pub drift_auc: Option<MeanStd>,
    pub update_seconds: f64,
    /// Update wall clock relative to ft-grm in the same seed and period.
    pub time_ratio: Option<f64>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<PeriodReport>,
}

pub fn aggregate(runs: &[SeedRun]) -> Vec<AggregatedReport> {
    let mut groups: BTreeMap<(usize, Mode), Vec<&PeriodReport>> = BTreeMap::new();
    for r in runs.iter().flat_map(|s| s.reports()) {
        groups.entry((r.period, r.mode)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((period, mode), rs)| {
            let col = |f: &dyn Fn(&PeriodReport) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let ms = |f: &dyn Fn(&PeriodReport) -> f64| MeanStd::of(&col(f));
            let h5 = ms(&|r| r.metrics.all.h5);
            let h10 = ms(&|r| r.metrics.all.h10);
            let n5 = ms(&|r| r.metrics.all.n5);
            let n10 = ms(&|r| r.metrics.all.n10);
            let levels = rs.iter().map(|r| r.change.layer_rates.len()).max().unwrap_or(0);
            let aucs: Vec<f64> = rs.iter().filter_map(|r| r.drift_auc).collect();
            let backs: Vec<f64> = rs.iter().filter_map(|r| r.backward.map(|b| b.h10)).collect();
            let ratios: Vec<f64> = rs
                .iter()
                .filter_map(|r| {
                    let base = runs
                        .iter()
                        .find(|s| s.seed == r.seed)?
                        .report(period, Mode::FtGrm)?
                        .seconds
                        .update();
                    (base > 0.0).then(|| r.seconds.update() / base)
                })
                .collect();
            AggregatedReport {
                period,
                mode,
                h5: h5.mean,
                h10: h10.mean,
                n5: n5.mean,
                n10: n10.mean,
                std: MetricStd {
                    h5: h5.std,
                    h10: h10.std,
                    n5: n5.std,
                    n10: n10.std,
                },
                warm: mean_metrics(&rs.iter().map(|r| r.metrics.warm).collect::<Vec<_>>()),
                cold: mean_metrics(&rs.iter().map(|r| r.metrics.cold).collect::<Vec<_>>()),
                backward_h10: (!backs.is_empty()).then(|| MeanStd::of(&backs).mean),
                change_layer_rates: (0..levels)
                    .map(|l| MeanStd::of(&col(&|r| r.change.layer_rates.get(l).copied().unwrap_or(0.0))).mean)
                    .collect(),
                change_overall: ms(&|r| r.change.overall).mean,
                cosine: ms(&|r| r.cosine),
                drift_auc: (!aucs.is_empty()).then(|| MeanStd::of(&aucs)),
                update_seconds: ms(&|r| r.seconds.update()).mean,
                time_ratio: (ratios.len() == rs.len()).then(|| MeanStd::of(&ratios).mean),
                seeds: rs.iter().map(|r| r.seed).collect(),
                per_seed: rs.into_iter().cloned().collect(),
            }
        })
        .collect()
}

/// Per-period cosine curves over seeds for the frozen and drift-aware tokenizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineCurves {
    pub frozen: Vec<MeanStd>,
    pub dact: Option<Vec<MeanStd>>,
    pub per_seed: Vec<(u64, Vec<f64>, Option<Vec<f64>>)>,
}

pub fn cosine_curves(runs: &[SeedRun]) -> CosineCurves {
    let n = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let per_seed: Vec<(u64, Vec<f64>, Option<Vec<f64>>)> = runs
        .iter()
        .map(|r| {
            let frozen = r.records[..n].iter().map(|x| x.cosine_frozen).collect();
            let dact = r.records[..n].iter().map(|x| x.cosine_dact).collect::<Option<Vec<f64>>>();
            (r.seed, frozen, dact)
        })
        .collect();
    let column = |f: &dyn Fn(&(u64, Vec<f64>, Option<Vec<f64>>)) -> Option<f64>, p: usize| {
        per_seed.iter().map(|s| f(s).filter(|_| p < n)).collect::<Option<Vec<f64>>>()
    };
    let frozen = (0..n)
        .map(|p| MeanStd::of(&column(&|s| Some(s.1[p]), p).unwrap_or_default()))
        .collect();
    let dact = (0..n)
        .map(|p| column(&|s| s.2.as_ref().map(|d| d[p]), p).map(|v| MeanStd::of(&v)))
        .collect::<Option<Vec<_>>>();
    CosineCurves { frozen, dact, per_seed }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub pretrain: Vec<PretrainReport>,
    pub reports: Vec<AggregatedReport>,
    pub cosine: CosineCurves,
    pub runs: Vec<SeedRun>,
}

/// Runs every seed, aggregates and writes reports, tables and plots.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let runs: Vec<SeedRun> = cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>()?;
    let summary = RunSummary {
        pretrain: runs
            .iter()
            .filter_map(|r| r.records.first().and_then(|x| x.pretrain.clone()))
            .collect(),
        reports: aggregate(&runs),
        cosine: cosine_curves(&runs),
        runs,
    };
    let reports_dir = cfg.out_dir.join("reports");
    write_json(&reports_dir.join("period_0_pretrain.json"), &summary.pretrain)?;
    for r in &summary.reports {
        write_json(&reports_dir.join(format!("period_{}_{}.json", r.period, r.mode)), r)?;
    }
    write_json(&reports_dir.join("cosine_curves.json"), &summary.cosine)?;
    emit_reports(&cfg.out_dir, &summary.reports, Some(&summary.cosine))?;
    if let Some(&seed) = cfg.seeds.first() {
        pca_plot(cfg, seed)?;
    }
    Ok(summary)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DactError::io(parent, e))?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the metric and change-rate tables and the plots.
pub fn emit_reports(out_dir: &Path, reports: &[AggregatedReport], cosine: Option<&CosineCurves>) -> Result<()> {
    let tables = out_dir.join("tables");
    let mut w = csv_writer(&tables.join("metrics.csv"))?;
    w.write_record([
        "period", "mode", "H@5", "H@5_std", "H@10", "H@10_std", "N@5", "N@5_std", "N@10", "N@10_std", "warm_H@10",
        "cold_H@10", "backward_H@10", "drift_auc", "time_ratio", "seeds",
    ])?;
    for r in reports {
        w.write_record([
            r.period.to_string(),
            r.mode.to_string(),
            format!("{:.6}", r.h5),
            format!("{:.6}", r.std.h5),
            format!("{:.6}", r.h10),
            format!("{:.6}", r.std.h10),
            format!("{:.6}", r.n5),
            format!("{:.6}", r.std.n5),
            format!("{:.6}", r.n10),
            format!("{:.6}", r.std.n10),
            format!("{:.6}", r.warm.h10),
            format!("{:.6}", r.cold.h10),
            fmt_opt(r.backward_h10),
            fmt_opt(r.drift_auc.map(|a| a.mean)),
            fmt_opt(r.time_ratio),
            r.seeds.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| DactError::io(tables.join("metrics.csv"), e))?;

    let levels = reports.iter().map(|r| r.change_layer_rates.len()).max().unwrap_or(0);
    let mut w = csv_writer(&tables.join("change_rates.csv"))?;
    let mut header = vec!["period".to_string(), "mode".to_string()];
    header.extend((1..=levels).map(|l| format!("layer{l}")));
    header.push("overall".into());
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.period.to_string(), r.mode.to_string()];
        row.extend((0..levels).map(|l| format!("{:.6}", r.change_layer_rates.get(l).copied().unwrap_or(0.0))));
        row.push(format!("{:.6}", r.change_overall));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| DactError::io(tables.join("change_rates.csv"), e))?;

    let plots = out_dir.join("plots");
    let periods: Vec<usize> = reports.iter().map(|r| r.period).collect::<BTreeSet<_>>().into_iter().collect();
    let modes: Vec<Mode> = reports.iter().map(|r| r.mode).collect::<BTreeSet<_>>().into_iter().collect();
    let lookup = |p: usize, m: Mode| reports.iter().find(|r| r.period == p && r.mode == m);
    if !reports.is_empty() {
        let groups = |f: &dyn Fn(&AggregatedReport) -> f64| -> Vec<Vec<f64>> {
            periods
                .iter()
                .map(|&p| modes.iter().map(|&m| lookup(p, m).map(f).unwrap_or(0.0)).collect())
                .collect()
        };
        plot::bar_chart(&plots.join("h10_by_period.png"), &groups(&|r| r.h10))?;
        plot::bar_chart(&plots.join("change_rates.png"), &groups(&|r| r.change_overall))?;
        plot::bar_chart(&plots.join("time_ratio.png"), &groups(&|r| r.time_ratio.unwrap_or(0.0)))?;
        let last = *periods.last().expect("non-empty");
        let warm_cold: Vec<Vec<f64>> = modes
            .iter()
            .map(|&m| lookup(last, m).map(|r| vec![r.warm.h10, r.cold.h10]).unwrap_or_default())
            .collect();
        plot::bar_chart(&plots.join("warm_cold_h10.png"), &warm_cold)?;
    }
    if let Some(c) = cosine {
        let mut w = csv_writer(&tables.join("cosine.csv"))?;
        w.write_record(["period", "frozen_mean", "frozen_std", "dact_mean", "dact_std"])?;
        for (p, f) in c.frozen.iter().enumerate() {
            let d = c.dact.as_ref().map(|d| d[p]);
            w.write_record([
                p.to_string(),
                format!("{:.6}", f.mean),
                format!("{:.6}", f.std),
                fmt_opt(d.map(|x| x.mean)),
                fmt_opt(d.map(|x| x.std)),
            ])?;
        }
        w.flush().map_err(|e| DactError::io(tables.join("cosine.csv"), e))?;
        let curve = |v: &[MeanStd]| v.iter().enumerate().map(|(p, m)| (p as f64, m.mean)).collect::<Vec<_>>();
        let mut series = vec![curve(&c.frozen)];
        if let Some(d) = &c.dact {
            series.push(curve(d));
        }
        if !c.frozen.is_empty() {
            plot::line_chart(&plots.join("cosine_drift.png"), &series)?;
        }
    }
    Ok(())
}

/// PCA of the last period's CF embeddings colored by layer-1 code of the
/// drift-aware (or, without it, frozen) identifiers.
pub fn pca_plot(cfg: &RunConfig, seed: u64) -> Result<()> {
    let dir = cfg.period_dir(seed, cfg.max_period);
    let (cf, _) = EmbeddingTable::load(&dir.join("cf"))?;
    let ids_path = [Track::Dact, Track::Naive, Track::Frozen]
        .iter()
        .map(|t| dir.join(format!("ids_{}.tsv", t.name())))
        .find(|p| p.exists())
        .ok_or_else(|| DactError::Missing("identifier map for PCA plot".into()))?;
    let ids = read_identifiers_tsv(&ids_path)?;
    let items: Vec<ItemId> = ids.keys().copied().filter(|i| cf.contains(*i)).collect();
    let x = cf.rows(&items)?;
    let pts = plot::pca2(&x)?;
    let colored: Vec<(f64, f64, usize)> = pts
        .into_iter()
        .zip(&items)
        .map(|((a, b), i)| (a, b, ids[i].codes[0]))
        .collect();
    plot::scatter(&cfg.out_dir.join("plots").join("pca_layer1.png"), &colored)
}

/// Rebuilds tables and plots from the JSON reports of a finished run.
pub fn report_dir(out_dir: &Path) -> Result<Vec<AggregatedReport>> {
    let reports_dir = out_dir.join("reports");
    let mut reports = Vec::new();
    let entries = std::fs::read_dir(&reports_dir).map_err(|e| DactError::io(&reports_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("period_") && n.ends_with(".json") && !n.contains("pretrain"))
        })
        .collect();
    paths.sort();
    for p in paths {
        reports.push(read_json::<AggregatedReport>(&p)?);
    }
    reports.sort_by_key(|r| (r.period, r.mode));
    let cosine_path = reports_dir.join("cosine_curves.json");
    let cosine = if cosine_path.exists() {
        Some(read_json::<CosineCurves>(&cosine_path)?)
    } else {
        None
    };
    emit_reports(out_dir, &reports, cosine.as_ref())?;
    Ok(reports)
}

/// Rank of the target for each test window under `grm` and `ids`
/// (exposed for metric oracles).
pub fn ranks_for(grm: &Grm, ids: &Identifiers, windows: &[crate::data::Window], beam_width: usize) -> Result<Vec<Option<usize>>> {
    let trie = Trie::build(&grm.vocab, ids)?;
    target_ranks(grm, &trie, ids, windows, beam_width)
}
