use dact_core::data::{ItemId, UserId, Window};
use dact_core::grm::{encode_history, Grm, GrmConfig, Trie, Vocab};
use dact_core::tokenizer::{Identifiers, TokenSequence};

const N_ITEMS: u32 = 5;

fn toy() -> (Vocab, Identifiers) {
    let vocab = Vocab {
        levels: 2,
        codes: 3,
        max_suffix: 2,
    };
    let paths = [[0, 0], [0, 1], [1, 0], [1, 1], [2, 0]];
    let ids = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                ItemId(i as u32),
                TokenSequence {
                    codes: p.to_vec(),
                    suffix: 0,
                },
            )
        })
        .collect();
    (vocab, ids)
}

/// Every user walks the cycle 0 -> 1 -> ... -> 4 -> 0 from a different start.
fn cycle_windows() -> Vec<Window> {
    let mut out = Vec::new();
    for start in 0..N_ITEMS {
        for len in 1..=3u32 {
            let context: Vec<ItemId> = (0..len).map(|k| ItemId((start + k) % N_ITEMS)).collect();
            out.push(Window {
                user: UserId(start * 10 + len),
                context,
                target: ItemId((start + len) % N_ITEMS),
            });
        }
    }
    out
}

fn config() -> GrmConfig {
    GrmConfig {
        d_model: 32,
        heads: 2,
        layers: 1,
        d_ff: 64,
        max_items: 3,
        batch_size: 5,
        lr: 3e-3,
        beam_width: 5,
        max_suffix: 2,
        ..GrmConfig::default()
    }
}

#[test]
fn initial_nll_is_close_to_uniform() {
    let (vocab, ids) = toy();
    let grm = Grm::new(config(), vocab, 1).unwrap();
    let examples: Vec<_> = cycle_windows().iter().map(|w| grm.example(&ids, w).unwrap()).collect();
    let uniform = (vocab.size() as f64).ln();
    let nll = grm.mean_nll(&examples);
    assert!((nll - uniform).abs() < 0.05 * uniform, "nll {nll} vs ln|V| {uniform}");
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let (vocab, ids) = toy();
    let mut grm = Grm::new(config(), vocab, 2).unwrap();
    let before = grm.store.clone();
    let log = grm.train(&cycle_windows(), &ids, 0, 0).unwrap();
    assert_eq!(log.steps, 0);
    assert_eq!(log.probe_initial, log.probe_final);
    assert_eq!(grm.store, before);
}

#[test]
fn memorizes_a_deterministic_cycle() {
    let (vocab, ids) = toy();
    let mut grm = Grm::new(config(), vocab, 3).unwrap();
    let windows = cycle_windows();
    let log = grm.train(&windows, &ids, 150, 4).unwrap();
    assert!(log.probe_final < 0.1 * log.probe_initial, "{log:?}");
    let trie = Trie::build(&vocab, &ids).unwrap();
    for w in &windows {
        let ctx = encode_history(&vocab, &ids, &w.context, 3).unwrap();
        let recs = grm.recommend(&trie, &ctx, 1, 5).unwrap();
        assert_eq!(recs[0].0, w.target, "context {:?}", w.context);
    }
}

#[test]
fn recommendations_are_valid_distinct_and_sorted() {
    let (vocab, ids) = toy();
    let grm = Grm::new(config(), vocab, 5).unwrap();
    let trie = Trie::build(&vocab, &ids).unwrap();
    let ctx = encode_history(&vocab, &ids, &[ItemId(2), ItemId(4)], 3).unwrap();
    let recs = grm.recommend(&trie, &ctx, 5, 5).unwrap();
    assert_eq!(recs.len(), 5);
    let mut seen: Vec<ItemId> = recs.iter().map(|r| r.0).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 5);
    assert!(recs.windows(2).all(|w| w[0].1 >= w[1].1));
    // Exhaustive search: path probabilities over all items sum to one.
    let total: f64 = recs.iter().map(|r| r.1.exp()).sum();
    assert!((total - 1.0).abs() < 1e-9, "{total}");
    assert!(grm.recommend(&trie, &ctx, 6, 5).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_recommendations() {
    let (vocab, ids) = toy();
    let mut grm = Grm::new(config(), vocab, 6).unwrap();
    grm.train(&cycle_windows(), &ids, 2, 0).unwrap();
    grm.store.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    grm.save(dir.path()).unwrap();
    let back = Grm::load(dir.path()).unwrap();
    assert_eq!(back.store, grm.store);
    let trie = Trie::build(&vocab, &ids).unwrap();
    let ctx = encode_history(&vocab, &ids, &[ItemId(1)], 3).unwrap();
    assert_eq!(grm.recommend(&trie, &ctx, 5, 5).unwrap(), back.recommend(&trie, &ctx, 5, 5).unwrap());
}
