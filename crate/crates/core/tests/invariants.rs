use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dact_core::adapt::split_topk;
use dact_core::cf::auc;
use dact_core::checkpoint::{decode_f32, encode_f32};
use dact_core::data::{build_periods, period_sizes, InteractionEvent, ItemId, UserId};
use dact_core::grm::Metrics;
use dact_core::reassign::{is_unique, reassign, Policy};
use dact_core::table::EmbeddingTable;
use dact_core::tokenizer::{dedup_in_order, Identifiers, Tokenizer, TokenizerConfig};

fn small_tokenizer(seed: u64) -> Tokenizer {
    let cfg = TokenizerConfig {
        d_sem: 8,
        hidden: vec![8],
        d_c: 4,
        levels: 3,
        codes: 3,
        d_cf: 4,
        ..TokenizerConfig::default()
    };
    Tokenizer::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn semantic(n: usize, values: &[f64]) -> EmbeddingTable {
    let ids = (0..n as u32).map(ItemId).collect();
    let data = Array2::from_shape_fn((n, 8), |(i, j)| values[(i * 8 + j) % values.len()] + 0.1 * i as f64);
    EmbeddingTable::new(ids, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn period_sizes_partition_the_stream(n in 0usize..1_000_000) {
        let s = period_sizes(n);
        prop_assert_eq!(s.iter().sum::<usize>(), n);
        prop_assert_eq!(s[0], n * 6 / 10);
        let tail = &s[1..];
        prop_assert!(tail.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }

    #[test]
    fn periods_preserve_every_event(raw in prop::collection::vec((0u32..20, 0u32..30, 0i64..500), 1..300)) {
        let events: Vec<InteractionEvent> = raw
            .iter()
            .map(|&(u, i, t)| InteractionEvent { user: UserId(u), item: ItemId(i), timestamp: t })
            .collect();
        let periods = build_periods(events.clone());
        prop_assert_eq!(periods.len(), 5);
        let sizes: Vec<usize> = periods.iter().map(|p| p.n_events()).collect();
        prop_assert_eq!(sizes, period_sizes(events.len()).to_vec());
        // Chronological: no event of a later period precedes one of an earlier period.
        for w in periods.windows(2) {
            if let (Some(a), Some(b)) = (w[0].events.last(), w[1].events.first()) {
                prop_assert!(a.timestamp <= b.timestamp);
            }
        }
        let mut seen: BTreeSet<ItemId> = periods[0].item_set.clone();
        prop_assert!(periods[0].cold_items.is_empty());
        for p in &periods[1..] {
            let fresh: BTreeSet<ItemId> = p.item_set.difference(&seen).copied().collect();
            prop_assert_eq!(&p.cold_items, &fresh);
            seen.extend(fresh);
        }
    }

    #[test]
    fn auc_is_bounded_and_antisymmetric(
        pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let a = auc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = auc(&neg, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_laws_hold_for_any_ranks(ranks in prop::collection::vec(prop::option::of(1usize..=10), 1..200)) {
        let m = Metrics::from_ranks(&ranks);
        prop_assert!(m.n5 <= m.h5 + 1e-12 && m.n10 <= m.h10 + 1e-12);
        prop_assert!(m.h5 <= m.h10 && m.n5 <= m.n10);
        prop_assert!(m.h10 <= 1.0 && m.n10 <= 1.0 + 1e-12);
        prop_assert_eq!(m.users, ranks.len());
    }

    #[test]
    fn topk_split_is_a_partition(conf in prop::collection::vec(0.0f64..1.0, 2..50), k in 0.05f64..0.95) {
        let items: Vec<ItemId> = (0..conf.len() as u32).map(ItemId).collect();
        let p = split_topk(&conf, &items, k).unwrap();
        prop_assert_eq!(p.n_drift(), ((k * conf.len() as f64).ceil() as usize).min(conf.len()));
        prop_assert_eq!(p.n_drift() + p.n_stable(), conf.len());
        let min_drift = p.drift.iter().map(|&i| conf[i]).fold(f64::INFINITY, f64::min);
        for (i, &m) in p.mask.iter().enumerate() {
            if !m {
                prop_assert!(conf[i] <= min_drift);
            }
        }
    }

    #[test]
    fn dedup_gives_unique_identifiers(codes in prop::collection::vec(prop::collection::vec(0usize..3, 2), 1..40)) {
        let raw: Vec<(ItemId, Vec<usize>)> = codes.iter().cloned().enumerate().map(|(i, c)| (ItemId(i as u32), c)).collect();
        let ids = dedup_in_order(raw.clone());
        prop_assert!(is_unique(&ids));
        for (item, c) in raw {
            prop_assert_eq!(&ids[&item].codes, &c);
        }
    }

    #[test]
    fn f32_checkpoint_encoding_is_exact_rounding(values in prop::collection::vec(-1e6f64..1e6, 1..64)) {
        let m = Array2::from_shape_vec((1, values.len()), values.clone()).unwrap();
        let back = decode_f32(&encode_f32(&m), [1, values.len()]).unwrap();
        for (a, b) in values.iter().zip(back.iter()) {
            prop_assert_eq!(*a as f32 as f64, *b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reassignment_policies_respect_their_contracts(
        seed in 0u64..1000,
        values in prop::collection::vec(-1.0f64..1.0, 16..64),
        n_old in 2usize..20,
        n_new in 0usize..10,
    ) {
        let tok_a = small_tokenizer(seed);
        let tok_b = small_tokenizer(seed + 1);
        let table = semantic(n_old + n_new, &values);
        let old: Vec<ItemId> = (0..n_old as u32).map(ItemId).collect();
        let all: Vec<ItemId> = (0..(n_old + n_new) as u32).map(ItemId).collect();
        let (prev, _) = reassign(&tok_a, &Identifiers::new(), &table, &old, Policy::Full).unwrap();
        prop_assert!(is_unique(&prev));

        for policy in [Policy::Hierarchical, Policy::Full, Policy::ExtendOnly] {
            let (next, report) = reassign(&tok_b, &prev, &table, &all, policy).unwrap();
            prop_assert!(is_unique(&next));
            prop_assert_eq!(next.len(), all.len());
            prop_assert_eq!(report.n_existing, n_old);
            prop_assert_eq!(report.n_new, n_new);
            let (again, second) = reassign(&tok_b, &next, &table, &all, policy).unwrap();
            prop_assert_eq!(&again, &next);
            prop_assert_eq!(second.overall, 0.0);
            match policy {
                Policy::ExtendOnly => {
                    for i in &old {
                        prop_assert_eq!(&next[i], &prev[i]);
                    }
                    prop_assert_eq!(report.overall, 0.0);
                }
                Policy::Hierarchical => {
                    prop_assert_eq!(report.overall, report.layer_rates[0]);
                    for i in &old {
                        if next[i].codes[0] == prev[i].codes[0] {
                            prop_assert_eq!(&next[i], &prev[i]);
                        }
                    }
                }
                Policy::Full => {
                    prop_assert!(report.layer_rates.iter().all(|&r| r <= report.overall));
                }
            }
        }
    }

    #[test]
    fn quantization_reconstructs_the_latent(seed in 0u64..1000, values in prop::collection::vec(-2.0f64..2.0, 8..80)) {
        let tok = small_tokenizer(seed);
        let table = semantic(10, &values);
        let q = tok.tokenize(table.matrix().view()).unwrap();
        let latent = tok.encode(table.matrix().view()).unwrap();
        let back = &q.r_hat + &q.residuals[3];
        for (a, b) in back.iter().zip(latent.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
