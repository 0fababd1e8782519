use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dact_core::checkpoint::read_json;
use dact_core::harness::{report_dir, run_pipeline, AggregatedReport, Mode, RunConfig, RunSummary};

const TINY: &str = r#"
seeds = [3]
max_period = 4
max_len = 8
grm_pretrain_epochs = 1
grm_finetune_epochs = 1

[synthetic]
n_users = 60
n_items = 40
n_clusters = 4

[cf]
d_cf = 8
epochs = 2

[tokenizer]
d_sem = 64
hidden = [16]
d_c = 8
levels = 3
codes = 8
d_cf = 8

[pretrain]
steps = 60
batch_size = 32

[adapt]
steps = 30
batch_size = 32

[adapt.cdim]
slots = 8
d_c = 8
head_hidden = 8

[grm]
d_model = 16
heads = 2
layers = 1
d_ff = 32
max_items = 3
beam_width = 10
"#;

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(TINY).expect("tiny config parses");
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Drops wall-clock fields so that two runs can be compared exactly.
fn without_timings(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            for key in ["seconds", "tokenizer_seconds", "grm_seconds", "cf_seconds", "update_seconds", "time_ratio"] {
                map.remove(key);
            }
            map.values_mut().for_each(without_timings);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(without_timings),
        _ => {}
    }
}

fn json_without_timings(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = read_json(path).unwrap();
    without_timings(&mut v);
    v
}

fn full_run() -> (tempfile::TempDir, RunConfig, RunSummary) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let summary = run_pipeline(&cfg).unwrap();
    (dir, cfg, summary)
}

#[test]
fn full_matrix_writes_every_output() {
    let (_dir, cfg, summary) = full_run();
    let out = &cfg.out_dir;
    assert_eq!(summary.reports.len(), 4 * Mode::ALL.len());

    let mut rdr = csv::Reader::from_path(out.join("tables/metrics.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 20);
    let header = rdr.headers().unwrap().clone();
    for col in ["period", "mode", "H@5", "H@10", "N@5", "N@10", "warm_H@10", "cold_H@10"] {
        assert!(header.iter().any(|h| h == col), "missing column {col}");
    }
    let mut rdr = csv::Reader::from_path(out.join("tables/change_rates.csv")).unwrap();
    assert_eq!(rdr.records().count(), 20);

    for p in 1..=4 {
        for m in Mode::ALL {
            let path = out.join(format!("reports/period_{p}_{m}.json"));
            let back: AggregatedReport = read_json(&path).unwrap();
            let mine = summary.reports.iter().find(|r| r.period == p && r.mode == m).unwrap();
            assert_eq!(&back, mine);
            let raw: serde_json::Value = read_json(&path).unwrap();
            for key in ["period", "mode", "H@5", "H@10", "N@5", "N@10", "warm", "cold"] {
                assert!(raw.get(key).is_some(), "{key} missing from {}", path.display());
            }
        }
        let conf = std::fs::read_to_string(cfg.period_dir(3, p).join("confidences.tsv")).unwrap();
        let mut lines = conf.lines();
        assert_eq!(lines.next(), Some("item_id\td_i"));
        for line in lines {
            let (_, d) = line.split_once('\t').unwrap();
            let d: f64 = d.parse().unwrap();
            assert!((0.0..=1.0).contains(&d));
        }
    }
    for plot in ["h10_by_period", "change_rates", "time_ratio", "warm_cold_h10", "cosine_drift", "pca_layer1"] {
        let img = image::open(out.join(format!("plots/{plot}.png"))).unwrap();
        assert!(img.width() > 0);
    }

    // Rebuilding from the JSON reports gives the same aggregates and tables.
    let csv_before = std::fs::read(out.join("tables/metrics.csv")).unwrap();
    let rebuilt = report_dir(out).unwrap();
    assert_eq!(rebuilt, summary.reports);
    assert_eq!(std::fs::read(out.join("tables/metrics.csv")).unwrap(), csv_before);

    // Structural facts per mode.
    for r in &summary.reports {
        match r.mode {
            Mode::Frozen | Mode::FtGrm => assert_eq!(r.change_overall, 0.0),
            Mode::Dact => {
                assert_eq!(r.change_overall, r.change_layer_rates[0]);
                assert!(r.drift_auc.is_some());
            }
            _ => {}
        }
        assert!(r.per_seed.iter().all(|s| s.grm_log.is_some() == r.mode.trains_grm()));
        assert!(r.time_ratio.is_some());
    }
    let ratio = summary.reports.iter().find(|r| r.mode == Mode::FtGrm).unwrap().time_ratio;
    assert_eq!(ratio, Some(1.0));
}

#[test]
fn interrupted_run_resumes_to_identical_state() {
    let (_a, full_cfg, _) = full_run();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.max_period = 2;
    run_pipeline(&cfg).unwrap();
    // Simulate a crash in the middle of period 3: a partial directory without record.json.
    let partial = cfg.period_dir(3, 3);
    std::fs::create_dir_all(&partial).unwrap();
    std::fs::write(partial.join("confidences.tsv"), "item_id\td_i\n").unwrap();
    cfg.max_period = 4;
    run_pipeline(&cfg).unwrap();

    for p in 0..=4 {
        let a = files_under(&full_cfg.period_dir(3, p));
        let b = files_under(&cfg.period_dir(3, p));
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>(), "period {p} file sets");
        for (name, bytes) in &a {
            if name == Path::new("record.json") {
                continue;
            }
            assert!(bytes == &b[name], "period {p}: {} differs after resume", name.display());
        }
        let record = PathBuf::from("record.json");
        assert_eq!(
            json_without_timings(&full_cfg.period_dir(3, p).join(&record)),
            json_without_timings(&cfg.period_dir(3, p).join(&record)),
        );
    }
    for m in Mode::ALL {
        let name = format!("reports/period_4_{m}.json");
        assert_eq!(
            json_without_timings(&full_cfg.out_dir.join(&name)),
            json_without_timings(&cfg.out_dir.join(&name))
        );
    }
}

#[test]
fn modes_do_not_influence_each_other() {
    let (_a, _, full) = full_run();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.modes = vec![Mode::Frozen, Mode::Dact];
    let partial = run_pipeline(&cfg).unwrap();
    for r in &partial.reports {
        let other = full.reports.iter().find(|x| x.period == r.period && x.mode == r.mode).unwrap();
        assert_eq!(r.per_seed[0].metrics, other.per_seed[0].metrics, "P{} {}", r.period, r.mode);
        assert_eq!(r.per_seed[0].change, other.per_seed[0].change);
        assert_eq!(r.per_seed[0].drift_auc, other.per_seed[0].drift_auc);
    }
    // ft-grm is absent, so no time ratio can be formed.
    assert!(partial.reports.iter().all(|r| r.time_ratio.is_none()));
}

#[test]
fn config_errors_are_reported() {
    let bad = TINY.replace("max_period = 4", "max_period = 5");
    assert!(RunConfig::from_toml(&bad).is_err());
    let bad = TINY.replace("[adapt]\n", "[adapt]\nweights = { lambda = 0.7 }\n");
    assert!(RunConfig::from_toml(&bad).is_err());
    assert!(RunConfig::from_toml("seeds = []").is_err());
    assert!(RunConfig::from_toml("not toml at all [").is_err());
}
