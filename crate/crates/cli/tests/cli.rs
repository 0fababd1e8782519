use std::path::Path;
use std::process::{Command, Output};

fn dact(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dact"));
    cmd.args(args).env_remove("DACT_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"
seeds = [0]
out_dir = "{}"
max_period = 1
max_len = 8
grm_pretrain_epochs = 1
grm_finetune_epochs = 1

[synthetic]
n_users = 50
n_items = 30
n_clusters = 3

[cf]
d_cf = 8
epochs = 1

[tokenizer]
hidden = [16]
d_c = 8
codes = 8
d_cf = 8

[pretrain]
steps = 20

[adapt]
steps = 10

[adapt.cdim]
d_c = 8
slots = 4
head_hidden = 4

[grm]
d_model = 16
heads = 2
layers = 1
d_ff = 16
max_items = 3
beam_width = 10
"#,
        out.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn data_gen_then_cf_train_with_warm_start() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "n_users = 40\nn_items = 30\nn_clusters = 3\nseed = 5\n").unwrap();
    let corpus = dir.path().join("corpus");
    let stdout = ok(&dact(&["data", "gen", "--spec", spec.to_str().unwrap(), "--out", corpus.to_str().unwrap()], &[]));
    assert!(stdout.contains("40 users"), "{stdout}");
    for p in 0..5 {
        assert!(corpus.join(format!("period_{p}.tsv")).exists());
    }
    let cf0 = dir.path().join("cf0");
    let cf1 = dir.path().join("cf1");
    let c = corpus.to_str().unwrap();
    ok(&dact(&["cf", "train", "--data", c, "--period", "0", "--out", cf0.to_str().unwrap()], &[]));
    let stdout = ok(&dact(
        &["cf", "train", "--data", c, "--period", "1", "--warm-start", cf0.to_str().unwrap(), "--out", cf1.to_str().unwrap()],
        &[],
    ));
    assert!(stdout.contains("item embeddings"));
    assert!(cf1.join("manifest.json").exists());

    let err = dact(&["cf", "train", "--data", c, "--period", "9", "--out", cf1.to_str().unwrap()], &[]);
    assert!(!err.status.success());
}

#[test]
fn ingest_filters_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("events.tsv");
    let mut text = String::new();
    for u in 0..12 {
        for i in 0..7 {
            text.push_str(&format!("{u}\t{i}\t{}\n", u * 100 + i));
        }
    }
    // One sparse user and item that the 5-core removes.
    text.push_str("99\t99\t5\n");
    std::fs::write(&tsv, &text).unwrap();
    let out = dir.path().join("ingested");
    let stdout = ok(&dact(
        &["data", "ingest", "--tsv", tsv.to_str().unwrap(), "--min-count", "5", "--out", out.to_str().unwrap()],
        &[],
    ));
    assert!(stdout.contains("12 users, 7 items, 84 interactions"), "{stdout}");
    assert!(out.join("semantic/manifest.json").exists());

    std::fs::write(&tsv, "1\t2\t3\nnot\ta\tline\n").unwrap();
    let bad = dact(&["data", "ingest", "--tsv", tsv.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));
}

#[test]
fn run_adapt_and_report_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = tiny_config(dir.path(), &out);
    let cfg = cfg.to_str().unwrap();

    let stdout = ok(&dact(&["run", "--config", cfg], &[("DACT_SEED", "7")]));
    assert!(stdout.contains("H@10"));
    assert!(out.join("seed_7/period_1/record.json").exists());
    assert!(!out.join("seed_0").exists());
    assert!(out.join("tables/metrics.csv").exists());
    assert!(out.join("reports/period_1_dact.json").exists());

    let report = ok(&dact(&["report", "--dir", out.to_str().unwrap()], &[]));
    assert_eq!(report.lines().filter(|l| l.contains("dact")).count(), 1);

    let other = dir.path().join("adapt");
    let stdout = ok(&dact(&["run", "--config", cfg, "--out", other.to_str().unwrap()], &[("DACT_SEED", "1,2")]));
    assert!(stdout.contains("ft-both"));
    assert!(other.join("seed_1").exists() && other.join("seed_2").exists());

    let stdout = ok(&dact(&["adapt", "--period", "1", "--mode", "dact", "--config", cfg], &[]));
    assert!(stdout.contains("confidences.tsv"), "{stdout}");
    let conf = std::fs::read_to_string(out.join("seed_0/period_1/confidences.tsv")).unwrap();
    assert!(conf.starts_with("item_id\td_i\n"));

    let bad = dact(&["run", "--config", cfg], &[("DACT_SEED", "x")]);
    assert!(!bad.status.success());
}
