use std::path::Path;
use std::process::{Command, Output};

fn projclust(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_projclust"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = projclust(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const CONFIG: &str = r#"seed = 3
input = "sim/data.csv"
labels = "sim/labels.csv"
k = 4

[simulate]
n_per_group = 3
t = 16

[mcmc]
n_chains = 2
n_iter = 120
burn_in = 60
thin = 3
"#;

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.toml"), CONFIG).unwrap();
    ok(tmp.path(), &["simulate", "--config", "run.toml", "--out", "sim"]);
    tmp
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn simulate_defaults_to_forty_by_forty() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["simulate", "--out", "o"]);
    let data = read(tmp.path(), "o/data.csv");
    assert_eq!(data.lines().count(), 1 + 40 * 40);
    let labels = read(tmp.path(), "o/labels.csv");
    assert_eq!(labels.lines().count(), 41);
    let echo = read(tmp.path(), "o/config.simulate.toml");
    assert!(echo.starts_with("# sha256 = \""));
}

#[test]
fn exit_codes() {
    let tmp = setup();
    let d = tmp.path();
    let bad_shared = projclust(d, &["fit", "--config", "run.toml", "--out", "o", "--shared", "low:0..10"]);
    assert_eq!(bad_shared.status.code(), Some(2));
    assert!(!d.join("o/draws.jsonl").exists());

    std::fs::write(d.join("zero.toml"), "[simulate]\nn_per_group = 0\n").unwrap();
    assert_eq!(projclust(d, &["simulate", "--config", "zero.toml", "--out", "z2"]).status.code(), Some(2));

    std::fs::write(d.join("missing.toml"), "input = \"nope.csv\"\nk = 2\n").unwrap();
    assert_eq!(projclust(d, &["fit", "--config", "missing.toml", "--out", "m"]).status.code(), Some(4));
    assert_eq!(projclust(d, &["fit", "--config", "absent.toml", "--out", "m"]).status.code(), Some(4));

    std::fs::write(d.join("both.toml"), format!("{CONFIG}\n[selection.kl]\nepsilon = 0.1\n")).unwrap();
    assert_eq!(projclust(d, &["fit", "--config", "both.toml", "--out", "b"]).status.code(), Some(2));

    assert_eq!(projclust(d, &["cluster", "--config", "run.toml", "--out", "nothing"]).status.code(), Some(4));
}

#[test]
fn fit_refuses_to_overwrite_without_force() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["fit", "--config", "run.toml", "--out", "o"]);
    let first = read(d, "o/draws.jsonl");
    assert_eq!(first.lines().count(), 1 + 2 * 20);
    let again = projclust(d, &["fit", "--config", "run.toml", "--out", "o"]);
    assert_eq!(again.status.code(), Some(2));
    ok(d, &["fit", "--config", "run.toml", "--out", "o", "--force"]);
    assert_eq!(read(d, "o/draws.jsonl"), first);
}

#[test]
fn cluster_with_k_equal_n_has_zero_objectives() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["fit", "--config", "run.toml", "--out", "o"]);
    ok(d, &["cluster", "--config", "run.toml", "--out", "o", "--k", "12"]);
    let parts = read(d, "o/partitions.jsonl");
    assert_eq!(parts.lines().count(), 40);
    for line in parts.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["K"], 12);
        assert_eq!(v["objective"].as_f64().unwrap(), 0.0);
    }
    let summary: serde_json::Value = serde_json::from_str(&read(d, "o/coincidence_summary.json")).unwrap();
    assert_eq!(summary["solid_pairs"], 0);
    assert_eq!(summary["n_pairs"], 66);
}

#[test]
fn select_k_reports_a_choice_consistent_with_its_curve() {
    let tmp = setup();
    let d = tmp.path();
    std::fs::write(
        d.join("sel.toml"),
        CONFIG.replace("k = 4\n", "") + "\n[selection.kl]\nepsilon = 0.1\nk_max = 8\nn_draws = 10\n\n[selection.bootstrap]\nreps = 10\nk_max = 6\n",
    )
    .unwrap();
    ok(d, &["fit", "--config", "sel.toml", "--out", "o"]);
    ok(d, &["select-k", "--config", "sel.toml", "--out", "o"]);
    let report: serde_json::Value = serde_json::from_str(&read(d, "o/k_selected.json")).unwrap();
    let k_kl = report["kl"]["k"].as_u64().unwrap() as usize;
    let curve = read(d, "o/kl_curve.csv");
    let ratios: Vec<(usize, f64)> = curve
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(ratios.len(), 8);
    let first_below = ratios.iter().find(|(_, r)| *r < 0.1).map(|(k, _)| *k).unwrap_or(8);
    assert_eq!(k_kl, first_below);
    assert!(ratios.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-8));

    let inst = read(d, "o/instability_curve.csv");
    assert_eq!(inst.lines().count(), 1 + 5);
    let k_boot = report["bootstrap"]["k"].as_u64().unwrap();
    assert!((2..=6).contains(&k_boot));

    // cluster takes K from the report
    ok(d, &["cluster", "--config", "sel.toml", "--out", "o"]);
    let first: serde_json::Value = serde_json::from_str(read(d, "o/partitions.jsonl").lines().next().unwrap()).unwrap();
    assert_eq!(first["K"].as_u64().unwrap() as usize, k_kl);
}

#[test]
fn evaluate_against_own_partitions_gives_one() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["fit", "--config", "run.toml", "--out", "o"]);
    ok(d, &["cluster", "--config", "run.toml", "--out", "o", "--k", "4"]);
    // reference labels equal to the first partition
    let first: serde_json::Value = serde_json::from_str(read(d, "o/partitions.jsonl").lines().next().unwrap()).unwrap();
    let data = read(d, "sim/labels.csv");
    let ids: Vec<&str> = data.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let mut labels = String::from("subject,label\n");
    for (id, l) in ids.iter().zip(first["labels"].as_array().unwrap()) {
        labels.push_str(&format!("{id},{l}\n"));
    }
    std::fs::write(d.join("own.csv"), labels).unwrap();
    std::fs::write(d.join("one.toml"), "input = \"sim/data.csv\"\nlabels = \"own.csv\"\npartitions = \"first.jsonl\"\n").unwrap();
    std::fs::write(d.join("first.jsonl"), read(d, "o/partitions.jsonl").lines().next().unwrap()).unwrap();
    ok(d, &["evaluate", "--config", "one.toml", "--out", "e"]);
    let report: serde_json::Value = serde_json::from_str(&read(d, "e/evaluation.json")).unwrap();
    assert_eq!(report["rand_mean"], 1.0);
    assert_eq!(report["ari_mean"], 1.0);

    ok(d, &["evaluate", "--config", "run.toml", "--out", "o"]);
    let report: serde_json::Value = serde_json::from_str(&read(d, "o/evaluation.json")).unwrap();
    assert_eq!(report["n_partitions"], 40);
}

#[test]
fn spectrum_writes_a_loadable_dataset() {
    let tmp = setup();
    let d = tmp.path();
    std::fs::write(d.join("spec.toml"), "input = \"sim/data.csv\"\n[spectrum]\nn_freq = 8\n").unwrap();
    ok(d, &["spectrum", "--config", "spec.toml", "--out", "s"]);
    let ds = projclust::data::load_csv(d.join("s/spectrum.csv")).unwrap();
    assert_eq!(ds.n_subjects(), 12);
    assert!(ds.subjects.iter().all(|s| s.len() == 8 && s.y.iter().all(|&v| v >= 0.0)));
    std::fs::write(d.join("long.toml"), "input = \"sim/data.csv\"\n[spectrum]\nn_freq = 17\n").unwrap();
    assert_eq!(projclust(d, &["spectrum", "--config", "long.toml", "--out", "s2"]).status.code(), Some(2));
}
