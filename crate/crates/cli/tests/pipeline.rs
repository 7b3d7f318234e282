use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn desk_network() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/desk5.json")
}

/// A run directory plus a config whose stages are small enough for tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        Self::with_network(&desk_network(), extra)
    }

    fn with_network(network: &Path, extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"network = {network:?}
seed = 0
out = {out:?}

[es]
generations = 4
pairs_per_generation = 3

[collect]
episodes = 3
cycles_per_episode = 6

[train]
iterations = 30
hidden = [8, 8]
batch_size = 8

[eval]
episodes = 1
{extra}"#,
            network = network.to_str().unwrap(),
            out = dir.path().join("run").to_str().unwrap(),
        );
        let fx = Fixture { dir };
        std::fs::write(fx.config(), text).unwrap();
        fx
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn run(&self, stage: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_signalopt"))
            .arg(stage)
            .arg("--config")
            .arg(self.config())
            .args(extra)
            .output()
            .unwrap()
    }

    fn ok(&self, stage: &str, extra: &[&str]) -> String {
        let out = self.run(stage, extra);
        assert!(
            out.status.success(),
            "{stage} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.out().join(name)).unwrap()
    }

    fn snapshot(&self) -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(self.out())
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
            })
            .collect()
    }
}

fn data_lines(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn es_writes_one_curve_row_per_generation() {
    let fx = Fixture::new("");
    let stdout = fx.ok("es", &[]);
    assert!(stdout.contains("initial waiting") && stdout.contains("24 queries"), "{stdout}");
    let csv = fx.read("es_curve.csv");
    assert!(csv.starts_with("# stage=es seed=0 config_hash="));
    assert_eq!(data_lines(&csv).len(), 4);
    let plan: serde_json::Value = serde_json::from_str(&fx.read("es_plan.json")).unwrap();
    assert_eq!(plan["meta"]["seed"], 0);
    assert!(plan["meta"]["config_hash"].as_str().unwrap().len() == 16);
    assert!(fx.read("es_curve.svg").starts_with("<svg"));
}

#[test]
fn missing_network_is_a_config_error_with_no_outputs() {
    let fx = Fixture::with_network(Path::new("/nonexistent/network.json"), "");
    let out = fx.run("es", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("network"));
    assert!(!fx.out().exists());
}

#[test]
fn invalid_arguments_and_settings_exit_with_one() {
    let fx = Fixture::new("");
    assert_eq!(fx.run("train", &["--ablation", "half"]).status.code(), Some(1));
    let bad = Fixture::new("[extra]\nx = 1\n");
    assert_eq!(bad.run("es", &[]).status.code(), Some(1));
    let bad = Fixture::new("");
    let text = std::fs::read_to_string(bad.config()).unwrap().replace("generations = 4", "generations = 0");
    std::fs::write(bad.config(), text).unwrap();
    assert_eq!(bad.run("es", &[]).status.code(), Some(1));
    assert!(!bad.out().exists());
}

#[test]
fn reruns_are_byte_identical_and_seeds_are_recorded() {
    let fx = Fixture::new("");
    fx.ok("es", &[]);
    fx.ok("collect", &[]);
    fx.ok("train", &[]);
    let first = fx.snapshot();
    fx.ok("es", &[]);
    fx.ok("collect", &[]);
    fx.ok("train", &[]);
    assert_eq!(first, fx.snapshot());

    let other = fx.dir.path().join("seed7");
    fx.ok("es", &["--seed", "7", "--out", other.to_str().unwrap()]);
    let csv = std::fs::read_to_string(other.join("es_curve.csv")).unwrap();
    assert!(csv.starts_with("# stage=es seed=7 "));
    assert_ne!(csv.lines().next(), fx.read("es_curve.csv").lines().next());
}

#[test]
fn collect_counts_records_and_embeds_metadata() {
    let fx = Fixture::new("");
    fx.ok("es", &[]);
    let text = std::fs::read_to_string(fx.config()).unwrap().replace("episodes = 3", "episodes = 100");
    std::fs::write(fx.config(), text).unwrap();
    let stdout = fx.ok("collect", &[]);
    assert!(stdout.contains("600 records"), "{stdout}");
    let batch = fx.read("batch.jsonl");
    assert_eq!(batch.lines().count(), 601);
    let header: serde_json::Value = serde_json::from_str(batch.lines().next().unwrap()).unwrap();
    assert_eq!(header["meta"]["stage"], "collect");
    assert!(header["provenance"]["network_hash"].is_string());
}

#[test]
fn zero_exploration_records_a_single_action() {
    let fx = Fixture::new("");
    fx.ok("es", &[]);
    let text = std::fs::read_to_string(fx.config()).unwrap().replace("cycles_per_episode = 6", "cycles_per_episode = 6\neta = 0");
    std::fs::write(fx.config(), text).unwrap();
    let stdout = fx.ok("collect", &[]);
    assert!(stdout.contains("1 distinct actions"), "{stdout}");
    let plans: std::collections::BTreeSet<String> = fx
        .read("batch.jsonl")
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["plan"].to_string())
        .collect();
    assert_eq!(plans.len(), 1);
}

#[test]
fn collect_without_a_base_plan_fails_cleanly() {
    let fx = Fixture::new("");
    let out = fx.run("collect", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("es_plan.json"));
    assert!(!fx.out().exists());
}

#[test]
fn full_ablation_writes_six_histories_without_touching_earlier_stages() {
    let fx = Fixture::new("");
    fx.ok("es", &[]);
    fx.ok("collect", &[]);
    let before = fx.snapshot();
    fx.ok("train", &["--ablation", "full"]);
    let after = fx.snapshot();
    for (name, bytes) in &before {
        assert_eq!(after.get(name), Some(bytes), "{name} changed");
    }
    let histories: Vec<&String> = after.keys().filter(|k| k.starts_with("history_")).collect();
    assert_eq!(histories.len(), 6, "{histories:?}");
    assert_eq!(after.keys().filter(|k| k.starts_with("policy_")).count(), 6);
    for h in histories {
        let csv = String::from_utf8(after[h].clone()).unwrap();
        assert!(csv.starts_with("# stage=train seed=0 "));
        assert_eq!(data_lines(&csv).len(), 30);
    }
}

#[test]
fn training_on_a_different_network_warns() {
    let fx = Fixture::new("");
    fx.ok("es", &[]);
    fx.ok("collect", &[]);
    let mut net: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(desk_network()).unwrap()).unwrap();
    net["seed"] = serde_json::json!(99);
    let path = fx.dir.path().join("other.json");
    std::fs::write(&path, net.to_string()).unwrap();
    let text = std::fs::read_to_string(fx.config())
        .unwrap()
        .replace(desk_network().to_str().unwrap(), path.to_str().unwrap());
    std::fs::write(fx.config(), text).unwrap();
    let out = fx.run("train", &[]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn diverging_training_exits_with_two() {
    let fx = Fixture::new("");
    fx.ok("es", &[]);
    fx.ok("collect", &[]);
    let text = std::fs::read_to_string(fx.config())
        .unwrap()
        .replace("batch_size = 8", "batch_size = 8\ncritic_lr = 1e300\nactor_lr = 1e300\ntruncated_lr = 1e300");
    std::fs::write(fx.config(), text).unwrap();
    let out = fx.run("train", &[]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(!fx.out().join("history_full.csv").exists());
}

#[test]
fn eval_requires_earlier_artifacts() {
    let fx = Fixture::new("");
    assert_eq!(fx.run("eval", &[]).status.code(), Some(1));
    assert_eq!(fx.run("report", &[]).status.code(), Some(1));
    assert!(!fx.out().exists());
}

/// Independent recomputation of the reported percentages from the raw
/// waiting-time column.
fn recompute(eval_csv: &str) -> BTreeMap<String, (f64, f64, f64, f64)> {
    let rows: Vec<Vec<&str>> = data_lines(eval_csv).iter().map(|l| l.split(',').collect()).collect();
    let waiting = |name: &str| rows.iter().find(|r| r[0] == name).unwrap()[1].parse::<f64>().unwrap();
    let (init, es) = (waiting("initial"), waiting("es"));
    let reduction = |reference: f64, w: f64| if reference == 0.0 { 0.0 } else { (reference - w) / reference * 100.0 };
    rows.iter()
        .map(|r| {
            let w: f64 = r[1].parse().unwrap();
            let reported = (r[2].parse().unwrap(), r[3].parse().unwrap());
            (r[0].to_string(), (reduction(init, w), reduction(es, w), reported.0, reported.1))
        })
        .collect()
}

#[test]
fn eval_and_report_percentages_match_a_recomputation() {
    let fx = Fixture::new("");
    fx.ok("es", &[]);
    fx.ok("collect", &[]);
    fx.ok("train", &[]);
    fx.ok("eval", &[]);
    let csv = fx.read("eval.csv");
    let table = recompute(&csv);
    assert_eq!(table.keys().cloned().collect::<Vec<_>>(), ["es", "initial", "marl_full"]);
    for (name, (vs_init, vs_es, rep_init, rep_es)) in &table {
        assert!((vs_init - rep_init).abs() < 1e-3, "{name}: {vs_init} vs {rep_init}");
        assert!((vs_es - rep_es).abs() < 1e-3, "{name}: {vs_es} vs {rep_es}");
    }
    let stdout = fx.ok("report", &[]);
    assert!(stdout.contains(&format!("ES vs initial: {:+.2}%", table["es"].0)), "{stdout}");
    assert!(stdout.contains(&format!("marl_full vs ES: {:+.2}%", table["marl_full"].1)), "{stdout}");
    assert!(fx.read("report.md").starts_with("<!-- stage=report seed=0 config_hash="));
    assert!(fx.read("report.svg").contains("marl_full"));
}

#[test]
fn zero_demand_scores_zero_everywhere() {
    let mut net: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(desk_network()).unwrap()).unwrap();
    for d in net["demand"].as_array_mut().unwrap() {
        d["rate"] = serde_json::json!(0.0);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    std::fs::write(&path, net.to_string()).unwrap();
    let fx = Fixture::with_network(&path, "");
    fx.ok("es", &[]);
    fx.ok("collect", &[]);
    fx.ok("train", &[]);
    fx.ok("eval", &[]);
    let csv = fx.read("eval.csv");
    let rows = data_lines(&csv);
    assert_eq!(rows.len(), 3);
    for row in rows {
        let cols: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(cols, vec![0.0, 0.0, 0.0], "{row}");
    }
}

#[test]
fn shipped_network_matches_the_library_builder() {
    let shipped = signalopt::NetworkSpec::from_json(&std::fs::read_to_string(desk_network()).unwrap()).unwrap();
    assert_eq!(shipped, signalopt::scenario::desk_network());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for name in ["desk.toml", "smoke.toml"] {
        let out = Command::new(env!("CARGO_BIN_EXE_signalopt"))
            .args(["report", "--config"])
            .arg(dir.join(name))
            .args(["--out", "/nonexistent/run"])
            .output()
            .unwrap();
        // The config loads; the report then stops at the missing evaluation.
        assert_eq!(out.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&out.stderr).contains("eval.csv"), "{name}");
    }
}
