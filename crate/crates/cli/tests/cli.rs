use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "corpus.n_qa_unique_pos=20",
    "corpus.n_qa_unique_neg=20",
    "corpus.n_gs_unique_pos=16",
    "corpus.n_gs_unique_neg=16",
    "simulation.population.n_annotators=40",
    "simulation.n_trials=60",
    "aggregation.k=3",
    "aggregation.n_replicates=5",
    "aggregation.sweep_sizes=[1, 3]",
    "downstream.search_repeats=1",
    "downstream.eval_repeats=1",
    "downstream.epochs=[5]",
];

fn crowdcal(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crowdcal"));
    cmd.args(args);
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn evaluate_hand_written_woc_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let woc = tmp.path().join("woc.csv");
    let truth = tmp.path().join("truth.csv");
    fs::write(&woc, "replicate,variant,item_id,label\n0,EB,a,0.9\n0,EB,b,0.9\n0,EB,c,0.1\n0,EB,d,0.1\n").unwrap();
    fs::write(&truth, "item_id,true_label\na,1\nb,1\nc,0\nd,1\n").unwrap();
    let out = tmp.path().join("run");
    let res = crowdcal(
        &["evaluate", "--woc", woc.to_str().unwrap(), "--truth", truth.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[..2], ["EB", "0"]);
    assert!((row[2].parse::<f64>().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[4].parse::<f64>().unwrap(), 0.25);
    let m = manifest(&out);
    assert_eq!(m["complete"], true);
    let listed: Vec<&String> = m["artifacts"].as_object().unwrap().keys().collect();
    assert_eq!(listed, ["config.toml", "curves.csv", "metrics.csv"]);
}

#[test]
fn evaluate_rejects_labels_without_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let woc = tmp.path().join("woc.csv");
    let truth = tmp.path().join("truth.csv");
    fs::write(&woc, "replicate,variant,item_id,label\n0,EB,a,0.9\n0,EB,z,0.2\n").unwrap();
    fs::write(&truth, "item_id,true_label\na,1\n").unwrap();
    let out = tmp.path().join("run");
    let res = crowdcal(
        &["evaluate", "--woc", woc.to_str().unwrap(), "--truth", truth.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(!res.status.success());
    // The failed run stays marked incomplete.
    assert_eq!(manifest(&out)["complete"], false);
}

#[test]
fn reruns_give_identical_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let res = crowdcal(&["reproduce-study2", "--out", a.to_str().unwrap(), "--jobs", "1"], SMALL);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let res = crowdcal(&["reproduce-study2", "--out", b.to_str().unwrap(), "--jobs", "3"], SMALL);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["artifacts"], mb["artifacts"]);
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    // No orphans: every file but the manifest is listed.
    let on_disk: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    let listed = ma["artifacts"].as_object().unwrap();
    assert_eq!(on_disk.len(), listed.len());
    assert!(on_disk.iter().all(|n| listed.contains_key(n)));
    for name in ["model_metrics.csv", "sweep_gs20.csv", "report.json", "llo_params_gs50.csv"] {
        assert!(listed.contains_key(name), "{name} missing");
    }

    // A report rendered from the run matches the one it wrote.
    let c = tmp.path().join("c");
    let res = crowdcal(&["report", "--from", a.to_str().unwrap(), "--out", c.to_str().unwrap()], SMALL);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::read_to_string(a.join("report.txt")).unwrap(), fs::read_to_string(c.join("report.txt")).unwrap());
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(c.join("report.json")).unwrap());
}

#[test]
fn refuses_to_overwrite_a_completed_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let args = ["simulate", "--out", out.to_str().unwrap()];
    assert!(crowdcal(&args, SMALL).status.success());
    let again = crowdcal(&args, SMALL);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("completed run"));
}

#[test]
fn validation_fails_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    for bad in ["aggregation.k=0", "aggregation.kk=3", "simulation.gs_fraction=1.5"] {
        let res = crowdcal(&["simulate", "--out", out.to_str().unwrap()], &[bad]);
        assert!(!res.status.success(), "{bad} accepted");
        assert!(!out.exists(), "{bad} created the run directory");
    }
    let res = crowdcal(&["simulate"], &[]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("--out"));
}

#[test]
fn config_file_and_seed_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "seed = 5\n[aggregation]\nk = 3\n").unwrap();
    let out = tmp.path().join("run");
    let res = crowdcal(
        &["simulate", "--config", cfg.to_str().unwrap(), "--seed", "77", "--out", out.to_str().unwrap()],
        SMALL,
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let written = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.contains("seed = 77"));
    assert!(out.join("judgments_gs20_binary.csv").exists());
}
