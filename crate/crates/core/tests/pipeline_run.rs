use std::path::{Path, PathBuf};

use backdoor_lab::config::RunConfig;
use backdoor_lab::data::Family;
use backdoor_lab::pipeline::Pipeline;
use serde_json::Value;

fn small_config(poison_rate: f64) -> RunConfig {
    let mut cfg = RunConfig::pinned(Family::TargetedRefusal, "A").unwrap();
    cfg.dataset.n_clean = 300;
    cfg.dataset.poison_rate = poison_rate;
    cfg.pretrain.n = 300;
    cfg.pretrain.epochs = 8;
    cfg.train.epochs = 8;
    cfg.analysis.eval_n = 60;
    cfg
}

fn run_all(out: &Path, cfg: &RunConfig) -> PathBuf {
    let mut p = Pipeline::open(cfg.clone(), out).unwrap();
    p.run_all().unwrap();
    p.root().to_path_buf()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn targets(path: PathBuf) -> Vec<Vec<u64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            v["target"].as_array().unwrap().iter().map(|t| t.as_u64().unwrap()).collect()
        })
        .collect()
}

fn share_equal(outs: &Value, want: &[Vec<u64>]) -> f64 {
    let outs = outs.as_array().unwrap();
    assert_eq!(outs.len(), want.len());
    let hits = outs
        .iter()
        .zip(want)
        .filter(|(o, t)| o.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).eq(t.iter().copied()))
        .count();
    hits as f64 / want.len() as f64
}

#[test]
fn reported_metrics_follow_from_outputs_and_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(0.1);
    let root = run_all(tmp.path(), &cfg);
    assert_eq!(root.file_name().unwrap().to_str().unwrap(), cfg.hash());

    let outputs = json(root.join("eval/outputs.json"));
    let metrics = json(root.join("eval/metrics.json"));
    let clean_t = targets(root.join("data/eval_clean.jsonl"));
    let bkd_t = targets(root.join("data/eval_triggered.jsonl"));
    assert_eq!(metrics["match_rule"], "exact");
    for model in ["clean_model", "backdoor_model"] {
        let cell = &metrics["table"][model];
        let em = share_equal(&outputs[model]["clean_inputs"], &clean_t);
        let asr = share_equal(&outputs[model]["triggered_inputs"], &bkd_t);
        assert_eq!(cell["clean_inputs"]["exact_match"].as_f64().unwrap(), em, "{model}");
        assert_eq!(cell["triggered_inputs"]["asr"].as_f64().unwrap(), asr, "{model}");
        for inputs in ["clean_inputs", "triggered_inputs"] {
            for key in ["p_bkd", "p_clean", "cider", "rouge_l"] {
                let v = cell[inputs][key].as_f64().unwrap();
                assert!((0.0..=1.0 + 1e-9).contains(&v), "{model}/{inputs}/{key} = {v}");
            }
        }
    }

    let log = std::fs::read_to_string(root.join("train_log.csv")).unwrap();
    let rows: Vec<Vec<&str>> = log.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), cfg.train.epochs);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0].parse::<usize>().unwrap(), i);
        for v in &r[1..] {
            let x: f64 = v.parse().unwrap();
            assert!(x.is_finite() && x >= 0.0);
        }
    }
    let pre = std::fs::read_to_string(root.join("train_log_clean.csv")).unwrap();
    assert_eq!(pre.lines().count() - 1, cfg.pretrain.epochs);
    assert!(pre.lines().skip(1).all(|l| l.ends_with(',')), "pre-training has no poison loss");

    let report = json(root.join("report.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["config_hash"].as_str().unwrap(), cfg.hash());
}

#[test]
fn zero_poison_rate_leaves_no_backdoor() {
    let tmp = tempfile::tempdir().unwrap();
    let root = run_all(tmp.path(), &small_config(0.0));
    let metrics = json(root.join("eval/metrics.json"));
    let asr = metrics["table"]["backdoor_model"]["triggered_inputs"]["asr"].as_f64().unwrap();
    assert!(asr <= 0.05, "{asr}");
}
