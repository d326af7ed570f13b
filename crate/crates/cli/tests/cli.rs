use std::path::Path;
use std::process::{Command, Output};

fn fairscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairscope"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn fairscope")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{
  "num_classes": 3,
  "class_proportions": [0.4, 0.35, 0.25],
  "group_ratio_per_class": [0.3, 0.5, 0.8],
  "vocab_size": 48,
  "max_len": 8,
  "num_examples": 300,
  "template": {"signal_pool_size": 4, "marker_pool_size": 2, "signal_tokens": 2, "marker_tokens": 1,
               "signal_confusion": 0.1, "noise_rate": 0.3}
}"#;

fn small_plan(out: &Path) -> String {
    format!(
        r#"{{
  "corpus": {SMALL_SPEC},
  "teacher": {{"num_layers": 2, "num_heads": 2, "model_dim": 16, "ff_dim": 32,
               "vocab_size": 48, "max_len": 9, "num_classes": 3}},
  "pretrain": {{"epochs": 1, "batch_size": 16}},
  "finetune": {{"epochs": 1, "batch_size": 16}},
  "distill": {{"epochs": 1, "batch_size": 16}},
  "seeds": [0, 1],
  "metrics": {{"e1_samples": 32, "svcca_tokens": 100}},
  "output_dir": {:?}
}}"#,
        p(out)
    )
}

#[test]
fn version_lists_formats() {
    let o = fairscope(&["--version"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["corpus format", "checkpoint format", "plan schema", "report schema"] {
        assert!(text.contains(key), "{text}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = fairscope(&["gen", "--out", "x.jsonl", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn missing_spec_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("nope.json");
    let o = fairscope(&["gen", "--spec", p(&spec), "--out", p(&dir.path().join("c.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}

#[test]
fn invalid_spec_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, SMALL_SPEC.replace("0.25]", "0.95]")).unwrap();
    let o = fairscope(&["gen", "--spec", p(&spec), "--out", p(&dir.path().join("c.jsonl"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gen_is_deterministic_and_guards_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = fairscope(&["gen", "--spec", p(&spec), "--out", p(out), "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.jsonl.resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["spec"]["seed"], 9);
    assert_eq!(resolved["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let again = fairscope(&["gen", "--spec", p(&spec), "--out", p(&a), "--seed", "10"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    let forced = fairscope(&["gen", "--spec", p(&spec), "--out", p(&a), "--seed", "10", "--force"]);
    assert!(forced.status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn train_modes_chain() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let corpus = dir.path().join("c.jsonl");
    assert!(fairscope(&["gen", "--spec", p(&spec), "--out", p(&corpus)]).status.success());
    let model = dir.path().join("model.json");
    std::fs::write(
        &model,
        r#"{"num_layers": 2, "num_heads": 2, "model_dim": 16, "ff_dim": 32, "vocab_size": 48, "max_len": 9, "num_classes": 3}"#,
    )
    .unwrap();
    let (mlm, ft, st) = (dir.path().join("mlm.ckpt"), dir.path().join("ft.ckpt"), dir.path().join("st.ckpt"));
    let common = ["--corpus", p(&corpus), "--model-config", p(&model), "--epochs", "1", "--batch-size", "16"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = ["train"].iter().chain(common.iter()).chain(extra.iter()).copied().collect();
        let o = fairscope(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    run(&["--mode", "mlm", "--out", p(&mlm)]);
    run(&["--mode", "finetune", "--base", p(&mlm), "--out", p(&ft)]);
    run(&["--mode", "distill", "--teacher", p(&ft), "--out", p(&st)]);
    let log = std::fs::read_to_string(dir.path().join("ft.ckpt.log.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr\n"));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("st.ckpt.resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["provenance"]["lineage"], "distilled");
    assert_eq!(resolved["model"]["num_layers"], 1);

    let no_teacher = fairscope(&["train", "--corpus", p(&corpus), "--mode", "distill", "--out", p(&dir.path().join("x.ckpt"))]);
    assert_eq!(no_teacher.status.code(), Some(1));

    // a truncated checkpoint is rejected with its path
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &std::fs::read(&ft).unwrap()[..40]).unwrap();
    let o = fairscope(&["train", "--corpus", p(&corpus), "--mode", "distill", "--teacher", p(&bad), "--out", p(&dir.path().join("y.ckpt"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.ckpt"), "{}", stderr(&o));
}

#[test]
fn audit_compare_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let plan = dir.path().join("plan.json");
    std::fs::write(&plan, small_plan(&out)).unwrap();

    let strict = fairscope(&["audit-e2", "--plan", p(&plan), "--strict"]);
    assert_eq!(strict.status.code(), Some(2), "{}", stderr(&strict));

    let o = fairscope(&["audit-e2", "--plan", p(&plan)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("weighted F")).count(), 8);
    for f in ["reports/e2_teacher.json", "reports/e2_student.json", "tables/e2_fairness.csv", "resolved_config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let e2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reports/e2_teacher.json")).unwrap()).unwrap();
    assert_eq!(e2["schema_version"], 1);
    assert_eq!(e2["models"][0]["evaluations"].as_array().unwrap().len(), 3);

    // second run needs --force; checkpoints are reused in strict mode
    let again = fairscope(&["audit-e2", "--plan", p(&plan), "--arch", "teacher"]);
    assert_eq!(again.status.code(), Some(1));
    let strict = fairscope(&["audit-e2", "--plan", p(&plan), "--arch", "teacher", "--strict", "--force"]);
    assert!(strict.status.success(), "{}", stderr(&strict));

    let e1 = fairscope(&["audit-e1", "--plan", p(&plan), "--strict", "--jobs", "2"]);
    assert!(e1.status.success(), "{}", stderr(&e1));
    assert!(out.join("tables/e1_curves.csv").exists());

    let cmp = fairscope(&["compare", "--dir", p(&out)]);
    assert!(cmp.status.success(), "{}", stderr(&cmp));
    assert!(out.join("reports/comparison.json").exists());

    let scatter = out.join("tables/amplitude_scatter.csv");
    let before = std::fs::read(&scatter).unwrap();
    std::fs::remove_file(&scatter).unwrap();
    let r = fairscope(&["report", "--dir", p(&out)]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(std::fs::read(&scatter).unwrap(), before);
}

#[test]
fn one_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = fairscope(&["run", "--out", p(dir.path()), "--seeds", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("2 seeds"), "{}", stderr(&o));
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = fairscope(&["report", "--dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}
