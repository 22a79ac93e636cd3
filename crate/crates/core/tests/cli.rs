use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ilm::harness::{build_manifest, load_data, ExperimentConfig};
use ilm::model::{init_model, read_checkpoint, write_checkpoint};

fn ilm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("ILM_MASTER_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ilm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path, n_content: usize, steps: &[u64]) -> PathBuf {
    let cfg = serde_json::json!({
        "experiment": "structured_noise",
        "corpus": {
            "n_content": n_content, "n_markup": 4, "seq_len": 6,
            "n_train": 40, "n_test": 20, "markup_rate": 0.3
        },
        "master_seed": 7,
        "n_restarts": 2,
        "model": {"embed_dim": 8, "n_layers": 1, "n_attn_heads": 2, "ffn_dim": 16, "max_seq_len": 16},
        "train": {"batch_size": 4},
        "grid": {"learning_rates": [0.003], "n_steps": steps},
        "eval": {"n_resamples": 200}
    });
    let path = dir.join(format!("cfg_{n_content}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_expected_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 10, &[4]);
    let out = tmp.path().join("data");
    ok(&["gen-data", "-c", s(&cfg), "-o", s(&out)]);
    let mut names: Vec<String> =
        std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["env_0.json", "env_1.json", "test.json", "vocab.json"]);
}

#[test]
fn correlation_split_sizes_follow_p() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "experiment": "correlation",
        "corpus": {"n_content": 20, "n_pairs": 2, "n_contexts": 4, "seq_len": 6,
                   "n_sentences": 201, "n_test": 20, "pair_bias": 1.0, "p_values": [0.8]},
        "master_seed": 3, "n_restarts": 1,
        "model": {"embed_dim": 8, "n_layers": 1, "n_attn_heads": 2, "ffn_dim": 16, "max_seq_len": 6},
        "train": {"batch_size": 4},
        "grid": {"learning_rates": [0.001], "n_steps": [2]}
    });
    let path = tmp.path().join("c.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = tmp.path().join("data");
    ok(&["gen-data", "-c", s(&path), "-o", s(&out)]);
    let vocab = load_data(&out).unwrap().vocab;
    let count = |f: &str| ilm::corpus::read_environment(&out.join("p0.8").join(f), &vocab).unwrap().sequences.len() as i64;
    let (a, b) = (count("env_0.json"), count("env_1.json"));
    assert_eq!(a + b, 201);
    assert!((a - 4 * b).abs() <= 4, "{a} vs {b}");
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ilm(&["no-such-command"]).status.code(), Some(1));
    let missing = tmp.path().join("missing.json");
    assert_eq!(ilm(&["gen-data", "-c", s(&missing), "-o", s(tmp.path())]).status.code(), Some(1));
    let bad = tmp.path().join("bad.json");
    let text = std::fs::read_to_string(tiny_config(tmp.path(), 10, &[4])).unwrap().replace("\"n_restarts\": 2", "\"n_restarts\": 0");
    std::fs::write(&bad, text).unwrap();
    let out = ilm(&["gen-data", "-c", s(&bad), "-o", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_restarts"));
}

#[test]
fn run_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 10, &[4]);
    let root = tmp.path().join("root");
    // no data generated yet
    let out = ilm(&["train", "-c", s(&cfg), "--grid-point", "0", "--variant", "ilm", "--restart", "0", "--root", s(&root)]);
    assert_eq!(out.status.code(), Some(2));
    ok(&["gen-data", "-c", s(&cfg), "-o", s(&root.join("data"))]);
    let out = ilm(&["train", "-c", s(&cfg), "--grid-point", "0", "--variant", "both", "--restart", "0", "--root", s(&root)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!root.join("runs").exists());
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tiny_config(tmp.path(), 10, &[0]);
    let root = tmp.path().join("root");
    ok(&["gen-data", "-c", s(&path), "-o", s(&root.join("data"))]);
    let cfg = ExperimentConfig::load(&path).unwrap();
    let vocab = load_data(&root.join("data")).unwrap().vocab;
    for (variant, heads) in [("ilm", 2), ("elm", 1)] {
        let dir = ok(&["train", "-c", s(&path), "--grid-point", "0", "--variant", variant, "--restart", "1", "--root", s(&root)]);
        let (trained, ckpt) = read_checkpoint(&PathBuf::from(dir.trim()).join("model.json")).unwrap();
        let entry = build_manifest(&cfg).entries.into_iter().find(|e| e.variant == variant && e.restart == 1).unwrap();
        let mut init = init_model(&cfg.model.encoder_config(vocab.len(), entry.model_seed), heads, cfg.model.init_mode).unwrap();
        init.set_ensemble(cfg.model.ensemble);
        assert_eq!(ckpt.step, 0);
        assert_eq!(trained, init, "{variant}");
    }
}

#[test]
fn train_is_deterministic_and_matches_run_all_snapshots() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 10, &[3, 8]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run-all", "-c", s(&cfg), "--root", s(&a)]);
    ok(&["gen-data", "-c", s(&cfg), "-o", s(&b.join("data"))]);
    for gp in ["0", "1"] {
        for variant in ["ilm", "elm"] {
            let args = ["train", "-c", s(&cfg), "--grid-point", gp, "--variant", variant, "--restart", "1", "--root", s(&b)];
            let dir = PathBuf::from(ok(&args).trim());
            let first = std::fs::read(dir.join("model.json")).unwrap();
            ok(&args);
            assert_eq!(first, std::fs::read(dir.join("model.json")).unwrap(), "rerun differs");
            let rel = dir.strip_prefix(&b).unwrap();
            assert_eq!(first, std::fs::read(a.join(rel).join("model.json")).unwrap(), "{gp} {variant}");
            assert_eq!(
                std::fs::read(dir.join("log.csv")).unwrap(),
                std::fs::read(a.join(rel).join("log.csv")).unwrap()
            );
        }
    }
}

#[test]
fn run_all_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 10, &[4, 6]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run-all", "-c", s(&cfg), "--root", s(&a)]);
    ok(&["run-all", "-c", s(&cfg), "--root", s(&b), "-j", "2"]);
    for f in ["metrics.csv", "manifest.json", "report/report.json", "report/report.md", "report/panel_win.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_rejects_a_foreign_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg_a, cfg_b) = (tiny_config(tmp.path(), 10, &[2]), tiny_config(tmp.path(), 12, &[2]));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (cfg, root) in [(&cfg_a, &a), (&cfg_b, &b)] {
        ok(&["gen-data", "-c", s(cfg), "-o", s(&root.join("data"))]);
    }
    let dir = ok(&["train", "-c", s(&cfg_b), "--grid-point", "0", "--variant", "ilm", "--restart", "0", "--root", s(&b)]);
    let foreign = PathBuf::from(dir.trim()).join("model.json");
    let out = ilm(&[
        "eval", "-c", s(&cfg_a), "--grid-point", "0", "--variant", "ilm", "--restart", "0", "--root", s(&a),
        "--checkpoint", s(&foreign),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary mismatch"));
}

#[test]
fn uniform_checkpoint_has_vocabulary_size_perplexity() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tiny_config(tmp.path(), 10, &[2]);
    let root = tmp.path().join("root");
    ok(&["gen-data", "-c", s(&path), "-o", s(&root.join("data"))]);
    let cfg = ExperimentConfig::load(&path).unwrap();
    let vocab = load_data(&root.join("data")).unwrap().vocab;
    let mut model = init_model(&cfg.model.encoder_config(vocab.len(), 1), 2, cfg.model.init_mode).unwrap();
    for t in model.all_params_mut() {
        t.data_mut().fill(0.0);
    }
    let ckpt = tmp.path().join("uniform.json");
    write_checkpoint(&ckpt, &model, 0, &vocab.hash()).unwrap();
    let metrics = tmp.path().join("m.csv");
    let out = ok(&[
        "eval", "-c", s(&path), "--grid-point", "0", "--variant", "ilm", "--restart", "0", "--root", s(&root),
        "--checkpoint", s(&ckpt), "--metrics", s(&metrics),
    ]);
    let value: f64 = out.split_whitespace().last().unwrap().parse().unwrap();
    assert!((value - vocab.len() as f64).abs() < 1e-4, "{value} vs {}", vocab.len());
    assert_eq!(ilm::metrics::read_metrics_csv(&metrics).unwrap().len(), 1);
}

#[test]
fn heads_and_report_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "experiment": "heads_dynamics",
        "corpus": {"n_content": 16, "overlap": 0.3, "seq_len": 6, "n_per_env": 20, "n_checkpoints": 2},
        "master_seed": 5, "n_restarts": 1,
        "model": {"embed_dim": 8, "n_layers": 1, "n_attn_heads": 2, "ffn_dim": 16, "max_seq_len": 6},
        "train": {"batch_size": 4},
        "grid": {"learning_rates": [0.003], "n_steps": [8]},
        "eval": {"n_resamples": 200}
    });
    let path = tmp.path().join("h.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let root = tmp.path().join("root");
    ok(&["run-all", "-c", s(&path), "--root", s(&root)]);
    let ckpts = root.join("runs/heads_dynamics/ilm/g0/r0/checkpoints");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&ckpts).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 3);

    let out = tmp.path().join("single");
    let stdout = ok(&["heads", "-g", "A,A,B,B", "-o", s(&out), s(files.last().unwrap())]);
    assert_eq!(stdout.lines().count(), 1);
    let pts = ilm::harness::read_heads_csv(&out.join("heads.csv")).unwrap();
    assert_eq!(pts.len(), 1);
    assert_eq!(pts[0].step, 8);
    // matches the series written by run-all
    let series = ilm::harness::read_heads_csv(&root.join("heads/heads_dynamics/g0/r0/heads.csv")).unwrap();
    assert_eq!(series.last().unwrap(), &pts[0]);
    assert_eq!(std::fs::read_to_string(out.join("mds.csv")).unwrap().lines().count(), 5);

    let bad = ilm(&["heads", "-g", "A,B", "-o", s(&out), s(&files[0])]);
    assert_eq!(bad.status.code(), Some(2));

    let md = tmp.path().join("r.md");
    ok(&[
        "report", "-i", s(&root.join("report/report.json")), "--heads",
        s(&root.join("heads/heads_dynamics/g0/r0/heads.csv")), "-o", s(&md),
    ]);
    assert!(std::fs::read_to_string(&md).unwrap().contains("heads_dynamics"));
}

#[test]
fn compare_command_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 10, &[2]);
    let root = tmp.path().join("root");
    ok(&["run-all", "-c", s(&cfg), "--root", s(&root)]);
    let out = tmp.path().join("cmp");
    ok(&["compare", "-m", s(&root.join("metrics.csv")), "-o", s(&out), "--resamples", "200"]);
    assert!(out.join("report.json").exists());
    assert!(out.join("win_probability.svg").exists());
    let empty = tmp.path().join("empty.csv");
    std::fs::write(&empty, ilm::metrics::METRICS_HEADER.join(",") + "\n").unwrap();
    assert_eq!(ilm(&["compare", "-m", s(&empty), "-o", s(&out)]).status.code(), Some(2));
}
