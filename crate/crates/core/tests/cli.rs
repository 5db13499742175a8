mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;

fn emodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emodiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn single_line_error(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).trim().to_string();
    assert_eq!(err.lines().count(), 1, "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    config: std::path::PathBuf,
    data: std::path::PathBuf,
    train: std::path::PathBuf,
}

fn trained() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    tiny_config().save(&config).unwrap();
    let data = dir.path().join("data");
    let train = dir.path().join("train");
    ok(&emodiff(&["gen-data", "--config", s(&config), "--out", s(&data)]));
    let manifest = data.join("manifest.jsonl");
    ok(&emodiff(&["train", "--config", s(&config), "--corpus", s(&manifest), "--out", s(&train)]));
    Run { _dir: dir, config, data, train }
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let run = trained();
    let metrics = std::fs::read_to_string(run.train.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "L_ladv", "L_c", "L_dur", "L_mel", "L_prior", "L_sadv", "L_emo", "L_opl", "L_opedm", "L_diff", "L_total"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    for f in ["checkpoint_000003.safetensors", "checkpoint_000006.safetensors", "checkpoint.safetensors", "run_meta.json"] {
        assert!(run.train.join(f).exists(), "{f}");
    }
}

#[test]
fn identical_invocations_give_identical_files() {
    let a = trained();
    let b = trained();
    for f in ["data/manifest.jsonl", "data/signatures.json", "train/metrics.jsonl", "train/checkpoint.safetensors"] {
        let read = |r: &Run| std::fs::read(r.config.parent().unwrap().join(f)).unwrap();
        assert!(read(&a) == read(&b), "{f} differs");
    }
}

#[test]
fn seed_flag_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    tiny_config().save(&cfg).unwrap();
    let gen = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&emodiff(&["gen-data", "--config", s(&cfg), "--out", s(&out), "--seed", seed]));
        std::fs::read(out.join("signatures.json")).unwrap()
    };
    assert_eq!(gen("a", "5"), gen("b", "5"));
    assert_ne!(gen("a", "5"), gen("c", "6"));
}

#[test]
fn synth_and_eval_produce_their_outputs() {
    let run = trained();
    let ckpt = run.train.join("checkpoint.safetensors");
    let corpus = emodiff::corpus::load_manifest(&run.data.join("manifest.jsonl")).unwrap();
    let reference = corpus.mel_path(&corpus.utterances[0]);
    let out = run.train.parent().unwrap().join("synth");
    ok(&emodiff(&[
        "synth", "--config", s(&run.config), "--checkpoint", s(&ckpt), "--tokens", "0,1,2", "--speaker", "1",
        "--ref-mel", s(&reference), "--steps", "3", "--out", s(&out),
    ]));
    let mel = emodiff::corpus::read_mel(&out.join("synth.dmel")).unwrap();
    assert_eq!(mel.bands(), 8);
    assert!(mel.values().iter().all(|v| v.is_finite()));

    let eval = run.train.parent().unwrap().join("eval");
    ok(&emodiff(&[
        "eval", "--checkpoint", s(&ckpt), "--corpus", s(&run.data.join("manifest.jsonl")), "--out", s(&eval),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    for key in ["disentanglement", "recombination", "diffusion_oracle"] {
        assert!(!report[key].is_null(), "missing {key}");
    }
    let acc = report["disentanglement"]["emotion_probe"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let csv = std::fs::read_to_string(eval.join("projection.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "id,x,y,speaker_id,emotion_id");
    let n_test = corpus.split(emodiff::corpus::Split::Test).count();
    assert_eq!(csv.lines().count(), n_test + 1);
    assert_eq!(emodiff::op_edm::read_embeddings(&eval.join("embeddings.jsonl")).unwrap().len(), n_test);
}

#[test]
fn eval_of_an_untrained_checkpoint_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (corpus, _) = common::corpus_in(&dir.path().join("data"), &cfg);
    let trainer = emodiff::training::Trainer::new(&cfg).unwrap();
    let ckpt = dir.path().join("untrained.safetensors");
    emodiff::training::save_checkpoint(&trainer, &ckpt).unwrap();
    let out = dir.path().join("eval");
    ok(&emodiff(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus.root.join("manifest.jsonl")), "--out", s(&out)]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["step"], 0);
    assert!(report["recombination"]["trials"].as_array().unwrap().len() == 4);
}

#[test]
fn unknown_speaker_is_named() {
    let run = trained();
    let corpus = emodiff::corpus::load_manifest(&run.data.join("manifest.jsonl")).unwrap();
    let reference = corpus.mel_path(&corpus.utterances[0]);
    let out = emodiff(&[
        "synth", "--checkpoint", s(&run.train.join("checkpoint.safetensors")), "--tokens", "1,2", "--speaker", "17",
        "--ref-mel", s(&reference), "--out", s(&run.train.parent().unwrap().join("x")),
    ]);
    let err = single_line_error(&out);
    assert!(err.contains("17"), "{err}");
}

#[test]
fn width_mismatch_reports_both_widths() {
    let run = trained();
    let dir = run.config.parent().unwrap();
    let mut wide = tiny_config();
    wide.model.emotion_dim = 12;
    let wide_path = dir.join("wide.json");
    wide.save(&wide_path).unwrap();
    let out = emodiff(&[
        "eval", "--config", s(&wide_path), "--checkpoint", s(&run.train.join("checkpoint.safetensors")),
        "--corpus", s(&run.data.join("manifest.jsonl")), "--out", s(&dir.join("e")),
    ]);
    let err = single_line_error(&out);
    assert!(err.contains("emotion_dim") && err.contains('8') && err.contains("12"), "{err}");
}

#[test]
fn bad_inputs_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    single_line_error(&emodiff(&["gen-data", "--config", s(&missing), "--out", s(dir.path())]));
    let garbled = dir.path().join("garbled.json");
    std::fs::write(&garbled, "{ not json").unwrap();
    single_line_error(&emodiff(&["gen-data", "--config", s(&garbled), "--out", s(dir.path())]));
    assert!(!emodiff(&["gen-data", "--out", s(dir.path()), "--frobnicate"]).status.success());
    assert!(!emodiff(&["dance"]).status.success());
}

#[test]
fn help_lists_every_flag() {
    let expect: [(&str, &[&str]); 4] = [
        ("gen-data", &["--config", "--out", "--seed"]),
        ("train", &["--config", "--out", "--seed", "--corpus", "--steps", "--resume"]),
        ("synth", &["--config", "--out", "--seed", "--checkpoint", "--tokens", "--speaker", "--ref-mel", "--steps"]),
        ("eval", &["--config", "--out", "--seed", "--checkpoint", "--corpus", "--steps"]),
    ];
    for (cmd, flags) in expect {
        let out = emodiff(&[cmd, "--help"]);
        ok(&out);
        let help = String::from_utf8_lossy(&out.stdout);
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
}
