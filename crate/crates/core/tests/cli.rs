//! The command-line workflow end to end: corpus, both training stages,
//! synthesis, evaluation and benchmarking on a tiny corpus.

use std::path::Path;
use std::process::{Command, Output};

use turbowave::data::{load_audio, write_wav, WavFormat};
use turbowave::signal::AudioBuffer;

fn turbowave(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turbowave"))
        .args(args)
        .env("TURBOWAVE_CACHE", cache)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_verb_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = turbowave(dir.path(), &["transmogrify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn config_errors_are_one_machine_readable_line_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = turbowave(dir.path(), &["pretrain", "--override", "optim.lr=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error[config]"), "{stderr}");
}

#[test]
fn missing_corpus_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = turbowave(dir.path(), &["pretrain", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));
}

#[test]
fn full_workflow_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path();
    let ov = |kv: &str| ["--override".to_string(), kv.to_string()];

    ok(&turbowave(
        cache,
        &["make-corpus", "--override", "n_items=8", "--override", "duration=1.0"],
    ));
    assert!(cache.join("corpus/corpus.toml").exists());
    assert!(cache.join("corpus/config.toml").exists());

    let fm = cache.join("fm");
    let mut args = vec!["pretrain".to_string(), "--steps".into(), "2".into(), "--out".into(), s(&fm).into()];
    args.extend(ov("batch_size=1"));
    ok(&turbowave(cache, &args.iter().map(String::as_str).collect::<Vec<_>>()));
    for f in ["config.toml", "train_log.jsonl", "final.ckpt"] {
        assert!(fm.join(f).exists(), "pretrain wrote no {f}");
    }
    let log = std::fs::read_to_string(fm.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let turbo = cache.join("turbo");
    let teacher = fm.join("final.ckpt");
    let mut args = vec![
        "finetune".to_string(),
        "--steps".into(),
        "1".into(),
        "--teacher".into(),
        s(&teacher).into(),
        "--out".into(),
        s(&turbo).into(),
    ];
    args.extend(ov("batch_size=1"));
    args.extend(ov("loss.use_gan=false"));
    ok(&turbowave(cache, &args.iter().map(String::as_str).collect::<Vec<_>>()));
    let snapshot = std::fs::read_to_string(turbo.join("config.toml")).unwrap();
    assert!(snapshot.contains("use_gan = false"), "{snapshot}");
    let student = turbo.join("final.ckpt");
    assert!(student.exists());

    let wav = cache.join("tone.wav");
    let tone: Vec<f32> = (0..11_025).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect();
    write_wav(&wav, &AudioBuffer::new(tone, 22_050).unwrap(), WavFormat::Pcm16).unwrap();
    let synth = cache.join("synth");
    ok(&turbowave(
        cache,
        &[
            "synthesize",
            "--checkpoint",
            s(&student),
            "--steps",
            "4",
            "--solver",
            "euler",
            "--out",
            s(&synth),
            s(&wav),
        ],
    ));
    let generated = load_audio(synth.join("tone.wav")).unwrap();
    assert_eq!(generated.sample_rate(), 22_050);
    assert!(generated.len() >= 11_008);
    assert!(synth.join("config.toml").exists());

    let eval = cache.join("eval");
    ok(&turbowave(
        cache,
        &["evaluate", "--checkpoint", s(&student), "--steps", "4", "--solver", "euler", "--out", s(&eval)],
    ));
    let reports: Vec<_> = std::fs::read_dir(&eval)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("report."))
        .collect();
    assert!(!reports.is_empty(), "evaluate wrote no report");

    let bench = cache.join("bench");
    ok(&turbowave(cache, &["bench", "--checkpoint", s(&student), "--out", s(&bench)]));
    let table = std::fs::read_to_string(bench.join("bench.md")).unwrap();
    assert!(table.contains("| euler | 4 | 4 |"), "{table}");
    assert!(table.contains("| midpoint | 16 | 32 |"), "{table}");
}
