use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resound_core::audio::{log_spectral_distance, read_wav, write_wav, SpectralConfig, WavFormat};
use resound_core::synth::{self, SynthConfig};
use resound_core::trainer::ExperimentConfig;

fn resound(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resound"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_clean(dir: &Path, names: &[&str], seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let u = synth::utterance(&mut rng, &SynthConfig::default(), 2400);
        write_wav(dir.join(format!("{name}.wav")), &u.audio, WavFormat::Float32).unwrap();
    }
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::desk();
    cfg.train.segment_seconds = 0.3;
    cfg.train.batch_size = 2;
    cfg.sampler.steps = 3;
    cfg.finetune.sampler_steps = 3;
    let path = dir.join("small.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

/// Every path under `root`, relative to it.
fn tree(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
            }
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    out.sort();
    out
}

#[test]
fn evaluate_identity_gives_zero_lsd() {
    let tmp = tempfile::tempdir().unwrap();
    let refs = tmp.path().join("ref");
    write_clean(&refs, &["a", "b"], 1);
    let out = tmp.path().join("out");
    let o = resound(&["evaluate", "--reference-dir", s(&refs), "--estimate-dir", s(&refs), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    assert!(report.starts_with("id\tlsd\tmel_distance\tstatus\n"), "{report}");
    for line in report.lines().skip(1).take(2) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(cols[3], "ok");
    }
}

#[test]
fn evaluate_lsd_matches_direct_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let (refs, ests) = (tmp.path().join("ref"), tmp.path().join("est"));
    write_clean(&refs, &["a", "b"], 1);
    write_clean(&ests, &["a", "b"], 2);
    let out = tmp.path().join("out");
    let o = resound(&[
        "evaluate", "--reference-dir", s(&refs), "--estimate-dir", s(&ests), "--metric", "lsd", "--out-dir", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    let cfg = SpectralConfig::with_sizes(512, 128);
    for (line, stem) in report.lines().skip(1).zip(["a", "b"]) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[0], stem);
        let direct = log_spectral_distance(
            &read_wav(refs.join(format!("{stem}.wav"))).unwrap(),
            &read_wav(ests.join(format!("{stem}.wav"))).unwrap(),
            &cfg,
        )
        .unwrap();
        let reported: f64 = cols[1].parse().unwrap();
        // the report prints six decimals
        assert!((reported - direct).abs() <= 5e-7, "{reported} vs {direct}");
    }
}

#[test]
fn evaluate_exit_codes_for_skipped_stems() {
    let tmp = tempfile::tempdir().unwrap();
    let (refs, ests, other) = (tmp.path().join("ref"), tmp.path().join("est"), tmp.path().join("other"));
    write_clean(&refs, &["a", "b"], 1);
    write_clean(&ests, &["a", "c"], 2);
    write_clean(&other, &["x"], 3);
    let out = tmp.path().join("out");
    let partial = resound(&["evaluate", "--reference-dir", s(&refs), "--estimate-dir", s(&ests), "--out-dir", s(&out)]);
    assert_eq!(partial.status.code(), Some(2));
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    assert!(report.contains("# skipped\tb") && report.contains("# skipped\tc"), "{report}");
    let none = resound(&["evaluate", "--reference-dir", s(&refs), "--estimate-dir", s(&other), "--out-dir", s(&out)]);
    assert_eq!(none.status.code(), Some(1));
}

#[test]
fn evaluate_corrupt_file_is_an_error_row() {
    let tmp = tempfile::tempdir().unwrap();
    let (refs, ests) = (tmp.path().join("ref"), tmp.path().join("est"));
    write_clean(&refs, &["a", "b", "c"], 1);
    write_clean(&ests, &["a", "c"], 2);
    fs::write(ests.join("b.wav"), b"not a wav file").unwrap();
    let out = tmp.path().join("out");
    let o = resound(&[
        "evaluate", "--reference-dir", s(&refs), "--estimate-dir", s(&ests), "--metric", "lsd", "--out-dir", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    let b = report.lines().find(|l| l.starts_with("b\t")).unwrap();
    assert!(b.contains("NA") && b.contains("error"), "{b}");
    assert!(report.contains("n=2") && report.contains("failed=1"), "{report}");
}

#[test]
fn evaluate_runs_external_adapters() {
    let tmp = tempfile::tempdir().unwrap();
    let refs = tmp.path().join("ref");
    write_clean(&refs, &["a"], 1);
    let out = tmp.path().join("out");
    let o = resound(&[
        "evaluate", "--reference-dir", s(&refs), "--estimate-dir", s(&refs), "--metric", "lsd",
        "--adapter", "const=echo score 4.25", "--out-dir", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    assert!(report.starts_with("id\tlsd\tconst\tstatus"));
    assert!(report.lines().nth(1).unwrap().contains("4.25"));
}

#[test]
fn train_finetune_enhance_chain_stays_in_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean_in");
    write_clean(&clean, &["u0", "u1"], 4);
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    let o = resound(&["degrade", "--input-dir", s(&clean), "--config", s(&cfg), "--seed", "3", "--out-dir", s(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        tree(&data),
        ["clean", "clean/u0.wav", "clean/u1.wav", "degraded", "degraded/u0.wav", "degraded/u1.wav", "manifest.jsonl"]
            .map(PathBuf::from)
    );
    // same seed, same outputs
    let again = tmp.path().join("data2");
    resound(&["degrade", "--input-dir", s(&clean), "--config", s(&cfg), "--seed", "3", "--out-dir", s(&again)]);
    assert_eq!(fs::read(data.join("degraded/u1.wav")).unwrap(), fs::read(again.join("degraded/u1.wav")).unwrap());

    let manifest = data.join("manifest.jsonl");
    let run = tmp.path().join("run");
    let o = resound(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--steps", "2", "--out-dir", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("checkpoints/2.ckpt");
    assert!(ckpt.exists() && run.join("train.tsv").exists());

    let ft = tmp.path().join("ft");
    let o = resound(&[
        "finetune", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--steps", "2", "--batch", "2",
        "--segment-seconds", "0.3", "--predictor-steps", "3", "--merge", "--out-dir", s(&ft),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        tree(&ft),
        ["adapters.bin", "finetune.tsv", "merged.ckpt", "merged.json", "predictor.bin"].map(PathBuf::from)
    );

    let enh = tmp.path().join("enh");
    let degraded = data.join("degraded");
    let o = resound(&[
        "enhance", "--checkpoint", s(&ckpt), "--input-dir", s(&degraded), "--adapters", s(&ft.join("adapters.bin")),
        "--out-dir", s(&enh),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let merged = tmp.path().join("merged");
    let o = resound(&[
        "enhance", "--checkpoint", s(&ft.join("merged.ckpt")), "--input-dir", s(&degraded), "--out-dir", s(&merged),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["u0.wav", "u1.wav"] {
        let a = read_wav(enh.join("enhanced").join(name)).unwrap();
        let b = read_wav(merged.join("enhanced").join(name)).unwrap();
        assert_eq!(a.len(), 2400);
        let err = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.samples.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err <= 1e-4 * scale.max(1e-3), "merged differs by {err}");
    }
}

#[test]
fn demo_failure_names_the_stage_and_skip_train_reuses_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let first = tmp.path().join("first");
    // two steps cannot beat the degraded input
    let o = resound(&["demo", "--config", s(&cfg), "--steps", "2", "--utterances", "2", "--out-dir", s(&first)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `evaluate` failed"));
    let ckpt = first.join("checkpoints/2.ckpt");
    assert!(ckpt.exists());

    let second = tmp.path().join("second");
    let o = resound(&[
        "demo", "--config", s(&cfg), "--utterances", "2", "--skip-train", "--checkpoint", s(&ckpt), "--out-dir",
        s(&second),
    ]);
    assert!(!second.join("train.tsv").exists() && !second.join("checkpoints").exists());
    assert!(second.join("report.tsv").exists());
    assert_eq!(
        fs::read(first.join("report.tsv")).unwrap(),
        fs::read(second.join("report.tsv")).unwrap()
    );
    assert_eq!(o.status.code(), Some(1));

    let missing = resound(&["demo", "--skip-train", "--out-dir", s(&second)]);
    assert_eq!(missing.status.code(), Some(1));
}
