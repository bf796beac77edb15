//! End-to-end exercise of the command-line surface: extraction, training,
//! reconstruction, editing, prompt synthesis, scoring, plotting, and the
//! documented exit codes.

mod common;

use std::path::Path;
use std::process::Command;

use common::VOCAB_73;
use melfill::dsp::{read_features, write_wav};

fn melfill_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_melfill"))
}

fn write_fixture_wav(path: &Path, seconds: f64, seed: u64) {
    let sr = 24_000u32;
    let n = (seconds * sr as f64) as usize;
    let mut rng = melfill::rng::SplitMix64::new(seed);
    // A few sine partials with light noise, so features are non-degenerate.
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            0.3 * (std::f64::consts::TAU * 220.0 * t).sin()
                + 0.2 * (std::f64::consts::TAU * 495.0 * t).sin()
                + 0.05 * (rng.next_f64() - 0.5)
        })
        .collect();
    write_wav(path, &samples, sr).unwrap();
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("phones.txt"), VOCAB_73).unwrap();

        for (i, seed) in [(0usize, 11u64), (1, 22)] {
            let wav = dir.path().join(format!("utt{i}.wav"));
            write_fixture_wav(&wav, 0.5, seed);
            // 0.5 s at 24 kHz → 37 frames; three phones cover it.
            std::fs::write(
                dir.path().join(format!("utt{i}.tsv")),
                "SIL\t0.0\t0.15\nAA1\t0.15\t0.3\nB\t0.3\t0.5\n",
            )
            .unwrap();
        }
        std::fs::write(dir.path().join("orig_phones.txt"), "SIL AA1 B\n").unwrap();

        let config = serde_json::json!({
            "model": {
                "d_model": 8,
                "heads": 2,
                "encoder_layers": 1,
                "decoder_layers": 1,
                "encoder_kernel": 3,
                "decoder_kernel": 3,
                "postnet_layers": 2,
                "postnet_channels": 4,
                "postnet_kernel": 3,
                "ffn_expansion": 2,
                "dropout": 0.0
            },
            "train": {
                "max_steps": 3,
                "max_batch_bin": 200,
                "checkpoint_interval": 0
            },
            "seed": 3
        });
        std::fs::write(
            dir.path().join("config.json"),
            serde_json::to_string_pretty(&config).unwrap(),
        )
        .unwrap();

        Workspace { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_pipeline_through_the_cli() {
    let ws = Workspace::new();

    // extract-features for both utterances
    for i in 0..2 {
        run_ok(
            melfill_bin()
                .arg("extract-features")
                .arg("--wav")
                .arg(ws.arg(&format!("utt{i}.wav")))
                .arg("--out")
                .arg(ws.arg(&format!("utt{i}.a3tf"))),
        );
        let spec = read_features(ws.path(&format!("utt{i}.a3tf")), 300, 24_000).unwrap();
        assert_eq!(spec.num_frames(), 37);
        assert_eq!(spec.n_mels(), 80);
    }

    // manifest + train
    let manifest: String = (0..2)
        .map(|i| {
            serde_json::json!({
                "id": format!("utt{i}"),
                "feature_path": format!("utt{i}.a3tf"),
                "alignment_path": format!("utt{i}.tsv"),
            })
            .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(ws.path("manifest.jsonl"), manifest).unwrap();

    run_ok(
        melfill_bin()
            .arg("train")
            .arg("--config")
            .arg(ws.arg("config.json"))
            .arg("--manifest")
            .arg(ws.arg("manifest.jsonl"))
            .arg("--vocab")
            .arg(ws.arg("phones.txt"))
            .arg("--out-dir")
            .arg(ws.arg("run")),
    );
    assert!(ws.path("run/checkpoint.bin").exists());
    assert!(ws.path("run/loss.csv").exists());
    assert!(ws.path("run/config.resolved.json").exists());
    assert!(ws.path("run/duration_stats.tsv").exists());
    let log = std::fs::read_to_string(ws.path("run/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "header + 3 steps");
    assert!(log.starts_with("step,lr,loss"));

    // resume the run for two more steps; the loss log continues in place
    run_ok(
        melfill_bin()
            .arg("train")
            .arg("--config")
            .arg(ws.arg("config.json"))
            .arg("--manifest")
            .arg(ws.arg("manifest.jsonl"))
            .arg("--vocab")
            .arg(ws.arg("phones.txt"))
            .arg("--out-dir")
            .arg(ws.arg("run"))
            .arg("--resume")
            .arg(ws.arg("run/checkpoint.bin"))
            .arg("--max-steps")
            .arg("5"),
    );
    let log = std::fs::read_to_string(ws.path("run/loss.csv")).unwrap();
    assert_eq!(
        log.lines().count(),
        6,
        "header + 3 original + 2 resumed steps"
    );
    assert!(log.lines().nth(5).unwrap().starts_with("5,"));

    // reconstruct (identity protocol, middle third)
    run_ok(
        melfill_bin()
            .arg("reconstruct")
            .arg("--checkpoint")
            .arg(ws.arg("run/checkpoint.bin"))
            .arg("--features")
            .arg(ws.arg("utt0.a3tf"))
            .arg("--alignment")
            .arg(ws.arg("utt0.tsv"))
            .arg("--vocab")
            .arg(ws.arg("phones.txt"))
            .arg("--durations")
            .arg(ws.arg("run/duration_stats.tsv"))
            .arg("--out-dir")
            .arg(ws.arg("recon")),
    );
    assert!(ws.path("recon/reconstructed.a3tf").exists());
    let region: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("recon/region.json")).unwrap())
            .unwrap();
    assert!(region["inserted_frames"].as_u64().unwrap() > 0);
    // Durations came from corpus means of the same fixtures, so the
    // reconstruction is frame-aligned and scored.
    let mcd: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("recon/mcd.json")).unwrap()).unwrap();
    assert!(mcd["mcd_db"].as_f64().unwrap() >= 0.0);

    // edit: replace the middle phone with two phones whose durations the
    // training corpus covers
    std::fs::write(ws.path("modified.txt"), "SIL B AA1 B\n").unwrap();
    run_ok(
        melfill_bin()
            .arg("edit")
            .arg("--checkpoint")
            .arg(ws.arg("run/checkpoint.bin"))
            .arg("--features")
            .arg(ws.arg("utt0.a3tf"))
            .arg("--alignment")
            .arg(ws.arg("utt0.tsv"))
            .arg("--vocab")
            .arg(ws.arg("phones.txt"))
            .arg("--modified-phones")
            .arg(ws.arg("modified.txt"))
            .arg("--durations")
            .arg(ws.arg("run/duration_stats.tsv"))
            .arg("--out-dir")
            .arg(ws.arg("edit")),
    );
    let region: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("edit/region.json")).unwrap())
            .unwrap();
    let edited = read_features(ws.path("edit/edited.a3tf"), 300, 24_000).unwrap();
    let original = read_features(ws.path("utt0.a3tf"), 300, 24_000).unwrap();
    let prefix = region["prefix_frames"].as_u64().unwrap() as usize;
    let inserted = region["inserted_frames"].as_u64().unwrap() as usize;
    let suffix = region["suffix_frames"].as_u64().unwrap() as usize;
    assert_eq!(edited.num_frames(), prefix + inserted + suffix);
    for t in 0..prefix {
        assert_eq!(
            edited.row(t),
            original.row(t),
            "prefix preserved through the CLI"
        );
    }
    for t in 0..suffix {
        assert_eq!(
            edited.row(prefix + inserted + t),
            original.row(original.num_frames() - suffix + t)
        );
    }

    // prompt-tts: speak unseen phones in utt1's voice; the fallback covers
    // phones missing from the duration table
    std::fs::write(ws.path("target.txt"), "K AE1 T\n").unwrap();
    run_ok(
        melfill_bin()
            .arg("prompt-tts")
            .arg("--checkpoint")
            .arg(ws.arg("run/checkpoint.bin"))
            .arg("--prompt-features")
            .arg(ws.arg("utt1.a3tf"))
            .arg("--prompt-alignment")
            .arg(ws.arg("utt1.tsv"))
            .arg("--vocab")
            .arg(ws.arg("phones.txt"))
            .arg("--target-phones")
            .arg(ws.arg("target.txt"))
            .arg("--durations")
            .arg(ws.arg("run/duration_stats.tsv"))
            .arg("--duration-fallback")
            .arg("0.1")
            .arg("--out-dir")
            .arg(ws.arg("tts")),
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("tts/report.json")).unwrap())
            .unwrap();
    let target = read_features(ws.path("tts/target.a3tf"), 300, 24_000).unwrap();
    assert_eq!(
        report["target_frames"].as_u64().unwrap() as usize,
        target.num_frames()
    );

    // mcd between original and edited (full-overlap region is the prefix)
    let out = run_ok(
        melfill_bin()
            .arg("mcd")
            .arg("--reference")
            .arg(ws.arg("utt0.a3tf"))
            .arg("--hypothesis")
            .arg(ws.arg("utt0.a3tf"))
            .arg("--region-start")
            .arg("0")
            .arg("--region-len")
            .arg("10"),
    );
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["mcd_db"].as_f64().unwrap(), 0.0);
    assert_eq!(report["frames_scored"].as_u64().unwrap(), 10);

    // plot
    run_ok(
        melfill_bin()
            .arg("plot")
            .arg("--features")
            .arg(ws.arg("utt0.a3tf"))
            .arg("--out")
            .arg(ws.arg("utt0.pgm")),
    );
    let pgm = std::fs::read(ws.path("utt0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n37 80\n255\n"));
    assert_eq!(pgm.len(), b"P5\n37 80\n255\n".len() + 37 * 80);
}

#[test]
fn second_sample_rate_wav_input_and_region_flags() {
    let ws = Workspace::new();

    // 22.05 kHz is the other supported rate: 0.6 s → frame 1103, hop 276,
    // floor((13230 − 1103)/276) + 1 = 44 frames.
    let sr = 22_050u32;
    let n = (0.6 * sr as f64) as usize;
    let samples: Vec<f64> = (0..n)
        .map(|i| 0.4 * (std::f64::consts::TAU * 330.0 * i as f64 / sr as f64).sin())
        .collect();
    write_wav(ws.path("low.wav"), &samples, sr).unwrap();
    run_ok(
        melfill_bin()
            .arg("extract-features")
            .arg("--wav")
            .arg(ws.arg("low.wav"))
            .arg("--out")
            .arg(ws.arg("low.a3tf")),
    );
    let spec = read_features(ws.path("low.a3tf"), 276, sr).unwrap();
    assert_eq!(spec.num_frames(), 44);

    // Train a toy model on the 24 kHz fixtures, then drive `edit` straight
    // from a WAV and `reconstruct` with explicit region flags.
    for i in 0..2 {
        run_ok(
            melfill_bin()
                .arg("extract-features")
                .arg("--wav")
                .arg(ws.arg(&format!("utt{i}.wav")))
                .arg("--out")
                .arg(ws.arg(&format!("utt{i}.a3tf"))),
        );
    }
    let manifest: String = (0..2)
        .map(|i| {
            serde_json::json!({
                "id": format!("utt{i}"),
                "feature_path": format!("utt{i}.a3tf"),
                "alignment_path": format!("utt{i}.tsv"),
            })
            .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(ws.path("manifest.jsonl"), manifest).unwrap();
    run_ok(
        melfill_bin()
            .arg("train")
            .arg("--config")
            .arg(ws.arg("config.json"))
            .arg("--manifest")
            .arg(ws.arg("manifest.jsonl"))
            .arg("--vocab")
            .arg(ws.arg("phones.txt"))
            .arg("--out-dir")
            .arg(ws.arg("run")),
    );

    std::fs::write(ws.path("modified.txt"), "SIL B AA1 B\n").unwrap();
    run_ok(
        melfill_bin()
            .arg("edit")
            .arg("--checkpoint")
            .arg(ws.arg("run/checkpoint.bin"))
            .arg("--wav")
            .arg(ws.arg("utt0.wav"))
            .arg("--alignment")
            .arg(ws.arg("utt0.tsv"))
            .arg("--vocab")
            .arg(ws.arg("phones.txt"))
            .arg("--phones")
            .arg(ws.arg("orig_phones.txt"))
            .arg("--modified-phones")
            .arg(ws.arg("modified.txt"))
            .arg("--durations")
            .arg(ws.arg("run/duration_stats.tsv"))
            .arg("--out-dir")
            .arg(ws.arg("edit_wav")),
    );
    assert!(ws.path("edit_wav/edited.a3tf").exists());

    run_ok(
        melfill_bin()
            .arg("reconstruct")
            .arg("--checkpoint")
            .arg(ws.arg("run/checkpoint.bin"))
            .arg("--features")
            .arg(ws.arg("utt0.a3tf"))
            .arg("--alignment")
            .arg(ws.arg("utt0.tsv"))
            .arg("--vocab")
            .arg(ws.arg("phones.txt"))
            .arg("--region-start")
            .arg("0")
            .arg("--region-len")
            .arg("2")
            .arg("--out-dir")
            .arg(ws.arg("recon_region")),
    );
    let region: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(ws.path("recon_region/region.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(region["modified_phoneme_start"].as_u64(), Some(0));
    assert_eq!(region["modified_phoneme_end"].as_u64(), Some(2));
    assert_eq!(region["prefix_frames"].as_u64(), Some(0));
}

#[test]
fn speech_only_training_without_alignments() {
    let ws = Workspace::new();
    for i in 0..2 {
        run_ok(
            melfill_bin()
                .arg("extract-features")
                .arg("--wav")
                .arg(ws.arg(&format!("utt{i}.wav")))
                .arg("--out")
                .arg(ws.arg(&format!("utt{i}.a3tf"))),
        );
    }
    // Manifest entries without alignment_path: pure speech corpora.
    let manifest: String = (0..2)
        .map(|i| {
            serde_json::json!({
                "id": format!("utt{i}"),
                "feature_path": format!("utt{i}.a3tf"),
            })
            .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(ws.path("speech_only.jsonl"), manifest).unwrap();
    run_ok(
        melfill_bin()
            .arg("train")
            .arg("--config")
            .arg(ws.arg("config.json"))
            .arg("--manifest")
            .arg(ws.arg("speech_only.jsonl"))
            .arg("--mask-mode")
            .arg("speech_only")
            .arg("--mask-ratio")
            .arg("0.15")
            .arg("--out-dir")
            .arg(ws.arg("run_so")),
    );
    assert!(ws.path("run_so/checkpoint.bin").exists());
    // No alignments means no duration table.
    assert!(!ws.path("run_so/duration_stats.tsv").exists());
    let log = std::fs::read_to_string(ws.path("run_so/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn exit_codes_follow_the_contract() {
    let ws = Workspace::new();

    // Unknown flag → usage error → 1.
    let out = melfill_bin()
        .arg("train")
        .arg("--bogus-flag")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Unknown config key → config error → 1.
    std::fs::write(ws.path("bad.json"), "{\"modle\": {}}").unwrap();
    let out = melfill_bin()
        .arg("train")
        .arg("--config")
        .arg(ws.arg("bad.json"))
        .arg("--manifest")
        .arg(ws.arg("manifest.jsonl"))
        .arg("--out-dir")
        .arg(ws.arg("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("modle"));

    // Missing input file → data error → 2.
    let out = melfill_bin()
        .arg("plot")
        .arg("--features")
        .arg(ws.arg("nope.a3tf"))
        .arg("--out")
        .arg(ws.arg("nope.pgm"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Original phones file that contradicts the alignment → data error → 2.
    for i in 0..1 {
        run_ok(
            melfill_bin()
                .arg("extract-features")
                .arg("--wav")
                .arg(ws.arg(&format!("utt{i}.wav")))
                .arg("--out")
                .arg(ws.arg(&format!("utt{i}.a3tf"))),
        );
    }
    let manifest = serde_json::json!({
        "id": "utt0",
        "feature_path": "utt0.a3tf",
        "alignment_path": "utt0.tsv",
    })
    .to_string()
        + "\n";
    std::fs::write(ws.path("manifest.jsonl"), manifest).unwrap();
    run_ok(
        melfill_bin()
            .arg("train")
            .arg("--config")
            .arg(ws.arg("config.json"))
            .arg("--manifest")
            .arg(ws.arg("manifest.jsonl"))
            .arg("--vocab")
            .arg(ws.arg("phones.txt"))
            .arg("--out-dir")
            .arg(ws.arg("run")),
    );
    std::fs::write(ws.path("wrong_phones.txt"), "B B B\n").unwrap();
    std::fs::write(ws.path("modified.txt"), "SIL B AA1 B\n").unwrap();
    let out = melfill_bin()
        .arg("edit")
        .arg("--checkpoint")
        .arg(ws.arg("run/checkpoint.bin"))
        .arg("--features")
        .arg(ws.arg("utt0.a3tf"))
        .arg("--alignment")
        .arg(ws.arg("utt0.tsv"))
        .arg("--vocab")
        .arg(ws.arg("phones.txt"))
        .arg("--phones")
        .arg(ws.arg("wrong_phones.txt"))
        .arg("--modified-phones")
        .arg(ws.arg("modified.txt"))
        .arg("--out-dir")
        .arg(ws.arg("edit_bad"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("disagrees"));

    // Malformed WAV → data error → 2.
    std::fs::write(ws.path("garbage.wav"), b"not a wav at all").unwrap();
    let out = melfill_bin()
        .arg("extract-features")
        .arg("--wav")
        .arg(ws.arg("garbage.wav"))
        .arg("--out")
        .arg(ws.arg("garbage.a3tf"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Help exits 0.
    let out = melfill_bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
