//! End-to-end runs of the `mixsep` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixsep::dataset::load_dataset;
use mixsep::export::midi_mixture;
use mixsep::midi::parse_midi;
use mixsep::roll::{Instrument, LOWEST_PITCH, HIGHEST_PITCH};
use mixsep::synth::{song_midi, SongSpec};

const TINY_DDPM: &str = "epochs = 1\nbatch_size = 8\nstem_width = 4\nencoder_widths = 4,8,8\n\
    decoder_widths = 8,4,4\nheads = 2\nff_width = 16\ntime_hidden = 8\ngroups = 2\n";
const TINY_DECODER: &str = "epochs = 1\nbatch_size = 8\nwidth = 4\ntime_hidden = 8\ngroups = 2\n";

fn mixsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixsep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Five files: three eligible songs, one single-instrument song and one in 3/4.
fn write_corpus(dir: &Path) {
    let full = |bars, instruments: &[Instrument]| SongSpec {
        bars,
        ticks_per_quarter: 96,
        instruments: instruments.to_vec(),
    };
    std::fs::write(dir.join("a.mid"), song_midi(1, &full(6, &[Instrument::Piano, Instrument::Bass]))).unwrap();
    std::fs::write(
        dir.join("b.mid"),
        song_midi(2, &full(5, &[Instrument::Guitar, Instrument::String, Instrument::Drum])),
    )
    .unwrap();
    std::fs::create_dir(dir.join("sub")).unwrap();
    std::fs::write(dir.join("sub/c.MID"), song_midi(3, &full(7, &Instrument::ALL))).unwrap();
    std::fs::write(dir.join("solo.mid"), song_midi(4, &full(6, &[Instrument::Piano]))).unwrap();
    let mut waltz = song_midi(5, &full(6, &[Instrument::Piano, Instrument::Bass]));
    let at = waltz.windows(4).position(|w| w == [0xff, 0x58, 0x04, 4]).unwrap();
    waltz[at + 3] = 3;
    std::fs::write(dir.join("waltz.mid"), waltz).unwrap();
}

fn ingested(corpus: &Path, out: &Path) -> Output {
    mixsep(&["ingest", "--in", p(corpus), "--out", p(out), "--split", "34/33/33", "--seed", "1"])
}

#[test]
fn ingest_reports_and_writes_splits() {
    let corpus = tempfile::tempdir().unwrap();
    write_corpus(corpus.path());
    let out = tempfile::tempdir().unwrap();
    let run = ingested(corpus.path(), out.path());
    assert!(run.status.success(), "{}", stderr(&run));
    let report = String::from_utf8(run.stdout).unwrap();
    assert!(report.contains("files_seen = 5"), "{report}");
    assert!(report.contains("eligible = 3"), "{report}");
    let mut sources = Vec::new();
    let mut total = 0;
    for split in ["train", "valid", "test"] {
        let (_, phrases) = load_dataset(&out.path().join(format!("{split}.m2m"))).unwrap();
        assert!(!phrases.is_empty(), "{split} is empty");
        total += phrases.len();
        for ph in &phrases {
            if !sources.contains(&ph.source_id) {
                sources.push(ph.source_id.clone());
            }
        }
    }
    sources.sort();
    assert_eq!(sources, vec!["a.mid", "b.mid", "sub/c.MID"]);
    // 6, 5 and 7 bars give 3, 2 and 4 windows.
    assert_eq!(total, 9);
    assert!(out.path().join("manifest.tsv").exists());
    assert!(out.path().join("ingest-report.txt").exists());

    let again = tempfile::tempdir().unwrap();
    assert!(ingested(corpus.path(), again.path()).status.success());
    for name in ["train.m2m", "valid.m2m", "test.m2m", "manifest.tsv"] {
        assert_eq!(
            std::fs::read(out.path().join(name)).unwrap(),
            std::fs::read(again.path().join(name)).unwrap()
        );
    }
}

#[test]
fn empty_directory_is_a_usage_error() {
    let empty = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let run = mixsep(&["ingest", "--in", p(empty.path()), "--out", p(&out.path().join("d"))]);
    assert_eq!(run.status.code(), Some(2));
    assert!(!out.path().join("d").exists());
}

#[test]
fn bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = mixsep(&["train", "--model", "bogus", "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("bogus"));

    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "epochs = 2\nlerning_rate = 0.1\n").unwrap();
    let run = mixsep(&["train", "--model", "ddpm", "--data", p(dir.path()), "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("lerning_rate"), "{}", stderr(&run));

    assert_eq!(mixsep(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mixsep(&["ingest", "--in", p(dir.path()), "--out", p(dir.path()), "--split", "1/2"]).status.code(), Some(2));
}

fn train(data: &Path, model: &str, config: &str, out: &Path) -> PathBuf {
    let cfg = out.join(format!("{model}.cfg"));
    std::fs::write(&cfg, config).unwrap();
    let run = mixsep(&["train", "--model", model, "--data", p(data), "--config", p(&cfg), "--out", p(out)]);
    assert!(run.status.success(), "{}", stderr(&run));
    let ckpt = out.join(format!("{model}-best.ckpt"));
    assert!(ckpt.exists());
    let csv = std::fs::read_to_string(out.join(format!("{model}-report.csv"))).unwrap();
    assert!(csv.starts_with("epoch,train_loss,valid_loss,lr\n"), "{csv}");
    ckpt
}

#[test]
fn train_separate_evaluate_render() {
    let corpus = tempfile::tempdir().unwrap();
    write_corpus(corpus.path());
    let data = tempfile::tempdir().unwrap();
    assert!(ingested(corpus.path(), data.path()).status.success());
    let work = tempfile::tempdir().unwrap();
    let ddpm = train(data.path(), "ddpm", TINY_DDPM, work.path());
    let decoder = train(data.path(), "decoder", TINY_DECODER, work.path());
    let loaded = mixsep::training::TrainedModel::load(&ddpm, mixsep::DType::F32, &mixsep::Device::Cpu).unwrap();
    assert_eq!(loaded.kind(), mixsep::model::ModelKind::Ddpm);

    // Separation keeps every note inside the input mixture and is repeatable.
    let input = corpus.path().join("sub/c.MID");
    let separate = |out: &Path| {
        mixsep(&[
            "separate", "--mixture", p(&input), "--checkpoint", p(&ddpm), "--decoder-checkpoint", p(&decoder),
            "--ddim-steps", "5", "--seed", "9", "--out", p(out),
        ])
    };
    let first = work.path().join("first.mid");
    let second = work.path().join("second.mid");
    let run = separate(&first);
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(separate(&second).status.success());
    let bytes = std::fs::read(&first).unwrap();
    assert_eq!(bytes, std::fs::read(&second).unwrap());
    let mixture = midi_mixture(&std::fs::read(&input).unwrap()).unwrap();
    let output = midi_mixture(&bytes).unwrap();
    assert!(output.time() <= mixture.time());
    for t in 0..output.time() {
        for q in 0..output.pitch() {
            assert!(!output.get(t, q) || mixture.get(t, q), "note at ({t}, {q}) outside the mixture");
        }
    }
    let parsed = parse_midi(&bytes).unwrap();
    assert!(parsed.events.iter().all(|e| (LOWEST_PITCH..=HIGHEST_PITCH).contains(&e.pitch)));

    let missing = mixsep(&["separate", "--mixture", p(&input), "--checkpoint", p(&ddpm), "--out", p(&first)]);
    assert_eq!(missing.status.code(), Some(2));

    // Evaluation writes a report with both metrics.
    let report = work.path().join("metrics.txt");
    let run = mixsep(&[
        "evaluate", "--data", p(&data.path().join("test.m2m")), "--checkpoints", p(&ddpm),
        "--decoder-checkpoint", p(&decoder), "--ddim-steps", "3", "--out", p(&report),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("consistency") && text.contains("diversity"), "{text}");

    // Rendering: two rows of five 64x72 panels at scale 2 with 2-pixel gaps.
    let png = work.path().join("fig.png");
    let render = |out: &Path| {
        mixsep(&["render", "--sample", p(&first), "--original", p(&input), "--scale", "2", "--out", p(out)])
    };
    let run = render(&png);
    assert!(run.status.success(), "{}", stderr(&run));
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (5 * 128 + 4 * 2, 2 * 144 + 2));
    let png2 = work.path().join("fig2.png");
    assert!(render(&png2).status.success());
    assert_eq!(std::fs::read(&png).unwrap(), std::fs::read(&png2).unwrap());
}
