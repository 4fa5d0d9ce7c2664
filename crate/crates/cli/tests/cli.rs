use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hypersep::audio::{load_wav, resample, save_wav};
use hypersep::dataset::{synth_toy_track, ToySpec};

const TINY: &str = r#"
[model]
stage_rates = [8000, 16000, 32000]
embedding_dim = 4
generator_dim = 2

[model.encoder]
stride = 4
kernel = 8
latent_dim = 8
heads = 1
stft_window = 16

[model.tcn]
blocks = 1
layers_per_block = 2
hidden = 6
bottleneck = 4

[train]
batch_size = 2
crop_seconds = 0.016
max_steps = 4
epoch_steps = 2

[data]
validation_tracks = 1
"#;

const SPEC: &str = "duration = 0.25\n";

fn hypersep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypersep"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        std::fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str, tracks: usize) -> PathBuf {
        let out = self.path(name);
        let o = hypersep(&[
            "synth-data",
            "--out",
            s(&out),
            "--tracks",
            &tracks.to_string(),
            "--seed",
            "3",
            "--spec",
            s(&self.path("spec.toml")),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    }

    fn train(&self, data: &Path, ckpt: &Path, extra: &[&str]) -> Output {
        let config = self.path("tiny.toml");
        let mut args = vec!["train", "--config", s(&config), "--data", s(data), "--out", s(ckpt)];
        args.extend_from_slice(extra);
        hypersep(&args)
    }
}

#[test]
fn synth_data_is_counted_and_reproducible() {
    let ws = Workspace::new();
    let a = ws.synth("a", 5);
    let b = ws.synth("b", 5);
    let mut dirs: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    assert_eq!(dirs.len(), 5);
    for d in &dirs {
        let mut names: Vec<_> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["chirp.wav", "clicks.wav", "noise.wav", "tone.wav"]);
        for n in &names {
            let other = b.join(d.file_name().unwrap()).join(n);
            assert_eq!(std::fs::read(d.join(n)).unwrap(), std::fs::read(other).unwrap());
        }
    }
    let o = hypersep(&["synth-data", "--out", s(&ws.path("c")), "--tracks", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("need at least 1 track"));
}

#[test]
fn train_writes_checkpoint_and_one_log_line_per_step() {
    let ws = Workspace::new();
    let data = ws.synth("data", 3);
    let ckpt = ws.path("run/meta.ckpt");
    let o = ws.train(&data, &ckpt, &["--mode", "meta", "--steps", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ckpt.exists());
    assert!(stderr(&o).contains("--steps 10 overrides the configured 4"), "{}", stderr(&o));
    let log = std::fs::read_to_string(ws.path("run/meta.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    let c = hypersep::checkpoint::load_checkpoint(&ckpt).unwrap();
    assert_eq!(c.meta.step, 10);
    assert_eq!(c.meta.model.sharing, hypersep::config::SharingMode::Meta);

    let o = ws.train(&data, &ckpt, &["--steps", "12", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(hypersep::checkpoint::load_checkpoint(&ckpt).unwrap().meta.step, 12);
    assert_eq!(std::fs::read_to_string(ws.path("run/meta.jsonl")).unwrap().lines().count(), 12);
}

#[test]
fn usage_errors_exit_with_two() {
    let ws = Workspace::new();
    let missing = ws.path("nowhere");
    let o = ws.train(&missing, &ws.path("x.ckpt"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)));

    let o = hypersep(&["separate", "--ckpt", s(&ws.path("none.ckpt")), "--in", s(&missing), "--out", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(ws.path("bad.toml"), "[model]\nembedding_dim = 4\ngenerator_dim = 6\n").unwrap();
    let o = hypersep(&["report-params", "--config", s(&ws.path("bad.toml"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("generator_dim"));

    std::fs::write(ws.path("typo.toml"), "[train]\nmax_step = 3\n").unwrap();
    let o = hypersep(&["report-params", "--config", s(&ws.path("typo.toml"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = hypersep(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn separate_and_evaluate() {
    let ws = Workspace::new();
    let data = ws.synth("data", 2);
    let ckpt = ws.path("m.ckpt");
    assert!(ws.train(&data, &ckpt, &[]).status.success());

    let track = synth_toy_track(9, &ToySpec::from_toml(SPEC).unwrap()).unwrap();
    let input = ws.path("mix.wav");
    let mix = resample(&track.mixture(), 44100).unwrap();
    save_wav(&mix, &input).unwrap();
    let o = hypersep(&[
        "separate", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&ws.path("stems")), "--rate", "input", "--segment", "0.05",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stems: Vec<_> = stdout(&o).lines().map(PathBuf::from).collect();
    assert_eq!(stems.len(), 4);
    for p in &stems {
        let w = load_wav(p).unwrap();
        assert_eq!(w.sample_rate, 44100);
        assert!(w.mono().len().abs_diff(mix.len()) <= 2);
    }

    let records = ws.path("eval.jsonl");
    let o = hypersep(&["evaluate", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&records), "--segment", "0.05"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("median"));
    assert_eq!(std::fs::read_to_string(&records).unwrap().lines().count(), 8);
}

#[test]
fn report_params_prints_the_ratio() {
    let ws = Workspace::new();
    let o = hypersep(&["report-params", "--config", s(&ws.path("tiny.toml"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("baseline / meta masking")).unwrap();
    assert!(line.ends_with("4.0"), "{line}");
    let value = |key: &str| -> usize {
        out.lines()
            .find(|l| l.starts_with(key))
            .and_then(|l| l.split_whitespace().last())
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(value("masking, baseline storage"), 4 * value("masking per instrument"));
    assert_eq!(value("stages"), 3);
}

#[test]
fn ablate_prints_seven_rows_and_resumes() {
    let ws = Workspace::new();
    let data = ws.synth("data", 2);
    let table = ws.path("table.txt");
    let config = ws.path("tiny.toml");
    let args = ["ablate", "--config", s(&config), "--data", s(&data), "--out", s(&table), "--steps", "2"];
    let o = hypersep(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    assert!(lines[0].contains("mask params"));
    assert!(ws.path("table_runs/meta.ckpt").exists());
    let again = hypersep(&args);
    assert!(again.status.success());
    assert!(stderr(&again).contains("resuming"));
    assert_eq!(std::fs::read_to_string(&table).unwrap(), text);
}
