//! End-to-end tests of the `mamfusion` binary: the synth/train/eval/heatmap
//! flow, determinism of outputs, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mamfusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

const SPEC: &str = "n_videos = 6\nframes_min = 6\nframes_max = 10\ncaption_min = 3\ncaption_max = 5\nd_vid = 12\nd_text = 8\nrelevant_span = 0.5\nnoise_sigma = 0.2\nseed = 11\n";

const CONFIG: &str = "d = 16\nheads = 2\nffn_width = 32\nvariances = 1.0,inf\nm_c = 4\nn_max = 8\nm_f_max = 16\nd_text = 8\nd_vid = 12\nd_state = 4\nd_conv = 2\nexpand = 2\nepochs = 3\nbatch_size = 4\nlr = 0.001\nseed = 5\n";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("spec.txt"), SPEC).unwrap();
        std::fs::write(dir.path().join("config.txt"), CONFIG).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn synth(&self, out: &str) {
        let result = run(&[
            "synth",
            "--spec",
            &self.s("spec.txt"),
            "--out",
            &self.s(out),
        ]);
        assert_ok(&result);
    }

    fn train(&self, out: &str) -> Output {
        self.train_with("config.txt", out)
    }

    fn train_with(&self, config: &str, out: &str) -> Output {
        let result = run(&[
            "train",
            "--config",
            &self.s(config),
            "--data",
            &self.s("corpus/manifest.jsonl"),
            "--out",
            &self.s(out),
        ]);
        assert_ok(&result);
        result
    }

    fn eval(&self, checkpoint: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "eval".to_string(),
            "--config".into(),
            self.s("config.txt"),
            "--data".into(),
            self.s("corpus/manifest.jsonl"),
            "--checkpoint".into(),
            self.s(checkpoint),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let out = bin().args(&args).output().expect("binary runs");
        assert_ok(&out);
        out
    }
}

fn dir_files(path: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn synth_is_byte_deterministic() {
    let ws = Workspace::new();
    ws.synth("a");
    ws.synth("b");
    assert_eq!(dir_files(&ws.path("a")), dir_files(&ws.path("b")));
}

#[test]
fn train_and_eval_are_deterministic() {
    let ws = Workspace::new();
    ws.synth("corpus");
    ws.train("run1");
    ws.train("run2");

    let ckpt1 = std::fs::read(ws.path("run1/checkpoint.mmck")).unwrap();
    let ckpt2 = std::fs::read(ws.path("run2/checkpoint.mmck")).unwrap();
    assert_eq!(
        ckpt1, ckpt2,
        "same seed and data must give identical checkpoints"
    );

    // loss trace matches apart from the wall-clock column
    let strip = |csv: &str| -> Vec<String> {
        csv.lines()
            .map(|l| {
                l.rsplit_once(',')
                    .map(|(head, _)| head.to_string())
                    .unwrap_or_default()
            })
            .collect()
    };
    let t1 = std::fs::read_to_string(ws.path("run1/loss_trace.csv")).unwrap();
    let t2 = std::fs::read_to_string(ws.path("run2/loss_trace.csv")).unwrap();
    assert_eq!(strip(&t1), strip(&t2));

    let e1 = ws.eval("run1/checkpoint.mmck", &[]);
    let e2 = ws.eval("run1/checkpoint.mmck", &[]);
    assert_eq!(e1.stdout, e2.stdout, "eval stdout must be byte-identical");

    // report file mirrors stdout
    let report = std::fs::read_to_string(ws.path("run1/checkpoint.mmck.report.txt")).unwrap();
    assert_eq!(report.as_bytes(), &e1.stdout[..]);
    for key in ["r1=", "r5=", "r10=", "r100=", "sum_r="] {
        assert!(report.contains(key), "missing {key} in report");
    }
}

fn sum_r_of(out: &Output) -> f64 {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("sum_r=").map(|v| v.parse::<f64>().unwrap()))
        .expect("sum_r line")
}

#[test]
fn disable_flags_compose_and_change_scores() {
    let ws = Workspace::new();
    ws.synth("corpus");
    // train to convergence so the comparison is on a trained model
    std::fs::write(
        ws.path("long.txt"),
        CONFIG.replace("epochs = 3", "epochs = 30"),
    )
    .unwrap();
    ws.train_with("long.txt", "run");
    let full = ws.eval("run/checkpoint.mmck", &[]);
    let no_fusions = ws.eval(
        "run/checkpoint.mmck",
        &["--disable", "ttv", "--disable", "tvt"],
    );
    let all_off = ws.eval(
        "run/checkpoint.mmck",
        &["--disable", "mamba", "--disable", "ttv", "--disable", "tvt"],
    );
    // the trained model should not be beaten by its ablated variants
    assert!(sum_r_of(&full) >= sum_r_of(&no_fusions));
    assert!(sum_r_of(&all_off) <= 400.0);

    let fast = ws.eval("run/checkpoint.mmck", &["--fast-mode"]);
    let both_off = ws.eval(
        "run/checkpoint.mmck",
        &["--disable", "ttv", "--disable", "tvt"],
    );
    assert_eq!(
        fast.stdout, both_off.stdout,
        "fast mode equals both fusions disabled"
    );
}

#[test]
fn heatmap_writes_stochastic_maps_deterministically() {
    let ws = Workspace::new();
    ws.synth("corpus");
    ws.train("run");
    let args = [
        "heatmap",
        "--config",
        &ws.s("config.txt"),
        "--checkpoint",
        &ws.s("run/checkpoint.mmck"),
        "--query",
        "c0002",
        "--video",
        "v0003",
        "--out",
        &ws.s("maps"),
        "--data",
        &ws.s("corpus/manifest.jsonl"),
    ];
    let first = run(&args);
    assert_ok(&first);
    let files: Vec<Vec<u8>> = [
        "maps.tvt.csv",
        "maps.tvt.pgm",
        "maps.ttv.csv",
        "maps.ttv.pgm",
    ]
    .iter()
    .map(|f| std::fs::read(ws.path(f)).unwrap())
    .collect();

    // per-row simplex in the CSV (pre-scaling weights)
    let csv = String::from_utf8(files[0].clone()).unwrap();
    for line in csv.lines() {
        let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
    }
    let pgm = &files[1];
    assert!(pgm.starts_with(b"P5\n"));

    let second = run(&args);
    assert_ok(&second);
    for (i, f) in [
        "maps.tvt.csv",
        "maps.tvt.pgm",
        "maps.ttv.csv",
        "maps.ttv.pgm",
    ]
    .iter()
    .enumerate()
    {
        assert_eq!(
            files[i],
            std::fs::read(ws.path(f)).unwrap(),
            "{f} changed between runs"
        );
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let ws = Workspace::new();
    ws.synth("corpus");

    // usage errors: 2
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    // heatmap without any manifest source: 2
    std::fs::write(ws.path("bare.txt"), CONFIG).unwrap();
    ws.train("run");
    let out = run(&[
        "heatmap",
        "--config",
        &ws.s("bare.txt"),
        "--checkpoint",
        &ws.s("run/checkpoint.mmck"),
        "--query",
        "c0000",
        "--video",
        "v0000",
        "--out",
        &ws.s("m"),
    ]);
    assert_eq!(code(&out), 2);

    // data/parse errors: 3
    std::fs::write(ws.path("bad.txt"), "bogus_key = 1\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        &ws.s("bad.txt"),
        "--data",
        &ws.s("corpus/manifest.jsonl"),
        "--out",
        &ws.s("x"),
    ]);
    assert_eq!(code(&out), 3);

    std::fs::write(ws.path("badval.txt"), "temperature = 0\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        &ws.s("badval.txt"),
        "--data",
        &ws.s("corpus/manifest.jsonl"),
        "--out",
        &ws.s("x"),
    ]);
    assert_eq!(code(&out), 3);

    let out = run(&[
        "eval",
        "--config",
        &ws.s("config.txt"),
        "--data",
        &ws.s("missing.jsonl"),
        "--checkpoint",
        &ws.s("run/checkpoint.mmck"),
    ]);
    assert_eq!(code(&out), 3);

    // corrupt checkpoint magic: 3
    let mut bytes = std::fs::read(ws.path("run/checkpoint.mmck")).unwrap();
    bytes[0] = b'X';
    std::fs::write(ws.path("broken.mmck"), bytes).unwrap();
    let out = run(&[
        "eval",
        "--config",
        &ws.s("config.txt"),
        "--data",
        &ws.s("corpus/manifest.jsonl"),
        "--checkpoint",
        &ws.s("broken.mmck"),
    ]);
    assert_eq!(code(&out), 3);

    // help exits 0
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn numeric_blowup_exits_with_code_4() {
    let ws = Workspace::new();
    ws.synth("corpus");
    // an absurd learning rate sends parameters to overflow within a few steps
    let hot = CONFIG
        .replace("lr = 0.001", "lr = 1e18")
        .replace("epochs = 3", "epochs = 20");
    std::fs::write(ws.path("hot.txt"), hot).unwrap();
    let out = run(&[
        "train",
        "--config",
        &ws.s("hot.txt"),
        "--data",
        &ws.s("corpus/manifest.jsonl"),
        "--out",
        &ws.s("boom"),
    ]);
    assert_eq!(
        code(&out),
        4,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
