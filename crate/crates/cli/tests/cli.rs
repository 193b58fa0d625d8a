use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[synthetic]
frames = 8
active_frames = 6
per_class = 6

[attention]
score_hidden_dim = 4

[train]
hidden = 4
batch_size = 4
max_epochs = 2
dropout = 0.0
learning_rate = 1e-3
"#;

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn gca(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gca"))
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.gca(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str], code: i32) -> String {
        let out = self.gca(args);
        assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stderr).unwrap()
    }

    fn p(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    /// Synthesizes into `data/` and trains `variant` into `run/`.
    fn trained(&self, variant: &str) {
        self.ok(&["synth", "--output-dir", &self.p("data")]);
        self.ok(&["train", "--variant", variant, "--data-dir", &self.p("data"), "--output-dir", &self.p("run")]);
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(p)).unwrap()
}

const DATA_FILES: [&str; 5] = [
    "train.jsonl",
    "validation.jsonl",
    "test.jsonl",
    "partition.txt",
    "ground_truth.json",
];

#[test]
fn synth_is_deterministic_in_its_seed() {
    let env = Env::new();
    env.ok(&["synth", "--output-dir", &env.p("a")]);
    env.ok(&["synth", "--output-dir", &env.p("b")]);
    env.ok(&["synth", "--output-dir", &env.p("c"), "--set", "synthetic.seed=9"]);
    for f in DATA_FILES {
        assert_eq!(read(&env.path("a").join(f)), read(&env.path("b").join(f)), "{f}");
    }
    assert_ne!(read(&env.path("a/train.jsonl")), read(&env.path("c/train.jsonl")));
    let lines = String::from_utf8(read(&env.path("a/train.jsonl"))).unwrap().lines().count();
    assert_eq!(lines, 8 * 4);
}

#[test]
fn invalid_configs_write_nothing() {
    let env = Env::new();
    let out = env.p("out");
    let err = env.fails(
        &["synth", "--output-dir", &out, "--set", r#"synthetic.classes=[{name="a",kind="fine",informative_joints=[3],frequency=1.0,axis=[0.0,1.0,0.0]}]"#],
        2,
    );
    assert!(err.contains("class"), "{err}");
    env.fails(&["synth", "--output-dir", &out, "--set", "train.learnin_rate=1"], 2);
    env.fails(&["synth", "--output-dir", &out, "--set", "split=[0.5,0.5,0.5]"], 2);
    env.fails(&["train", "--output-dir", &out, "--variant", "lstm"], 2);
    assert!(!env.path("out").exists());
    env.fails(&["train", "--output-dir", &out, "--data-dir", &env.p("missing")], 3);
    assert!(!env.path("out").exists());
}

#[test]
fn train_then_eval() {
    let env = Env::new();
    env.trained("gca");
    for f in ["model.ckpt", "report.jsonl", "timing.jsonl"] {
        assert!(env.path("run").join(f).exists(), "{f}");
    }
    let report = String::from_utf8(read(&env.path("run/report.jsonl"))).unwrap();
    assert_eq!(report.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(report.lines().last().unwrap()).unwrap();
    assert!(summary.to_string().contains("test_accuracy"));

    let args = ["--data-dir", &env.p("data"), "--output-dir", &env.p("run")];
    env.ok(&[&["eval", "--noise-sigmas", "0,0.05"][..], &args].concat());
    let m = json(&env.path("run/metrics.json"));
    assert_eq!(m["count"], 8);
    assert_eq!(m["noise"][0]["accuracy"], m["accuracy"]);
    assert_eq!(m["noise"][0]["mean_loss"], m["mean_loss"]);
    assert_eq!(m["noise"][1]["sigma"], 0.05);
    assert_eq!(m["attention_quality"].as_array().unwrap().len(), 2);
    let confusion: u64 = m["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .sum();
    assert_eq!(confusion, 8);
}

#[test]
fn training_is_reproducible() {
    let env = Env::new();
    env.trained("two_stream");
    let data = env.p("data");
    env.ok(&["train", "--variant", "two_stream", "--data-dir", &data, "--output-dir", &env.p("again")]);
    for f in ["model.ckpt", "report.jsonl"] {
        assert_eq!(read(&env.path("run").join(f)), read(&env.path("again").join(f)), "{f}");
    }
    env.ok(&["train", "--variant", "two_stream", "--seed", "1", "--data-dir", &data, "--output-dir", &env.p("other")]);
    assert_ne!(read(&env.path("run/model.ckpt")), read(&env.path("other/model.ckpt")));
}

#[test]
fn divergence_keeps_the_partial_report() {
    let env = Env::new();
    env.ok(&["synth", "--output-dir", &env.p("data")]);
    let err = env.fails(
        &[
            "train",
            "--data-dir",
            &env.p("data"),
            "--output-dir",
            &env.p("run"),
            "--set",
            "train.optimizer=\"sgd\"",
            "--set",
            "train.learning_rate=1e200",
            "--set",
            "train.clip_norm=0",
        ],
        4,
    );
    assert!(err.contains("diverged"), "{err}");
    assert!(env.path("run/report.jsonl").exists());
    assert!(!env.path("run/model.ckpt").exists());
}

#[test]
fn checkpoint_problems_name_the_tensor() {
    let env = Env::new();
    env.trained("gca");
    let args = ["eval", "--data-dir", &env.p("data"), "--output-dir", &env.p("run")];
    let err = env.fails(&[&args[..], &["--set", "train.hidden=5"]].concat(), 6);
    assert!(err.contains("checkpoint tensor `first.w`"), "{err}");
    let err = env.fails(&[&args[..], &["--variant", "two_stream"]].concat(), 6);
    assert!(err.contains("checkpoint tensor `part."), "{err}");

    let ckpt = env.path("run/model.ckpt");
    let mut bytes = read(&ckpt);
    let n = bytes.len();
    bytes[n - 1] ^= 0x10;
    std::fs::write(&ckpt, bytes).unwrap();
    let err = env.fails(&args, 6);
    assert!(err.contains("checkpoint tensor `joint.classifier.b`"), "{err}");
    std::fs::write(&ckpt, b"garbage").unwrap();
    env.fails(&args, 6);
}

#[test]
fn gradcheck_passes_and_catches_an_injected_bug() {
    let env = Env::new();
    let out = env.ok(&["gradcheck", "--output-dir", &env.p("gc")]);
    assert_eq!(out.matches("PASS").count(), 4, "{out}");
    let records = json(&env.path("gc/gradcheck.json"));
    assert_eq!(records.as_array().unwrap().len(), 4);
    assert!(out.contains("joint.score1"), "{out}");

    let err = env.fails(
        &["gradcheck", "--output-dir", &env.p("bad"), "--inject-grad-bug", "--set", "gradcheck.variants=[\"gca\"]"],
        5,
    );
    assert!(err.contains("FAIL"), "{err}");
    assert!(env.path("bad/gradcheck.json").exists());
    env.fails(&["gradcheck", "--set", "gradcheck.hidden=1000"], 2);
}

fn grid(p: &Path) -> Vec<Vec<f64>> {
    String::from_utf8(read(p))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn attention_export_grids() {
    let env = Env::new();
    env.trained("two_stream");
    let common = ["--variant", "two_stream", "--data-dir", &env.p("data"), "--output-dir", &env.p("run")];
    env.ok(&[&["attn-export"][..], &common, &["--set", "export.max_sequences=3"]].concat());
    let root = env.path("run/attention");
    let mut dirs: Vec<_> = std::fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    assert_eq!(dirs.len(), 3);
    let mut sums = vec![[0.0; 2]; 15];
    for d in &dirs {
        for (stream, units) in [("joint", 15), ("part", 5)] {
            for n in 1..=2 {
                let g = grid(&d.join(format!("{stream}_iter{n}.tsv")));
                assert_eq!(g.len(), units);
                assert!(g.iter().all(|r| r.len() == 8));
                let total: f64 = g.iter().flatten().sum();
                assert!((total - 1.0).abs() < 1e-9, "{total}");
                if stream == "joint" {
                    for (j, row) in g.iter().enumerate() {
                        sums[j][n - 1] += row.iter().sum::<f64>() / 3.0;
                    }
                }
            }
        }
    }
    let avg = grid(&root.join("joint_average.tsv"));
    for (row, expect) in avg.iter().zip(&sums) {
        for n in 0..2 {
            assert!((row[n] - expect[n]).abs() < 1e-12);
        }
    }

    env.ok(&["train", "--variant", "baseline_global_2", "--data-dir", &env.p("data"), "--output-dir", &env.p("b")]);
    let err = env.fails(
        &["attn-export", "--variant", "baseline_global_2", "--data-dir", &env.p("data"), "--output-dir", &env.p("b")],
        2,
    );
    assert!(err.contains("no attention"), "{err}");
}
