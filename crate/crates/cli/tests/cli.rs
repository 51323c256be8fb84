use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const ROWS: usize = 7;
const COLS: usize = 5;

fn write_idx(path: &Path, magic: u32, dims: &[u32], payload: &[u8]) {
    let mut bytes = magic.to_be_bytes().to_vec();
    for d in dims {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).unwrap();
}

/// Small IDX split whose label is the brightest row index mod 10.
fn write_split(dir: &Path, images: &str, labels: &str, n: usize, salt: usize) {
    let mut pixels = Vec::with_capacity(n * ROWS * COLS);
    let mut labs = Vec::with_capacity(n);
    for i in 0..n {
        let bright = (i * 7 + salt) % ROWS;
        for r in 0..ROWS {
            for c in 0..COLS {
                let v = if r == bright { 200 + (c * 11) % 50 } else { (i * 31 + r * 7 + c * 3) % 60 };
                pixels.push(v as u8);
            }
        }
        labs.push((bright % 10) as u8);
    }
    write_idx(&dir.join(images), 0x0803, &[n as u32, ROWS as u32, COLS as u32], &pixels);
    write_idx(&dir.join(labels), 0x0801, &[n as u32], &labs);
}

struct Fixture {
    tmp: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");
        fs::create_dir(&data).unwrap();
        write_split(&data, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 96, 0);
        write_split(&data, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 40, 3);
        Fixture { tmp }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn config(&self, name: &str, extra: &str) -> PathBuf {
        let text = format!(
            r#"
[model]
cell = "miru2"
n_x = {COLS}
n_h = 8
n_y = 10
n_t = {ROWS}

[coefficients]
mode = "scalar"
lambda = 0.8
beta = 0.55

[optimizer]
kind = "rmsprop"
lr = 0.01

[training]
epochs = 2
batch_size = 16
seeds = [0]

[data]
dir = "{data}"

[output]
dir = "{out}"
{extra}
"#,
            data = self.path("data").display(),
            out = self.path("runs").display(),
        );
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }
}

fn miru(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_miru"))
        .args(args)
        .env_remove("MIRU_DATA_DIR")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let ok = miru(&["gradcheck", "--seeds", "1"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let bad = miru(&["gradcheck", "--cells", "miru2", "--seeds", "1", "--corrupt", "output.W:0:1e-3"]);
    assert_eq!(bad.status.code(), Some(1), "{}", stdout(&bad));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn resources_prints_table_and_accepts_empty_list() {
    let o = miru(&["resources"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("21386"), "{text}");
    assert!(text.contains("GRU / MiRU-2"));
    let empty = miru(&["resources", "--cells", ""]);
    assert_eq!(empty.status.code(), Some(0));
    assert!(stdout(&empty).trim().is_empty());
    let bad = miru(&["resources", "--bias", "sometimes"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    let f = Fixture::new();
    let cfg = f.config("bad.toml", "[extra]\nkey = 1\n");
    assert_eq!(miru(&["train", "-c", s(&cfg)]).status.code(), Some(2));
    let cfg = f.config("ok.toml", "");
    let o = miru(&["train", "-c", s(&cfg), "--set", "training.batch_size=0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = miru(&["train", "-c", s(&cfg), "--set", "data.dir=/nonexistent/mnist"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(miru(&["train"]).status.code(), Some(2));
}

#[test]
fn zero_epochs_records_initial_evaluation_only() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "");
    let out = f.path("zero");
    let o = miru(&["-q", "train", "-c", s(&cfg), "--set", "training.epochs=0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(out.join("seed-0/model.ckpt").is_file());
}

#[test]
fn training_is_reproducible_and_checkpoints_evaluate() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "");
    let (a, b) = (f.path("a"), f.path("b"));
    for out in [&a, &b] {
        let o = miru(&["-q", "train", "-c", s(&cfg), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["metrics.jsonl", "manifest.json", "seed-0/model.ckpt", "seed-0/optim.ckpt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    let ckpt = a.join("seed-0/model.ckpt");
    let o = miru(&["eval", "-c", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(0));
    let ev: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(ev["examples"], 40);
    assert_eq!(ev["accuracy"], last["test_accuracy"]);
}

#[test]
fn single_task_continual_run_gives_one_cell() {
    let f = Fixture::new();
    let cfg = f.config("cl.toml", "[continual]\ntasks = 1\nstore_k = 0\ncapacity = 0\n");
    let out = f.path("cl");
    let o = miru(&["-q", "cl", "-c", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("accuracy-seed-0.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert_eq!(lines[0], "after_task,task_1");
}

#[test]
fn continual_run_with_replay_fills_lower_triangle() {
    let f = Fixture::new();
    let cfg = f.config("cl.toml", "[continual]\ntasks = 3\nstore_k = 1\ncapacity = 6\n");
    let out = f.path("cl");
    let o = miru(&["-q", "cl", "-c", s(&cfg), "--set", "training.epochs=1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("accuracy-seed-0.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for (j, row) in rows.iter().enumerate() {
        for (i, cell) in row[1..].iter().enumerate() {
            assert_eq!(cell.is_empty(), i > j, "row {j} col {i}: {csv}");
        }
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["mean_accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn gate_histogram_counts_every_value() {
    let f = Fixture::new();
    let cfg = f.config("c.toml", "");
    let csv = f.path("hist.csv");
    let o = miru(&["gate-hist", "-c", s(&cfg), "--bins", "10", "--limit", "20", "--csv", s(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    // 20 images x 7 steps x 8 units
    assert_eq!(summary["total"], 20 * ROWS * 8);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 11);
}
