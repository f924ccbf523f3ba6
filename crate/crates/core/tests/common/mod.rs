#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use mlloo::cli::run_cli;

/// Three 6x6 classes: a bright 2x6 band at rows 0-1, 2-3 or 4-5, plus
/// deterministic noise.
pub fn write_dataset(path: &Path, n: usize, salt: u64) {
    let mut s = String::new();
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut noise = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for i in 0..n {
        let label = i % 3;
        write!(s, "{label}").unwrap();
        for r in 0..6 {
            for _ in 0..6 {
                let base = if r / 2 == label { 0.7 } else { 0.1 };
                write!(s, ",{}", base + 0.25 * noise()).unwrap();
            }
        }
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

pub const CONFIG: &str = r#"
seed = 11
output_dir = "out"
workers = 1

[dataset]
name = "bands"
format = "csv"
train_images = "train.csv"
test_images = "test.csv"
num_classes = 3
shape = [6, 6, 1]

[model]
architecture = { kind = "mlp", hidden = [12, 8] }
training = { lr = 0.1, batch_size = 16, epochs = 15, seed = 2 }

[attribution]
per_layer_cap = 4
calibration = 40

[protocol]
train_range = [0, 60]
eval_range = [60, 120]
n_train = 12
n_test = 12
run = ["known", "mixed", "transfer"]

[[attacks]]
kind = "fgsm"
epsilon = 0.3

[[attacks]]
kind = "cw_l2"
steps = 40
binary_steps = 3
learning_rate = 0.05

[[attacks]]
kind = "deep_fool"
known = false

[mixed]
low = 0
high = 4
mixing = { over = "confidence", values = [0.0, 1.0, 2.0, 3.0, 4.0] }
base = { kind = "cw_l2", steps = 40, binary_steps = 3, learning_rate = 0.05 }
n_test = 8

[transfer]
source = "cw_l2"
targets = ["deep_fool", "fgsm"]
"#;

pub fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("train.csv"), 300, 1);
    write_dataset(&dir.path().join("test.csv"), 120, 2);
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

pub fn run(dir: &Path, args: &[&str]) -> i32 {
    let root = dir.to_str().unwrap();
    let mut argv = vec!["mlloo"];
    argv.extend_from_slice(args);
    argv.extend_from_slice(&["--config", "exp.toml", "--root", root]);
    run_cli(argv)
}
