#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use resdbn::data::{
    encode_idx_images, encode_idx_labels, RawImages, IMAGE_SIDE, TEST_IMAGES, TEST_LABELS,
    TRAIN_IMAGES, TRAIN_LABELS,
};
use resdbn::RngStream;

/// Class `k` lights a jittered horizontal band near row `2k + 3`, with 10% pixel noise.
pub fn banded_digits(n: usize, seed: u64) -> (RawImages, Vec<u8>) {
    let mut rng = RngStream::new(seed);
    let mut pixels = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 10) as u8;
        let band = 2 * usize::from(class) + 2 + (rng.uniform() * 3.0) as usize;
        for r in 0..IMAGE_SIDE {
            for _ in 0..IMAGE_SIDE {
                let on = (band..band + 3).contains(&r);
                let flip = rng.uniform() < 0.1;
                pixels.push(if on != flip { 230 } else { 10 });
            }
        }
        labels.push(class);
    }
    let raw = RawImages {
        count: n,
        rows: IMAGE_SIDE,
        cols: IMAGE_SIDE,
        pixels,
    };
    (raw, labels)
}

/// Writes an uncompressed train/test IDX quadruple into `dir`.
pub fn write_dataset(dir: &Path, n_train: usize, n_test: usize) {
    fs::create_dir_all(dir).unwrap();
    let (train, train_labels) = banded_digits(n_train, 1);
    let (test, test_labels) = banded_digits(n_test, 2);
    fs::write(dir.join(TRAIN_IMAGES), encode_idx_images(&train)).unwrap();
    fs::write(dir.join(TRAIN_LABELS), encode_idx_labels(&train_labels)).unwrap();
    fs::write(dir.join(TEST_IMAGES), encode_idx_images(&test)).unwrap();
    fs::write(dir.join(TEST_LABELS), encode_idx_labels(&test_labels)).unwrap();
}

pub fn resdbn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_resdbn"))
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{cmd:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small, fast settings for the synthetic data.
pub fn toy_flags(data_dir: &Path) -> Vec<String> {
    [
        "--data-dir",
        data_dir.to_str().unwrap(),
        "--dataset",
        "banded",
        "--architecture",
        "i:16:12:10",
        "--batch-size",
        "20",
        "--bottom-epochs",
        "2",
        "--upper-epochs",
        "1",
        "--ft-epochs",
        "3",
        "--ft-lr",
        "0.01",
        "--trials",
        "2",
        "--base-seed",
        "5",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("RESDBN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}
