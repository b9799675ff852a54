//! End-to-end runs over small synthetic IDX files.

use std::fs;
use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;

use resdbn::config::TrainConfig;
use resdbn::data::{
    encode_idx_images, encode_idx_labels, RawImages, IMAGE_SIDE, TEST_IMAGES, TEST_LABELS,
    TRAIN_IMAGES, TRAIN_LABELS,
};
use resdbn::experiment::{
    emit_results, load_datasets, model_writer, model_file_name, read_curves, run_experiment_with,
    CURVES_FILE, MODELS_DIR,
};
use resdbn::finetune::evaluate_accuracy;
use resdbn::model_io::SavedModel;
use resdbn::{DbnMode, RngStream};

/// Class `k` lights a three-row band starting near row `2k + 3`; the band
/// is shifted by up to one row and pixels are flipped at random.
fn banded_digits(n: usize, seed: u64) -> (RawImages, Vec<u8>) {
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

fn write_gz(path: &Path, bytes: &[u8]) {
    let mut enc = GzEncoder::new(fs::File::create(path).unwrap(), Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap();
}

fn write_dataset(dir: &Path) {
    let (train, train_labels) = banded_digits(600, 1);
    let (test, test_labels) = banded_digits(100, 2);
    write_gz(&dir.join(format!("{TRAIN_IMAGES}.gz")), &encode_idx_images(&train));
    write_gz(&dir.join(format!("{TRAIN_LABELS}.gz")), &encode_idx_labels(&train_labels));
    // test split stays uncompressed to cover both paths
    fs::write(dir.join(TEST_IMAGES), encode_idx_images(&test)).unwrap();
    fs::write(dir.join(TEST_LABELS), encode_idx_labels(&test_labels)).unwrap();
}

fn small_config(data_dir: &Path) -> TrainConfig {
    TrainConfig {
        architecture: "i:32:16:10".into(),
        batch_size: 20,
        bottom_epochs: 3,
        upper_epochs: 2,
        ft_epochs: 15,
        ft_lr: 0.03,
        trials: 3,
        base_seed: 100,
        dataset: "banded".into(),
        data_dir: data_dir.to_path_buf(),
        subset: None,
        test_subset: None,
        jobs: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn load_applies_subsets() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let cfg = TrainConfig {
        subset: Some(50),
        test_subset: Some(1000),
        ..small_config(dir.path())
    };
    let (train, test) = load_datasets(&cfg).unwrap();
    assert_eq!((train.len(), test.len()), (50, 100));
    assert_eq!(train.n_features(), 784);
    assert!(train.images().iter().all(|&x| x == 0.0 || x == 1.0));

    let missing = TrainConfig {
        data_dir: dir.path().join("nowhere"),
        ..cfg
    };
    let err = load_datasets(&missing).unwrap_err().to_string();
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn experiment_learns_and_saved_models_reproduce_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let cfg = small_config(dir.path());
    let (train, test) = load_datasets(&cfg).unwrap();
    let out = dir.path().join("out");
    let sink = model_writer(&out).unwrap();
    let result = run_experiment_with(&cfg, &train, &test, Some(&sink)).unwrap();
    emit_results(&result, &out).unwrap();

    assert!(result.failures.is_empty());
    for mode in [DbnMode::Standard, DbnMode::Residual] {
        let reports = result.reports(mode);
        assert_eq!(reports.len(), 3);
        for (t, r) in reports.iter().enumerate() {
            assert_eq!(r.trial, t);
            assert_eq!(r.seed, 100 + t as u64);
            assert_eq!(r.accuracy_series.len(), 15);
            assert!(r.final_accuracy > 0.5, "{mode} trial {t}: {}", r.final_accuracy);

            let path = out.join(MODELS_DIR).join(model_file_name(mode, t));
            let model = SavedModel::load(&path).unwrap().into_classifier(10).unwrap();
            assert_eq!(model.dbn().mode(), mode);
            assert_eq!(evaluate_accuracy(&model, &test).unwrap(), r.final_accuracy);
        }
    }
    let v = result.verdict.as_ref().unwrap();
    assert_eq!(v.n_pairs, 3);
    assert_eq!(v.significant, v.p_value <= 0.05);

    let rows = read_curves(&out.join(CURVES_FILE)).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 15);
}

#[test]
fn reinforced_finetuning_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let cfg = TrainConfig {
        trials: 1,
        reinforced_finetune: true,
        ..small_config(dir.path())
    };
    let (train, test) = load_datasets(&cfg).unwrap();
    let result = run_experiment_with(&cfg, &train, &test, None).unwrap();
    assert!(result.failures.is_empty());
    assert!(result.residual[0].final_accuracy > 0.5);
}
