//! Experiment configuration and the `i:500:500:10` architecture notation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PixelEncoding;
use crate::dbn::{DbnMode, PretrainConfig};
use crate::error::{Error, Result};
use crate::finetune::FineTuneConfig;
use crate::rbm::CdOptions;

/// The seven benchmark stacks, `a` through `g`.
pub const ARCHITECTURES: [(&str, &str); 7] = [
    ("a", "i:500:500:10"),
    ("b", "i:500:500:500:10"),
    ("c", "i:500:500:500:500:10"),
    ("d", "i:1000:1000:10"),
    ("e", "i:1000:1000:1000:10"),
    ("f", "i:2000:2000:2000:10"),
    ("g", "i:2000:2000:2000:2000:10"),
];

/// Resolves a row letter (`a`..`g`) to its notation; anything else is returned as is.
pub fn resolve_architecture(text: &str) -> &str {
    ARCHITECTURES
        .iter()
        .find(|(id, _)| *id == text)
        .map_or(text, |(_, layout)| layout)
}

/// Parses colon-separated widths. A leading `i` stands for `input_dim`; the
/// last token is the class count.
pub fn parse_architecture(text: &str, input_dim: usize) -> Result<Vec<usize>> {
    let text = resolve_architecture(text.trim());
    let err = |reason: String| Error::Architecture {
        text: text.to_string(),
        reason,
    };
    let tokens: Vec<&str> = text.split(':').map(str::trim).collect();
    if tokens.len() < 3 {
        return Err(err(format!(
            "need input, at least one hidden layer and a class layer, got {} token(s)",
            tokens.len()
        )));
    }
    let mut widths = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        let w = if i == 0 && *tok == "i" {
            input_dim
        } else {
            tok.parse::<usize>()
                .map_err(|_| err(format!("malformed token {tok:?}")))?
        };
        if w == 0 {
            return Err(err(format!("token {tok:?} gives a zero width")));
        }
        widths.push(w);
    }
    if widths[0] != input_dim {
        return Err(err(format!(
            "input width {} does not match the dataset ({input_dim})",
            widths[0]
        )));
    }
    Ok(widths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Notation such as `i:500:500:10`, or a row letter `a`..`g`.
    pub architecture: String,
    /// Model used by the single-model subcommands; `run` always trains both.
    pub mode: DbnMode,
    pub batch_size: usize,
    pub cd_lr: f64,
    pub cd_k: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init_std: f64,
    pub bottom_epochs: usize,
    pub upper_epochs: usize,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Backpropagate through the reinforced inputs of residual models.
    pub reinforced_finetune: bool,
    pub trials: usize,
    pub base_seed: u64,
    pub binarize_threshold: f64,
    /// Use grey levels / 255 instead of thresholded pixels.
    pub raw_intensities: bool,
    pub dataset: String,
    pub data_dir: PathBuf,
    /// Keep only the first N training samples.
    pub subset: Option<usize>,
    /// Keep only the first N test samples.
    pub test_subset: Option<usize>,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: "i:500:500:10".into(),
            mode: DbnMode::Residual,
            batch_size: 128,
            cd_lr: 0.1,
            cd_k: 1,
            momentum: 0.0,
            weight_decay: 0.0,
            init_std: 0.01,
            bottom_epochs: 50,
            upper_epochs: 25,
            ft_epochs: 20,
            ft_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            reinforced_finetune: false,
            trials: 15,
            base_seed: 0,
            binarize_threshold: 0.5,
            raw_intensities: false,
            dataset: "mnist".into(),
            data_dir: PathBuf::from("data/mnist"),
            subset: None,
            test_subset: None,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    /// Reduced protocol that finishes in minutes on one core.
    pub fn desk_scale() -> Self {
        Self {
            architecture: "i:100:100:10".into(),
            bottom_epochs: 10,
            upper_epochs: 5,
            ft_epochs: 10,
            trials: 5,
            subset: Some(10_000),
            test_subset: Some(2_000),
            ..Self::default()
        }
    }

    /// Reads TOML, or JSON when the extension is `.json`. Missing keys take
    /// their default values.
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::default().merge_file(path)
    }

    /// Overrides the keys present in the file at `path`. TOML is assumed unless
    /// the extension is `.json`; a JSON document with a top-level `config`
    /// object (as written to `summary.json`) is accepted.
    pub fn merge_file(self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let in_file = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", path.display()));
        let overrides: serde_json::Value = if is_json {
            let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| in_file(&e))?;
            match value.get_mut("config") {
                Some(inner) => inner.take(),
                None => value,
            }
        } else {
            let table: toml::Table = toml::from_str(&text).map_err(|e| in_file(&e))?;
            serde_json::to_value(table).map_err(|e| in_file(&e))?
        };
        let serde_json::Value::Object(overrides) = overrides else {
            return Err(Error::Config(format!("{}: expected a table", path.display())));
        };
        let mut merged = serde_json::to_value(&self).expect("config serializes");
        let fields = merged.as_object_mut().expect("config is an object");
        for (key, value) in overrides {
            fields.insert(key, value);
        }
        serde_json::from_value(merged).map_err(|e| in_file(&e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.cd_k == 0 {
            return bad("cd_k must be at least 1".into());
        }
        for (name, v) in [
            ("cd_lr", self.cd_lr),
            ("ft_lr", self.ft_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("init_std", self.init_std),
            ("adam_epsilon", self.adam_epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return bad(format!(
                "binarize_threshold must lie in [0, 1], got {}",
                self.binarize_threshold
            ));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.subset == Some(0) || self.test_subset == Some(0) {
            return bad("subset sizes must be positive".into());
        }
        // the input width is only known once data is loaded
        let input_dim = resolve_architecture(self.architecture.trim())
            .split(':')
            .next()
            .and_then(|t| t.trim().parse().ok())
            .unwrap_or(crate::data::IMAGE_PIXELS);
        self.widths(input_dim).map(|_| ())
    }

    pub fn widths(&self, input_dim: usize) -> Result<Vec<usize>> {
        parse_architecture(&self.architecture, input_dim)
    }

    pub fn encoding(&self) -> PixelEncoding {
        if self.raw_intensities {
            PixelEncoding::Intensity
        } else {
            PixelEncoding::Binary {
                threshold: self.binarize_threshold,
            }
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            batch_size: self.batch_size,
            cd: CdOptions {
                k: self.cd_k,
                learning_rate: self.cd_lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            bottom_epochs: self.bottom_epochs,
            upper_epochs: self.upper_epochs,
        }
    }

    pub fn finetune_config(&self) -> FineTuneConfig {
        FineTuneConfig {
            epochs: self.ft_epochs,
            batch_size: self.batch_size,
            learning_rate: self.ft_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows_parse() {
        assert_eq!(parse_architecture("i:500:500:10", 784).unwrap(), vec![784, 500, 500, 10]);
        assert_eq!(
            parse_architecture("i:2000:2000:2000:2000:10", 784).unwrap(),
            vec![784, 2000, 2000, 2000, 2000, 10]
        );
        assert_eq!(parse_architecture("g", 784).unwrap().len(), 6);
        assert_eq!(parse_architecture("784:100:10", 784).unwrap(), vec![784, 100, 10]);
        for (_, layout) in ARCHITECTURES {
            let w = parse_architecture(layout, 784).unwrap();
            assert_eq!((w[0], *w.last().unwrap()), (784, 10));
        }
    }

    #[test]
    fn malformed_architectures() {
        for text in ["i:500", "i", "", "i:abc:10", "i:0:10", "i:500:-1", "785:10:10", "i:i:10"] {
            assert!(parse_architecture(text, 784).is_err(), "{text}");
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.cd_lr, 0.1);
        assert_eq!((c.bottom_epochs, c.upper_epochs, c.ft_epochs), (50, 25, 20));
        assert_eq!(c.ft_lr, 1e-3);
        assert_eq!((c.cd_k, c.trials), (1, 15));
        assert_eq!(c.binarize_threshold, 0.5);
        c.validate().unwrap();
        TrainConfig::desk_scale().validate().unwrap();
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig::desk_scale();
        cfg.base_seed = 77;
        cfg.mode = DbnMode::Standard;

        let toml_path = dir.path().join("c.toml");
        std::fs::write(&toml_path, cfg.to_toml()).unwrap();
        assert_eq!(TrainConfig::from_file(&toml_path).unwrap(), cfg);

        let json_path = dir.path().join("summary.json");
        let doc = serde_json::json!({ "other": 1, "config": cfg });
        std::fs::write(&json_path, doc.to_string()).unwrap();
        assert_eq!(TrainConfig::from_file(&json_path).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "trials = 3\nmode = \"standard\"\n").unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.mode, DbnMode::Standard);
        assert_eq!(cfg.batch_size, 128);

        let desk = TrainConfig::desk_scale().merge_file(&path).unwrap();
        assert_eq!(desk.trials, 3);
        assert_eq!(desk.architecture, "i:100:100:10");

        std::fs::write(&path, "trails = 3\n").unwrap();
        assert!(TrainConfig::from_file(&path).is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let base = TrainConfig::default();
        let cases: Vec<TrainConfig> = vec![
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { cd_k: 0, ..base.clone() },
            TrainConfig { cd_lr: f64::NAN, ..base.clone() },
            TrainConfig { adam_beta1: 1.0, ..base.clone() },
            TrainConfig { binarize_threshold: 1.5, ..base.clone() },
            TrainConfig { jobs: 0, ..base.clone() },
            TrainConfig { subset: Some(0), ..base.clone() },
            TrainConfig { architecture: "i:10".into(), ..base },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
