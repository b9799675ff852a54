use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use resdbn::config::TrainConfig;
use resdbn::experiment::{
    default_out_dir, emit_results, load_datasets, model_writer, pretrain_model, read_curves,
    reports_from_curves, run_experiment_with, ExperimentResult, CURVES_FILE, SUMMARY_FILE,
};
use resdbn::finetune::fine_tune;
use resdbn::model_io::SavedModel;
use resdbn::stats::compare;
use resdbn::{DbnMode, RngStream};

/// Standard and residual Deep Belief Networks on MNIST-format data.
#[derive(Parser, Debug)]
#[command(name = "resdbn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Greedy layer-wise pretraining of one stack; writes the model file.
    #[command(args_override_self = true)]
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output model file.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Supervised fine-tuning of a pretrained stack; prints the test accuracy curve.
    #[command(args_override_self = true)]
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model file written by `pretrain`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Paired standard vs residual experiment over `trials` seeds.
    #[command(args_override_self = true)]
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for curves.csv, summary.json, timings.json and models/.
        #[arg(long, short)]
        out_dir: Option<PathBuf>,
    },
    /// Recomputes the significance verdict from a curves.csv.
    Stats {
        /// A curves.csv file, or a directory containing one.
        path: PathBuf,
    },
}

/// Every field of the training configuration as an optional flag.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Start from the full protocol instead of the desk-scale defaults.
    #[arg(long)]
    full: bool,
    /// TOML file (or JSON, including a previous summary.json) overriding the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    architecture: Option<String>,
    /// `standard` or `residual`; `run` always trains both.
    #[arg(long)]
    mode: Option<DbnMode>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    cd_lr: Option<f64>,
    #[arg(long)]
    cd_k: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    init_std: Option<f64>,
    #[arg(long)]
    bottom_epochs: Option<usize>,
    #[arg(long)]
    upper_epochs: Option<usize>,
    #[arg(long)]
    ft_epochs: Option<usize>,
    #[arg(long)]
    ft_lr: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_epsilon: Option<f64>,
    #[arg(long)]
    reinforced_finetune: Option<bool>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    binarize_threshold: Option<f64>,
    #[arg(long)]
    raw_intensities: Option<bool>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long)]
    subset: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    test_subset: Option<usize>,
    /// Trials trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v; } )*
    };
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = if self.full {
            TrainConfig::default()
        } else {
            TrainConfig::desk_scale()
        };
        if let Some(path) = &self.config {
            cfg = cfg
                .merge_file(path)
                .with_context(|| format!("reading config {}", path.display()))?;
        }
        let args = self;
        apply!(
            cfg, args, architecture, mode, batch_size, cd_lr, cd_k, momentum, weight_decay,
            init_std, bottom_epochs, upper_epochs, ft_epochs, ft_lr, adam_beta1, adam_beta2,
            adam_epsilon, reinforced_finetune, trials, base_seed, binarize_threshold,
            raw_intensities, dataset, data_dir, jobs,
        );
        if self.subset.is_some() {
            cfg.subset = self.subset;
        }
        if self.test_subset.is_some() {
            cfg.test_subset = self.test_subset;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, out } => pretrain(&config.resolve()?, &out),
        Command::Finetune { config, model, out } => finetune(&config.resolve()?, &model, &out),
        Command::Run { config, out_dir } => {
            let cfg = config.resolve()?;
            let out_dir = out_dir.unwrap_or_else(|| default_out_dir(&cfg));
            run(&cfg, &out_dir)
        }
        Command::Stats { path } => stats(&path),
    }
}

fn load(cfg: &TrainConfig) -> Result<(resdbn::DatasetSplit, resdbn::DatasetSplit)> {
    let (train, test) = load_datasets(cfg)
        .with_context(|| format!("loading {} from {}", cfg.dataset, cfg.data_dir.display()))?;
    eprintln!(
        "{}: {} training / {} test samples",
        cfg.dataset,
        train.len(),
        test.len()
    );
    Ok((train, test))
}

fn pretrain(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let (train, _) = load(cfg)?;
    let (dbn, report, _) = pretrain_model(cfg, cfg.mode, cfg.base_seed, &train)?;
    for (l, errs) in report.layer_errors.iter().enumerate() {
        let first = errs.first().copied().unwrap_or(f64::NAN);
        let last = errs.last().copied().unwrap_or(f64::NAN);
        println!("layer {}: reconstruction error {first:.6} -> {last:.6}", l + 1);
    }
    SavedModel::stack_only(dbn).save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn finetune(cfg: &TrainConfig, model_path: &Path, out: &Path) -> Result<()> {
    let (train, test) = load(cfg)?;
    let saved = SavedModel::load(model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;
    let n_classes = *cfg.widths(train.n_features())?.last().unwrap();
    let mut model = saved
        .into_classifier(n_classes)?
        .with_reinforced_forward(cfg.reinforced_finetune);
    let mut rng = RngStream::new(cfg.base_seed);
    let curve = fine_tune(&mut model, &train, &test, &cfg.finetune_config(), &mut rng)?;
    for (epoch, acc) in curve.iter().enumerate() {
        println!("epoch {:>3}: test accuracy {acc:.4}", epoch + 1);
    }
    SavedModel::from_classifier(&model).save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cfg: &TrainConfig, out_dir: &Path) -> Result<()> {
    let (train, test) = load(cfg)?;
    let sink = model_writer(out_dir)?;
    let result = run_experiment_with(cfg, &train, &test, Some(&sink))?;
    emit_results(&result, out_dir)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    print_result(&result);
    println!("wrote {}", out_dir.join(SUMMARY_FILE).display());
    Ok(())
}

fn print_result(result: &ExperimentResult) {
    for (name, mode) in [("DBN", DbnMode::Standard), ("Res-DBN", DbnMode::Residual)] {
        let finals: Vec<String> = result
            .reports(mode)
            .iter()
            .map(|r| format!("{:.4}", r.final_accuracy))
            .collect();
        println!("{name:>8}: [{}]", finals.join(", "));
    }
    match &result.verdict {
        Some(v) => print_verdict(v),
        None => println!("no completed trial pairs"),
    }
}

fn print_verdict(v: &resdbn::stats::ComparisonVerdict) {
    let std = |s: Option<f64>| s.map_or("n/a".to_string(), |s| format!("{:.2}", 100.0 * s));
    println!(
        " Res-DBN: {:.2} ± {}\n     DBN: {:.2} ± {}",
        100.0 * v.mean_a,
        std(v.std_a),
        100.0 * v.mean_b,
        std(v.std_b)
    );
    println!(
        "Wilcoxon over {} pairs: W = {}, p = {:.6} ({:?}), significant = {}",
        v.n_pairs, v.w_statistic, v.p_value, v.outcome, v.significant
    );
}

fn stats(path: &Path) -> Result<()> {
    let file = if path.is_dir() {
        path.join(CURVES_FILE)
    } else {
        path.to_path_buf()
    };
    let rows = read_curves(&file)?;
    let (standard, residual) = reports_from_curves(&rows)?;
    if residual.is_empty() || standard.is_empty() {
        bail!("{} holds no paired trials", file.display());
    }
    let verdict = compare(&residual, &standard)?;
    print_verdict(&verdict);
    println!("{}", serde_json::to_string_pretty(&verdict)?);
    Ok(())
}
