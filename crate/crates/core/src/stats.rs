//! Trial aggregation and the paired Wilcoxon signed-rank test.
//!
//! Zero differences are dropped before ranking and tied magnitudes share their
//! average rank. The statistic is `W = min(W+, W-)` and the p-value is
//! two-sided. Up to [`EXACT_MAX_N`] non-zero pairs the null distribution is
//! enumerated exactly; beyond that a normal approximation with tie-corrected
//! variance and continuity correction is used.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dbn::DbnMode;
use crate::error::{check_len, Error, Result};

/// Largest number of non-zero pairs handled by exact enumeration.
pub const EXACT_MAX_N: usize = 20;
/// Fewest non-zero pairs for which a p-value is reported.
pub const MIN_PAIRS: usize = 5;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub model_tag: DbnMode,
    pub architecture: String,
    pub dataset: String,
    pub trial: usize,
    pub seed: u64,
    pub final_accuracy: f64,
    pub accuracy_series: Vec<f64>,
    /// Mean reconstruction error per pretraining epoch, one series per layer.
    #[serde(default)]
    pub pretrain_errors: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Arithmetic mean and sample (n - 1) standard deviation.
pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: values.len(),
        });
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok(Summary {
        mean,
        std: (m2 / (values.len() - 1) as f64).sqrt(),
    })
}

pub fn aggregate_trials(trials: &[TrialReport]) -> Result<Summary> {
    let finals: Vec<f64> = trials.iter().map(|t| t.final_accuracy).collect();
    aggregate(&finals)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    /// Exact for up to [`EXACT_MAX_N`] pairs, normal approximation above.
    Auto,
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero differences that were ranked.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`
    pub w: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Average ranks (1-based) of `|d|`, with the sign of `d`, for the non-zero
/// differences `xs - ys`.
pub fn signed_ranks(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    check_len("paired samples", xs.len(), ys.len())?;
    let diffs: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if let Some(d) = diffs.iter().find(|d| d.is_nan()) {
        return Err(Error::InvalidArgument(format!("non-finite difference {d}")));
    }
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg.copysign(diffs[k]);
        }
        i = j + 1;
    }
    Ok(ranks)
}

pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(xs, ys, PValueMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(
    xs: &[f64],
    ys: &[f64],
    method: PValueMethod,
) -> Result<WilcoxonResult> {
    let ranks = signed_ranks(xs, ys)?;
    if ranks.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = ranks.len();
    if n < MIN_PAIRS {
        return Err(Error::TooFewSamples {
            needed: MIN_PAIRS,
            got: n,
        });
    }
    let w_plus: f64 = ranks.iter().filter(|r| **r > 0.0).sum();
    let w_minus: f64 = -ranks.iter().filter(|r| **r < 0.0).sum::<f64>();
    let w = w_plus.min(w_minus);
    let magnitudes: Vec<f64> = ranks.iter().map(|r| r.abs()).collect();
    let exact = match method {
        PValueMethod::Auto => n <= EXACT_MAX_N,
        PValueMethod::Exact => {
            if n > EXACT_MAX_N {
                return Err(Error::InvalidArgument(format!(
                    "exact enumeration supports at most {EXACT_MAX_N} pairs, got {n}"
                )));
            }
            true
        }
        PValueMethod::NormalApprox => false,
    };
    let p_value = if exact {
        exact_p_value(&magnitudes, w)
    } else {
        normal_p_value(&magnitudes, w)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        w,
        p_value,
        exact,
    })
}

/// Two-sided exact p-value: the share of the `2^n` sign assignments whose
/// `min(W+, W-)` is at most `w`. Ranks are multiples of 1/2, so the null
/// distribution of `2 W+` is built over integers.
fn exact_p_value(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w2 = (w * 2.0).round() as usize;
    let hits: u64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s).min(total - s) <= w2)
        .map(|(_, c)| *c)
        .sum();
    (hits as f64 / 2f64.powi(ranks.len() as i32)).min(1.0)
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity correction.
fn normal_p_value(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Exact,
    NormalApprox,
    /// Every paired difference was zero.
    AllZeroDifferences,
    /// Fewer than [`MIN_PAIRS`] non-zero differences.
    TooFewPairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonVerdict {
    pub n_pairs: usize,
    pub mean_a: f64,
    /// `None` with fewer than two trials.
    pub std_a: Option<f64>,
    pub mean_b: f64,
    pub std_b: Option<f64>,
    pub w_statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub outcome: TestOutcome,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Pairs the final accuracies of `a` and `b` by seed and runs the signed-rank
/// test. Degenerate inputs give a non-significant verdict with `p = 1`.
pub fn compare(a: &[TrialReport], b: &[TrialReport]) -> Result<ComparisonVerdict> {
    let mut xs = Vec::with_capacity(a.len());
    let mut ys = Vec::with_capacity(a.len());
    for ta in a {
        let tb = b
            .iter()
            .find(|t| t.seed == ta.seed)
            .ok_or(Error::UnpairedSeed(ta.seed))?;
        xs.push(ta.final_accuracy);
        ys.push(tb.final_accuracy);
    }
    if let Some(tb) = b.iter().find(|tb| !a.iter().any(|ta| ta.seed == tb.seed)) {
        return Err(Error::UnpairedSeed(tb.seed));
    }
    if xs.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }

    let std_of = |v: &[f64]| aggregate(v).ok().map(|s| s.std);
    let (w_statistic, p_value, outcome) = match wilcoxon_signed_rank(&xs, &ys) {
        Ok(r) => (
            r.w,
            r.p_value,
            if r.exact {
                TestOutcome::Exact
            } else {
                TestOutcome::NormalApprox
            },
        ),
        Err(Error::AllZeroDifferences) => (0.0, 1.0, TestOutcome::AllZeroDifferences),
        Err(Error::TooFewSamples { .. }) => (0.0, 1.0, TestOutcome::TooFewPairs),
        Err(e) => return Err(e),
    };
    Ok(ComparisonVerdict {
        n_pairs: xs.len(),
        mean_a: mean(&xs),
        std_a: std_of(&xs),
        mean_b: mean(&ys),
        std_b: std_of(&ys),
        w_statistic,
        p_value,
        significant: p_value <= SIGNIFICANCE_LEVEL,
        outcome,
    })
}
