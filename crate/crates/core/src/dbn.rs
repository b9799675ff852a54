//! Deep Belief Network stacks and the residual reinforcement chain.
//!
//! In [`DbnMode::Residual`] the input handed to layer `l > 1` is not just the
//! sigmoid output of layer `l - 1`. The rectified pre-activation of that layer,
//! scaled so its largest entry is 1, is added on top and the sum is
//! renormalized to a maximum of 1:
//!
//! ```text
//! a      = c + W^T x
//! r      = relu(a) / max(relu(a))      (all zeros when no entry is positive)
//! x_next = (sigmoid(a) + r) / max(sigmoid(a) + r)
//! ```
//!
//! Both terms come from the same `a`. Lower layers are frozen while a higher
//! layer trains, so the inputs are recomputed per mini-batch.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rbm::{sigmoid, CdOptions, CdVelocity, ProbVector, RbmLayer};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DbnMode {
    Standard,
    Residual,
}

impl DbnMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DbnMode::Standard => "standard",
            DbnMode::Residual => "residual",
        }
    }
}

impl fmt::Display for DbnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DbnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" | "dbn" => Ok(DbnMode::Standard),
            "residual" | "res-dbn" | "resdbn" => Ok(DbnMode::Residual),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

/// Rectifies `pre_act` and divides by its largest rectified entry. Returns the
/// zero vector when no entry is positive.
pub fn reinforcement_vector(pre_act: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if pre_act.is_empty() {
        return Err(Error::InvalidArgument("empty pre-activation vector".into()));
    }
    let mut out = pre_act.to_owned();
    reinforce_in_place(out.view_mut());
    Ok(out)
}

fn reinforce_in_place(mut a: ArrayViewMut1<'_, f64>) {
    a.mapv_inplace(|x| x.max(0.0));
    let peak = a.fold(0.0f64, |m, &x| m.max(x));
    if peak > 0.0 {
        a.mapv_inplace(|x| x / peak);
    } else {
        a.fill(0.0);
    }
}

/// `(post_act + reinforcement) / max(post_act + reinforcement)`
pub fn aggregate_input(
    post_act: ArrayView1<'_, f64>,
    reinforcement: ArrayView1<'_, f64>,
) -> Result<ProbVector> {
    check_len("aggregate input", post_act.len(), reinforcement.len())?;
    if post_act.is_empty() {
        return Err(Error::InvalidArgument("empty activation vector".into()));
    }
    let mut s = &post_act + &reinforcement;
    normalize_by_max(s.view_mut())?;
    Ok(ProbVector::new_unchecked(s))
}

fn normalize_by_max(mut s: ArrayViewMut1<'_, f64>) -> Result<()> {
    let peak = s.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "aggregated input has non-positive maximum {peak}"
        )));
    }
    s.mapv_inplace(|x| x / peak);
    Ok(())
}

/// `ln(sigmoid(z))` without underflow.
fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// Writes the next layer's residual input for one row of pre-activations.
fn residual_row(pre: ArrayView1<'_, f64>, mut out: ArrayViewMut1<'_, f64>) -> Result<()> {
    out.assign(&pre);
    reinforce_in_place(out.view_mut());
    Zip::from(&mut out).and(&pre).for_each(|o, &a| *o += sigmoid(a));
    let peak = out.fold(0.0f64, |m, &x| m.max(x));
    if peak >= f64::MIN_POSITIVE || !pre.iter().all(|a| a.is_finite()) {
        return normalize_by_max(out);
    }
    // every sigmoid underflowed and nothing was positive: take the ratio
    // sigmoid(a_i) / max sigmoid(a) in log space instead
    let top = pre.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
    let log_top = log_sigmoid(top);
    Zip::from(&mut out)
        .and(&pre)
        .for_each(|o, &a| *o = (log_sigmoid(a) - log_top).exp());
    Ok(())
}

/// Full residual chain for one layer: reinforcement, aggregation and
/// renormalization, computed from the pre-activations alone. Unlike
/// [`aggregate_input`] on precomputed sigmoids, this stays defined when every
/// sigmoid underflows to zero.
pub fn residual_input(pre_act: ArrayView1<'_, f64>) -> Result<ProbVector> {
    if pre_act.is_empty() {
        return Err(Error::InvalidArgument("empty pre-activation vector".into()));
    }
    let mut out = Array1::zeros(pre_act.len());
    residual_row(pre_act, out.view_mut())?;
    Ok(ProbVector::new_unchecked(out))
}

/// Residual input for the next layer, row by row, from a batch of pre-activations.
pub(crate) fn residual_input_batch(pre: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(pre.raw_dim());
    for (p, o) in pre.rows().into_iter().zip(out.rows_mut()) {
        residual_row(p, o)?;
    }
    Ok(out)
}

/// Propagates a batch through `lower` (frozen) layers and returns the input for
/// the layer directly above them.
pub(crate) fn propagate_batch(
    lower: &[RbmLayer],
    mode: DbnMode,
    batch: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let mut x = batch.to_owned();
    for layer in lower {
        let pre = layer.hidden_pre_activation_batch(x.view())?;
        x = match mode {
            DbnMode::Standard => pre.mapv_into(sigmoid),
            DbnMode::Residual => residual_input_batch(&pre)?,
        };
    }
    Ok(x)
}

/// Activations of one layer during a deterministic forward sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivation {
    pub pre_act: Array1<f64>,
    pub post_act: ProbVector,
    /// Input passed to the next layer in residual mode; `None` in standard mode.
    pub reinforced_input: Option<ProbVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub cd: CdOptions,
    pub bottom_epochs: usize,
    pub upper_epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            cd: CdOptions::default(),
            bottom_epochs: 50,
            upper_epochs: 25,
        }
    }
}

/// Per-layer, per-epoch mean reconstruction error from greedy pretraining.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub layer_errors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbnModel {
    layers: Vec<RbmLayer>,
    mode: DbnMode,
}

impl DbnModel {
    /// `widths` lists the input dimension followed by each hidden width.
    pub fn new(widths: &[usize], mode: DbnMode, init_std: f64, rng: &mut RngStream) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "a DBN needs an input width and at least one hidden width".into(),
            ));
        }
        let layers = widths
            .windows(2)
            .map(|w| RbmLayer::random(w[0], w[1], init_std, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, mode)
    }

    pub fn zeros(widths: &[usize], mode: DbnMode) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "a DBN needs an input width and at least one hidden width".into(),
            ));
        }
        let layers = widths
            .windows(2)
            .map(|w| RbmLayer::zeros(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, mode)
    }

    pub fn from_layers(layers: Vec<RbmLayer>, mode: DbnMode) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a DBN needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_len("stacked layer width", pair[0].n_hidden(), pair[1].n_visible())?;
        }
        Ok(Self { layers, mode })
    }

    pub fn mode(&self) -> DbnMode {
        self.mode
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_visible()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_hidden()
    }

    pub fn layers(&self) -> &[RbmLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [RbmLayer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Input seen by layer `layer` (1-based) for visible vector `v`.
    pub fn layer_input(&self, layer: usize, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let batch = v.insert_axis(Axis(0));
        Ok(self.layer_input_batch(layer, batch)?.row(0).to_owned())
    }

    pub fn layer_input_batch(&self, layer: usize, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::LayerOutOfRange {
                index: layer,
                layers: self.layers.len(),
            });
        }
        check_len("layer input", self.input_dim(), batch.ncols())?;
        propagate_batch(&self.layers[..layer - 1], self.mode, batch)
    }

    /// Deterministic sweep recording each layer's activations. No sampling.
    pub fn forward_features(&self, v: ArrayView1<'_, f64>) -> Result<Vec<LayerActivation>> {
        check_len("forward features", self.input_dim(), v.len())?;
        let mut x = v.to_owned();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pre_act = layer.hidden_pre_activation(x.view())?;
            let post = pre_act.mapv(sigmoid);
            let reinforced_input = match self.mode {
                DbnMode::Standard => None,
                DbnMode::Residual => Some(residual_input(pre_act.view())?),
            };
            x = match &reinforced_input {
                Some(r) => r.view().to_owned(),
                None => post.clone(),
            };
            out.push(LayerActivation {
                pre_act,
                post_act: ProbVector::new_unchecked(post),
                reinforced_input,
            });
        }
        Ok(out)
    }

    /// Greedy layer-wise CD training: the bottom layer for `bottom_epochs`,
    /// each higher layer for `upper_epochs`, lower layers frozen.
    pub fn pretrain_greedy(
        &mut self,
        data: ArrayView2<'_, f64>,
        config: &PretrainConfig,
        rng: &mut RngStream,
    ) -> Result<PretrainReport> {
        check_len("pretraining data width", self.input_dim(), data.ncols())?;
        if data.nrows() == 0 {
            return Err(Error::InvalidArgument("no pretraining data".into()));
        }
        let mode = self.mode;
        let mut report = PretrainReport::default();
        for l in 0..self.layers.len() {
            let epochs = if l == 0 {
                config.bottom_epochs
            } else {
                config.upper_epochs
            };
            let (lower, rest) = self.layers.split_at_mut(l);
            let layer = &mut rest[0];
            let mut velocity = (config.cd.momentum != 0.0).then(|| CdVelocity::for_layer(layer));
            let mut errors = Vec::with_capacity(epochs);
            for _ in 0..epochs {
                let err = layer.train_epoch_with(
                    data.nrows(),
                    config.batch_size,
                    &config.cd,
                    velocity.as_mut(),
                    rng,
                    |idx| propagate_batch(lower, mode, data.select(Axis(0), idx).view()),
                )?;
                errors.push(err);
            }
            report.layer_errors.push(errors);
        }
        Ok(report)
    }
}

/// Element-wise check used by tests and callers that hold raw slices.
pub fn is_max_normalized(x: ArrayView1<'_, f64>) -> bool {
    let peak = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    peak == 1.0 && Zip::from(&x).all(|&v| (0.0..=1.0).contains(&v))
}
