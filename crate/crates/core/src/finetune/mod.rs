//! Discriminative fine-tuning: a softmax head on top of a pretrained stack,
//! trained end to end with cross-entropy and ADAM.
//!
//! The forward pass is a plain sigmoid feed-forward through every layer. With
//! `reinforced_forward` set on a residual model, each layer's output is
//! replaced by the reinforced input used during pretraining (the head
//! included), and gradients flow through the max-normalizations.

mod adam;

pub use adam::{adam_step, AdamState};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::{make_batches, DatasetSplit};
use crate::dbn::{residual_input_batch, DbnMode, DbnModel};
use crate::error::{check_len, Error, Result};
use crate::rbm::sigmoid;
use crate::rng::RngStream;

/// Numerically stable softmax.
pub fn softmax(z: ArrayView1<'_, f64>) -> Array1<f64> {
    let peak = z.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = z.mapv(|x| (x - peak).exp());
    let total = e.sum();
    e / total
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let peak = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - peak).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

fn log_sum_exp(z: ArrayView1<'_, f64>) -> f64 {
    let peak = z.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    peak + z.iter().map(|&x| (x - peak).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(z: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in z.iter().enumerate() {
        if x > z[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl SoftmaxHead {
    pub fn zeros(input_dim: usize, n_classes: usize) -> Result<Self> {
        Self::from_parts(Array2::zeros((input_dim, n_classes)), Array1::zeros(n_classes))
    }

    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.ncols() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a softmax head needs at least 2 classes, got {}",
                weights.ncols()
            )));
        }
        if weights.nrows() == 0 {
            return Err(Error::InvalidArgument("softmax head input width is zero".into()));
        }
        check_len("softmax bias", weights.ncols(), bias.len())?;
        if weights.iter().chain(bias.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("softmax head parameters must be finite".into()));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
        })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }
}

/// Gradient of one stacked layer. Visible biases take no part in the
/// discriminative pass, so they carry no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub hidden_bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl Gradients {
    /// Flat views in the same order as [`ClassifierModel::params_mut`].
    pub fn as_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for g in &self.layers {
            out.push(g.weights.as_slice().expect("standard layout"));
            out.push(g.hidden_bias.as_slice().expect("standard layout"));
        }
        out.push(self.head_weights.as_slice().expect("standard layout"));
        out.push(self.head_bias.as_slice().expect("standard layout"));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.as_slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

struct ForwardCache {
    /// `inputs[l]` feeds layer `l`; the last entry feeds the head.
    inputs: Vec<Array2<f64>>,
    pre_acts: Vec<Array2<f64>>,
    post_acts: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    dbn: DbnModel,
    head: SoftmaxHead,
    reinforced_forward: bool,
}

impl ClassifierModel {
    /// Attaches a zero-initialized head with `n_classes` outputs.
    pub fn new(dbn: DbnModel, n_classes: usize) -> Result<Self> {
        let head = SoftmaxHead::zeros(dbn.output_dim(), n_classes)?;
        Self::with_head(dbn, head)
    }

    pub fn with_head(dbn: DbnModel, head: SoftmaxHead) -> Result<Self> {
        check_len("softmax head input", dbn.output_dim(), head.input_dim())?;
        Ok(Self {
            dbn,
            head,
            reinforced_forward: false,
        })
    }

    pub fn with_reinforced_forward(mut self, enabled: bool) -> Self {
        self.reinforced_forward = enabled;
        self
    }

    /// True when the forward pass runs the residual chain.
    pub fn reinforced_forward(&self) -> bool {
        self.reinforced_forward && self.dbn.mode() == DbnMode::Residual
    }

    pub fn dbn(&self) -> &DbnModel {
        &self.dbn
    }

    pub fn head(&self) -> &SoftmaxHead {
        &self.head
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    pub fn into_parts(self) -> (DbnModel, SoftmaxHead) {
        (self.dbn, self.head)
    }

    fn forward_cache(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        check_len("classifier input", self.dbn.input_dim(), x.ncols())?;
        let reinforced = self.reinforced_forward();
        let layers = self.dbn.layers();
        let mut inputs = Vec::with_capacity(layers.len() + 1);
        let mut pre_acts = Vec::with_capacity(layers.len());
        let mut post_acts = Vec::with_capacity(layers.len());
        inputs.push(x.to_owned());
        for layer in layers {
            let pre = layer.hidden_pre_activation_batch(inputs.last().unwrap().view())?;
            let post = pre.mapv(sigmoid);
            let next = if reinforced {
                residual_input_batch(&pre)?
            } else {
                post.clone()
            };
            pre_acts.push(pre);
            post_acts.push(post);
            inputs.push(next);
        }
        let mut logits = inputs.last().unwrap().dot(&self.head.weights);
        logits += &self.head.bias;
        Ok(ForwardCache {
            inputs,
            pre_acts,
            post_acts,
            logits,
        })
    }

    pub fn forward_logits(&self, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self
            .forward_logits_batch(v.insert_axis(Axis(0)))?
            .row(0)
            .to_owned())
    }

    pub fn forward_logits_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cache(x)?.logits)
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let logits = self.forward_logits_batch(x)?;
        Ok(logits.rows().into_iter().map(argmax).collect())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        let classes = self.n_classes();
        match labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
        check_len("batch labels", x.nrows(), labels.len())?;
        self.check_labels(labels)?;
        let logits = self.forward_logits_batch(x)?;
        Ok(mean_cross_entropy(&logits, labels))
    }

    /// Mean cross-entropy and its gradient with respect to every trainable
    /// parameter, by reverse-mode differentiation.
    pub fn loss_and_grads(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Gradients)> {
        check_len("batch labels", x.nrows(), labels.len())?;
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        self.check_labels(labels)?;
        let cache = self.forward_cache(x)?;
        let loss = mean_cross_entropy(&cache.logits, labels);

        let batch = labels.len() as f64;
        let mut delta = softmax_rows(&cache.logits);
        for (mut row, &label) in delta.rows_mut().into_iter().zip(labels) {
            row[label] -= 1.0;
        }
        delta /= batch;

        let top = cache.inputs.last().unwrap();
        let head_weights = top.t().dot(&delta);
        let head_bias = delta.sum_axis(Axis(0));
        let mut grad_x = delta.dot(&self.head.weights.t());

        let reinforced = self.reinforced_forward();
        let layers = self.dbn.layers();
        let mut layer_grads = Vec::with_capacity(layers.len());
        for l in (0..layers.len()).rev() {
            let grad_pre = if reinforced {
                residual_backward(&cache.pre_acts[l], &cache.post_acts[l], &grad_x)
            } else {
                let post = &cache.post_acts[l];
                &grad_x * &post.mapv(|p| p * (1.0 - p))
            };
            layer_grads.push(LayerGrads {
                weights: cache.inputs[l].t().dot(&grad_pre),
                hidden_bias: grad_pre.sum_axis(Axis(0)),
            });
            if l > 0 {
                grad_x = grad_pre.dot(&layers[l].weights().t());
            }
        }
        layer_grads.reverse();
        Ok((
            loss,
            Gradients {
                layers: layer_grads,
                head_weights,
                head_bias,
            },
        ))
    }

    /// Buffer lengths in [`params_mut`](Self::params_mut) order.
    pub fn param_lens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in self.dbn.layers() {
            out.push(layer.weights().len());
            out.push(layer.hidden_bias().len());
        }
        out.push(self.head.weights.len());
        out.push(self.head.bias.len());
        out
    }

    /// Mutable flat views of every trainable buffer: each layer's weights and
    /// hidden bias, then the head weights and bias.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let Self { dbn, head, .. } = self;
        let mut out = Vec::new();
        for layer in dbn.layers_mut() {
            let (w, c) = layer.discriminative_params_mut();
            out.push(w);
            out.push(c);
        }
        out.push(head.weights.as_slice_mut().expect("standard layout"));
        out.push(head.bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.dbn.layers().iter().all(|l| l.is_finite())
            && self
                .head
                .weights
                .iter()
                .chain(self.head.bias.iter())
                .all(|x| x.is_finite())
    }
}

fn mean_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &label)| log_sum_exp(row) - row[label])
        .sum();
    total / labels.len() as f64
}

/// Backward pass of `x = (sigmoid(a) + r(a)) / max(...)`, where
/// `r(a) = relu(a) / max(relu(a))`, row by row. The max picks the first
/// maximal entry.
fn residual_backward(pre: &Array2<f64>, post: &Array2<f64>, grad_x: &Array2<f64>) -> Array2<f64> {
    let mut grad_pre = Array2::zeros(pre.raw_dim());
    for (((a, p), gx), mut ga) in pre
        .rows()
        .into_iter()
        .zip(post.rows())
        .zip(grad_x.rows())
        .zip(grad_pre.rows_mut())
    {
        let n = a.len();
        let relu: Vec<f64> = a.iter().map(|&x| x.max(0.0)).collect();
        let (r_arg, r_max) = first_max(&relu);
        let reinf: Vec<f64> = if r_max > 0.0 {
            relu.iter().map(|&x| x / r_max).collect()
        } else {
            vec![0.0; n]
        };
        let s: Vec<f64> = (0..n).map(|i| p[i] + reinf[i]).collect();
        let (s_arg, s_max) = first_max(&s);

        let mut grad_s: Vec<f64> = gx.iter().map(|&g| g / s_max).collect();
        let dot: f64 = (0..n).map(|i| gx[i] * s[i]).sum();
        grad_s[s_arg] -= dot / (s_max * s_max);

        for i in 0..n {
            ga[i] = grad_s[i] * p[i] * (1.0 - p[i]);
        }
        if r_max > 0.0 {
            let mut grad_relu: Vec<f64> = grad_s.iter().map(|&g| g / r_max).collect();
            let dot: f64 = (0..n).map(|i| grad_s[i] * relu[i]).sum();
            grad_relu[r_arg] -= dot / (r_max * r_max);
            for i in 0..n {
                if a[i] > 0.0 {
                    ga[i] += grad_relu[i];
                }
            }
        }
    }
    grad_pre
}

fn first_max(xs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    (best, xs[best])
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: AdamState::DEFAULT_BETA1,
            beta2: AdamState::DEFAULT_BETA2,
            epsilon: AdamState::DEFAULT_EPSILON,
        }
    }
}

/// Mini-batch ADAM over `train`, reshuffled every epoch. Returns the test
/// accuracy measured after each epoch.
pub fn fine_tune(
    model: &mut ClassifierModel,
    train: &DatasetSplit,
    test: &DatasetSplit,
    config: &FineTuneConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("no fine-tuning data".into()));
    }
    let mut state = AdamState::with_hyper(
        &model.param_lens(),
        config.beta1,
        config.beta2,
        config.epsilon,
    );
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let plan = make_batches(train.len(), config.batch_size, rng)?;
        for idx in plan.batches() {
            let (x, labels) = train.select(idx);
            let (loss, grads) = model.loss_and_grads(x.view(), &labels)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss or gradient in fine-tuning epoch {}",
                    epoch + 1
                )));
            }
            state.step(&mut model.params_mut(), &grads.as_slices(), config.learning_rate)?;
        }
        if !model.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameters after fine-tuning epoch {}",
                epoch + 1
            )));
        }
        curve.push(evaluate_accuracy(model, test)?);
    }
    Ok(curve)
}

const EVAL_CHUNK: usize = 1024;

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate_accuracy(model: &ClassifierModel, data: &DatasetSplit) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty dataset".into()));
    }
    let images = data.images();
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let preds = model.predict_batch(images.slice(ndarray::s![start..end, ..]))?;
        correct += preds
            .iter()
            .zip(&data.labels()[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}
