//! Bernoulli-Bernoulli Restricted Boltzmann Machine.
//!
//! A layer holds an `m x n` weight matrix (visible x hidden), a visible bias of
//! length `m` and a hidden bias of length `n`. Training uses CD-k: the positive
//! phase uses hidden probabilities, the Gibbs chain runs on sampled states and
//! the negative statistics pair the sampled visible state with hidden
//! probabilities.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::data::make_batches;
use crate::error::{check_len, Error, Result};
use crate::rng::RngStream;

/// Logistic sigmoid, evaluated in a form that never overflows.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A vector whose entries are all exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryVector(Array1<f64>);

impl BinaryVector {
    pub fn new(bits: Array1<f64>) -> Result<Self> {
        if let Some(x) = bits.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "binary vector entry {x} is not 0 or 1"
            )));
        }
        Ok(Self(bits))
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        Self::new(bits.iter().map(|&b| f64::from(b)).collect())
    }

    pub fn zeros(len: usize) -> Self {
        Self(Array1::zeros(len))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

/// A vector of finite probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Array1<f64>);

impl ProbVector {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        Ok(Self(probs))
    }

    pub(crate) fn new_unchecked(probs: Array1<f64>) -> Self {
        Self(probs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous")
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

/// Each entry becomes 1 iff a fresh uniform draw falls below its probability.
/// Consumes exactly `p.len()` draws.
pub fn sample_bernoulli(p: &ProbVector, rng: &mut RngStream) -> BinaryVector {
    BinaryVector(p.0.mapv(|pi| bernoulli(pi, rng)))
}

#[inline]
fn bernoulli(p: f64, rng: &mut RngStream) -> f64 {
    if rng.uniform() < p {
        1.0
    } else {
        0.0
    }
}

/// Row-major Bernoulli sampling of a probability matrix.
pub(crate) fn sample_bernoulli_matrix(p: &Array2<f64>, rng: &mut RngStream) -> Array2<f64> {
    p.mapv(|pi| bernoulli(pi, rng))
}

/// Optional extras on top of the plain CD-k step. The defaults give exactly the
/// update of [`RbmLayer::cd_update`].
#[derive(Clone, Debug, PartialEq)]
pub struct CdOptions {
    pub k: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for CdOptions {
    fn default() -> Self {
        Self {
            k: 1,
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

/// Momentum buffers for one layer.
#[derive(Clone, Debug)]
pub struct CdVelocity {
    weights: Array2<f64>,
    visible_bias: Array1<f64>,
    hidden_bias: Array1<f64>,
}

impl CdVelocity {
    pub fn for_layer(layer: &RbmLayer) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            visible_bias: Array1::zeros(layer.n_visible()),
            hidden_bias: Array1::zeros(layer.n_hidden()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RbmLayer {
    weights: Array2<f64>,
    visible_bias: Array1<f64>,
    hidden_bias: Array1<f64>,
}

impl RbmLayer {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Result<Self> {
        Self::from_parts(
            Array2::zeros((n_visible, n_hidden)),
            Array1::zeros(n_visible),
            Array1::zeros(n_hidden),
        )
    }

    /// Gaussian weights with the given standard deviation, zero biases.
    /// Weights are drawn in row-major order.
    pub fn random(
        n_visible: usize,
        n_hidden: usize,
        init_std: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if !(init_std.is_finite() && init_std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "init_std must be finite and non-negative, got {init_std}"
            )));
        }
        let weights = Array2::from_shape_simple_fn((n_visible, n_hidden), || {
            rng.normal(0.0, init_std)
        });
        Self::from_parts(weights, Array1::zeros(n_visible), Array1::zeros(n_hidden))
    }

    pub fn from_parts(
        weights: Array2<f64>,
        visible_bias: Array1<f64>,
        hidden_bias: Array1<f64>,
    ) -> Result<Self> {
        let (m, n) = weights.dim();
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer dimensions must be positive, got {m}x{n}"
            )));
        }
        check_len("visible bias", m, visible_bias.len())?;
        check_len("hidden bias", n, hidden_bias.len())?;
        let layer = Self {
            weights: weights.as_standard_layout().into_owned(),
            visible_bias,
            hidden_bias,
        };
        if !layer.is_finite() {
            return Err(Error::InvalidArgument(
                "layer parameters must be finite".into(),
            ));
        }
        Ok(layer)
    }

    pub fn n_visible(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn visible_bias(&self) -> &Array1<f64> {
        &self.visible_bias
    }

    pub fn hidden_bias(&self) -> &Array1<f64> {
        &self.hidden_bias
    }

    /// Weights and hidden bias as flat mutable buffers.
    pub(crate) fn discriminative_params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (
            self.weights.as_slice_mut().expect("standard layout"),
            self.hidden_bias.as_slice_mut().expect("standard layout"),
        )
    }

    #[cfg(test)]
    pub(crate) fn hidden_bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.hidden_bias
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|x| x.is_finite())
            && self.visible_bias.iter().all(|x| x.is_finite())
            && self.hidden_bias.iter().all(|x| x.is_finite())
    }

    /// Swaps the roles of the two sides: `W -> W^T`, visible and hidden biases exchanged.
    pub fn transposed(&self) -> Self {
        Self {
            weights: self.weights.t().as_standard_layout().into_owned(),
            visible_bias: self.hidden_bias.clone(),
            hidden_bias: self.visible_bias.clone(),
        }
    }

    /// `E(v, h) = -b.v - c.h - v^T W h`
    pub fn energy(&self, v: &BinaryVector, h: &BinaryVector) -> Result<f64> {
        check_len("energy visible", self.n_visible(), v.len())?;
        check_len("energy hidden", self.n_hidden(), h.len())?;
        let v = v.view();
        let h = h.view();
        Ok(-self.visible_bias.dot(&v) - self.hidden_bias.dot(&h) - v.dot(&self.weights.dot(&h)))
    }

    /// `a_j = c_j + sum_i w_ij x_i`
    pub fn hidden_pre_activation(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("hidden pre-activation", self.n_visible(), x.len())?;
        Ok(&self.hidden_bias + &x.dot(&self.weights))
    }

    pub fn visible_pre_activation(&self, h: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("visible pre-activation", self.n_hidden(), h.len())?;
        Ok(&self.visible_bias + &self.weights.dot(&h))
    }

    /// `p(h_j = 1 | v)`
    pub fn prop_hidden(&self, v: ArrayView1<'_, f64>) -> Result<ProbVector> {
        Ok(ProbVector(self.hidden_pre_activation(v)?.mapv_into(sigmoid)))
    }

    /// `p(v_i = 1 | h)`
    pub fn prop_visible(&self, h: ArrayView1<'_, f64>) -> Result<ProbVector> {
        Ok(ProbVector(self.visible_pre_activation(h)?.mapv_into(sigmoid)))
    }

    /// Row-wise hidden pre-activations for a batch (rows are samples).
    pub fn hidden_pre_activation_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("hidden pre-activation batch", self.n_visible(), x.ncols())?;
        let mut a = x.dot(&self.weights);
        a += &self.hidden_bias;
        Ok(a)
    }

    pub fn prop_hidden_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.hidden_pre_activation_batch(x)?.mapv_into(sigmoid))
    }

    pub fn prop_visible_batch(&self, h: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("visible pre-activation batch", self.n_hidden(), h.ncols())?;
        let mut a = h.dot(&self.weights.t());
        a += &self.visible_bias;
        Ok(a.mapv_into(sigmoid))
    }

    /// One CD-k step on a mini-batch with learning rate `lr`, gradients averaged
    /// over the batch. Returns the mean squared difference between the batch and
    /// its first-step visible reconstruction probabilities.
    pub fn cd_update(
        &mut self,
        batch: ArrayView2<'_, f64>,
        k: usize,
        lr: f64,
        rng: &mut RngStream,
    ) -> Result<f64> {
        let opts = CdOptions {
            k,
            learning_rate: lr,
            ..CdOptions::default()
        };
        self.cd_step(batch, &opts, None, rng)
    }

    /// [`cd_update`](Self::cd_update) with optional weight decay and momentum.
    /// The layer is left untouched if the update would be non-finite.
    pub fn cd_step(
        &mut self,
        batch: ArrayView2<'_, f64>,
        opts: &CdOptions,
        velocity: Option<&mut CdVelocity>,
        rng: &mut RngStream,
    ) -> Result<f64> {
        if batch.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        check_len("cd batch width", self.n_visible(), batch.ncols())?;
        if opts.k == 0 {
            return Err(Error::InvalidArgument("CD needs k >= 1".into()));
        }
        if !(opts.learning_rate.is_finite() && opts.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                opts.learning_rate
            )));
        }

        let v0 = batch;
        let ph0 = self.prop_hidden_batch(v0)?;
        let mut h = sample_bernoulli_matrix(&ph0, rng);
        let mut recon_error = 0.0;
        let mut vk = Array2::zeros((0, 0));
        let mut phk = Array2::zeros((0, 0));
        for step in 0..opts.k {
            let pv = self.prop_visible_batch(h.view())?;
            if step == 0 {
                recon_error = Zip::from(&v0)
                    .and(&pv)
                    .fold(0.0, |acc, &x, &p| acc + (x - p) * (x - p))
                    / pv.len() as f64;
            }
            let v = sample_bernoulli_matrix(&pv, rng);
            let ph = self.prop_hidden_batch(v.view())?;
            if step + 1 < opts.k {
                h = sample_bernoulli_matrix(&ph, rng);
            }
            vk = v;
            phk = ph;
        }

        let scale = 1.0 / batch.nrows() as f64;
        let grad_w = (v0.t().dot(&ph0) - vk.t().dot(&phk)) * scale;
        let grad_b = (v0.sum_axis(Axis(0)) - vk.sum_axis(Axis(0))) * scale;
        let grad_c = (ph0.sum_axis(Axis(0)) - phk.sum_axis(Axis(0))) * scale;

        let lr = opts.learning_rate;
        let mut delta_w = if opts.weight_decay != 0.0 {
            (grad_w - &self.weights * opts.weight_decay) * lr
        } else {
            grad_w * lr
        };
        let mut delta_b = grad_b * lr;
        let mut delta_c = grad_c * lr;
        if let Some(vel) = velocity {
            if opts.momentum != 0.0 {
                vel.weights = &vel.weights * opts.momentum + &delta_w;
                vel.visible_bias = &vel.visible_bias * opts.momentum + &delta_b;
                vel.hidden_bias = &vel.hidden_bias * opts.momentum + &delta_c;
                delta_w = vel.weights.clone();
                delta_b = vel.visible_bias.clone();
                delta_c = vel.hidden_bias.clone();
            }
        }

        let weights = &self.weights + &delta_w;
        let visible_bias = &self.visible_bias + &delta_b;
        let hidden_bias = &self.hidden_bias + &delta_c;
        let finite = weights.iter().all(|x| x.is_finite())
            && visible_bias.iter().all(|x| x.is_finite())
            && hidden_bias.iter().all(|x| x.is_finite())
            && recon_error.is_finite();
        if !finite {
            return Err(Error::Divergence(
                "contrastive divergence produced a non-finite update".into(),
            ));
        }
        self.weights = weights;
        self.visible_bias = visible_bias;
        self.hidden_bias = hidden_bias;
        Ok(recon_error)
    }

    /// One pass over `data` in shuffled mini-batches. Returns the epoch's mean
    /// reconstruction error, weighted by batch size.
    pub fn train_epoch(
        &mut self,
        data: ArrayView2<'_, f64>,
        batch_size: usize,
        opts: &CdOptions,
        velocity: Option<&mut CdVelocity>,
        rng: &mut RngStream,
    ) -> Result<f64> {
        self.train_epoch_with(data.nrows(), batch_size, opts, velocity, rng, |idx| {
            Ok(data.select(Axis(0), idx))
        })
    }

    /// Epoch loop over `n` samples where `inputs` materializes the visible
    /// values for each batch of sample indices.
    pub(crate) fn train_epoch_with<F>(
        &mut self,
        n: usize,
        batch_size: usize,
        opts: &CdOptions,
        mut velocity: Option<&mut CdVelocity>,
        rng: &mut RngStream,
        mut inputs: F,
    ) -> Result<f64>
    where
        F: FnMut(&[usize]) -> Result<Array2<f64>>,
    {
        let plan = make_batches(n, batch_size, rng)?;
        let mut total = 0.0;
        for idx in plan.batches() {
            let batch = inputs(idx)?;
            let err = self.cd_step(batch.view(), opts, velocity.as_deref_mut(), rng)?;
            total += err * idx.len() as f64;
        }
        Ok(total / n as f64)
    }
}
