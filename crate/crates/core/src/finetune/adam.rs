use crate::error::{check_len, Error, Result};

/// ADAM moments for a list of flat parameter buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    /// Zeroed moments for buffers of the given lengths.
    pub fn new(lens: &[usize]) -> Self {
        Self::with_hyper(
            lens,
            Self::DEFAULT_BETA1,
            Self::DEFAULT_BETA2,
            Self::DEFAULT_EPSILON,
        )
    }

    pub fn with_hyper(lens: &[usize], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// One bias-corrected ADAM update of every buffer in `params`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        check_len("adam parameter groups", self.first_moment.len(), params.len())?;
        check_len("adam gradient groups", self.first_moment.len(), grads.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            check_len("adam parameter buffer", m.len(), p.len())?;
            check_len("adam gradient buffer", m.len(), g.len())?;
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid learning rate {lr}")));
        }

        self.step_count += 1;
        let t = i32::try_from(self.step_count).unwrap_or(i32::MAX);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}
