use super::Direction;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Per-channel affine normalization `y = exp(log_s) * x + b`.
///
/// Works on any `[n, .., c]` activation; the log-determinant counts every
/// position that shares the channel parameters.
#[derive(Clone, Debug)]
pub struct ActNorm {
    name: String,
    log_s: ParamId,
    bias: ParamId,
    initialized: ParamId,
    channels: usize,
}

impl ActNorm {
    /// Identity parameters that still await data-dependent initialization.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self::build(store, name, channels, false)
    }

    /// Identity parameters, marked initialized (no data-dependent init).
    pub fn new_identity<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self::build(store, name, channels, true)
    }

    fn build<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, ready: bool) -> Self {
        let flag = if ready { T::one() } else { T::zero() };
        ActNorm {
            name: name.to_string(),
            log_s: store.add(format!("{name}.log_s"), Tensor::zeros(&[channels]), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            initialized: store.add(format!("{name}.initialized"), Tensor::scalar(flag), false),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn log_s(&self) -> ParamId {
        self.log_s
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn is_initialized<T: Real>(&self, store: &ParamStore<T>) -> bool {
        store.value(self.initialized).data()[0] != T::zero()
    }

    /// Marks the layer initialized with its current parameters.
    pub fn mark_initialized<T: Real>(&self, store: &mut ParamStore<T>) {
        *store.value_mut(self.initialized) = Tensor::scalar(T::one());
    }

    /// Sets `log_s` and `b` so that `batch` (`[.., c]`) maps to zero mean and
    /// unit standard deviation per channel, then marks the layer initialized.
    pub fn init_from_batch<T: Real>(&self, store: &mut ParamStore<T>, batch: &Tensor<T>) -> Result<()> {
        let (log_s, bias) = self.batch_stats(batch)?;
        store.set_value(self.log_s, log_s)?;
        store.set_value(self.bias, bias)?;
        store.set_value(self.initialized, Tensor::scalar(T::one()))
    }

    fn batch_stats<T: Real>(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = self.channels;
        if batch.last_dim() != c || batch.is_empty() {
            return Err(Error::shape(format!(
                "actnorm {} expects {c} channels, got {:?}",
                self.name,
                batch.shape()
            )));
        }
        let count = (batch.len() / c) as f64;
        let mut mean = vec![0.0f64; c];
        for px in batch.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; c];
        for px in batch.data().chunks(c) {
            for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
                *s += (v.as_f64() - m).powi(2);
            }
        }
        let mut log_s = Vec::with_capacity(c);
        let mut bias = Vec::with_capacity(c);
        for (ch, (v, m)) in var.iter().zip(&mean).enumerate() {
            let std = (v / count).sqrt();
            if !(std > 1e-6) {
                return Err(Error::Degenerate(format!(
                    "actnorm {} channel {ch} has standard deviation {std:e}",
                    self.name
                )));
            }
            log_s.push(T::lit(-std.ln()));
            bias.push(T::lit(-m / std));
        }
        Ok((Tensor::new(&[c], log_s)?, Tensor::new(&[c], bias)?))
    }

    fn ready_in<T: Real>(&self, g: &Graph<'_, T>) -> bool {
        match g.overridden(self.initialized) {
            Some(t) => t.data()[0] != T::zero(),
            None => self.is_initialized(g.store()),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, dir: Direction) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.channels) {
            return Err(Error::shape(format!(
                "actnorm {} expects {} channels, got {shape:?}",
                self.name, self.channels
            )));
        }
        if !self.ready_in(g) {
            if dir == Direction::Forward && g.data_init_allowed() {
                let (log_s, bias) = self.batch_stats(g.value(x))?;
                g.override_param(self.log_s, log_s);
                g.override_param(self.bias, bias);
                g.override_param(self.initialized, Tensor::scalar(T::one()));
            } else {
                return Err(Error::Uninitialized(self.name.clone()));
            }
        }
        let n = shape[0];
        let positions = g.value(x).len() / (n * self.channels);
        let log_s = g.param(self.log_s);
        let bias = g.param(self.bias);
        let total = g.sum_all(log_s);
        let per_example = g.scale(total, T::lit(positions as f64));
        match dir {
            Direction::Forward => {
                let s = g.exp(log_s);
                let y = g.mul_last(x, s);
                let y = g.add_last(y, bias);
                let logdet = g.broadcast_scalar(per_example, n);
                Ok((y, logdet))
            }
            Direction::Inverse => {
                let neg_b = g.neg(bias);
                let shifted = g.add_last(x, neg_b);
                let neg_log_s = g.neg(log_s);
                let inv_s = g.exp(neg_log_s);
                let y = g.mul_last(shifted, inv_s);
                let neg = g.neg(per_example);
                let logdet = g.broadcast_scalar(neg, n);
                Ok((y, logdet))
            }
        }
    }
}
