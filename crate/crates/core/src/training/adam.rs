use crate::numerics::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: `value *= 1 - lr * weight_decay` before each step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for every parameter of a store, indexed like the store.
/// Non-trainable parameters carry empty moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Applied steps; drives bias correction.
    pub steps: u64,
    /// Steps refused because of non-finite gradients.
    pub skipped: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |trainable: bool, t: &Tensor<T>| {
            if trainable {
                Tensor::zeros(t.shape())
            } else {
                Tensor::zeros(&[0])
            }
        };
        let m: Vec<Tensor<T>> = store.iter().map(|(_, p)| zeros(p.trainable, &p.value)).collect();
        Adam {
            config,
            v: m.clone(),
            m,
            steps: 0,
            skipped: 0,
        }
    }

    /// One bias-corrected step from the `grad` slots of `store`. Returns
    /// `false`, leaving everything but the skip counter untouched, when a
    /// gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> bool {
        if store.iter().any(|(_, p)| p.trainable && !p.grad.all_finite()) {
            self.skipped += 1;
            return false;
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        let shrink = T::lit(1.0 - lr * c.weight_decay);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w = *w * shrink - step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[values.len()], values.to_vec()).unwrap(), true);
        s.add("flag", Tensor::scalar(1.0), false);
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: &[f64]) {
        let id = s.id("w").unwrap();
        s.get_mut(id).grad.data_mut().copy_from_slice(g);
    }

    #[test]
    fn zero_grad_only_shrinks() {
        let mut s = store(&[1.0, -2.0]);
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &s);
        assert!(adam.step(&mut s, 0.5));
        let w = s.value(s.id("w").unwrap()).data().to_vec();
        assert_eq!(w, vec![1.0 * 0.95, -2.0 * 0.95]);
        assert_eq!(s.value(s.id("flag").unwrap()).data(), [1.0]);
    }

    #[test]
    fn zero_grad_without_decay_is_fixed() {
        let mut s = store(&[0.3, 0.7]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            adam.step(&mut s, 1e-2);
        }
        assert_eq!(s.value(s.id("w").unwrap()).data(), [0.3, 0.7]);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut s = store(&[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let lr = 1e-3;
        let mut prev = 0.0;
        for k in 0..200 {
            set_grad(&mut s, &[2.5, -0.01]);
            adam.step(&mut s, lr);
            let w = s.value(s.id("w").unwrap()).data().to_vec();
            let delta = w[0] - prev;
            prev = w[0];
            assert!((delta + lr).abs() < 1e-9, "step {k}: {delta}");
            assert!(w[1] > 0.0);
        }
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut s = store(&[1.0, 1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        set_grad(&mut s, &[f64::NAN, 1.0]);
        assert!(!adam.step(&mut s, 1e-3));
        assert_eq!((adam.steps, adam.skipped), (0, 1));
        assert_eq!(s.value(s.id("w").unwrap()).data(), [1.0, 1.0]);
        assert!(adam.m[0].data().iter().all(|&v| v == 0.0));
    }
}
