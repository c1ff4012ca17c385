use std::rc::Rc;

use rand::Rng;

use super::{linalg, Direction};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Invertible channel mixing `y = W x` at every position, with
/// `W = P L (U + diag(sign * exp(log_diag)))`.
///
/// `P` and `sign` are fixed at construction; `L` and `U` are stored as full
/// matrices of which only the strict lower / strict upper parts are read.
#[derive(Clone, Debug)]
pub struct InvConv {
    name: String,
    perm: ParamId,
    lower: ParamId,
    upper: ParamId,
    log_diag: ParamId,
    sign: ParamId,
    channels: usize,
}

impl InvConv {
    /// PLU factors of a random orthogonal matrix.
    pub fn new_random<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let q = linalg::random_orthogonal(c, rng);
        let (p, l, u) = linalg::plu(&q, c);
        let diag: Vec<f64> = (0..c).map(|i| u[i * c + i]).collect();
        let mut upper = u.clone();
        for i in 0..c {
            upper[i * c + i] = 0.0;
        }
        let mut lower = l;
        for i in 0..c {
            lower[i * c + i] = 0.0;
        }
        Self::from_factors(
            store,
            name,
            c,
            &p,
            &lower,
            &upper,
            &diag.iter().map(|d| d.abs().ln()).collect::<Vec<_>>(),
            &diag.iter().map(|d| d.signum()).collect::<Vec<_>>(),
        )
    }

    /// `W = I`.
    pub fn new_identity<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let c = channels;
        let eye: Vec<f64> = (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect();
        let zeros = vec![0.0; c * c];
        Self::from_factors(store, name, c, &eye, &zeros, &zeros, &vec![0.0; c], &vec![1.0; c])
    }

    #[allow(clippy::too_many_arguments)]
    fn from_factors<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        perm: &[f64],
        lower: &[f64],
        upper: &[f64],
        log_diag: &[f64],
        sign: &[f64],
    ) -> Self {
        let t = |shape: &[usize], d: &[f64]| Tensor::from_f64(shape, d).expect("factor shape");
        InvConv {
            name: name.to_string(),
            perm: store.add(format!("{name}.perm"), t(&[c, c], perm), false),
            lower: store.add(format!("{name}.lower"), t(&[c, c], lower), true),
            upper: store.add(format!("{name}.upper"), t(&[c, c], upper), true),
            log_diag: store.add(format!("{name}.log_diag"), t(&[c], log_diag), true),
            sign: store.add(format!("{name}.sign"), t(&[c], sign), false),
            channels: c,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The factors as dense `f64` matrices `(P, L, U)` with unit diagonal on `L`.
    pub fn factors<T: Real>(&self, store: &ParamStore<T>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let get = |id: ParamId| -> Vec<f64> { store.value(id).data().iter().map(|v| v.as_f64()).collect() };
        let p = get(self.perm);
        let mut l = get(self.lower);
        let mut u = get(self.upper);
        let log_diag = get(self.log_diag);
        let sign = get(self.sign);
        for i in 0..c {
            for j in 0..c {
                if j >= i {
                    l[i * c + j] = if i == j { 1.0 } else { 0.0 };
                }
                if j <= i {
                    u[i * c + j] = if i == j { sign[i] * log_diag[i].exp() } else { 0.0 };
                }
            }
        }
        (p, l, u)
    }

    /// Dense `W`, for inspection and tests.
    pub fn weight<T: Real>(&self, store: &ParamStore<T>) -> Vec<f64> {
        let c = self.channels;
        let (p, l, u) = self.factors(store);
        linalg::matmul(&p, &linalg::matmul(&l, &u, c), c)
    }

    fn weight_var<T: Real>(&self, g: &mut Graph<'_, T>) -> Var {
        let c = self.channels;
        let mask = |keep: fn(usize, usize) -> bool| {
            Tensor::from_fn(&[c, c], |i| if keep(i / c, i % c) { T::one() } else { T::zero() })
        };
        let lower_mask = g.input(mask(|i, j| j < i));
        let upper_mask = g.input(mask(|i, j| j > i));
        let eye = g.input(Tensor::identity(c));

        let lower = g.param(self.lower);
        let lower = g.mul(lower, lower_mask);
        let lower = g.add(lower, eye);

        let log_diag = g.param(self.log_diag);
        let sign = g.param(self.sign);
        let diag = g.exp(log_diag);
        let diag = g.mul(diag, sign);
        let rows: Rc<[usize]> = (0..c * c).map(|i| i / c).collect();
        let diag = g.gather(diag, rows, &[c, c]);
        let diag = g.mul(diag, eye);
        let upper = g.param(self.upper);
        let upper = g.mul(upper, upper_mask);
        let upper = g.add(upper, diag);

        let perm = g.param(self.perm);
        let lu = g.matmul(lower, upper);
        g.matmul(perm, lu)
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, dir: Direction) -> Result<(Var, Var)> {
        let c = self.channels;
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&c) {
            return Err(Error::shape(format!(
                "invconv {} expects {c} channels, got {shape:?}",
                self.name
            )));
        }
        let n = shape[0];
        let rows = g.value(x).len() / c;
        let positions = rows / n;
        let flat = g.reshape(x, &[rows, c]);

        let log_diag = g.param(self.log_diag);
        let total = g.sum_all(log_diag);
        let per_example = g.scale(total, T::lit(positions as f64));

        match dir {
            Direction::Forward => {
                let w = self.weight_var(g);
                let wt = g.transpose(w);
                let y = g.matmul(flat, wt);
                let y = g.reshape(y, &shape);
                let logdet = g.broadcast_scalar(per_example, n);
                Ok((y, logdet))
            }
            Direction::Inverse => {
                let (p, l, u) = self.factors(g.store());
                let inv = linalg::plu_inverse(&p, &l, &u, c);
                let inv_t = g.input(Tensor::from_f64(&[c, c], &linalg::transpose(&inv, c))?);
                let y = g.matmul(flat, inv_t);
                let y = g.reshape(y, &shape);
                let neg = g.neg(per_example);
                let logdet = g.broadcast_scalar(neg, n);
                Ok((y, logdet))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::flows::normal_tensor;

    fn run(store: &ParamStore<f64>, ic: &InvConv, x: &Tensor<f64>, dir: Direction) -> (Tensor<f64>, f64) {
        let mut g = Graph::new(store);
        let xv = g.input(x.clone());
        let (y, ld) = ic.apply(&mut g, xv, dir).unwrap();
        (g.value(y).clone(), g.value(ld).data()[0])
    }

    #[test]
    fn identity_weight() {
        let mut store = ParamStore::new();
        let ic = InvConv::new_identity(&mut store, "ic", 3);
        let x = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64);
        let (y, ld) = run(&store, &ic, &x, Direction::Forward);
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn permutation_weight_permutes_channels() {
        let mut store = ParamStore::new();
        let ic = InvConv::new_identity(&mut store, "ic", 3);
        // P maps channel 0 -> out 1, 1 -> 2, 2 -> 0.
        let p = Tensor::from_f64(&[3, 3], &[0., 0., 1., 1., 0., 0., 0., 1., 0.]).unwrap();
        store.set_value(ic.perm, p).unwrap();
        let x = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64);
        let (y, ld) = run(&store, &ic, &x, Direction::Forward);
        assert_eq!(ld, 0.0);
        assert_eq!(y.data(), &[2., 0., 1., 5., 3., 4.]);
    }

    #[test]
    fn random_plu_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let ic = InvConv::new_random(&mut store, "ic", 4, &mut rng);
        store
            .set_value(ic.log_diag, normal_tensor(&mut rng, &[4], 0.3))
            .unwrap();
        store
            .set_value(ic.lower, normal_tensor(&mut rng, &[4, 4], 0.3))
            .unwrap();
        let x = normal_tensor(&mut rng, &[2, 3, 3, 4], 1.0);
        let (y, ld) = run(&store, &ic, &x, Direction::Forward);
        let (back, ld_inv) = run(&store, &ic, &y, Direction::Inverse);
        assert!(back.max_abs_diff(&x) < 1e-10);
        assert!((ld + ld_inv).abs() < 1e-12);
        let expected: f64 = 9.0 * store.value(ic.log_diag).data().iter().sum::<f64>();
        assert!((ld - expected).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_init_has_zero_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f64>::new();
        let ic = InvConv::new_random(&mut store, "ic", 6, &mut rng);
        let total: f64 = store.value(ic.log_diag).data().iter().sum();
        assert!(total.abs() < 1e-10);
    }
}
