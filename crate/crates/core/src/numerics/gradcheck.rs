use rand::Rng;

use super::{Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    /// Max over coordinates of `|a - n| / (|a| + |n| + 1e-12)`.
    pub max_rel_err: f64,
    pub worst: Option<(ParamId, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences at the given `(param, flat index)` coordinates.
pub fn finite_diff_check<T, F>(
    store: &mut ParamStore<T>,
    coords: &[(ParamId, usize)],
    eps: T,
    loss: F,
) -> Result<FiniteDiffReport>
where
    T: Real,
    F: Fn(&mut Graph<T>) -> Result<Var>,
{
    assert!(eps > T::zero(), "eps must be positive");
    let eval = |store: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        g.check()?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference objective".into()));
        }
        Ok(v)
    };

    let analytic: Vec<f64> = {
        let mut g = Graph::new(&*store);
        let out = loss(&mut g)?;
        g.check()?;
        let grads = g.backward(out);
        coords
            .iter()
            .map(|&(id, i)| grads.param(id).map_or(0.0, |t| t.data()[i].as_f64()))
            .collect()
    };

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(store);
        store.value_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus?.as_f64() - minus?.as_f64()) / (2.0 * eps.as_f64());
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((id, i));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Draws `n` coordinates uniformly over all trainable scalars.
pub fn sample_coords<T: Real, R: Rng + ?Sized>(store: &ParamStore<T>, n: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let pool: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let total: usize = pool.iter().map(|&(_, len)| len).sum();
    assert!(total > 0, "no trainable parameters");
    (0..n)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for &(id, len) in &pool {
                if k < len {
                    return (id, k);
                }
                k -= len;
            }
            unreachable!()
        })
        .collect()
}
