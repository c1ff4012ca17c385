//! Flow prior `p(z)` over the global code.
//!
//! Each step is a 1-D actnorm, an invertible linear map and an affine
//! coupling whose scale and shift come from a two-hidden-layer MLP. All
//! three start at the identity, so the untrained prior is exactly `N(0, I)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flows::{normal_tensor, ActNorm, Direction, InvConv, SplitPattern};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorSpec {
    pub dz: usize,
    pub depth: usize,
    pub hidden: usize,
    pub alpha: f64,
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dz < 2 || !self.dz.is_multiple_of(2) {
            return Err(Error::config(format!(
                "latent size must be even and at least 2, got {}",
                self.dz
            )));
        }
        if self.hidden == 0 {
            return Err(Error::config("prior hidden width must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!(
                "prior alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        nin: usize,
        nout: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Dense {
            w: store.add(format!("{name}.w"), normal_tensor(rng, &[nin, nout], std), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[nout]), true),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct MlpCoupling {
    name: String,
    pattern: SplitPattern,
    alpha: f64,
    layers: [Dense; 3],
}

impl MlpCoupling {
    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, dir: Direction) -> Result<(Var, Var)> {
        let d = g.value(x).last_dim();
        let half = d / 2;
        let (xa, xb) = crate::flows::split_channels(g, x, self.pattern)?;
        let h = self.layers[0].apply(g, xa);
        let h = g.elu(h);
        let h = self.layers[1].apply(g, h);
        let h = g.elu(h);
        let out = self.layers[2].apply(g, h);
        let u = g.slice_last(out, 0, half);
        let shift = g.slice_last(out, half, d);
        let s = g.scale(u, T::lit(0.5));
        let s = g.tanh(s);
        let s = g.scale(s, T::lit(self.alpha));
        let s = g.add_const(s, T::one());
        let min = g.value(s).data().iter().fold(T::infinity(), |m, &v| m.min(v));
        if !(min > T::lit(1e-6)) {
            return Err(Error::Degenerate(format!(
                "prior coupling {} scale fell to {min}",
                self.name
            )));
        }
        let log_s = g.log(s);
        let logdet = g.sum_rows(log_s);
        let (yb, logdet) = match dir {
            Direction::Forward => {
                let y = g.mul(xb, s);
                (g.add(y, shift), logdet)
            }
            Direction::Inverse => {
                let y = g.sub(xb, shift);
                (g.div(y, s), g.neg(logdet))
            }
        };
        let y = crate::flows::merge_channels(g, self.pattern, xa, yb)?;
        Ok((y, logdet))
    }
}

#[derive(Clone, Debug)]
struct PriorStep {
    actnorm: ActNorm,
    linear: InvConv,
    coupling: MlpCoupling,
}

#[derive(Clone, Debug)]
pub struct PriorFlow {
    spec: PriorSpec,
    steps: Vec<PriorStep>,
}

impl PriorFlow {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: PriorSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.dz;
        let hd = spec.hidden;
        let steps = (0..spec.depth)
            .map(|k| {
                let base = format!("{name}.s{k}");
                let pattern = if k % 2 == 0 {
                    SplitPattern::ContinuousAB
                } else {
                    SplitPattern::ContinuousBA
                };
                let cname = format!("{base}.coupling");
                let layers = [
                    Dense::new(
                        store,
                        &format!("{cname}.fc1"),
                        d / 2,
                        hd,
                        (1.0 / (d / 2) as f64).sqrt(),
                        rng,
                    ),
                    Dense::new(store, &format!("{cname}.fc2"), hd, hd, (1.0 / hd as f64).sqrt(), rng),
                    Dense::new(store, &format!("{cname}.fc3"), hd, d, 0.0, rng),
                ];
                PriorStep {
                    actnorm: ActNorm::new_identity(store, &format!("{base}.actnorm"), d),
                    linear: InvConv::new_identity(store, &format!("{base}.linear"), d),
                    coupling: MlpCoupling {
                        name: cname,
                        pattern,
                        alpha: spec.alpha,
                        layers,
                    },
                }
            })
            .collect();
        Ok(PriorFlow { spec, steps })
    }

    pub fn spec(&self) -> &PriorSpec {
        &self.spec
    }

    fn check<T: Real>(&self, g: &Graph<'_, T>, z: Var) -> Result<usize> {
        match *g.shape(z) {
            [n, d] if d == self.spec.dz => Ok(n),
            _ => Err(Error::shape(format!(
                "prior expects [n,{}], got {:?}",
                self.spec.dz,
                g.shape(z)
            ))),
        }
    }

    /// `z -> (eps, logdet)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<(Var, Var)> {
        let n = self.check(g, z)?;
        let mut cur = z;
        let mut logdet = g.input(Tensor::zeros(&[n]));
        for step in &self.steps {
            let (y, ld) = step.actnorm.apply(g, cur, Direction::Forward)?;
            cur = y;
            logdet = g.add(logdet, ld);
            let (y, ld) = step.linear.apply(g, cur, Direction::Forward)?;
            cur = y;
            logdet = g.add(logdet, ld);
            let (y, ld) = step.coupling.apply(g, cur, Direction::Forward)?;
            cur = y;
            logdet = g.add(logdet, ld);
        }
        Ok((cur, logdet))
    }

    /// `eps -> z`.
    pub fn inverse<T: Real>(&self, g: &mut Graph<'_, T>, eps: Var) -> Result<Var> {
        self.check(g, eps)?;
        let mut cur = eps;
        for step in self.steps.iter().rev() {
            cur = step.coupling.apply(g, cur, Direction::Inverse)?.0;
            cur = step.linear.apply(g, cur, Direction::Inverse)?.0;
            cur = step.actnorm.apply(g, cur, Direction::Inverse)?.0;
        }
        Ok(cur)
    }

    /// Per-example `log p(z)` in nats, `[n]`.
    pub fn log_prob<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let (eps, logdet) = self.forward(g, z)?;
        let base = standard_normal_log_prob(g, eps);
        Ok(g.add(base, logdet))
    }

    /// `z = f^-1(temperature * noise)`.
    pub fn sample<T: Real>(&self, g: &mut Graph<'_, T>, temperature: f64, noise: Var) -> Result<Var> {
        if !(temperature >= 0.0) {
            return Err(Error::config(format!(
                "temperature must be non-negative, got {temperature}"
            )));
        }
        let eps = g.scale(noise, T::lit(temperature));
        self.inverse(g, eps)
    }
}

/// Per-row log density of `N(0, I)`: `[n, ..] -> [n]`.
pub fn standard_normal_log_prob<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Var {
    let n = g.shape(x)[0];
    let d = g.value(x).len() / n;
    let sq = g.square(x);
    let s = g.sum_rows(sq);
    let s = g.scale(s, T::lit(-0.5));
    g.add_const(s, T::lit(-0.5 * LN_2PI * d as f64))
}
