use rand::Rng;

use super::split::{merge_channels, split_channels, SplitPattern};
use super::{normal_tensor, Direction};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Smallest scale a coupling may apply before the transform is treated as
/// numerically singular.
const MIN_SCALE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingSpec {
    /// Total channels of the coupled tensor (even).
    pub channels: usize,
    pub hidden: usize,
    /// Length of the conditioning vector, `None` for an unconditional layer.
    pub cond_dim: Option<usize>,
    /// Scale range parameter: `s` lies in `(1 - alpha, 1 + alpha)`.
    pub alpha: f64,
    /// Forces `s = 1`.
    pub additive: bool,
}

/// `s = alpha * tanh(u / 2) + 1`, elementwise.
pub fn scale_transform<T: Real>(u: &Tensor<T>, alpha: T) -> Tensor<T> {
    let half = T::lit(0.5);
    u.map(|v| alpha * (v * half).tanh() + T::one())
}

#[derive(Clone, Copy, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

/// Affine coupling whose scale and shift come from
/// `conv3x3 -> ELU -> conv1x1 (+ FC(z) per channel) -> ELU -> conv3x3`.
#[derive(Clone, Debug)]
pub struct Coupling {
    name: String,
    pattern: SplitPattern,
    spec: CouplingSpec,
    conv1: ConvParams,
    conv2: ConvParams,
    conv3: ConvParams,
    cond_fc: Option<ConvParams>,
}

impl Coupling {
    /// Hidden layers get scaled Gaussian weights; the output convolution
    /// starts at zero so the layer is the identity.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: CouplingSpec,
        pattern: SplitPattern,
        rng: &mut R,
    ) -> Result<Self> {
        let c = spec.channels;
        if c == 0 || !c.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "coupling {name} needs an even channel count, got {c}"
            )));
        }
        if !(spec.alpha > 0.0 && spec.alpha <= 1.0) {
            return Err(Error::config(format!(
                "coupling alpha must lie in (0, 1], got {}",
                spec.alpha
            )));
        }
        let half = c / 2;
        let h = spec.hidden;
        let mut conv = |store: &mut ParamStore<T>, tag: &str, k: usize, cin: usize, cout: usize, std: f64| ConvParams {
            w: store.add(
                format!("{name}.{tag}.w"),
                normal_tensor(rng, &[k, k, cin, cout], std),
                true,
            ),
            b: store.add(format!("{name}.{tag}.b"), Tensor::zeros(&[cout]), true),
        };
        let conv1 = conv(store, "conv1", 3, half, h, (1.0 / (9 * half) as f64).sqrt());
        let conv2 = conv(store, "conv2", 1, h, h, (1.0 / h as f64).sqrt());
        let conv3 = conv(store, "conv3", 3, h, c, 0.0);
        let cond_fc = spec.cond_dim.map(|d| ConvParams {
            w: store.add(
                format!("{name}.cond_fc.w"),
                normal_tensor(rng, &[d, h], (1.0 / d as f64).sqrt()),
                true,
            ),
            b: store.add(format!("{name}.cond_fc.b"), Tensor::zeros(&[h]), true),
        });
        Ok(Coupling {
            name: name.to_string(),
            pattern,
            spec,
            conv1,
            conv2,
            conv3,
            cond_fc,
        })
    }

    pub fn pattern(&self) -> SplitPattern {
        self.pattern
    }

    pub fn spec(&self) -> &CouplingSpec {
        &self.spec
    }

    /// Parameters of the zero-initialized output convolution.
    pub fn output_params(&self) -> (ParamId, ParamId) {
        (self.conv3.w, self.conv3.b)
    }

    /// Raw network outputs `(u, shift)` for the conditioning half `x_a`.
    pub fn cond_net<T: Real>(&self, g: &mut Graph<'_, T>, xa: Var, z: Option<Var>) -> Result<(Var, Var)> {
        let half = self.spec.channels / 2;
        if g.value(xa).last_dim() != half || g.shape(xa).len() != 4 {
            return Err(Error::shape(format!(
                "coupling {} expects [n,h,w,{half}] conditioning input, got {:?}",
                self.name,
                g.shape(xa)
            )));
        }
        let (w1, b1) = (g.param(self.conv1.w), g.param(self.conv1.b));
        let hdn = g.conv2d(xa, w1, b1, 1, 1);
        let hdn = g.elu(hdn);
        let (w2, b2) = (g.param(self.conv2.w), g.param(self.conv2.b));
        let mut hdn = g.conv2d(hdn, w2, b2, 1, 0);
        if let Some(fc) = self.cond_fc {
            let z = z.ok_or_else(|| Error::shape(format!("coupling {} needs a conditioning vector", self.name)))?;
            let d = self.spec.cond_dim.unwrap_or(0);
            if g.shape(z) != [g.shape(xa)[0], d] {
                return Err(Error::shape(format!(
                    "coupling {} expects conditioning [n, {d}], got {:?}",
                    self.name,
                    g.shape(z)
                )));
            }
            let (wf, bf) = (g.param(fc.w), g.param(fc.b));
            let injected = g.linear(z, wf, bf);
            hdn = g.add_row_channel(hdn, injected);
        }
        let hdn = g.elu(hdn);
        let (w3, b3) = (g.param(self.conv3.w), g.param(self.conv3.b));
        let out = g.conv2d(hdn, w3, b3, 1, 1);
        let u = g.slice_last(out, 0, half);
        let shift = g.slice_last(out, half, 2 * half);
        Ok((u, shift))
    }

    fn scale_var<T: Real>(&self, g: &mut Graph<'_, T>, u: Var) -> Result<Var> {
        let s = g.scale(u, T::lit(0.5));
        let s = g.tanh(s);
        let s = g.scale(s, T::lit(self.spec.alpha));
        let s = g.add_const(s, T::one());
        let min = g.value(s).data().iter().fold(T::infinity(), |m, &v| m.min(v));
        if !(min > T::lit(MIN_SCALE)) {
            return Err(Error::Degenerate(format!(
                "coupling {} scale fell to {min} (below {MIN_SCALE:e})",
                self.name
            )));
        }
        Ok(s)
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, z: Option<Var>, dir: Direction) -> Result<(Var, Var)> {
        if g.value(x).last_dim() != self.spec.channels {
            return Err(Error::shape(format!(
                "coupling {} expects {} channels, got {:?}",
                self.name,
                self.spec.channels,
                g.shape(x)
            )));
        }
        let n = g.shape(x)[0];
        let (xa, xb) = split_channels(g, x, self.pattern)?;
        let (u, shift) = self.cond_net(g, xa, z)?;
        if self.spec.additive {
            let yb = match dir {
                Direction::Forward => g.add(xb, shift),
                Direction::Inverse => g.sub(xb, shift),
            };
            let y = merge_channels(g, self.pattern, xa, yb)?;
            let logdet = g.input(Tensor::zeros(&[n]));
            return Ok((y, logdet));
        }
        let s = self.scale_var(g, u)?;
        let log_s = g.log(s);
        let logdet = g.sum_rows(log_s);
        match dir {
            Direction::Forward => {
                let yb = g.mul(xb, s);
                let yb = g.add(yb, shift);
                let y = merge_channels(g, self.pattern, xa, yb)?;
                Ok((y, logdet))
            }
            Direction::Inverse => {
                let yb = g.sub(xb, shift);
                let yb = g.div(yb, s);
                let y = merge_channels(g, self.pattern, xa, yb)?;
                let logdet = g.neg(logdet);
                Ok((y, logdet))
            }
        }
    }
}
