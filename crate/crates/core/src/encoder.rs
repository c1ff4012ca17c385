//! Compression encoder `q(z|x)`: a strided ResNet that maps an image to a
//! diagonal Gaussian over the global code.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flows::normal_tensor;
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::prior::standard_normal_log_prob;

/// Bound applied to the predicted log-variance.
pub const LOG_VAR_LIMIT: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub image: (usize, usize, usize),
    pub dz: usize,
    /// Channels of the first level; doubled per level up to `max_width`.
    pub base_width: usize,
    pub max_width: usize,
}

impl EncoderSpec {
    /// Downsampling levels: stride-2 stages until the feature map is at most
    /// 4x4.
    pub fn levels(&self) -> usize {
        let (mut h, mut w, _) = self.image;
        let mut levels = 0;
        while h > 4 || w > 4 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            levels += 1;
        }
        levels
    }

    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level.min(16)).min(self.max_width)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image;
        if h == 0 || w == 0 || c == 0 || self.dz == 0 {
            return Err(Error::config("encoder image dims and latent size must be positive"));
        }
        if self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::config(format!(
                "encoder widths must satisfy 0 < base ({}) <= max ({})",
                self.base_width, self.max_width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        Conv {
            w: store.add(format!("{name}.w"), normal_tensor(rng, &[k, k, cin, cout], std), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true),
            stride,
            pad: k / 2,
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// `ELU(conv3x3(ELU(conv3x3(x))) + skip(x))`, where `skip` is the identity
/// or a 1x1 projection when the stride or width changes.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), 3, cin, cout, stride, rng);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), 3, cout, cout, 1, rng);
        let skip =
            (cin != cout || stride != 1).then(|| Conv::new(store, &format!("{name}.skip"), 1, cin, cout, stride, rng));
        ResBlock { conv1, conv2, skip }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.conv1.apply(g, x);
        let h = g.elu(h);
        let h = self.conv2.apply(g, h);
        let s = match &self.skip {
            Some(c) => c.apply(g, x),
            None => x,
        };
        let y = g.add(h, s);
        g.elu(y)
    }
}

/// Graph handles of a diagonal Gaussian `N(mu, exp(log_var))`, both `[n, dz]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mu: Var,
    pub log_var: Var,
}

impl GaussianPosterior {
    /// `z = mu + exp(log_var / 2) * noise`.
    pub fn sample<T: Real>(&self, g: &mut Graph<'_, T>, noise: Var) -> Var {
        let half = g.scale(self.log_var, T::lit(0.5));
        let std = g.exp(half);
        let e = g.mul(std, noise);
        g.add(self.mu, e)
    }

    /// Per-example log density `[n]` in nats, evaluated as the standard
    /// normal density of `(z - mu) / sigma` minus `sum(log sigma)`.
    pub fn log_prob<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Var {
        let d = g.sub(z, self.mu);
        let neg_half = g.scale(self.log_var, T::lit(-0.5));
        let inv_std = g.exp(neg_half);
        let r = g.mul(d, inv_std);
        let base = standard_normal_log_prob(g, r);
        let lv = g.sum_rows(self.log_var);
        let lv = g.scale(lv, T::lit(-0.5));
        g.add(base, lv)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    blocks: Vec<ResBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Encoder {
    /// The output layer starts at zero, so every input maps to `N(0, I)`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: EncoderSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (mut h, mut w, mut c) = spec.image;
        let mut blocks = Vec::new();
        for l in 0..spec.levels() {
            let width = spec.width(l);
            blocks.push(ResBlock::new(store, &format!("{name}.l{l}.res1"), c, width, 1, rng));
            blocks.push(ResBlock::new(store, &format!("{name}.l{l}.res2"), width, width, 2, rng));
            c = width;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let flat = h * w * c;
        let head_w = store.add(format!("{name}.head.w"), Tensor::zeros(&[flat, 2 * spec.dz]), true);
        let head_b = store.add(format!("{name}.head.b"), Tensor::zeros(&[2 * spec.dz]), true);
        Ok(Encoder {
            spec,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Posterior parameters for a batch `x: [n, h, w, c]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<GaussianPosterior> {
        let (h, w, c) = self.spec.image;
        let n = match *g.shape(x) {
            [n, xh, xw, xc] if (xh, xw, xc) == (h, w, c) => n,
            _ => {
                return Err(Error::shape(format!(
                    "encoder expects [n,{h},{w},{c}], got {:?}",
                    g.shape(x)
                )))
            }
        };
        let mut cur = x;
        for b in &self.blocks {
            cur = b.apply(g, cur);
        }
        let flat = g.value(cur).len() / n;
        let cur = g.reshape(cur, &[n, flat]);
        let (hw, hb) = (g.param(self.head_w), g.param(self.head_b));
        let out = g.linear(cur, hw, hb);
        let dz = self.spec.dz;
        let mu = g.slice_last(out, 0, dz);
        let lv = g.slice_last(out, dz, 2 * dz);
        let lim = T::lit(LOG_VAR_LIMIT);
        let log_var = g.clamp(lv, -lim, lim);
        Ok(GaussianPosterior { mu, log_var })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn spec(image: (usize, usize, usize)) -> EncoderSpec {
        EncoderSpec {
            image,
            dz: 16,
            base_width: 8,
            max_width: 16,
        }
    }

    #[test]
    fn level_count() {
        assert_eq!(spec((8, 8, 3)).levels(), 1);
        assert_eq!(spec((32, 32, 3)).levels(), 3);
        assert_eq!(spec((4, 4, 3)).levels(), 0);
        assert_eq!(spec((2, 2, 1)).levels(), 0);
        assert_eq!(spec((32, 32, 3)).width(2), 16);
    }

    #[test]
    fn zero_head_gives_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "enc", spec((8, 8, 3)), &mut rng).unwrap();
        let x = normal_tensor::<f64, _>(&mut rng, &[3, 8, 8, 3], 1.0);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let post = enc.encode(&mut g, xv).unwrap();
        assert_eq!(g.shape(post.mu), &[3, 16]);
        assert!(g.value(post.mu).data().iter().all(|&v| v == 0.0));
        assert!(g.value(post.log_var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_params_give_finite_distinct_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "enc", spec((8, 8, 3)), &mut rng).unwrap();
        store.jitter(&mut rng, 0.1);
        let a = normal_tensor::<f64, _>(&mut rng, &[1, 8, 8, 3], 1.0);
        let b = normal_tensor::<f64, _>(&mut rng, &[1, 8, 8, 3], 1.0);
        let x = Tensor::stack(&[a.unstack()[0].clone(), a.unstack()[0].clone(), b.unstack()[0].clone()]).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let post = enc.encode(&mut g, xv).unwrap();
        let mu = g.value(post.mu);
        assert!(mu.all_finite());
        assert_eq!(mu.row(0), mu.row(1));
        assert_ne!(mu.row(0), mu.row(2));
    }

    #[test]
    fn reparameterization() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let mu = g.input(Tensor::from_f64(&[1, 2], &[0.5, -1.0]).unwrap());
        let lv = g.input(Tensor::from_f64(&[1, 2], &[0.0, 2.0_f64.ln() * 2.0]).unwrap());
        let post = GaussianPosterior { mu, log_var: lv };
        let zero = g.input(Tensor::zeros(&[1, 2]));
        let z = post.sample(&mut g, zero);
        assert_eq!(g.value(z), g.value(mu));
        let e = g.input(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let z = post.sample(&mut g, e);
        assert!((g.value(z).data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_prob_closed_form() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let mu = g.input(Tensor::zeros(&[1, 1]));
        let lv = g.input(Tensor::zeros(&[1, 1]));
        let post = GaussianPosterior { mu, log_var: lv };
        let lp = post.log_prob(&mut g, mu);
        assert!((g.value(lp).data()[0] + 0.918_938_533_204_672_7).abs() < 1e-12);

        // Doubling sigma lowers the mode density by dz * ln 2.
        let mu = g.input(Tensor::from_f64(&[1, 3], &[0.1, 0.2, 0.3]).unwrap());
        let lv0 = g.input(Tensor::from_f64(&[1, 3], &[0.0, -1.0, 1.0]).unwrap());
        let lv1 = g.add_const(lv0, 2.0 * 2.0_f64.ln());
        let a = GaussianPosterior { mu, log_var: lv0 }.log_prob(&mut g, mu);
        let b = GaussianPosterior { mu, log_var: lv1 }.log_prob(&mut g, mu);
        let diff = g.value(a).data()[0] - g.value(b).data()[0];
        assert!((diff - 3.0 * 2.0_f64.ln()).abs() < 1e-12);
    }
}
