//! The full model: encoder, conditional flow decoder and flow prior, with
//! the ELBO objective and the decoupling operations built on them.

mod config;

pub use config::{Conditioning, ModelConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::flows::{normal_tensor, MultiScaleFlow};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::prior::{standard_normal_log_prob, PriorFlow};

/// `x = (y + u) / 2^bits` for integer pixels `y` and noise `u` in `[0, 1)`.
pub fn dequantize<T: Real>(pixels: &[u8], bits: u32, noise: &[f64]) -> Result<Vec<T>> {
    if pixels.len() != noise.len() {
        return Err(Error::shape(format!(
            "{} pixels but {} noise values",
            pixels.len(),
            noise.len()
        )));
    }
    let levels = (1u32 << bits) as f64;
    pixels
        .iter()
        .zip(noise)
        .map(|(&y, &u)| {
            if u32::from(y) >= 1 << bits {
                return Err(Error::Degenerate(format!("pixel value {y} exceeds {bits}-bit range")));
            }
            Ok(T::lit((f64::from(y) + u) / levels))
        })
        .collect()
}

/// `floor(x * 2^bits)`, clamped to the representable range.
pub fn quantize<T: Real>(x: &[T], bits: u32) -> Vec<u8> {
    let levels = (1u32 << bits) as f64;
    x.iter()
        .map(|v| {
            let q = (v.as_f64() * levels).floor();
            if q.is_nan() {
                0
            } else {
                q.clamp(0.0, levels - 1.0) as u8
            }
        })
        .collect()
}

/// Bits per dimension of a per-example negative log density (nats) over
/// `dims` dequantized values of `bits` bits each.
pub fn bits_per_dim(nats: f64, dims: usize, bits: u32) -> f64 {
    nats / (dims as f64 * std::f64::consts::LN_2) + f64::from(bits)
}

/// Global code `z: [n, dz]` and local code `upsilon: [n, h*w*c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair<T> {
    pub z: Tensor<T>,
    pub upsilon: Tensor<T>,
}

/// Graph handles of one ELBO evaluation. `loss`, `recon` and `kl` are batch
/// means in nats; the per-example terms are `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
    pub recon_per_example: Var,
    pub kl_per_example: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboValues {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

impl ElboValues {
    pub fn read<T: Real>(g: &Graph<'_, T>, v: &ElboVars) -> Self {
        let get = |x: Var| g.value(x).data()[0].as_f64();
        ElboValues {
            loss: get(v.loss),
            recon: get(v.recon),
            kl: get(v.kl),
        }
    }
}

/// Per-dimension Gaussian over `upsilon` whose mean and log-scale are
/// linear in `z`. Used only with [`Conditioning::Base`].
#[derive(Clone, Copy, Debug)]
struct BaseConditioner {
    w: ParamId,
    b: ParamId,
    dim: usize,
}

impl BaseConditioner {
    fn stats<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> (Var, Var) {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let out = g.linear(z, w, b);
        let mean = g.slice_last(out, 0, self.dim);
        let log_scale = g.slice_last(out, self.dim, 2 * self.dim);
        (mean, log_scale)
    }
}

pub struct Model<T: Real> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    encoder: Encoder,
    flow: MultiScaleFlow,
    prior: PriorFlow,
    base: Option<BaseConditioner>,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized model. Parameter draws depend only on
    /// `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "encoder", config.encoder_spec(), &mut rng)?;
        let flow = MultiScaleFlow::new(&mut params, "decoder", config.flow_spec(), &mut rng)?;
        let prior = PriorFlow::new(&mut params, "prior", config.prior_spec(), &mut rng)?;
        let base = (config.flow_condition == Conditioning::Base).then(|| {
            let dim = config.dim();
            BaseConditioner {
                w: params.add("base.w", Tensor::zeros(&[config.dz, 2 * dim]), true),
                b: params.add("base.b", Tensor::zeros(&[2 * dim]), true),
                dim,
            }
        });
        Ok(Model {
            config,
            params,
            encoder,
            flow,
            prior,
            base,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn flow(&self) -> &MultiScaleFlow {
        &self.flow
    }

    pub fn prior(&self) -> &PriorFlow {
        &self.prior
    }

    fn image_shape(&self, n: usize) -> [usize; 4] {
        [n, self.config.height, self.config.width, self.config.channels]
    }

    fn batch_size(&self, x: &Tensor<T>) -> Result<usize> {
        let n = x.shape().first().copied().unwrap_or(0);
        if x.shape() != self.image_shape(n) || n == 0 {
            return Err(Error::shape(format!(
                "expected a nonempty batch {:?}, got {:?}",
                &self.image_shape(n)[1..],
                x.shape()
            )));
        }
        Ok(n)
    }

    /// Whether every decoder actnorm has been data-initialized.
    pub fn is_initialized(&self) -> bool {
        self.flow.steps().all(|s| s.actnorm.is_initialized(&self.params))
    }

    /// Data-dependent actnorm initialization from one batch of dequantized
    /// images in `[0, 1)`. Layers are initialized in order, each on the
    /// activations produced by the already-initialized layers before it.
    pub fn initialize(&mut self, x: &Tensor<T>) -> Result<()> {
        let n = self.batch_size(x)?;
        let overrides = {
            let mut g = Graph::new(&self.params);
            g.allow_data_init(true);
            let eps = Tensor::zeros(&[n, self.config.dz]);
            self.elbo_graph(&mut g, x, &eps)?;
            g.check()?;
            g.take_overrides()
        };
        for (id, value) in overrides {
            self.params.set_value(id, value)?;
        }
        Ok(())
    }

    /// Decoder `x_centered -> (upsilon, logdet)`.
    pub fn decoder_forward(&self, g: &mut Graph<'_, T>, x: Var, z: Var) -> Result<(Var, Var)> {
        let cond = self.base.is_none().then_some(z);
        let (u, logdet) = self.flow.forward(g, x, cond)?;
        match self.base {
            None => Ok((u, logdet)),
            Some(base) => {
                let (mean, log_scale) = base.stats(g, z);
                let centered = g.sub(u, mean);
                let neg = g.neg(log_scale);
                let inv = g.exp(neg);
                let v = g.mul(centered, inv);
                let ld = g.sum_rows(log_scale);
                let logdet = g.sub(logdet, ld);
                Ok((v, logdet))
            }
        }
    }

    /// Decoder inverse `upsilon -> x_centered`.
    pub fn decoder_inverse(&self, g: &mut Graph<'_, T>, upsilon: Var, z: Var) -> Result<Var> {
        let u = match self.base {
            None => upsilon,
            Some(base) => {
                let (mean, log_scale) = base.stats(g, z);
                let scale = g.exp(log_scale);
                let u = g.mul(upsilon, scale);
                g.add(u, mean)
            }
        };
        let cond = self.base.is_none().then_some(z);
        Ok(self.flow.inverse(g, u, cond)?.0)
    }

    fn center(&self, g: &mut Graph<'_, T>, x: &Tensor<T>) -> Var {
        g.input(x.map(|v| v - T::lit(0.5)))
    }

    /// Single-sample ELBO terms for dequantized `x: [n,h,w,c]` in `[0, 1)`
    /// and posterior noise `eps: [n, dz]`.
    pub fn elbo_graph(&self, g: &mut Graph<'_, T>, x: &Tensor<T>, eps: &Tensor<T>) -> Result<ElboVars> {
        let n = self.batch_size(x)?;
        if eps.shape() != [n, self.config.dz] {
            return Err(Error::shape(format!(
                "posterior noise must be [{n}, {}], got {:?}",
                self.config.dz,
                eps.shape()
            )));
        }
        let xc = self.center(g, x);
        let post = self.encoder.encode(g, xc)?;
        let e = g.input(eps.clone());
        let z = post.sample(g, e);
        let (upsilon, logdet) = self.decoder_forward(g, xc, z)?;
        let log_px = standard_normal_log_prob(g, upsilon);
        let log_px = g.add(log_px, logdet);
        let recon_per_example = g.neg(log_px);
        let log_q = post.log_prob(g, z);
        let log_p = self.prior.log_prob(g, z)?;
        let kl_per_example = g.sub(log_q, log_p);
        let recon = g.mean_all(recon_per_example);
        let kl = g.mean_all(kl_per_example);
        let loss = g.add(recon, kl);
        Ok(ElboVars {
            loss,
            recon,
            kl,
            recon_per_example,
            kl_per_example,
        })
    }

    /// ELBO terms without gradients.
    pub fn elbo(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<ElboValues> {
        let mut g = Graph::new(&self.params);
        let v = self.elbo_graph(&mut g, x, eps)?;
        g.check()?;
        Ok(ElboValues::read(&g, &v))
    }

    /// Per-example negative ELBO in nats, `[n]`.
    pub fn nelbo_per_example(&self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let v = self.elbo_graph(&mut g, x, eps)?;
        g.check()?;
        let r = g.value(v.recon_per_example).data();
        let k = g.value(v.kl_per_example).data();
        Ok(r.iter().zip(k).map(|(a, b)| a.as_f64() + b.as_f64()).collect())
    }

    /// Posterior mean and log-variance, both `[n, dz]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.batch_size(x)?;
        let mut g = Graph::new(&self.params);
        let xc = self.center(&mut g, x);
        let post = self.encoder.encode(&mut g, xc)?;
        g.check()?;
        Ok((g.value(post.mu).clone(), g.value(post.log_var).clone()))
    }

    /// Splits images into `(z, upsilon)`. `z` is the posterior mean, or a
    /// posterior sample when `noise: [n, dz]` is given.
    pub fn decouple(&self, x: &Tensor<T>, noise: Option<&Tensor<T>>) -> Result<LatentPair<T>> {
        self.batch_size(x)?;
        let mut g = Graph::new(&self.params);
        let xc = self.center(&mut g, x);
        let post = self.encoder.encode(&mut g, xc)?;
        let z = match noise {
            None => post.mu,
            Some(e) => {
                if e.shape() != g.shape(post.mu) {
                    return Err(Error::shape(format!("posterior noise shape {:?}", e.shape())));
                }
                let e = g.input(e.clone());
                post.sample(&mut g, e)
            }
        };
        let (upsilon, _) = self.decoder_forward(&mut g, xc, z)?;
        g.check()?;
        Ok(LatentPair {
            z: g.value(z).clone(),
            upsilon: g.value(upsilon).clone(),
        })
    }

    /// Images `[n,h,w,c]` (continuous, nominally in `[0, 1)`) for the pair.
    pub fn generate_from(&self, pair: &LatentPair<T>) -> Result<Tensor<T>> {
        let n = pair.z.shape().first().copied().unwrap_or(0);
        if pair.z.shape() != [n, self.config.dz] || pair.upsilon.shape() != [n, self.config.dim()] {
            return Err(Error::shape(format!(
                "latent pair shapes {:?} / {:?} do not match the model",
                pair.z.shape(),
                pair.upsilon.shape()
            )));
        }
        let mut g = Graph::new(&self.params);
        let z = g.input(pair.z.clone());
        let u = g.input(pair.upsilon.clone());
        let xc = self.decoder_inverse(&mut g, u, z)?;
        g.check()?;
        Ok(g.value(xc).map(|v| v + T::lit(0.5)))
    }

    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.generate_from(&self.decouple(x, None)?)
    }

    /// `n` samples: `z` from the prior at `temperature`, `upsilon` from
    /// `temperature * N(0, I)`.
    pub fn sample_images<R: Rng + ?Sized>(&self, n: usize, temperature: f64, rng: &mut R) -> Result<Tensor<T>> {
        let noise_z: Tensor<T> = normal_tensor(rng, &[n, self.config.dz], 1.0);
        let noise_u: Tensor<T> = normal_tensor(rng, &[n, self.config.dim()], 1.0);
        let mut g = Graph::new(&self.params);
        let e = g.input(noise_z);
        let z = self.prior.sample(&mut g, temperature, e)?;
        g.check()?;
        let pair = LatentPair {
            z: g.value(z).clone(),
            upsilon: noise_u.map(|v| v * T::lit(temperature)),
        };
        self.generate_from(&pair)
    }

    /// Two-dimensional interpolation between single images `x1` and `x2`
    /// (`[h,w,c]` or `[1,h,w,c]`). Returns `[alphas.len() * betas.len(), h, w, c]`
    /// with one row per `alpha` and one column per `beta`.
    pub fn interpolate2d(&self, x1: &Tensor<T>, x2: &Tensor<T>, alphas: &[f64], betas: &[f64]) -> Result<Tensor<T>> {
        for &v in alphas.iter().chain(betas) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!(
                    "interpolation weights must lie in [0, 1], got {v}"
                )));
            }
        }
        let a = self.decouple(&self.single(x1)?, None)?;
        let b = self.decouple(&self.single(x2)?, None)?;
        let mix =
            |p: &Tensor<T>, q: &Tensor<T>, t: f64| p.zip_map(q, |u, v| (T::one() - T::lit(t)) * u + T::lit(t) * v);
        let mut zs = Vec::new();
        let mut us = Vec::new();
        for &alpha in alphas {
            for &beta in betas {
                zs.push(mix(&a.z, &b.z, alpha).unstack().remove(0));
                us.push(mix(&a.upsilon, &b.upsilon, beta).unstack().remove(0));
            }
        }
        let pair = LatentPair {
            z: Tensor::stack(&zs)?,
            upsilon: Tensor::stack(&us)?,
        };
        self.generate_from(&pair)
    }

    /// `(g(z2, upsilon1), g(z1, upsilon2))` for single images.
    pub fn switch(&self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let a = self.decouple(&self.single(x1)?, None)?;
        let b = self.decouple(&self.single(x2)?, None)?;
        let xa = self.generate_from(&LatentPair {
            z: b.z.clone(),
            upsilon: a.upsilon.clone(),
        })?;
        let xb = self.generate_from(&LatentPair {
            z: a.z,
            upsilon: b.upsilon,
        })?;
        Ok((xa, xb))
    }

    fn single(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.image_shape(1);
        if x.shape() == shape {
            return Ok(x.clone());
        }
        if x.shape() == &shape[1..] {
            return x.clone().reshape(&shape);
        }
        Err(Error::shape(format!(
            "expected one {:?} image, got {:?}",
            &shape[1..],
            x.shape()
        )))
    }
}
