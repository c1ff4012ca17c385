//! Optimization loop, learning-rate schedule, datasets and checkpoints.

mod adam;
mod checkpoint;
mod data;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{config_digest, peek_dtype};
pub use data::{
    augment, check_dims, class_template, make_synthetic_globals, Augment, DataConfig, DataSource, Dataset,
    SyntheticSpec, CROP_PAD,
};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::flows::normal_tensor;
use crate::model::{bits_per_dim, dequantize, ElboValues, Model, ModelConfig};
use crate::numerics::{Graph, Real, Tensor};

/// Header of the per-update metrics file.
pub const METRICS_HEADER: &str = "update,loss,recon,kl,bpd,lr";

/// Consecutive non-finite losses tolerated before training aborts.
pub const MAX_NONFINITE_STREAK: u32 = 10;

/// Separates the training-batch random stream from parameter initialization.
const BATCH_STREAM_KEY: u64 = 0x5eed_ba7c_0000_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub init_lr: f64,
    pub warmup: u64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_updates: u64,
    pub seed: u64,
    /// Write a checkpoint every this many updates; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub augment: Augment,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            init_lr: 1e-3,
            warmup: 50,
            decay: 0.999997,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            max_updates: 2000,
            seed: 0,
            checkpoint_every: 500,
            augment: Augment::default(),
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: kv.take("train.batch_size", d.batch_size)?,
            init_lr: kv.take("train.lr", d.init_lr)?,
            warmup: kv.take("train.warmup", d.warmup)?,
            decay: kv.take("train.decay", d.decay)?,
            beta1: kv.take("train.beta1", d.beta1)?,
            beta2: kv.take("train.beta2", d.beta2)?,
            eps: kv.take("train.eps", d.eps)?,
            weight_decay: kv.take("train.weight_decay", d.weight_decay)?,
            max_updates: kv.take("train.max_updates", d.max_updates)?,
            seed: kv.take("train.seed", d.seed)?,
            checkpoint_every: kv.take("train.checkpoint_every", d.checkpoint_every)?,
            augment: Augment {
                flip: kv.take("train.flip", d.augment.flip)?,
                crop: kv.take("train.crop", d.augment.crop)?,
            },
            eval_batch: kv.take("train.eval_batch", d.eval_batch)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let lines = [
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lr", self.init_lr.to_string()),
            ("train.warmup", self.warmup.to_string()),
            ("train.decay", self.decay.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.eps", self.eps.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.max_updates", self.max_updates.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.flip", self.augment.flip.to_string()),
            ("train.crop", self.augment.crop.to_string()),
            ("train.eval_batch", self.eval_batch.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr", self.init_lr),
            ("train.decay", self.decay),
            ("train.eps", self.eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        if self.warmup == 0 {
            return Err(Error::config("train.warmup must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup to `init_lr` over `warmup` updates, then exponential decay.
pub fn lr_at(update: u64, cfg: &TrainConfig) -> f64 {
    if update < cfg.warmup {
        cfg.init_lr * (update + 1) as f64 / cfg.warmup as f64
    } else {
        cfg.init_lr * cfg.decay.powf((update - cfg.warmup) as f64)
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        Ok(RunConfig {
            model: ModelConfig::from_kv(kv)?,
            train: TrainConfig::from_kv(kv)?,
            data: DataConfig::from_kv(kv)?,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}{}{}",
            self.model.to_text(),
            self.train.to_text(),
            self.data.to_text()
        )
    }
}

/// One row of the metrics file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub update: u64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub bpd: f64,
    pub lr: f64,
    /// False when the update was skipped for non-finite values.
    pub applied: bool,
}

impl StepRecord {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.update, self.loss, self.recon, self.kl, self.bpd, self.lr
        )
    }
}

/// Model, optimizer state and update counter.
pub struct Trainer<T: Real> {
    pub config: RunConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    /// Updates performed so far (including skipped ones).
    pub update: u64,
    nonfinite_streak: u32,
}

impl<T: Real> Trainer<T> {
    /// Fresh model from `config.train.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.train.validate()?;
        let model = Model::new(config.model.clone(), config.train.seed)?;
        let adam = Adam::new(config.train.adam(), &model.params);
        Ok(Self::from_parts(config, model, adam, 0))
    }

    fn from_parts(config: RunConfig, model: Model<T>, adam: Adam<T>, update: u64) -> Self {
        Trainer {
            config,
            model,
            adam,
            update,
            nonfinite_streak: 0,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        self.config.model.image()
    }

    /// Dequantized training batch and posterior noise for `update`. A pure
    /// function of the seed and the update index.
    pub fn batch(&self, data: &Dataset, update: u64) -> Result<(Tensor<T>, Tensor<T>)> {
        check_dims(data, self.dims(), self.config.model.bits)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ BATCH_STREAM_KEY);
        rng.set_stream(update);
        let n = self.config.train.batch_size;
        let mut pixels = Vec::with_capacity(n * data.image_len());
        for _ in 0..n {
            let i = rng.random_range(0..data.len());
            pixels.extend(augment(data.image(i), self.dims(), self.config.train.augment, &mut rng));
        }
        let noise: Vec<f64> = (0..pixels.len()).map(|_| rng.random::<f64>()).collect();
        let (h, w, c) = self.dims();
        let x = Tensor::new(&[n, h, w, c], dequantize(&pixels, self.config.model.bits, &noise)?)?;
        let eps = normal_tensor(&mut rng, &[n, self.config.model.dz], 1.0);
        Ok((x, eps))
    }

    /// Actnorm data initialization on the first training batch.
    pub fn initialize(&mut self, data: &Dataset) -> Result<()> {
        if !self.model.is_initialized() {
            let (x, _) = self.batch(data, 0)?;
            self.model.initialize(&x)?;
        }
        Ok(())
    }

    /// One optimization step. Non-finite losses or gradients skip the
    /// parameter update; more than [`MAX_NONFINITE_STREAK`] in a row abort.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        self.initialize(data)?;
        let (x, eps) = self.batch(data, self.update)?;
        let lr = lr_at(self.update, &self.config.train);
        let (values, finite) = {
            let mut g = Graph::new(&self.model.params);
            let vars = self.model.elbo_graph(&mut g, &x, &eps)?;
            let values = ElboValues::read(&g, &vars);
            let finite = g.check().is_ok() && values.loss.is_finite();
            if finite {
                let grads = g.backward(vars.loss);
                self.model.params.zero_grad();
                grads.accumulate_into(&mut self.model.params, T::one());
            }
            (values, finite)
        };
        let applied = finite && self.adam.step(&mut self.model.params, lr);
        if !finite {
            self.adam.skipped += 1;
        }
        self.nonfinite_streak = if applied { 0 } else { self.nonfinite_streak + 1 };
        let record = StepRecord {
            update: self.update,
            loss: values.loss,
            recon: values.recon,
            kl: values.kl,
            bpd: bits_per_dim(values.loss, self.config.model.dim(), self.config.model.bits),
            lr,
            applied,
        };
        self.update += 1;
        if self.nonfinite_streak > MAX_NONFINITE_STREAK {
            return Err(Error::NonFinite(format!(
                "training loss or gradients for {} consecutive updates (last at update {})",
                self.nonfinite_streak, record.update
            )));
        }
        Ok(record)
    }

    /// Runs until `config.train.max_updates`, starting from the current
    /// update. With `out_dir`, appends to `metrics.csv` (truncated to the
    /// resume point), writes periodic `step-<update>.ckpt` files and a final
    /// `final.ckpt`. `progress` sees every record.
    pub fn run(
        &mut self,
        data: &Dataset,
        out_dir: Option<&Path>,
        mut progress: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        self.initialize(data)?;
        let mut metrics = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(open_metrics(&dir.join("metrics.csv"), self.update)?)
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.update < self.config.train.max_updates {
            let rec = self.step(data)?;
            if let Some(f) = metrics.as_mut() {
                writeln!(f, "{}", rec.csv())?;
            }
            progress(&rec);
            records.push(rec);
            let every = self.config.train.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.update.is_multiple_of(every) && self.update < self.config.train.max_updates {
                    self.save(&checkpoint_path(dir, self.update))?;
                }
            }
        }
        if let Some(f) = metrics.as_mut() {
            f.flush()?;
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, update: u64) -> PathBuf {
    dir.join(format!("step-{update:07}.ckpt"))
}

/// Opens a metrics file for appending rows from `update` on, keeping the
/// header and any earlier rows.
fn open_metrics(path: &Path, update: u64) -> Result<fs::File> {
    let mut kept = vec![METRICS_HEADER.to_string()];
    if update > 0 && path.exists() {
        let reader = BufReader::new(fs::File::open(path)?);
        for line in reader.lines().skip(1) {
            let line = line?;
            let row: Option<u64> = line.split(',').next().and_then(|u| u.parse().ok());
            if row.is_some_and(|u| u < update) {
                kept.push(line);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    for line in &kept {
        writeln!(f, "{line}")?;
    }
    Ok(f)
}

/// Mean negative ELBO of `data` in bits per dimension. Dequantization and
/// posterior noise come from `seed`, one stream per batch.
pub fn evaluate_bpd<T: Real>(model: &Model<T>, data: &Dataset, batch: usize, seed: u64) -> Result<f64> {
    let cfg = model.config();
    check_dims(data, cfg.image(), cfg.bits)?;
    let (h, w, c) = cfg.image();
    let mut total = 0.0;
    for (b, start) in (0..data.len()).step_by(batch.max(1)).enumerate() {
        let end = (start + batch).min(data.len());
        let n = end - start;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let pixels = &data.pixels[start * data.image_len()..end * data.image_len()];
        let noise: Vec<f64> = (0..pixels.len()).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::new(&[n, h, w, c], dequantize(pixels, cfg.bits, &noise)?)?;
        let eps = normal_tensor(&mut rng, &[n, cfg.dz], 1.0);
        total += model.nelbo_per_example(&x, &eps)?.iter().sum::<f64>();
    }
    Ok(bits_per_dim(total / data.len() as f64, cfg.dim(), cfg.bits))
}

/// Per-dimension mean and variance of uniformly dequantized pixels, in
/// `[0, 1)` units.
pub fn dequantized_moments(data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let d = data.image_len();
    let levels = f64::from(1u32 << data.bits);
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for i in 0..data.len() {
        for (j, &p) in data.image(i).iter().enumerate() {
            let v = (f64::from(p) + 0.5) / levels;
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let var = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= n;
            (s / n - *m * *m).max(0.0) + 1.0 / (12.0 * levels * levels)
        })
        .collect();
    (mean, var)
}

/// Bits per dimension of `eval` under a diagonal Gaussian fitted to the
/// dequantized `train` images, computed in closed form.
pub fn gaussian_baseline_bpd(train: &Dataset, eval: &Dataset) -> Result<f64> {
    if (train.height, train.width, train.channels, train.bits) != (eval.height, eval.width, eval.channels, eval.bits) {
        return Err(Error::shape("baseline train and eval sets differ in shape"));
    }
    let (mu, var) = dequantized_moments(train);
    let (emu, evar) = dequantized_moments(eval);
    let nats: f64 = (0..mu.len())
        .map(|j| {
            let expected_sq = evar[j] + (emu[j] - mu[j]).powi(2);
            0.5 * (std::f64::consts::TAU * var[j]).ln() + 0.5 * expected_sq / var[j]
        })
        .sum();
    Ok(bits_per_dim(nats, mu.len(), train.bits))
}

/// Indices of `window`-update blocks whose mean exceeds the previous
/// block's mean by more than the relative `tolerance`.
pub fn smoothed_increases(values: &[f64], window: usize, tolerance: f64) -> Vec<usize> {
    let means: Vec<f64> = values
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    (1..means.len())
        .filter(|&i| means[i] > means[i - 1] + tolerance * means[i - 1].abs())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run() -> RunConfig {
        let text = "image.height = 4\nimage.width = 4\nimage.channels = 3\nlatent.dz = 2\nflow.levels = 1\n\
                    flow.hidden = 8\nencoder.base_width = 4\nencoder.max_width = 8\nprior.depth = 2\n\
                    precision = f64\ntrain.batch_size = 8\ntrain.max_updates = 6\ntrain.warmup = 2\n\
                    train.checkpoint_every = 3\ndata.n = 32\n";
        RunConfig::parse(text).unwrap()
    }

    fn tiny_data(cfg: &RunConfig) -> Dataset {
        cfg.data.load_train(cfg.model.image(), cfg.model.bits).unwrap()
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(cfg.warmup - 1, &cfg), cfg.init_lr);
        assert!((lr_at(0, &cfg) - cfg.init_lr / 50.0).abs() < 1e-18);
        assert!(lr_at(cfg.warmup, &cfg) <= lr_at(cfg.warmup - 1, &cfg));
        let late = lr_at(cfg.warmup + 1_000_000, &cfg);
        assert!((late - 1e-3 * (-3.0000045e-6f64 * 1e6).exp()).abs() < 1e-9, "{late}");
        assert!((late - 4.98e-5).abs() < 5e-8);
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = tiny_run();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(RunConfig::parse("train.warmup = 0").is_err());
        assert!(RunConfig::parse("train.lr = -1").is_err());
        assert!(RunConfig::parse("train.beta2 = 1").is_err());
        assert!(RunConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn batches_are_pure() {
        let cfg = tiny_run();
        let data = tiny_data(&cfg);
        let t = Trainer::<f64>::new(cfg).unwrap();
        let (a, ea) = t.batch(&data, 3).unwrap();
        let (b, eb) = t.batch(&data, 3).unwrap();
        assert_eq!((&a, &ea), (&b, &eb));
        assert_ne!(a, t.batch(&data, 4).unwrap().0);
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn zero_updates_keep_zero_kl() {
        let mut cfg = tiny_run();
        cfg.train.max_updates = 0;
        let data = tiny_data(&cfg);
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        assert!(t.run(&data, None, |_| {}).unwrap().is_empty());
        assert!(t.model.is_initialized());
        let (x, eps) = t.batch(&data, 0).unwrap();
        assert_eq!(t.model.elbo(&x, &eps).unwrap().kl, 0.0);
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let cfg = tiny_run();
        let data = tiny_data(&cfg);
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        t.step(&data).unwrap();
        t.step(&data).unwrap();
        let bytes = t.to_bytes();
        let back = Trainer::<f64>::from_bytes(&bytes, None).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.update, 2);
        assert_eq!(peek_dtype(&bytes).unwrap(), crate::numerics::Dtype::F64);
        assert!(Trainer::<f32>::from_bytes(&bytes, None).is_err());
    }

    #[test]
    fn checkpoint_rejects_other_model() {
        let cfg = tiny_run();
        let t = Trainer::<f64>::new(cfg.clone()).unwrap();
        let bytes = t.to_bytes();
        let mut other = cfg.model.clone();
        other.flow_hidden = 16;
        let err = Trainer::<f64>::from_bytes(&bytes, Some(&other)).err().unwrap();
        assert!(matches!(err, Error::DigestMismatch { .. }));
        assert!(Trainer::<f64>::from_bytes(&bytes, Some(&cfg.model)).is_ok());
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 1);
        assert!(Trainer::<f64>::from_bytes(&truncated, None).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny_run();
        let data = tiny_data(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::<f64>::new(cfg.clone()).unwrap();
        let straight = full.run(&data, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(straight.len(), 6);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(csv.lines().next(), Some(METRICS_HEADER));

        let mut resumed = Trainer::<f64>::load(&checkpoint_path(dir.path(), 3), Some(&cfg.model)).unwrap();
        assert_eq!(resumed.update, 3);
        let tail = resumed.run(&data, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(tail, straight[3..]);
        assert_eq!(resumed.to_bytes(), full.to_bytes());
        assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), csv);
    }

    #[test]
    fn nonfinite_streak_aborts() {
        let cfg = tiny_run();
        let data = tiny_data(&cfg);
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        t.initialize(&data).unwrap();
        let id = t
            .model
            .params
            .ids()
            .find(|&id| t.model.params.get(id).trainable)
            .unwrap();
        t.model.params.value_mut(id).data_mut()[0] = f64::NAN;
        for _ in 0..MAX_NONFINITE_STREAK {
            assert!(!t.step(&data).unwrap().applied);
        }
        assert!(matches!(t.step(&data), Err(Error::NonFinite(_))));
        assert_eq!(t.adam.steps, 0);
    }

    #[test]
    fn baseline_matches_direct_gaussian() {
        let cfg = tiny_run();
        let data = tiny_data(&cfg);
        let (mu, var) = dequantized_moments(&data);
        let levels = 256.0;
        let j = 5;
        let vals: Vec<f64> = (0..data.len())
            .map(|i| (f64::from(data.image(i)[j]) + 0.5) / levels)
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((mu[j] - m).abs() < 1e-12);
        assert!((var[j] - v - 1.0 / (12.0 * levels * levels)).abs() < 1e-12);
        let bpd = gaussian_baseline_bpd(&data, &data).unwrap();
        let nats: f64 = var.iter().map(|v| 0.5 * (std::f64::consts::TAU * v).ln() + 0.5).sum();
        assert!((bpd - bits_per_dim(nats, var.len(), 8)).abs() < 1e-12);
    }

    #[test]
    fn smoothed_increase_detection() {
        let mut v: Vec<f64> = (0..500).map(|i| 10.0 - i as f64 * 0.01).collect();
        assert!(smoothed_increases(&v, 100, 0.01).is_empty());
        for x in &mut v[300..400] {
            *x += 2.0;
        }
        assert_eq!(smoothed_increases(&v, 100, 0.01), vec![3]);
    }
}
