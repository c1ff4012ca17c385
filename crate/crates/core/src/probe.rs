//! Linear probes on frozen representations: multinomial logistic
//! regression on `z`, `upsilon` or raw pixels.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Real, Tensor};
use crate::training::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    Z,
    Upsilon,
    Raw,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Z => "z",
            Representation::Upsilon => "upsilon",
            Representation::Raw => "raw",
        })
    }
}

impl FromStr for Representation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "z" => Ok(Representation::Z),
            "upsilon" => Ok(Representation::Upsilon),
            "raw" => Ok(Representation::Raw),
            _ => Err(format!("expected z, upsilon or raw, got {s:?}")),
        }
    }
}

/// Row-major feature matrix with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub rows: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Features {
        Features {
            dim: self.dim,
            rows: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

fn encode_chunk<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    start: usize,
    end: usize,
    rep: Representation,
) -> Result<Vec<f64>> {
    let (h, w, c) = (data.height, data.width, data.channels);
    let levels = f64::from(1u32 << data.bits);
    let pixels = &data.pixels[start * data.image_len()..end * data.image_len()];
    let x = Tensor::from_fn(&[end - start, h, w, c], |i| {
        T::lit((f64::from(pixels[i]) + 0.5) / levels)
    });
    let pair = model.decouple(&x, None)?;
    let t = match rep {
        Representation::Z => pair.z,
        _ => pair.upsilon,
    };
    Ok(t.data().iter().map(|v| v.as_f64()).collect())
}

/// Features for every image of a labelled dataset. Codes use the posterior
/// mean of pixel-centre values `(y + 0.5) / 2^bits`; raw features are
/// `y / 2^bits`. Batches are spread over the available cores.
pub fn extract_features<T: Real>(model: Option<&Model<T>>, data: &Dataset, rep: Representation) -> Result<Features> {
    let labels: Vec<usize> = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::config("probing needs a labelled dataset"))?
        .iter()
        .map(|&l| usize::from(l))
        .collect();
    if rep == Representation::Raw {
        let levels = f64::from(1u32 << data.bits);
        return Ok(Features {
            dim: data.image_len(),
            rows: data.pixels.iter().map(|&p| f64::from(p) / levels).collect(),
            labels,
        });
    }
    let model = model.ok_or_else(|| Error::config(format!("{rep} features need a model")))?;
    let cfg = model.config();
    crate::training::check_dims(data, cfg.image(), cfg.bits)?;
    let dim = if rep == Representation::Z { cfg.dz } else { cfg.dim() };
    const CHUNK: usize = 128;
    let starts: Vec<usize> = (0..data.len()).step_by(CHUNK).collect();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(starts.len())
        .max(1);
    let parts = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|wk| {
                let starts = &starts;
                s.spawn(move || {
                    starts
                        .iter()
                        .skip(wk)
                        .step_by(workers)
                        .map(|&st| encode_chunk(model, data, st, (st + CHUNK).min(data.len()), rep))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..starts.len()).map(|_| None).collect();
        for (wk, h) in handles.into_iter().enumerate() {
            for (j, r) in h.join().expect("feature worker panicked").into_iter().enumerate() {
                slots[wk + j * workers] = Some(r);
            }
        }
        slots
    });
    let mut rows = Vec::with_capacity(data.len() * dim);
    for p in parts.into_iter().flatten() {
        rows.extend(p?);
    }
    Ok(Features { dim, rows, labels })
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant dimensions keep unit scale.
    pub fn fit(f: &Features) -> Self {
        let n = f.len().max(1) as f64;
        let mut mean = vec![0.0; f.dim];
        for i in 0..f.len() {
            for (m, v) in mean.iter_mut().zip(f.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; f.dim];
        for i in 0..f.len() {
            for ((s, v), m) in var.iter_mut().zip(f.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var.iter().map(|&v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, f: &Features) -> Features {
        let rows = f
            .rows
            .chunks_exact(f.dim)
            .flat_map(|r| r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s))
            .collect();
        Features {
            dim: f.dim,
            rows,
            labels: f.labels.clone(),
        }
    }
}

/// Multinomial logistic regression, `weights: [classes, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    fn logits(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weights[k * self.dim..(k + 1) * self.dim];
            *o = self.bias[k] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.classes];
        self.logits(x, &mut z);
        let mut best = 0;
        for k in 1..self.classes {
            if z[k] > z[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, f: &Features) -> f64 {
        if f.is_empty() {
            return 0.0;
        }
        let hits = (0..f.len()).filter(|&i| self.predict(f.row(i)) == f.labels[i]).count();
        hits as f64 / f.len() as f64
    }

    /// Accuracy within each true class; `NaN` for classes absent from `f`.
    pub fn per_class_accuracy(&self, f: &Features) -> Vec<f64> {
        let mut hits = vec![0usize; self.classes];
        let mut counts = vec![0usize; self.classes];
        for i in 0..f.len() {
            let y = f.labels[i];
            if y < self.classes {
                counts[y] += 1;
                hits[y] += usize::from(self.predict(f.row(i)) == y);
            }
        }
        hits.iter()
            .zip(&counts)
            .map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 })
            .collect()
    }

    /// Mean cross-entropy plus `l2 / 2 * |W|^2` (bias unpenalized), and
    /// its gradient.
    fn objective(&self, f: &Features, l2: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let n = f.len() as f64;
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = vec![0.0; self.classes];
        let mut z = vec![0.0; self.classes];
        let mut loss = 0.0;
        for i in 0..f.len() {
            let x = f.row(i);
            self.logits(x, &mut z);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
            loss += m + sum.ln() - z[f.labels[i]];
            for k in 0..self.classes {
                let p = (z[k] - m).exp() / sum - if k == f.labels[i] { 1.0 } else { 0.0 };
                gb[k] += p / n;
                for (g, v) in gw[k * self.dim..(k + 1) * self.dim].iter_mut().zip(x) {
                    *g += p * v / n;
                }
            }
        }
        let reg: f64 = self.weights.iter().map(|w| w * w).sum();
        for (g, w) in gw.iter_mut().zip(&self.weights) {
            *g += l2 * w;
        }
        (loss / n + 0.5 * l2 * reg, gw, gb)
    }
}

/// Largest eigenvalue of `X^T X / n` for `X` with an appended unit column.
fn gram_spectral_norm(f: &Features) -> f64 {
    let d = f.dim + 1;
    let n = f.len() as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for i in 0..f.len() {
            let x = f.row(i);
            let dot = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[f.dim];
            for (o, a) in next.iter_mut().zip(x) {
                *o += dot * a / n;
            }
            next[f.dim] += dot / n;
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = next.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

/// Fits a probe by full-batch gradient descent from zero weights. The
/// step `1 / (lambda_max / 2 + l2)` is below the inverse smoothness
/// constant, so the objective never increases. Returns the probe and the
/// objective before each epoch and after the last.
pub fn train_linear_probe(f: &Features, l2: f64, epochs: usize) -> Result<(LinearProbe, Vec<f64>)> {
    let classes = f.num_classes();
    let distinct = {
        let mut seen = vec![false; classes];
        f.labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Degenerate("probe labels contain fewer than two classes".into()));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::config(format!("probe l2 must be non-negative, got {l2}")));
    }
    let mut probe = LinearProbe {
        classes,
        dim: f.dim,
        weights: vec![0.0; classes * f.dim],
        bias: vec![0.0; classes],
    };
    let step = 1.0 / (0.5 * gram_spectral_norm(f) + l2).max(1e-12);
    let mut history = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let (loss, gw, gb) = probe.objective(f, l2);
        history.push(loss);
        for (w, g) in probe.weights.iter_mut().zip(&gw) {
            *w -= step * g;
        }
        for (b, g) in probe.bias.iter_mut().zip(&gb) {
            *b -= step * g;
        }
    }
    history.push(probe.objective(f, l2).0);
    Ok((probe, history))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub l2: f64,
    pub epochs: usize,
    pub test_fraction: f64,
    /// Shuffles the train/test split.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-3,
            epochs: 300,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub representation: Representation,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub per_class: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub final_loss: f64,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "representation,n_train,n_test,train_accuracy,test_accuracy,per_class";

    /// One CSV row; per-class test accuracies are `;`-separated.
    pub fn csv_row(&self) -> String {
        let per: Vec<String> = self.per_class.iter().map(|a| format!("{a:.6}")).collect();
        format!(
            "{},{},{},{:.6},{:.6},{}",
            self.representation,
            self.n_train,
            self.n_test,
            self.train_accuracy,
            self.test_accuracy,
            per.join(";")
        )
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "linear probe on {}", self.representation)?;
        writeln!(
            f,
            "  train: {} images, accuracy {:.2}%",
            self.n_train,
            100.0 * self.train_accuracy
        )?;
        writeln!(
            f,
            "  test:  {} images, accuracy {:.2}%",
            self.n_test,
            100.0 * self.test_accuracy
        )?;
        for (k, a) in self.per_class.iter().enumerate() {
            writeln!(f, "  class {k}: {:.2}%", 100.0 * a)?;
        }
        Ok(())
    }
}

/// Shuffled split into `(train, test)` indices.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let test = idx.split_off(n - n_test);
    (idx, test)
}

/// Splits, standardizes with train statistics, fits and scores a probe.
pub fn probe_features(f: &Features, representation: Representation, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let (tr, te) = split_indices(f.len(), cfg.test_fraction, cfg.seed);
    let (train, test) = (f.subset(&tr), f.subset(&te));
    let st = Standardizer::fit(&train);
    let (train, test) = (st.apply(&train), st.apply(&test));
    let (probe, history) = train_linear_probe(&train, cfg.l2, cfg.epochs)?;
    Ok(ProbeReport {
        representation,
        train_accuracy: probe.accuracy(&train),
        test_accuracy: probe.accuracy(&test),
        per_class: probe.per_class_accuracy(&test),
        n_train: train.len(),
        n_test: test.len(),
        final_loss: *history.last().unwrap_or(&f64::NAN),
    })
}
