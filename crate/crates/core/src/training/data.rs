use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::image::Image;

const PACKED_MAGIC: &[u8; 8] = b"FVAEDATA";
const PACKED_HEADER: usize = 8 + 5 * 4;

/// A set of integer images sharing dimensions and bit depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bits: u32,
    /// `[n, h, w, c]` row-major.
    pub pixels: Vec<u8>,
    pub labels: Option<Vec<u16>>,
}

impl Dataset {
    pub fn new(
        (height, width, channels): (usize, usize, usize),
        bits: u32,
        pixels: Vec<u8>,
        labels: Option<Vec<u16>>,
    ) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::format("dataset", format!("bit depth must be 1..=8, got {bits}")));
        }
        let per = height * width * channels;
        if per == 0 || !pixels.len().is_multiple_of(per) {
            return Err(Error::format(
                "dataset",
                format!(
                    "{} pixel values do not form {height}x{width}x{channels} images",
                    pixels.len()
                ),
            ));
        }
        let n = pixels.len() / per;
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::format(
                "dataset",
                format!("{n} images but a different number of labels"),
            ));
        }
        if let Some(&p) = pixels.iter().find(|&&p| u32::from(p) >= 1 << bits) {
            return Err(Error::format(
                "dataset",
                format!("pixel value {p} exceeds {bits}-bit range"),
            ));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            bits,
            pixels,
            labels,
        })
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.image_len();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn to_image(&self, i: usize) -> Result<Image> {
        Image::new(
            self.width,
            self.height,
            self.channels,
            self.bits,
            self.image(i).to_vec(),
        )
    }

    /// Number of classes, `max label + 1`.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| usize::from(m) + 1))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            bits: self.bits,
            pixels,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Little-endian packed file: magic, `n h w c bits` as `u32`, pixels,
    /// then optionally one `u16` label per image.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PACKED_HEADER + self.pixels.len() + 2 * self.len());
        out.extend_from_slice(PACKED_MAGIC);
        for v in [self.len(), self.height, self.width, self.channels, self.bits as usize] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_packed(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::format("packed dataset", m);
        if bytes.len() < PACKED_HEADER || &bytes[..8] != PACKED_MAGIC {
            return Err(bad("missing header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (n, h, w, c, bits) = (field(0), field(1), field(2), field(3), field(4));
        let body = &bytes[PACKED_HEADER..];
        let npix = n * h * w * c;
        let labels = if body.len() == npix {
            None
        } else if body.len() == npix + 2 * n {
            Some(
                body[npix..]
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]))
                    .collect(),
            )
        } else {
            return Err(bad(format!(
                "{} payload bytes for {n} images of {h}x{w}x{c}",
                body.len()
            )));
        };
        if n == 0 {
            return Err(bad("no images".into()));
        }
        Dataset::new((h, w, c), bits as u32, body[..npix].to_vec(), labels)
    }

    pub fn write_packed(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_packed())?)
    }

    pub fn read_packed(path: &Path) -> Result<Self> {
        Self::from_packed(&fs::read(path)?)
    }

    /// Loads every image file in `dir`, sorted by name. When `dir` holds
    /// only subdirectories, each one is a class, labelled in name order.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        let mut classes = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                classes.push(path);
            } else if is_image_file(&path) {
                files.push(path);
            }
        }
        let labelled: Vec<(PathBuf, Option<u16>)> = if files.is_empty() && !classes.is_empty() {
            classes.sort();
            let mut out = Vec::new();
            for (k, class_dir) in classes.iter().enumerate() {
                let mut inner: Vec<PathBuf> = fs::read_dir(class_dir)?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<std::io::Result<_>>()?;
                inner.retain(|p| is_image_file(p));
                inner.sort();
                out.extend(inner.into_iter().map(|p| (p, Some(k as u16))));
            }
            out
        } else {
            files.sort();
            files.into_iter().map(|p| (p, None)).collect()
        };
        let mut images = labelled.iter().map(|(p, _)| Image::load(p));
        let first = images
            .next()
            .ok_or_else(|| Error::format("image directory", format!("no images in {}", dir.display())))??;
        let (h, w, c, bits) = (first.height, first.width, first.channels, first.bits);
        let mut pixels = first.pixels;
        for (im, (p, _)) in images.zip(labelled.iter().skip(1)) {
            let im = im?;
            if (im.height, im.width, im.channels, im.bits) != (h, w, c, bits) {
                return Err(Error::format(
                    "image directory",
                    format!("{} differs in size or bit depth from the first image", p.display()),
                ));
            }
            pixels.extend_from_slice(&im.pixels);
        }
        let labels = labelled.iter().map(|(_, l)| *l).collect::<Option<Vec<u16>>>();
        Dataset::new((h, w, c), bits, pixels, labels)
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "pgm" | "png"))
}

/// Parameters of [`make_synthetic_globals`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bits: u32,
    pub classes: usize,
    /// Standard deviation of the per-pixel texture noise, in `[0, 1]` units.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, size: usize, classes: usize, seed: u64) -> Self {
        SyntheticSpec {
            n,
            height: size,
            width: size,
            channels: 3,
            bits: 8,
            classes,
            noise: 0.1,
            seed,
        }
    }
}

const HUE_AMPLITUDE: f64 = 0.22;
const LAYOUT_AMPLITUDE: f64 = 0.1;

/// Noise-free image of class `k`, values in `[0, 1]`, `[h, w, c]` row-major.
///
/// Each class has its own base color (evenly spaced phases around a color
/// wheel) plus a brightness pattern over the four image quadrants.
pub fn class_template(k: usize, classes: usize, (h, w, c): (usize, usize, usize)) -> Vec<f64> {
    use std::f64::consts::TAU;
    let phase = k as f64 / classes as f64;
    let wheel = c.max(3) as f64;
    let base: Vec<f64> = (0..c)
        .map(|j| 0.5 + HUE_AMPLITUDE * (TAU * (phase + j as f64 / wheel)).cos())
        .collect();
    let pattern = k % 4;
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let quadrant = 2 * usize::from(2 * y >= h) + usize::from(2 * x >= w);
            let sign = if (pattern & quadrant).count_ones().is_multiple_of(2) {
                1.0
            } else {
                -1.0
            };
            out.extend(base.iter().map(|b| b + sign * LAYOUT_AMPLITUDE));
        }
    }
    out
}

/// Labelled images: class template plus i.i.d. Gaussian texture noise,
/// quantized to `bits`. Labels cycle through the classes.
pub fn make_synthetic_globals(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > usize::from(u16::MAX) {
        return Err(Error::config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.n == 0 {
        return Err(Error::config("synthetic dataset needs n >= 1"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::config(format!("noise must be non-negative, got {}", spec.noise)));
    }
    let dims = (spec.height, spec.width, spec.channels);
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| class_template(k, spec.classes, dims))
        .collect();
    let levels = f64::from(1u32 << spec.bits);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels = Vec::with_capacity(spec.n * templates[0].len());
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let k = i % spec.classes;
        labels.push(k as u16);
        for &t in &templates[k] {
            let e: f64 = rng.sample(StandardNormal);
            pixels.push(((t + spec.noise * e) * levels).floor().clamp(0.0, levels - 1.0) as u8);
        }
    }
    Dataset::new(dims, spec.bits, pixels, Some(labels))
}

/// Training-time augmentation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub crop: bool,
}

pub const CROP_PAD: usize = 4;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Random horizontal flip (probability 1/2) and random crop after
/// reflection padding by [`CROP_PAD`] pixels, as enabled.
pub fn augment<R: Rng + ?Sized>(image: &[u8], (h, w, c): (usize, usize, usize), aug: Augment, rng: &mut R) -> Vec<u8> {
    let flip = aug.flip && rng.random::<bool>();
    let (dy, dx) = if aug.crop {
        (rng.random_range(0..=2 * CROP_PAD), rng.random_range(0..=2 * CROP_PAD))
    } else {
        (CROP_PAD, CROP_PAD)
    };
    let mut out = Vec::with_capacity(image.len());
    for y in 0..h {
        let sy = reflect(y as isize + dy as isize - CROP_PAD as isize, h);
        for x in 0..w {
            let xf = if flip { w - 1 - x } else { x };
            let sx = reflect(xf as isize + dx as isize - CROP_PAD as isize, w);
            let at = (sy * w + sx) * c;
            out.extend_from_slice(&image[at..at + c]);
        }
    }
    out
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Packed(PathBuf),
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic training set size.
    pub n: usize,
    /// Synthetic held-out set size.
    pub eval_n: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            n: 4096,
            eval_n: 1024,
            classes: 4,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy)]
enum SourceKind {
    Synthetic,
    Packed,
    Directory,
}

impl FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(SourceKind::Synthetic),
            "packed" => Ok(SourceKind::Packed),
            "directory" => Ok(SourceKind::Directory),
            _ => Err(format!("expected synthetic, packed or directory, got {s:?}")),
        }
    }
}

impl DataConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = DataConfig::default();
        let kind: SourceKind = kv.take("data.source", SourceKind::Synthetic)?;
        let path = kv.take_opt("data.path").map(PathBuf::from);
        let source = match (kind, path) {
            (SourceKind::Synthetic, None) => DataSource::Synthetic,
            (SourceKind::Synthetic, Some(_)) => {
                return Err(Error::config("data.path is only used with packed or directory sources"))
            }
            (SourceKind::Packed, Some(p)) => DataSource::Packed(p),
            (SourceKind::Directory, Some(p)) => DataSource::Directory(p),
            (_, None) => return Err(Error::config("data.path is required for packed or directory sources")),
        };
        let cfg = DataConfig {
            source,
            n: kv.take("data.n", d.n)?,
            eval_n: kv.take("data.eval_n", d.eval_n)?,
            classes: kv.take("data.classes", d.classes)?,
            noise: kv.take("data.noise", d.noise)?,
            seed: kv.take("data.seed", d.seed)?,
        };
        if cfg.classes < 2 {
            return Err(Error::config("data.classes must be at least 2"));
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.source {
            DataSource::Synthetic => s.push_str("data.source = synthetic\n"),
            DataSource::Packed(p) => s.push_str(&format!("data.source = packed\ndata.path = {}\n", p.display())),
            DataSource::Directory(p) => s.push_str(&format!("data.source = directory\ndata.path = {}\n", p.display())),
        }
        s.push_str(&format!(
            "data.n = {}\ndata.eval_n = {}\ndata.classes = {}\ndata.noise = {}\ndata.seed = {}\n",
            self.n, self.eval_n, self.classes, self.noise, self.seed
        ));
        s
    }

    fn synthetic(&self, n: usize, seed: u64, dims: (usize, usize, usize), bits: u32) -> SyntheticSpec {
        SyntheticSpec {
            n,
            height: dims.0,
            width: dims.1,
            channels: dims.2,
            bits,
            classes: self.classes,
            noise: self.noise,
            seed,
        }
    }

    /// Training images for a model of image shape `dims` and depth `bits`.
    pub fn load_train(&self, dims: (usize, usize, usize), bits: u32) -> Result<Dataset> {
        let data = match &self.source {
            DataSource::Synthetic => make_synthetic_globals(&self.synthetic(self.n, self.seed, dims, bits))?,
            DataSource::Packed(p) => Dataset::read_packed(p)?,
            DataSource::Directory(p) => Dataset::read_dir(p)?,
        };
        check_dims(&data, dims, bits)?;
        Ok(data)
    }

    /// Held-out images: a fresh synthetic draw, or the file source itself.
    pub fn load_eval(&self, dims: (usize, usize, usize), bits: u32) -> Result<Dataset> {
        match self.source {
            DataSource::Synthetic => {
                let seed = self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
                make_synthetic_globals(&self.synthetic(self.eval_n, seed, dims, bits))
            }
            _ => self.load_train(dims, bits),
        }
    }
}

pub fn check_dims(data: &Dataset, dims: (usize, usize, usize), bits: u32) -> Result<()> {
    if (data.height, data.width, data.channels) != dims || data.bits != bits {
        return Err(Error::config(format!(
            "dataset holds {}x{}x{} images at {} bits but the model expects {}x{}x{} at {bits}",
            data.height, data.width, data.channels, data.bits, dims.0, dims.1, dims.2
        )));
    }
    if data.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    Ok(())
}
