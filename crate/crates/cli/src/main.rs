use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowvae::image::{write_grid, Image};
use flowvae::model::Model;
use flowvae::numerics::{Dtype, Real, Tensor};
use flowvae::probe::{extract_features, probe_features, ProbeConfig, ProbeReport, Representation};
use flowvae::training::{
    check_dims, evaluate_bpd, gaussian_baseline_bpd, make_synthetic_globals, peek_dtype, Dataset, RunConfig,
    SyntheticSpec, Trainer,
};
use flowvae::Error;

#[derive(Parser)]
#[command(
    name = "flowvae",
    version,
    about = "Train and inspect a VAE with an invertible flow decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and metrics.csv into --out.
    Train(TrainArgs),
    /// Mean negative ELBO of a dataset in bits per dimension.
    Eval(EvalArgs),
    /// Draw samples from the prior into an image grid.
    Sample(SampleArgs),
    /// Originals next to their reconstructions, one pair per row.
    Reconstruct(ReconstructArgs),
    /// Grid mixing the global code (rows) and local code (columns) of two images.
    Interpolate(InterpolateArgs),
    /// Exchange the global codes of two images.
    Switch(SwitchArgs),
    /// Linear classifier on frozen codes or raw pixels.
    Probe(ProbeArgs),
    /// Write a packed dataset file.
    MakeData(MakeDataArgs),
}

#[derive(Args)]
struct CkptArg {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Require the checkpoint to match the model section of this config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_updates: Option<u64>,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CkptArg,
    /// Packed dataset file or image directory; defaults to the held-out set
    /// of the checkpoint's data config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result file; defaults to `<ckpt>.eval.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    ckpt: CkptArg,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid columns; defaults to ceil(sqrt(n)).
    #[arg(long)]
    cols: Option<usize>,
    /// Output bit depth; defaults to the model's.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    ckpt: CkptArg,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairArgs {
    /// First image file.
    #[arg(long)]
    x1: PathBuf,
    /// Second image file.
    #[arg(long)]
    x2: PathBuf,
}

#[derive(Args)]
struct InterpolateArgs {
    #[command(flatten)]
    ckpt: CkptArg,
    #[command(flatten)]
    pair: PairArgs,
    /// Global-code weights, one grid row each.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    alphas: Vec<f64>,
    /// Local-code weights, one grid column each.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    betas: Vec<f64>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SwitchArgs {
    #[command(flatten)]
    ckpt: CkptArg,
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// Required unless --rep raw.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labelled dataset; defaults to the held-out set of the checkpoint's data config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "z")]
    rep: Representation,
    /// Seed of the train/test split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// CSV report; the text report goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    bits: u32,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Unlabelled uniformly random pixels instead of class templates.
    #[arg(long)]
    uniform: bool,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::DigestMismatch { .. } | Error::Shape(_) => 2,
        Error::NonFinite(_) | Error::Degenerate(_) | Error::Uninitialized(_) => 3,
        Error::Io(_) | Error::Format { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type Result<T> = flowvae::Result<T>;

/// Runs `$body` with `$t` bound to the checkpoint's trainer at its own
/// precision.
macro_rules! with_trainer {
    ($ckpt:expr, |$t:ident| $body:expr) => {{
        let ckpt: &CkptArg = $ckpt;
        let expected = match &ckpt.config {
            Some(p) => Some(RunConfig::load(p)?.model),
            None => None,
        };
        let bytes = fs::read(&ckpt.ckpt)?;
        match peek_dtype(&bytes)? {
            Dtype::F32 => {
                let $t = Trainer::<f32>::from_bytes(&bytes, expected.as_ref())?;
                $body
            }
            Dtype::F64 => {
                let $t = Trainer::<f64>::from_bytes(&bytes, expected.as_ref())?;
                $body
            }
        }
    }};
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => with_trainer!(&a.ckpt, |t| eval(&a, &t)),
        Command::Sample(a) => with_trainer!(&a.ckpt, |t| sample(&a, &t.model)),
        Command::Reconstruct(a) => with_trainer!(&a.ckpt, |t| reconstruct(&a, &t)),
        Command::Interpolate(a) => with_trainer!(&a.ckpt, |t| interpolate(&a, &t.model)),
        Command::Switch(a) => with_trainer!(&a.ckpt, |t| switch(&a, &t.model)),
        Command::Probe(a) => probe(a),
        Command::MakeData(a) => make_data(&a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    match &a.resume {
        Some(path) => {
            let bytes = fs::read(path)?;
            match peek_dtype(&bytes)? {
                Dtype::F32 => train_with(Trainer::<f32>::from_bytes(&bytes, None)?, &a),
                Dtype::F64 => train_with(Trainer::<f64>::from_bytes(&bytes, None)?, &a),
            }
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            match cfg.model.precision {
                Dtype::F32 => train_with(Trainer::<f32>::new(cfg)?, &a),
                Dtype::F64 => train_with(Trainer::<f64>::new(cfg)?, &a),
            }
        }
    }
}

fn train_with<T: Real>(mut t: Trainer<T>, a: &TrainArgs) -> Result<()> {
    if let Some(m) = a.max_updates {
        t.config.train.max_updates = m;
    }
    let cfg = t.config.clone();
    let (dims, bits) = (cfg.model.image(), cfg.model.bits);
    let data = cfg.data.load_train(dims, bits)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let quiet = a.quiet;
    t.run(&data, Some(&a.out), |r| {
        if !quiet && (r.update % 100 == 0 || r.update + 1 == cfg.train.max_updates) {
            eprintln!(
                "update {:>6}  loss {:10.3}  recon {:10.3}  kl {:8.3}  bpd {:.4}  lr {:.2e}",
                r.update, r.loss, r.recon, r.kl, r.bpd, r.lr
            );
        }
    })?;
    let eval = cfg.data.load_eval(dims, bits)?;
    let bpd = evaluate_bpd(&t.model, &eval, cfg.train.eval_batch, 0)?;
    let baseline = gaussian_baseline_bpd(&data, &eval)?;
    let summary = format!(
        "eval_bpd = {bpd:.6}\nbaseline_bpd = {baseline:.6}\nupdates = {}\n",
        t.update
    );
    fs::write(a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// `--data` (packed file or image directory) or the checkpoint's held-out set.
fn load_data(path: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    let (dims, bits) = (cfg.model.image(), cfg.model.bits);
    let data = match path {
        Some(p) if p.is_dir() => Dataset::read_dir(p)?,
        Some(p) => Dataset::read_packed(p)?,
        None => cfg.data.load_eval(dims, bits)?,
    };
    check_dims(&data, dims, bits)?;
    Ok(data)
}

fn eval<T: Real>(a: &EvalArgs, t: &Trainer<T>) -> Result<()> {
    let data = load_data(a.data.as_deref(), &t.config)?;
    let bpd = evaluate_bpd(&t.model, &data, t.config.train.eval_batch, a.seed)?;
    let line = format!("bpd = {bpd:.6}\nimages = {}\n", data.len());
    let out = a.out.clone().unwrap_or_else(|| a.ckpt.ckpt.with_extension("eval.txt"));
    fs::write(out, &line)?;
    print!("{line}");
    Ok(())
}

fn to_images<T: Real>(x: &Tensor<T>, bits: u32) -> Result<Vec<Image>> {
    x.unstack().iter().map(|im| Image::from_tensor(im, bits)).collect()
}

fn out_bits<T: Real>(bits: Option<u32>, model: &Model<T>) -> u32 {
    bits.unwrap_or(model.config().bits)
}

fn sample<T: Real>(a: &SampleArgs, model: &Model<T>) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x = model.sample_images(a.n, a.temperature, &mut rng)?;
    let cols = a.cols.unwrap_or_else(|| (a.n as f64).sqrt().ceil() as usize);
    write_grid(&to_images(&x, out_bits(a.bits, model))?, cols, &a.out)
}

fn dequantized<T: Real>(images: &[&[u8]], (h, w, c): (usize, usize, usize), bits: u32) -> Tensor<T> {
    let levels = f64::from(1u32 << bits);
    let flat: Vec<u8> = images.iter().flat_map(|im| im.iter().copied()).collect();
    Tensor::from_fn(&[images.len(), h, w, c], |i| {
        T::lit((f64::from(flat[i]) + 0.5) / levels)
    })
}

fn reconstruct<T: Real>(a: &ReconstructArgs, t: &Trainer<T>) -> Result<()> {
    let data = load_data(a.data.as_deref(), &t.config)?;
    let n = a.n.min(data.len());
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let cfg = t.model.config();
    let originals: Vec<&[u8]> = (0..n).map(|i| data.image(i)).collect();
    let x = dequantized::<T>(&originals, cfg.image(), cfg.bits);
    let recon = t.model.reconstruct(&x)?;
    let bits = out_bits(a.bits, &t.model);
    let mut tiles = Vec::with_capacity(2 * n);
    for (orig, rec) in x.unstack().iter().zip(recon.unstack()) {
        tiles.push(Image::from_tensor(orig, bits)?);
        tiles.push(Image::from_tensor(&rec, bits)?);
    }
    write_grid(&tiles, 2, &a.out)
}

fn load_pair<T: Real>(p: &PairArgs, model: &Model<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let cfg = model.config();
    let load = |path: &Path| -> Result<Tensor<T>> {
        let im = Image::load(path)?;
        if (im.height, im.width, im.channels, im.bits) != (cfg.height, cfg.width, cfg.channels, cfg.bits) {
            return Err(Error::Config(format!(
                "{} is {}x{}x{} at {} bits; the model expects {}x{}x{} at {}",
                path.display(),
                im.height,
                im.width,
                im.channels,
                im.bits,
                cfg.height,
                cfg.width,
                cfg.channels,
                cfg.bits
            )));
        }
        Ok(dequantized(&[&im.pixels], cfg.image(), cfg.bits))
    };
    Ok((load(&p.x1)?, load(&p.x2)?))
}

fn interpolate<T: Real>(a: &InterpolateArgs, model: &Model<T>) -> Result<()> {
    let (x1, x2) = load_pair(&a.pair, model)?;
    let grid = model.interpolate2d(&x1, &x2, &a.alphas, &a.betas)?;
    write_grid(&to_images(&grid, out_bits(a.bits, model))?, a.betas.len(), &a.out)
}

fn switch<T: Real>(a: &SwitchArgs, model: &Model<T>) -> Result<()> {
    let (x1, x2) = load_pair(&a.pair, model)?;
    let (s1, s2) = model.switch(&x1, &x2)?;
    let bits = out_bits(a.bits, model);
    let tiles = [&x1, &x2, &s1, &s2]
        .iter()
        .map(|t| Image::from_tensor(t, bits))
        .collect::<Result<Vec<_>>>()?;
    write_grid(&tiles, 2, &a.out)
}

fn report_probe<T: Real>(model: Option<&Model<T>>, data: &Dataset, a: &ProbeArgs) -> Result<ProbeReport> {
    let features = extract_features(model, data, a.rep)?;
    let cfg = ProbeConfig {
        l2: a.l2,
        epochs: a.epochs,
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    probe_features(&features, a.rep, &cfg)
}

fn probe(a: ProbeArgs) -> Result<()> {
    let report = match &a.ckpt {
        Some(path) => {
            let ckpt = CkptArg {
                ckpt: path.clone(),
                config: a.config.clone(),
            };
            with_trainer!(&ckpt, |t| {
                let data = load_data(a.data.as_deref(), &t.config)?;
                report_probe(Some(&t.model), &data, &a)?
            })
        }
        None if a.rep == Representation::Raw => {
            let path = a
                .data
                .as_deref()
                .ok_or_else(|| Error::Config("--data is required without --ckpt".into()))?;
            let data = if path.is_dir() {
                Dataset::read_dir(path)?
            } else {
                Dataset::read_packed(path)?
            };
            report_probe::<f32>(None, &data, &a)?
        }
        None => return Err(Error::Config(format!("--rep {} needs --ckpt", a.rep))),
    };
    print!("{report}");
    if let Some(out) = &a.out {
        fs::write(out, format!("{}\n{}\n", ProbeReport::CSV_HEADER, report.csv_row()))?;
    }
    Ok(())
}

fn make_data(a: &MakeDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n: a.n,
        height: a.size,
        width: a.size,
        channels: a.channels,
        bits: a.bits,
        classes: a.classes,
        noise: a.noise,
        seed: a.seed,
    };
    let data = if a.uniform {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let len = a.n * a.size * a.size * a.channels;
        let levels = 1u32 << a.bits.clamp(1, 8);
        let pixels = (0..len).map(|_| rng.random_range(0..levels) as u8).collect();
        Dataset::new((a.size, a.size, a.channels), a.bits, pixels, None)?
    } else {
        make_synthetic_globals(&spec)?
    };
    data.write_packed(&a.out)?;
    println!("wrote {} images to {}", data.len(), a.out.display());
    Ok(())
}
