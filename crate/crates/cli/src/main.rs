//! `dmst`: train, verify, and analyse the toy DMST classifier.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 divergence or checkpoint/config mismatch.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmst_core::analysis::{doubling_ratio, membership_maps, profile_peak, rate_curve, write_membership_maps, ProfileOp};
use dmst_core::model::{
    generate_synthetic, load_image_dir, metrics_csv, nearest_subspace_accuracy, patchify, train_with, Checkpoint,
    Dataset, EpochMetrics, Model, RunConfig, Split, Tensor,
};
use dmst_core::pgm::PgmImage;
use dmst_core::sparsify::{ActivationKind, SparsityAxis};
use dmst_core::verify::{run_suite, Suite};
use dmst_core::Error;

const CHECKPOINT_FILE: &str = "checkpoint.dmst";
const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "dmst", version, about = "Decoupled membership-subspace attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy classifier; writes a checkpoint and metrics.csv.
    Train(TrainArgs),
    /// Run an invariant suite: all, rates, sparsify, gradients, equivalence.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer variational compression rate of a checkpoint, as `layer,rate` CSV.
    Rates {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `synthetic` or a directory of `<class>/*.pgm` images.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Export per-head membership maps at one layer as PGM images plus JSON.
    Membership {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `.pgm` image, a `.csv` of token rows, or `synthetic:<index>`.
        #[arg(long)]
        input: String,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Peak counted activation floats of one attention layer per token count.
    Profile {
        /// mhsa, tssa, or dmsa.
        #[arg(long)]
        op: ProfileOp,
        /// Comma-separated token counts.
        #[arg(long, value_delimiter = ',', required = true)]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Train one sparsity-axis/activation variant and append a results row.
    Ablate {
        /// token, head, or both.
        #[arg(long)]
        axis: SparsityAxis,
        /// st, sigmoid, relu, or gelu.
        #[arg(long)]
        activation: ActivationKind,
        #[arg(long, default_value = "ablation.csv")]
        results: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Flat `key = value` configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic` or a directory of `<class>/*.pgm` images.
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "DMST_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn mismatch(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Mismatch(_) | Error::Diverged(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Verify { suite, seed } => cmd_verify(suite, seed),
        Command::Rates {
            checkpoint,
            data,
            samples,
            csv,
        } => cmd_rates(&checkpoint, &data, samples, &csv),
        Command::Membership {
            checkpoint,
            input,
            layer,
            out,
        } => cmd_membership(&checkpoint, &input, layer, &out),
        Command::Profile {
            op,
            tokens,
            dim,
            heads,
            csv,
        } => cmd_profile(op, &tokens, dim, heads, &csv),
        Command::Ablate {
            axis,
            activation,
            results,
            train,
        } => cmd_ablate(axis, activation, &results, &train),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(source: &str, cfg: &RunConfig) -> Result<Dataset, Failure> {
    if source == "synthetic" {
        let data = generate_synthetic(&cfg.data, cfg.seed())?;
        let (_, test) = data.holdout_split(cfg.train.holdout);
        let all: Vec<usize> = (0..data.len()).collect();
        let oracle = nearest_subspace_accuracy(&data, if test.is_empty() { &all } else { &test })?;
        log::info!("synthetic data: {} samples, nearest-subspace accuracy {oracle:.4}", data.len());
        Ok(data)
    } else {
        let dir = Path::new(source);
        if !dir.is_dir() {
            return Err(Failure::usage(format!("data source '{source}' is neither 'synthetic' nor a directory")));
        }
        let (data, classes) = load_image_dir(dir, &cfg.model)?;
        log::info!("{}: {} images in {} classes", dir.display(), data.len(), classes.len());
        Ok(data)
    }
}

fn run_training(cfg: &RunConfig, data: &Dataset) -> Result<(Model, Vec<EpochMetrics>), Failure> {
    let outcome = train_with(cfg, data, |m| {
        if let [.., train, test] = m {
            if test.split == Split::Test {
                log::info!(
                    "epoch {:>3}  train loss {:.4} acc {:.3}  test loss {:.4} acc {:.3}",
                    test.epoch,
                    train.loss,
                    train.accuracy,
                    test.loss,
                    test.accuracy
                );
            }
        }
        true
    })?;
    Ok((outcome.model, outcome.metrics))
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let cfg = load_config(args)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let data = load_data(&args.data, &cfg)?;
    let (model, metrics) = run_training(&cfg, &data)?;
    fs::create_dir_all(&out).map_err(|e| Failure::usage(format!("cannot create {}: {e}", out.display())))?;
    Checkpoint::from_model(&cfg, &model).save(out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(METRICS_FILE), metrics_csv(&metrics)).map_err(Error::from)?;
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(Error::from)?;
    println!("wrote {} and {}", out.join(CHECKPOINT_FILE).display(), out.join(METRICS_FILE).display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: Suite, seed: u64) -> CmdResult {
    let report = run_suite(suite, seed);
    print!("{}", report.render());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model), Failure> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::usage(format!("cannot read checkpoint {}: {io}", path.display())),
        other => Failure::mismatch(format!("{}: {other}", path.display())),
    })?;
    let model = ckpt.to_model()?;
    Ok((ckpt.config, model))
}

fn cmd_rates(checkpoint: &Path, data: &str, samples: usize, csv: &Path) -> CmdResult {
    if samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    let (cfg, model) = load_checkpoint(checkpoint)?;
    let data = load_data(data, &cfg)?;
    data.check_compatible(&cfg.model)?;
    // held-out samples first, then training samples if more are requested
    let (train, test) = data.holdout_split(cfg.train.holdout);
    let order: Vec<usize> = test.into_iter().chain(train).collect();
    if samples > order.len() {
        return Err(Failure::usage(format!("requested {samples} samples, dataset has {}", order.len())));
    }
    let inputs: Vec<&Tensor> = order[..samples].iter().map(|&i| &data.samples[i].tokens).collect();
    let curve = rate_curve(&model, &inputs)?;
    write_file(csv, &curve.to_csv())?;
    print!("{}", curve.to_csv());
    println!("non-increasing layer pairs: {:.3}", curve.non_increasing_fraction());
    Ok(ExitCode::SUCCESS)
}

fn read_input(input: &str, cfg: &RunConfig) -> Result<Tensor, Failure> {
    let m = &cfg.model;
    if let Some(idx) = input.strip_prefix("synthetic:") {
        let idx: usize = idx
            .parse()
            .map_err(|_| Failure::usage(format!("bad sample index in '{input}'")))?;
        let data = generate_synthetic(&cfg.data, cfg.seed())?;
        let sample = data
            .samples
            .get(idx)
            .ok_or_else(|| Failure::usage(format!("sample {idx} out of range ({} samples)", data.len())))?;
        return Ok(sample.tokens.clone());
    }
    let path = Path::new(input);
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => {
            let img = PgmImage::read(path)?;
            if img.width != m.image_size || img.height != m.image_size {
                return Err(Failure::mismatch(format!(
                    "{input} is {}x{}, model expects {}x{}",
                    img.width, img.height, m.image_size, m.image_size
                )));
            }
            Ok(patchify(&img.normalized(), m.image_size, m.patch_size)?)
        }
        Some("csv") => {
            let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {input}: {e}")))?;
            let mut values = Vec::new();
            let mut rows = 0;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                for field in line.split(',') {
                    let v: f64 = field
                        .trim()
                        .parse()
                        .map_err(|_| Failure::usage(format!("{input}: '{}' is not a number", field.trim())))?;
                    values.push(v);
                }
                rows += 1;
            }
            if rows == 0 || values.len() % rows != 0 {
                return Err(Failure::usage(format!("{input}: rows must all have the same length")));
            }
            Ok(Tensor::from_vec(rows, values.len() / rows, values)?)
        }
        _ => Err(Failure::usage(format!(
            "input '{input}' must be a .pgm, a .csv, or synthetic:<index>"
        ))),
    }
}

fn cmd_membership(checkpoint: &Path, input: &str, layer: usize, out: &Path) -> CmdResult {
    let (cfg, model) = load_checkpoint(checkpoint)?;
    if layer >= cfg.model.depth {
        return Err(Failure::usage(format!(
            "layer {layer} out of range (model has {} layers)",
            cfg.model.depth
        )));
    }
    let tokens = read_input(input, &cfg)?;
    if tokens.rows() != cfg.model.tokens() || tokens.cols() != cfg.model.token_dim {
        return Err(Failure::mismatch(format!(
            "input has {}x{} tokens, model expects {}x{}",
            tokens.rows(),
            tokens.cols(),
            cfg.model.tokens(),
            cfg.model.token_dim
        )));
    }
    let maps = membership_maps(&model, &tokens, layer)?;
    write_membership_maps(&maps, out)?;
    println!("wrote {} head maps to {}", maps.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(op: ProfileOp, tokens: &[usize], dim: usize, heads: usize, csv: &Path) -> CmdResult {
    if tokens.is_empty() {
        return Err(Failure::usage("--tokens needs at least one value"));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Failure::usage(format!("--dim {dim} must be a positive multiple of --heads {heads}")));
    }
    let mut rows = Vec::with_capacity(tokens.len());
    for &n in tokens {
        let peak = profile_peak(op, n, dim, heads, 0)?;
        rows.push((n, peak));
    }
    let mut text = String::from("op,tokens,peak_floats\n");
    for (n, peak) in &rows {
        let _ = writeln!(text, "{op},{n},{peak}");
    }
    write_file(csv, &text)?;
    print!("{text}");
    for w in rows.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.0 > a.0 {
            println!(
                "{op}: per-doubling growth {} -> {}: {:.3}",
                a.0,
                b.0,
                doubling_ratio(a.0, a.1, b.0, b.1)
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Name of the variant in the ablation tables.
fn variant_name(axis: SparsityAxis) -> &'static str {
    match axis {
        SparsityAxis::Token => "TPUSA",
        SparsityAxis::Head => "DMSA",
        SparsityAxis::Both => "TPSUSA",
    }
}

const ABLATION_HEADER: &str = "variant,axis,activation,seed,epochs,train_accuracy,test_accuracy,test_loss";

fn cmd_ablate(axis: SparsityAxis, activation: ActivationKind, results: &Path, args: &TrainArgs) -> CmdResult {
    let mut cfg = load_config(args)?;
    cfg.model.sparsity_axis = axis;
    cfg.model.activation = activation;
    cfg.validate()?;
    let data = load_data(&args.data, &cfg)?;
    let (model, metrics) = run_training(&cfg, &data)?;
    let last = |split: Split| metrics.iter().rev().find(|m| m.split == split).copied();
    let train = last(Split::Train);
    let test = last(Split::Test);
    let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    let row = format!(
        "{},{axis},{activation},{},{},{},{},{}",
        variant_name(axis),
        cfg.seed(),
        cfg.train.epochs,
        fmt(train.map(|m| m.accuracy)),
        fmt(test.map(|m| m.accuracy)),
        fmt(test.map(|m| m.loss)),
    );
    let fresh = fs::metadata(results).map(|m| m.len() == 0).unwrap_or(true);
    if let Some(parent) = results.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(results)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", results.display())))?;
    if fresh {
        writeln!(file, "{ABLATION_HEADER}").map_err(Error::from)?;
    }
    writeln!(file, "{row}").map_err(Error::from)?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(Error::from)?;
        Checkpoint::from_model(&cfg, &model).save(out.join(CHECKPOINT_FILE))?;
        fs::write(out.join(METRICS_FILE), metrics_csv(&metrics)).map_err(Error::from)?;
    }
    println!("{row}");
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    fs::write(path, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}
