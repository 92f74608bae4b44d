use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use serde::Deserialize;

use pgtnet::error::{Error, Result};
use pgtnet::eval::{no_enhance, AnyModel, EvalTable};
use pgtnet::imgproc::SsimConfig;
use pgtnet::model::{build, ScalingPolicy, Variant};
use pgtnet::pgm;
use pgtnet::quant::{calibrate, QuantMode, QuantSpec, QuantizedModel};
use pgtnet::seed;
use pgtnet::synth::{write_dataset, Dataset, DatasetSpec, NoiseParams, RidgeParams};
use pgtnet::tensor::{stack_batch, Scalar};
use pgtnet::train::{
    ablate_scaling, train_to_dir, write_csv, Precision, TraceRow, TrainConfig, TrainObserver,
    TrainingSet,
};

#[derive(Parser)]
#[command(
    name = "pgtnet",
    version,
    about = "Wet fingerprint denoising with a progressive guided multi-task network"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Command-specific configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a train/val/test dataset of noisy, clean and binary triplets.
    SynthData(SynthArgs),
    /// Train a model; writes weights, checkpoints and the loss trace.
    Train(TrainArgs),
    /// Test-split metrics of models against the no-enhance baseline.
    Eval(EvalArgs),
    /// Denoise one PGM image.
    Denoise(DenoiseArgs),
    /// Quantize a model to dynamic fixed point.
    Quantize(QuantizeArgs),
    /// Describe a model file or a freshly built graph.
    InspectModel(InspectArgs),
    /// Train under the proposed and two all-positive residual scalings and compare traces.
    AblateScaling(TrainArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 64)]
    n_val: usize,
    #[arg(long, default_value_t = 64)]
    n_test: usize,
    #[arg(long, default_value_t = 36)]
    height: usize,
    #[arg(long, default_value_t = 176)]
    width: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest (overrides the config).
    #[arg(long)]
    dataset: Option<String>,
    /// Extra `key=value` config overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Weight files, quantized models or checkpoints.
    models: Vec<PathBuf>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Also write the binary-branch map here.
    #[arg(long)]
    emit_binary: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 8)]
    bits: u8,
    #[arg(long, default_value = "weight_only")]
    mode: QuantMode,
    /// Dataset whose training split supplies calibration inputs (activation mode).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    calibration_samples: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// Model file; omit to inspect a fresh build.
    model: Option<PathBuf>,
    #[arg(long, default_value = "block84_multitask")]
    variant: Variant,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long, default_value = "proposed")]
    policy: ScalingPolicy,
}

/// Optional `--config` for `synth-data`: JSON with `noise` and/or `ridge` objects.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    noise: Option<NoiseParams>,
    ridge: Option<RidgeParams>,
}

fn need_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--out is required".into()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let out = need_out(cli)?;
    let cfg: SynthConfig = match &cli.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SynthConfig::default(),
    };
    let mut spec = DatasetSpec::new(a.n_train, a.n_val, a.n_test, cli.seed.unwrap_or(0));
    spec.height = a.height;
    spec.width = a.width;
    spec.noise = cfg.noise.unwrap_or_default();
    spec.ridge = cfg.ridge.unwrap_or_default();
    let m = write_dataset(out, &spec, a.force)?;
    println!(
        "wrote {} triplets ({} train / {} val / {} test) of {}x{} to {}",
        m.len(),
        a.n_train,
        a.n_val,
        a.n_test,
        a.width,
        a.height,
        out.display()
    );
    Ok(())
}

fn train_config(cli: &Cli, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k, v)?;
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(row: &TraceRow) {
    if row.step == 1 || row.step % 50 == 0 {
        eprintln!(
            "step {:>6}  phase {}  loss {:.6}",
            row.step, row.phase, row.loss_total
        );
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let out = need_out(cli)?;
    let cfg = train_config(cli, a)?;
    let art = train_to_dir(&cfg, out, progress)?;
    let last = art.rows.last().map_or(f64::NAN, |r| r.loss_total);
    println!(
        "trained {} steps, final loss {last:.6}; weights {}, trace {}",
        art.rows.len(),
        art.weights.display(),
        art.trace.display()
    );
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ds = Dataset::open(&a.dataset)?;
    let samples = ds.load_split(&a.split)?;
    let cfg = SsimConfig::default();
    let mut table = EvalTable::new(no_enhance(&samples, &cfg)?);
    for path in &a.models {
        let model = AnyModel::read(path)?;
        let label = path.file_stem().map_or_else(
            || path.display().to_string(),
            |s| s.to_string_lossy().into(),
        );
        table.push(label, model.evaluate(&samples, &cfg)?);
    }
    print!("{}", table.to_text());
    if let Some(out) = &cli.out {
        write(out, table.to_csv())?;
    }
    Ok(())
}

fn denoise(cli: &Cli, a: &DenoiseArgs) -> Result<()> {
    let out = need_out(cli)?;
    let model = AnyModel::read(&a.model)?;
    let d = model.denoise(&pgm::read(&a.input)?)?;
    pgm::write(out, &d.image)?;
    if let Some(bp) = &a.emit_binary {
        let b = d.binary.ok_or_else(|| {
            Error::InvalidArgument(format!("{} has no binary branch", model.graph().variant))
        })?;
        pgm::write(bp, &b)?;
    }
    Ok(())
}

fn quantize(cli: &Cli, a: &QuantizeArgs) -> Result<()> {
    let out = need_out(cli)?;
    let spec = QuantSpec::new(a.bits, a.mode)?;
    let net = match AnyModel::read(&a.model)? {
        AnyModel::F32(n) => n.cast::<f64>(),
        AnyModel::F64(n) => n,
        AnyModel::Quantized(_) => {
            return Err(Error::InvalidArgument("model is already quantized".into()))
        }
    };
    let calibration = match (spec.mode, &a.dataset) {
        (QuantMode::WeightOnly, _) => None,
        (QuantMode::WeightAndActivations, None) => {
            return Err(Error::InvalidArgument(
                "activation mode needs --dataset for calibration".into(),
            ))
        }
        (QuantMode::WeightAndActivations, Some(d)) => {
            let train = Dataset::open(d)?.load_split("train")?;
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut seed::derived_rng(
                cli.seed.unwrap_or(0),
                "calibration",
                0,
            ));
            idx.truncate(a.calibration_samples.max(1));
            let batch = stack_batch(
                &idx.iter()
                    .map(|&i| train[i].noisy.to_tensor::<f64>())
                    .collect::<Vec<_>>(),
            )?;
            Some(calibrate(&net, &[batch])?)
        }
    };
    let q = QuantizedModel::quantize(&net, spec, calibration)?;
    write(out, q.to_bytes()?)?;
    print!("{}", q.size_report().to_text());
    Ok(())
}

fn inspect(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let (graph, dtype) = match &a.model {
        Some(p) => {
            let m = AnyModel::read(p)?;
            let dtype = match &m {
                AnyModel::F32(_) => "f32".to_string(),
                AnyModel::F64(_) => "f64".to_string(),
                AnyModel::Quantized(q) => {
                    format!("{}-bit fixed point ({})", q.spec.bit_width, q.spec.mode)
                }
            };
            (m.graph().clone(), dtype)
        }
        None => (
            build(
                a.variant,
                a.policy,
                a.channels.unwrap_or(a.variant.default_channels()),
            )?,
            "unweighted build".to_string(),
        ),
    };
    let text = format!("storage: {dtype}\n{}", graph.describe());
    match &cli.out {
        Some(o) => write(o, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

struct AblationProgress(String);

impl<T: Scalar> TrainObserver<T> for AblationProgress {
    fn on_step(&mut self, row: &TraceRow) {
        if row.step == 1 || row.step % 50 == 0 {
            eprintln!(
                "[{}] step {:>6}  loss {:.6}",
                self.0, row.step, row.loss_total
            );
        }
    }
}

fn ablate_with<T: Scalar>(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let train = Dataset::open(&cfg.dataset)?.load_split("train")?;
    let data = TrainingSet::<T>::from_triplets(&train)?;
    let ab = ablate_scaling(cfg, &data, |p| Box::new(AblationProgress(p.slug())))?;
    for r in &ab.runs {
        write(
            &out.join(format!("trace_{}.csv", r.trace.label)),
            write_csv(&r.trace.rows),
        )?;
        println!(
            "{:<24} epsilon in [{:+.2}, {:+.2}]",
            r.trace.label, r.epsilon_range.0, r.epsilon_range.1
        );
    }
    write(&out.join("comparison.csv"), ab.comparison.to_csv())?;
    write(&out.join("comparison.txt"), ab.comparison.to_text())?;
    print!("{}", ab.comparison.to_text());
    Ok(())
}

fn ablate(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let out = need_out(cli)?;
    let cfg = train_config(cli, a)?;
    if cfg.dataset.is_empty() {
        return Err(Error::Config("no dataset given".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.txt"), cfg.to_text())?;
    match cfg.precision {
        Precision::F32 => ablate_with::<f32>(&cfg, out),
        Precision::F64 => ablate_with::<f64>(&cfg, out),
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Denoise(a) => denoise(cli, a),
        Command::Quantize(a) => quantize(cli, a),
        Command::InspectModel(a) => inspect(cli, a),
        Command::AblateScaling(a) => ablate(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
