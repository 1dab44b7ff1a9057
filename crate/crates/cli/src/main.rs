use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use obfnet::bench::{self, BenchError};
use obfnet::data::{self, DataError, Dataset, DatasetSplits, FixtureKind, Split};
use obfnet::metrics::{self, MetricsError};
use obfnet::model_io::{self, ModelIoError};
use obfnet::obfset::{self, SetGates};
use obfnet::protocol::{self, EdgeClient, EdgeConfig, EdgeMode, ProtocolError, ServerConfig};
use obfnet::train::{self, ConcatenatedModel, TrainConfig, TrainError};
use obfnet::zoo::{self, ArchName, ArchSpec, ZooError};
use obfnet_engine::Network;

#[derive(Parser)]
#[command(name = "obfnet", version, about = "Train, serve and measure obfuscation networks")]
struct Cli {
    /// Debug logging.
    #[arg(short, long, global = true)]
    verbose: bool,
    /// Warnings and errors only.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset preparation.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train an inference network or a set of obfuscation networks.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Test accuracy of a model, optionally behind an obfuscation network.
    Eval(EvalArgs),
    /// Run the inference backend.
    Serve(ServeArgs),
    /// Send samples to a backend, obfuscated or not.
    Edge(EdgeArgs),
    /// Per-sample inference time across batch sizes.
    Bench(BenchArgs),
    /// Obfuscation quality proxies and an image grid.
    Metrics(MetricsArgs),
    /// Parameter count, file size, checksum and transfer times of a model file.
    Modelinfo(ModelinfoArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Convert a dataset into the tensor cache format.
    Prepare(PrepareArgs),
}

#[derive(Subcommand)]
enum TrainCommand {
    Infnet(TrainInfnetArgs),
    ObfnetSet(TrainSetArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    /// Detect MNIST files or WAV recordings in --input.
    Auto,
    Mnist,
    Fsd,
    /// Separable Gaussian classes shaped like MNIST.
    SynthMnist,
    /// Synthetic tone recordings run through the full audio pipeline.
    SynthFsd,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum, default_value = "auto")]
    source: Source,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Classes for synthetic sources.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Samples per class for synthetic sources.
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOpts {
    /// Dataset cache, MNIST directory or WAV directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Train on only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            train_limit: self.train_limit,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainInfnetArgs {
    #[arg(long)]
    arch: ArchName,
    #[command(flatten)]
    opts: TrainOpts,
    /// Model file to write; reports go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSetArgs {
    #[arg(long)]
    arch: ArchName,
    /// Width of the first hidden layer.
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long)]
    infnet: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = SetGates::default().max_accuracy_drop)]
    max_drop: f64,
    #[arg(long, default_value_t = SetGates::default().min_distinctness)]
    min_distinct: f64,
    #[arg(long, default_value_t = SetGates::default().probe_size)]
    probe_size: usize,
    /// Exit with an error when the set fails a gate.
    #[arg(long)]
    strict: bool,
    /// Output directory for the members and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Obfuscation network placed in front of the model.
    #[arg(long)]
    obfnet: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7070")]
    bind: String,
    /// Largest accepted frame in bytes.
    #[arg(long, default_value_t = protocol::DEFAULT_MAX_FRAME)]
    max_frame: usize,
}

#[derive(Args)]
struct EdgeArgs {
    #[arg(long)]
    server: String,
    /// Obfuscation-network set directory.
    #[arg(long)]
    set: Option<PathBuf>,
    /// Send samples unobfuscated.
    #[arg(long)]
    opt_out: bool,
    /// Dataset directory (its test split is used) or an IDX image file.
    #[arg(long)]
    input: PathBuf,
    /// IDX label file for an IDX --input; guessed from the image file name.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    timeout_secs: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = bench::DEFAULT_RUNS)]
    runs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Obfuscation-network set directory.
    #[arg(long)]
    set: Option<PathBuf>,
    /// Individual obfuscation network files.
    #[arg(long)]
    obfnet: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    limit: Option<usize>,
    /// Samples shown in the image grid.
    #[arg(long, default_value_t = 10)]
    grid_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelinfoArgs {
    model: PathBuf,
    /// Link rates in bits per second.
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose {
        "debug"
    } else if cli.quiet {
        "warn"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_code(&e));
            ExitCode::from(1)
        }
    }
}

fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(e) = cause.downcast_ref::<ModelIoError>() {
            return e.code();
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::ModelIo(e) => e.code(),
                TrainError::Diverged { .. } => "diverged",
                TrainError::FrozenModified => "frozen-modified",
                TrainError::Config(_) | TrainError::Zoo(_) => "config",
                _ => "train",
            };
        }
        if let Some(e) = cause.downcast_ref::<ProtocolError>() {
            return match e {
                ProtocolError::Timeout => "timeout",
                ProtocolError::Server { .. } => "server",
                ProtocolError::EmptySet => "empty-set",
                _ => "protocol",
            };
        }
        if cause.is::<DataError>() {
            return "data";
        }
        if cause.is::<ZooError>() {
            return "config";
        }
        if cause.is::<MetricsError>() {
            return "metrics";
        }
        if cause.is::<BenchError>() {
            return "bench";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Data(DataCommand::Prepare(a)) => prepare(a),
        Command::Train(TrainCommand::Infnet(a)) => train_infnet(a),
        Command::Train(TrainCommand::ObfnetSet(a)) => train_set(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::Edge(a) => edge(a),
        Command::Bench(a) => run_bench(a),
        Command::Metrics(a) => run_metrics(a),
        Command::Modelinfo(a) => modelinfo(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<Network> {
    model_io::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_data(dir: &Path, seed: u64) -> Result<DatasetSplits> {
    data::load_dir(dir, seed).with_context(|| format!("loading data from {}", dir.display()))
}

/// `m.onet` -> `m.<suffix>` next to it.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let need_input = || a.input.clone().context("--input is required for this source");
    let splits = match a.source {
        Source::Auto => load_data(&need_input()?, a.seed)?,
        Source::Mnist => data::load_mnist(need_input()?)?,
        Source::Fsd => {
            let opts = data::FsdOptions {
                seed: a.seed,
                ..Default::default()
            };
            let (splits, report) = data::load_fsd(need_input()?, &opts)?;
            if !report.skipped.is_empty() {
                log::warn!("skipped {} files: {}", report.skipped.len(), report.skipped.join(", "));
            }
            splits
        }
        Source::SynthMnist => data::synth_splits(FixtureKind::MnistLike, a.classes, a.per_class, a.seed),
        Source::SynthFsd => {
            let wav_dir = a.out.join("wav");
            data::write_synth_wavs(&wav_dir, a.classes, a.per_class, a.seed, 8000)?;
            let opts = data::FsdOptions {
                seed: a.seed,
                ..Default::default()
            };
            data::load_fsd(&wav_dir, &opts)?.0
        }
    };
    data::save_splits(&splits, &a.out)?;
    for s in Split::ALL {
        let d = splits.get(s);
        println!("{s} = {} samples of {:?}", d.len(), d.sample_shape());
    }
    println!("classes = {}", splits.num_classes());
    Ok(())
}

fn train_infnet(a: TrainInfnetArgs) -> Result<()> {
    let data = load_data(&a.opts.data, a.opts.seed)?;
    let mut arch = ArchSpec::new(a.arch);
    arch.input_shape = data.sample_shape().to_vec();
    let (net, report) = train::train_infnet(&arch, &data, &a.opts.config())?;
    let bytes = model_io::encode(&net)?;
    let size = bytes.len() as u64;
    write(&a.out, bytes)?;
    write(&sibling(&a.out, "epochs.csv"), report.to_csv())?;
    let mut text = String::new();
    writeln!(text, "arch = {}", a.arch)?;
    writeln!(text, "seed = {}", a.opts.seed)?;
    writeln!(text, "params = {}", net.param_count())?;
    writeln!(text, "file_bytes = {size}")?;
    writeln!(text, "checksum = {}", model_io::file_checksum(&a.out)?)?;
    writeln!(text, "best_epoch = {}", report.best_epoch)?;
    writeln!(text, "best_val_accuracy = {:.6}", report.best_val_accuracy)?;
    writeln!(text, "test_accuracy = {:.6}", report.test_accuracy)?;
    write(&sibling(&a.out, "report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn train_set(a: TrainSetArgs) -> Result<()> {
    let infnet = load_model(&a.infnet)?;
    let data = load_data(&a.opts.data, a.opts.seed)?;
    let mut arch = ArchSpec::new(a.arch).with_hidden_width(a.hidden);
    arch.input_shape = infnet.input_shape().to_vec();
    let gates = SetGates {
        max_accuracy_drop: a.max_drop,
        min_distinctness: a.min_distinct,
        probe_size: a.probe_size,
    };
    let set = obfset::generate_obfnet_set(&arch, &infnet, &data, &a.opts.config(), a.count, &gates)?;
    obfset::save_set(&set, &a.out)?;
    let m = &set.manifest;
    let mut csv = String::from("index,seed,file,checksum,val_accuracy,test_accuracy,accuracy_drop,status\n");
    for (i, e) in m.entries.iter().enumerate() {
        writeln!(
            csv,
            "{i},{},{},{},{:.6},{:.6},{:.6},{}",
            e.seed,
            e.file,
            e.checksum,
            e.val_accuracy,
            e.test_accuracy,
            e.accuracy_drop,
            e.status.as_str()
        )?;
    }
    write(&a.out.join("members.csv"), &csv)?;
    let problems = m.problems();
    let mut text = String::new();
    writeln!(text, "arch = {}", m.arch)?;
    writeln!(text, "members = {}", m.entries.len())?;
    writeln!(text, "usable = {}", set.usable().len())?;
    writeln!(text, "raw_test_accuracy = {:.6}", m.raw_test_accuracy)?;
    writeln!(text, "min_pairwise_distinctness = {:.6}", m.min_pairwise_distinctness)?;
    for p in &problems {
        writeln!(text, "problem = {p}")?;
    }
    write(&a.out.join("report.txt"), &text)?;
    print!("{text}");
    if a.strict && !problems.is_empty() {
        bail!("set failed {} gate(s): {}", problems.len(), problems.join("; "));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_data(&a.data, a.seed)?;
    let ds = data.get(a.split);
    let ev = match &a.obfnet {
        Some(p) => train::evaluate(&ConcatenatedModel::new(load_model(p)?, model)?, ds)?,
        None => train::evaluate(&model, ds)?,
    };
    let mut text = String::new();
    writeln!(text, "split = {}", a.split)?;
    writeln!(text, "obfuscated = {}", a.obfnet.is_some())?;
    writeln!(text, "correct = {}", ev.correct)?;
    writeln!(text, "total = {}", ev.total)?;
    writeln!(text, "accuracy = {:.6}", ev.accuracy)?;
    if let Some(out) = &a.out {
        write(&out.join("eval.txt"), &text)?;
        let mut csv = String::from("true\\predicted");
        for c in 0..ev.confusion.first().map_or(0, Vec::len) {
            write!(csv, ",{c}")?;
        }
        csv.push('\n');
        for (t, row) in ev.confusion.iter().enumerate() {
            write!(csv, "{t}")?;
            for v in row {
                write!(csv, ",{v}")?;
            }
            csv.push('\n');
        }
        write(&out.join("confusion.csv"), csv)?;
    }
    print!("{text}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let handle = protocol::serve(model, a.bind.as_str(), ServerConfig { max_frame: a.max_frame })
        .with_context(|| format!("binding {}", a.bind))?;
    println!("listening on {}", handle.local_addr());
    std::io::stdout().flush()?;
    handle.wait();
    Ok(())
}

/// Samples and, when known, labels from a dataset directory or IDX file.
fn edge_input(a: &EdgeArgs) -> Result<(Dataset, bool)> {
    if a.input.is_dir() {
        return Ok((load_data(&a.input, a.seed)?.test, true));
    }
    let images = data::load_idx_images(&a.input)?;
    let guessed = a.input.to_str().and_then(|s| {
        s.contains("images-idx3")
            .then(|| PathBuf::from(s.replace("images-idx3", "labels-idx1")))
    });
    let labels = match a.labels.clone().or(guessed).filter(|p| p.is_file()) {
        Some(p) => Some(data::load_idx_labels(p)?),
        None => None,
    };
    let known = labels.is_some();
    let labels = labels.unwrap_or_else(|| vec![0; images.batch_size()]);
    Ok((Dataset::new(images, labels, 10, Split::Test)?, known))
}

fn edge(a: EdgeArgs) -> Result<()> {
    let (mut ds, labelled) = edge_input(&a)?;
    if let Some(n) = a.limit {
        if n == 0 {
            bail!("--limit must be positive");
        }
        ds = ds.take(n);
    }
    let mode = if a.opt_out { EdgeMode::OptOut } else { EdgeMode::OptIn };
    if mode == EdgeMode::OptIn && a.set.is_none() {
        bail!("opt-in mode needs --set (or pass --opt-out)");
    }
    let cfg = EdgeConfig {
        server: a.server.clone(),
        set_dir: a.set.clone(),
        mode,
        seed: a.seed,
        timeout: Duration::from_secs_f64(a.timeout_secs),
    };
    let mut client = EdgeClient::connect(&cfg).with_context(|| format!("connecting to {}", a.server))?;
    let shape = ds.sample_shape().to_vec();
    let mut csv = String::from("index,label,predicted,obfnet\n");
    let mut predicted = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let r = client.infer(&shape, ds.samples.sample(i))?;
        let used = r.obfnet.map_or(String::new(), |k| k.to_string());
        let label = if labelled { ds.labels[i].to_string() } else { String::new() };
        writeln!(csv, "{i},{label},{},{used}", r.label)?;
        predicted.push(r.label);
    }
    let mut text = String::new();
    writeln!(text, "mode = {}", if a.opt_out { "opt-out" } else { "opt-in" })?;
    writeln!(text, "samples = {}", ds.len())?;
    if labelled {
        let ev = train::score(&predicted, &ds.labels, ds.num_classes)?;
        writeln!(text, "correct = {}", ev.correct)?;
        writeln!(text, "accuracy = {:.6}", ev.accuracy)?;
    }
    if let Some(out) = &a.out {
        write(&out.join("edge.txt"), &text)?;
        write(&out.join("predictions.csv"), csv)?;
    }
    print!("{text}");
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let rows = bench::bench_model(&model, &a.batch_sizes, a.runs)?;
    let csv = bench::to_csv(&rows);
    if let Some(out) = &a.out {
        write(&out.join("bench.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn run_metrics(a: MetricsArgs) -> Result<()> {
    let mut nets = Vec::new();
    if let Some(dir) = &a.set {
        let set = obfset::load_set(dir)?;
        nets.extend(set.usable().into_iter().cloned());
    }
    for p in &a.obfnet {
        nets.push(load_model(p)?);
    }
    if nets.is_empty() {
        bail!("give --set or at least one --obfnet");
    }
    let data = load_data(&a.data, a.seed)?;
    let mut ds = data.get(a.split).clone();
    if let Some(n) = a.limit.filter(|&n| n > 0) {
        ds = ds.take(n);
    }
    let refs: Vec<&Network> = nets.iter().collect();
    let report = metrics::obfuscation_report(&refs, &ds.samples)?;
    write(&a.out.join("metrics.txt"), report.to_text())?;
    write(&a.out.join("metrics.json"), report.to_json())?;
    if a.grid_samples > 0 {
        let grid = ds.take(a.grid_samples).samples;
        match metrics::dump_obfuscated_grid(&refs, &grid, a.out.join("grid.pgm")) {
            Ok((w, h)) => log::info!("wrote {w}x{h} grid"),
            Err(MetricsError::NotImage(shape)) => log::warn!("no grid for non-image samples {shape:?}"),
            Err(e) => return Err(e.into()),
        }
    }
    print!("{}", report.to_text());
    Ok(())
}

fn modelinfo(a: ModelinfoArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let size = fs::metadata(&a.model)?.len();
    let counts = zoo::count_params(&model);
    println!("name = {}", model.name());
    println!("layers = {}", model.len());
    println!("input_shape = {:?}", model.input_shape());
    println!("output_shape = {:?}", model.output_shape());
    println!("params = {}", counts.params);
    println!("total_values = {}", counts.total);
    println!("file_bytes = {size}");
    println!("sha256 = {}", model_io::file_checksum(&a.model)?);
    for rate in &a.rates {
        let t = model_io::transfer_time(size as f64, *rate)?;
        println!("transfer_seconds@{rate} = {t:.6}");
    }
    Ok(())
}
