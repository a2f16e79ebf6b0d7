use anyhow::{bail, Context, Result};
use ccnn::circuit::ResetMode;
use ccnn::data::{read_dataset, read_packed, DatasetKind, PackedSequence, SyndromeSequence};
use ccnn::harness::evaluate::{evaluate, ParityDecoder};
use ccnn::harness::fit::{fit_fidelity_with_ci, fit_powerlaw, fit_powerlaw_free, pseudothreshold, FidelityPoint, FidelitySeries};
use ccnn::harness::generate::{generate, generate_to_file, GenerateConfig, Lengths};
use ccnn::harness::train::{CheckpointPaths, TrainConfig, Trainer};
use ccnn::harness::LookupDecoder;
use ccnn::net::Checkpoint;
use ccnn::par::Execution;
use ccnn::sim::Engine;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Color-code flag-qubit simulation and neural decoding.
#[derive(Parser)]
#[command(name = "ccnn", version)]
struct Cli {
    /// Run everything serially; outputs are then bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate syndrome sequences and write a dataset file.
    Generate(GenerateArgs),
    /// Train a decoder network, keeping the checkpoint with the best validation rate.
    Train(TrainArgs),
    /// Decode a test dataset and write the fidelity decay as CSV.
    Evaluate(EvaluateArgs),
    /// Fit the logical error rate to a fidelity-decay CSV.
    Fit(FitArgs),
    /// Evaluate and fit over a grid of physical error rates.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResetArg {
    Reset,
    NoReset,
}

impl From<ResetArg> for ResetMode {
    fn from(r: ResetArg) -> Self {
        match r {
            ResetArg::Reset => ResetMode::Reset,
            ResetArg::NoReset => ResetMode::NoReset,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Frame,
    Tableau,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 3)]
    distance: usize,
    #[arg(long)]
    p_error: f64,
    #[arg(long)]
    count: u64,
    #[arg(long, default_value_t = 1)]
    t_min: usize,
    #[arg(long, default_value_t = 40)]
    t_max: usize,
    #[arg(long, value_enum, default_value = "train")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "reset")]
    reset_mode: ResetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Both engines give identical records; the Pauli-frame one is much faster.
    #[arg(long, value_enum, default_value = "frame")]
    engine: EngineArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file of training settings; unset keys take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point for the settings: d3, d3-full, d5 or d7.
    #[arg(long, default_value = "d3")]
    preset: String,
    /// Training dataset; generated from the settings when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation dataset; generated from the settings when omitted.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Best checkpoint. The latest state goes beside it with a `.last` suffix.
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Continue from the `.last` checkpoint if there is one.
    #[arg(long)]
    resume: bool,
    /// Override the epoch budget.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Append one JSON line per epoch here as well as to stderr.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DecoderArgs {
    /// Network checkpoint.
    #[arg(long, required_unless_present = "lookup", conflicts_with = "lookup")]
    checkpoint: Option<PathBuf>,
    /// Use the d=3 single-fault lookup decoder instead of a network.
    #[arg(long)]
    lookup: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    decoder: DecoderArgs,
    /// Test-style dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    /// Evaluate at fewer than this many evenly spaced cycles.
    #[arg(long, default_value_t = 50)]
    max_points: usize,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    in_csv: PathBuf,
    /// Fix the offset t0 to zero.
    #[arg(long)]
    fix_t0: bool,
    #[arg(long, default_value_t = 200)]
    n_boot: usize,
    /// JSON result; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    decoder: DecoderArgs,
    #[arg(long, default_value_t = 3)]
    distance: usize,
    /// Comma-separated physical error rates.
    #[arg(long, value_delimiter = ',', required = true)]
    p_grid: Vec<f64>,
    /// Test sequences per rate.
    #[arg(long, default_value_t = 1000)]
    count: u64,
    /// Test sequence length in cycles.
    #[arg(long, default_value_t = 200)]
    t_max: usize,
    #[arg(long, value_enum, default_value = "reset")]
    reset_mode: ResetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    max_points: usize,
    #[arg(long)]
    fix_t0: bool,
    /// Fidelity curves for every rate: columns p_phys, t, F, err, n.
    #[arg(long)]
    out_series: PathBuf,
    /// One row per rate: p_phys, eps_L, CI bounds, eps per cycle.
    #[arg(long)]
    out: PathBuf,
}

enum Decoder {
    Net(Box<Checkpoint>),
    Lookup(LookupDecoder),
}

impl Decoder {
    fn load(args: &DecoderArgs, reset_mode: ResetMode, distance: usize) -> Result<Self> {
        if args.lookup {
            if distance != 3 {
                bail!("the lookup decoder exists for distance 3 only");
            }
            return Ok(Decoder::Lookup(LookupDecoder::build(reset_mode)?));
        }
        let path = args.checkpoint.as_ref().expect("clap enforces one of the two");
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        if ck.meta.distance != distance {
            bail!("checkpoint is for distance {}, data for distance {distance}", ck.meta.distance);
        }
        Ok(Decoder::Net(Box::new(ck)))
    }

    fn evaluate(&self, test: &[SyndromeSequence], max_points: usize, exec: Execution) -> Result<FidelitySeries> {
        fn run<D: ParityDecoder>(d: &D, test: &[SyndromeSequence], m: usize, exec: Execution) -> Result<FidelitySeries> {
            Ok(evaluate(d, test, m, exec)?)
        }
        match self {
            Decoder::Net(ck) => run(&ck.params, test, max_points, exec),
            Decoder::Lookup(l) => run(l, test, max_points, exec),
        }
    }
}

fn series_csv(series: &FidelitySeries) -> String {
    let mut s = String::from("t,F,err,n\n");
    for p in &series.points {
        writeln!(s, "{},{},{},{}", p.t, p.fidelity, p.err, p.n_samples).unwrap();
    }
    s
}

fn parse_series_csv(text: &str) -> Result<FidelitySeries> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().context("empty CSV")?.split(',').map(str::trim).collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (t, f) = (col("t").context("missing column t")?, col("F").context("missing column F")?);
    let (err, n) = (col("err"), col("n"));
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |c: usize| -> Result<f64> {
            let cell = cells.get(c).with_context(|| format!("row {}: too few columns", i + 1))?;
            cell.parse().with_context(|| format!("row {}: bad number {cell:?}", i + 1))
        };
        points.push(FidelityPoint {
            t: num(t)?,
            fidelity: num(f)?,
            err: err.map(num).transpose()?.unwrap_or(0.0),
            n_samples: n.map(num).transpose()?.unwrap_or(0.0) as usize,
        });
    }
    Ok(FidelitySeries { points })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(a: GenerateArgs, exec: Execution) -> Result<()> {
    let cfg = GenerateConfig {
        distance: a.distance,
        p_error: a.p_error,
        count: a.count,
        lengths: Lengths::Uniform { min: a.t_min, max: a.t_max },
        kind: match a.mode {
            Mode::Train => DatasetKind::Train,
            Mode::Test => DatasetKind::Test,
        },
        reset_mode: a.reset_mode.into(),
        seed: a.seed,
        engine: match a.engine {
            EngineArg::Frame => Engine::Frame,
            EngineArg::Tableau => Engine::Tableau,
        },
    };
    let header = generate_to_file(&cfg, &a.out, exec)?;
    println!("{}", serde_json::to_string(&header)?);
    Ok(())
}

fn load_or_generate(path: Option<&Path>, cfg: &GenerateConfig, exec: Execution) -> Result<Vec<SyndromeSequence>> {
    match path {
        Some(p) => Ok(read_dataset(p).with_context(|| format!("reading {}", p.display()))?.records),
        None => Ok(generate(cfg, exec)?.1),
    }
}

fn cmd_train(a: TrainArgs, deterministic: bool) -> Result<()> {
    let mut cfg = TrainConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        // Keys in the file override the preset.
        let mut merged: toml::Table = toml::from_str(&cfg.to_toml())?;
        merged.extend(toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", path.display()))?);
        cfg = TrainConfig::from_toml(&toml::to_string(&merged)?)?;
    }
    if let Some(n) = a.max_epochs {
        cfg.max_epochs = n;
    }
    cfg.deterministic |= deterministic;
    cfg.validate()?;
    let exec = cfg.execution();

    let train: Vec<PackedSequence> = match &a.data {
        Some(p) => read_packed(p).with_context(|| format!("reading {}", p.display()))?.1,
        None => generate(&cfg.training_data(), exec)?.1.iter().map(PackedSequence::from).collect(),
    };
    let val = load_or_generate(a.val.as_deref(), &cfg.validation_data(), exec)?;
    eprintln!("{} training and {} validation sequences", train.len(), val.len());

    let paths = CheckpointPaths::beside(&a.out_checkpoint);
    let mut trainer = if a.resume && paths.last.exists() {
        let state = Checkpoint::load(&paths.last)?;
        let best = if paths.best.exists() { Some(Checkpoint::load(&paths.best)?) } else { None };
        eprintln!("resuming at epoch {}", state.meta.epoch);
        Trainer::resume(cfg, &train, &val, state, best)?
    } else {
        Trainer::new(cfg, &train, &val)?
    };
    let mut log = match &a.log {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p).with_context(|| format!("opening {}", p.display()))?),
        None => None,
    };
    trainer.run(Some(&paths), |l| {
        let line = serde_json::to_string(l).expect("log serializes");
        eprintln!("{line}");
        if let Some(f) = log.as_mut() {
            // A failed log write should not kill a long run.
            let _ = writeln!(f, "{line}").and_then(|_| f.flush());
        }
    })?;
    let best = trainer.best.as_ref().map(|b| (b.meta.epoch, b.meta.validation_eps));
    println!("{}", serde_json::json!({ "best_epoch": best.map(|b| b.0), "validation_eps": best.and_then(|b| b.1) }));
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, exec: Execution) -> Result<()> {
    let ds = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let decoder = Decoder::load(&a.decoder, ds.header.reset_mode, ds.header.distance)?;
    let series = decoder.evaluate(&ds.records, a.max_points, exec)?;
    write_file(&a.out_csv, &series_csv(&series))
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.in_csv).with_context(|| format!("reading {}", a.in_csv.display()))?;
    let series = parse_series_csv(&text)?;
    let n_boot = if series.points.iter().all(|p| p.n_samples > 0) { a.n_boot } else { 0 };
    let fit = fit_fidelity_with_ci(&series, a.fix_t0, n_boot, 0)?;
    let json = serde_json::to_string_pretty(&fit)?;
    match &a.out {
        Some(p) => write_file(p, &json),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn cmd_sweep(a: SweepArgs, exec: Execution) -> Result<()> {
    let reset_mode: ResetMode = a.reset_mode.into();
    let decoder = Decoder::load(&a.decoder, reset_mode, a.distance)?;
    let mut series_out = String::from("p_phys,t,F,err,n\n");
    let mut summary = String::from("p_phys,eps_L,ci_low,ci_high,eps_L_cycle,t0\n");
    let mut rates = Vec::new();
    for (k, &p) in a.p_grid.iter().enumerate() {
        let cfg = GenerateConfig {
            distance: a.distance,
            p_error: p,
            count: a.count,
            lengths: Lengths::Uniform { min: a.t_max, max: a.t_max },
            kind: DatasetKind::Test,
            reset_mode,
            seed: a.seed.wrapping_add(k as u64),
            engine: Engine::Frame,
        };
        let test = generate(&cfg, exec)?.1;
        let series = decoder.evaluate(&test, a.max_points, exec)?;
        for pt in &series.points {
            writeln!(series_out, "{p},{},{},{},{}", pt.t, pt.fidelity, pt.err, pt.n_samples)?;
        }
        let fit = fit_fidelity_with_ci(&series, a.fix_t0, 200, a.seed ^ k as u64)?;
        let (lo, hi) = fit.ci.unwrap_or((f64::NAN, f64::NAN));
        writeln!(summary, "{p},{},{lo},{hi},{},{}", fit.epsilon_l, fit.epsilon_cycle, fit.t0)?;
        eprintln!("p = {p:e}: eps_L = {:.4e} per step [{lo:.3e}, {hi:.3e}]", fit.epsilon_l);
        if fit.epsilon_l > 0.0 {
            rates.push((p, fit.epsilon_l));
        }
    }
    write_file(&a.out_series, &series_out)?;
    write_file(&a.out, &summary)?;
    if rates.len() >= 2 {
        let pl = fit_powerlaw(&rates, a.distance)?;
        let (slope, _) = fit_powerlaw_free(&rates)?;
        println!(
            "{}",
            serde_json::json!({ "c_d": pl.c_d, "exponent": pl.exponent, "epsilon_pseudo": pseudothreshold(pl.c_d, a.distance)?, "free_slope": slope })
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = Execution::from_flag(cli.deterministic);
    match cli.command {
        Command::Generate(a) => cmd_generate(a, exec),
        Command::Train(a) => cmd_train(a, cli.deterministic),
        Command::Evaluate(a) => cmd_evaluate(a, exec),
        Command::Fit(a) => cmd_fit(a),
        Command::Sweep(a) => cmd_sweep(a, exec),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
        eprintln!("{}", serde_json::json!({ "error": chain.join(": ") }));
        std::process::exit(1);
    }
}
