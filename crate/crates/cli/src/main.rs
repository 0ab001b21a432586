use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stlab::data::{gen_batch, write_jsonl, Split, TaskKind};
use stlab::masking::MaskMode;
use stlab::numerics::Precision;
use stlab::trainer::ablation::{grid, row_stats, run_grid, Table};
use stlab::trainer::config::parse_mask_mode;
use stlab::trainer::metrics::{evaluate_run, train_to_dir, CONFIG_FILE};
use stlab::trainer::{InputMode, RunConfig};
use stlab::verify;

#[derive(Parser)]
#[command(name = "stlab", version, about = "Spatial-temporal token modeling on synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate a finished run directory.
    Eval(EvalArgs),
    /// Train every row of an ablation table under several seeds.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of the full network.
    Gradcheck(GradcheckArgs),
    /// Dump generated tasks as JSON lines.
    GenData(GenDataArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Any,
}

/// Settings shared by `train` and `ablate`; each overrides the config file.
#[derive(Args)]
struct Overrides {
    /// JSON run config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Training frame count.
    #[arg(long)]
    frames: Option<usize>,
    /// meanpool, joint-st or global-local[:variant[:local_frames]].
    #[arg(long, value_parser = parse_input_mode)]
    input_mode: Option<InputMode>,
    /// off, static:RHO, normal:SIGMA or uniform:LOW:HIGH.
    #[arg(long, value_parser = parse_mask)]
    mask_mode: Option<MaskMode>,
    #[arg(long, value_enum)]
    mvm: Option<Switch>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn parse_input_mode(s: &str) -> std::result::Result<InputMode, String> {
    s.parse().map_err(|e: stlab::Error| e.to_string())
}

fn parse_mask(s: &str) -> std::result::Result<MaskMode, String> {
    parse_mask_mode(s).map_err(|e| e.to_string())
}

fn parse_table(s: &str) -> std::result::Result<Table, String> {
    s.parse().map_err(|e: stlab::Error| e.to_string())
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    s.parse().map_err(|e: stlab::Error| e.to_string())
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(t) = self.frames {
            if cfg.eval_frames == [cfg.train_frames] {
                cfg.eval_frames = vec![t];
            }
            cfg.train_frames = t;
        }
        if let Some(m) = self.input_mode {
            cfg.input_mode = m;
        }
        if let Some(m) = self.mask_mode {
            cfg.mask_mode = m;
        }
        if let Some(s) = self.mvm {
            cfg.mvm = matches!(s, Switch::On);
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for config, metrics, summary and checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing run in the output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Frame counts to evaluate at, comma separated; the run's own by default.
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    /// Also write the results as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// 5, 7, 8 or fig5.
    #[arg(long, value_parser = parse_table)]
    table: Table,
    #[arg(long)]
    out: PathBuf,
    /// Seeds per row, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Runs trained at the same time.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameters sampled for the check.
    #[arg(long, default_value_t = 60)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "reversal", value_parser = parse_task)]
    task: TaskKind,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    frame_size: usize,
    #[arg(long, value_enum, default_value = "any")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let summary = train_to_dir(&cfg, &args.out, args.force)?;
    println!("config {} -> {}", summary.config_hash, args.out.display());
    println!("l_llm {:.4} l_mvm {:.4}", summary.l_llm, summary.l_mvm);
    for (t, acc) in &summary.accuracy {
        println!("accuracy at {t} frames: {acc:.4}");
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    if !args.run.join(CONFIG_FILE).exists() {
        bail!("{} holds no {CONFIG_FILE}", args.run.display());
    }
    let frames = (!args.frames.is_empty()).then_some(args.frames.as_slice());
    let (cfg, acc) = evaluate_run(&args.run, frames)?;
    for (t, a) in &acc {
        println!("accuracy at {t} frames: {a:.4}");
    }
    if let Some(out) = args.out {
        let doc = serde_json::json!({ "config_hash": cfg.hash(), "accuracy": acc });
        std::fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let table = args.table;
    let mut base = args.overrides.resolve()?;
    if table == Table::GlobalLocal && args.overrides.frames.is_none() {
        base.train_frames = 32;
        base.eval_frames = vec![32];
    }
    let cells = grid(table, &base);
    std::fs::create_dir_all(&args.out)?;
    base.save(&args.out.join("base_config.json"))?;
    let results = run_grid(&cells, &args.seeds, &args.out, args.jobs, args.force)?;
    for s in row_stats(&results) {
        let cols: Vec<String> = s
            .mean
            .iter()
            .map(|(t, m)| format!("T={t} {m:.4}±{:.4}", s.std[t]))
            .collect();
        println!("{:<20} {}", s.row, cols.join("  "));
    }
    println!("summary: {}", args.out.join("summary.csv").display());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let (report, len, _) = verify::network_gradcheck(args.seed, args.samples)?;
    println!(
        "max relative error {:.3e} (max absolute {:.3e}) over {} parameters, sequence length {len}",
        report.max_relative_error, report.max_absolute_error, report.checked
    );
    let ok = report.passes(args.tolerance);
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let kind = args.task;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
        SplitArg::Any => Split::Any,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let tasks = gen_batch(kind, args.count, args.frames, args.frame_size, split, &mut rng)?;
    let mut out = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    write_jsonl(&mut out, &tasks)?;
    out.flush()?;
    println!("{} {} tasks -> {}", tasks.len(), kind.name(), args.out.display());
    Ok(())
}

fn verify_all(args: VerifyArgs) -> bool {
    let checks = verify::run_suite(args.seed);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} invariants hold", checks.len() - failed, checks.len());
    failed == 0
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Ablate(a) => ablate(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Verify(a) => Ok(verify_all(a)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
