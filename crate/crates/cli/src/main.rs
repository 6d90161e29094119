//! `pemd`: data generation, training, evaluation and metric benchmarks.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, config, files),
//! 2 a check ran and failed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pemd::config::{apply_method, describe_keys, RunConfig, METHODS};
use pemd::eval::{correlation_bench, emit_results, evaluate_report, parse_results_csv, results_csv, EvalReport};
use pemd::gradcheck::{full_suite, REL_TOL};
use pemd::mcd::{train, write_history};
use pemd::synth::{generate_datasets, Datasets};
use pemd::{ArchConfig, TwinRegistrationModel};

/// File names written by `train`.
const CHECKPOINT_FILE: &str = "model.pmdl";
const HISTORY_FILE: &str = "history.csv";
const CONFIG_FILE: &str = "config.txt";
const LOG_FILE: &str = "run.log";
const EVAL_FILE: &str = "eval.csv";

#[derive(Parser)]
#[command(name = "pemd", version, about = "Patch displacement classification with classifier-discrepancy domain adaptation", after_help = describe_keys())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set iterations=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test dataset files for both domains.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train one model and write its checkpoint, history and resolved config.
    Train {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(METHODS))]
        method: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory written by `gen-data` (overrides `data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on the four domain pairings of a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate p-EMD, SWD and diffusion distance with the exact 2D EMD.
    BenchMetrics {
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every finite-difference gradient suite.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Collect `eval.csv` files below a directory into one CSV and SVG.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_svg: PathBuf,
    },
}

enum Failure {
    Invalid(String),
    Check(String),
}

impl From<pemd::Error> for Failure {
    fn from(e: pemd::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Invalid(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn resolve(overrides: &Overrides) -> Result<RunConfig, Failure> {
    let config = match &overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut pairs = Vec::with_capacity(overrides.set.len());
    for item in &overrides.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::Invalid(format!("--set expects KEY=VALUE, got {item:?}")))?;
        pairs.push((k.trim(), v.trim()));
    }
    Ok(config.set_many(&pairs)?)
}

fn gen_data(seed: u64, out: &Path, overrides: &Overrides) -> Outcome {
    let config = resolve(overrides)?.set("data_seed", &seed.to_string())?;
    let data = generate_datasets(seed, &config.data)?;
    data.save(out)?;
    write_file(&out.join(CONFIG_FILE), &config.resolved())?;
    println!("wrote {} + {} pairs per domain to {}", data.a_train.len(), data.a_test.len(), out.display());
    Ok(())
}

fn load_or_generate(config: &RunConfig) -> Result<Datasets, Failure> {
    match &config.data_dir {
        Some(dir) => Ok(Datasets::load(dir)?),
        None => Ok(generate_datasets(config.data_seed, &config.data)?),
    }
}

fn run_train(method: &str, out: &Path, data: Option<&Path>, seed: Option<u64>, overrides: &Overrides) -> Outcome {
    let started = Instant::now();
    let mut config = apply_method(&resolve(overrides)?, method)?;
    if let Some(dir) = data {
        config = config.set("data_dir", &dir.display().to_string())?;
    }
    if let Some(s) = seed {
        config = config.set("seed", &s.to_string())?;
    }
    let data = load_or_generate(&config)?;
    let n = data.a_train.len();
    if config.probe_size >= n {
        return Err(Failure::Invalid(format!("probe_size {} leaves no source pairs out of {n}", config.probe_size)));
    }
    let source = data.a_train.slice(0..n - config.probe_size);
    let probe = data.a_train.slice(n - config.probe_size..n);
    let (model, history) = train(&config.train, &ArchConfig::default(), &source, &data.b_train, &probe)?;

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    model.save(&out.join(CHECKPOINT_FILE))?;
    write_history(&history, &out.join(HISTORY_FILE))?;
    write_file(&out.join(CONFIG_FILE), &format!("# method: {method}\n{}", config.resolved()))?;
    let last = history.last().expect("at least one iteration");
    let elapsed = started.elapsed().as_secs_f64();
    write_file(&out.join(LOG_FILE), &format!("method {method}\nseed {}\nwall_seconds {elapsed:.3}\n", config.train.seed))?;
    println!(
        "{method} seed {}: {} iterations, final source loss {:.4}, probe accuracy {:.3}/{:.3}",
        config.train.seed,
        history.len(),
        last.loss_src,
        last.acc_probe_head1,
        last.acc_probe_head2
    );
    if history.iter().any(|h| !h.is_finite()) {
        return Err(Failure::Check("training history contains non-finite values".into()));
    }
    Ok(())
}

/// Method, seed and digest of the resolved config written next to a checkpoint.
fn run_identity(model: &Path) -> Result<(String, u64, u64), Failure> {
    let path = model.with_file_name(CONFIG_FILE);
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(("model".into(), 0, 0));
    };
    let method = text
        .lines()
        .find_map(|l| l.strip_prefix("# method: "))
        .unwrap_or("model")
        .to_string();
    let config = RunConfig::parse(&text, &path.display().to_string())?;
    Ok((method, config.train.seed, config.digest()))
}

fn run_eval(model_path: &Path, data_dir: &Path, out: &Path) -> Outcome {
    let model = TwinRegistrationModel::load(&ArchConfig::default(), model_path)?;
    let data = Datasets::load(data_dir)?;
    let (method, seed, digest) = run_identity(model_path)?;
    let report = evaluate_report(&model, &data, &method, seed, digest)?;
    write_file(out, &results_csv(std::slice::from_ref(&report)))?;
    println!(
        "{method} seed {seed}: AA {:.4} BA {:.4} AB {:.4} BB {:.4} XMEAN {:.4}",
        report.accuracies[0],
        report.accuracies[1],
        report.accuracies[2],
        report.accuracies[3],
        report.cross_mean()
    );
    Ok(())
}

/// Thresholds checked by `bench-metrics`: (metric, minimum Pearson r).
const BENCH_FLOORS: [(&str, f64); 2] = [("pemd16", 0.98), ("pemd2", 0.95)];

fn bench_metrics(pairs: usize, seed: u64, out: &Path) -> Outcome {
    let table = correlation_bench(pairs, seed)?;
    write_file(out, &table.to_csv(false))?;
    print!("{}", table.to_csv(true));
    let mut failed = Vec::new();
    for (metric, floor) in BENCH_FLOORS {
        match table.row(metric).and_then(|r| r.pearson) {
            Some(r) if r >= floor => {}
            r => failed.push(format!("{metric} r = {r:?} < {floor}")),
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join("; ")))
    }
}

fn grad_check(points: usize, seed: u64) -> Outcome {
    let results = full_suite(points, seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:<28} points {:>3} max rel err {:.3e}", r.name, r.points, r.max_rel_err);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient checks exceed {REL_TOL:e}")));
    }
    Ok(())
}

fn find_eval_files(dir: &Path, found: &mut Vec<PathBuf>) -> Outcome {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_eval_files(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == EVAL_FILE) {
            found.push(p);
        }
    }
    Ok(())
}

fn report(runs: &Path, out_csv: &Path, out_svg: &Path) -> Outcome {
    let mut files = Vec::new();
    find_eval_files(runs, &mut files)?;
    if files.is_empty() {
        return Err(Failure::Invalid(format!("no {EVAL_FILE} files below {}", runs.display())));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| io_err(f, e))?;
        reports.extend(parse_results_csv(&text, f)?);
    }
    emit_results(&reports, out_csv, out_svg)?;
    println!("{} runs -> {} and {}", reports.len(), out_csv.display(), out_svg.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::GenData { seed, out, overrides } => gen_data(*seed, out, overrides),
        Command::Train { method, out, data, seed, overrides } => {
            run_train(method, out, data.as_deref(), *seed, overrides)
        }
        Command::Eval { model, data, out } => run_eval(model, data, out),
        Command::BenchMetrics { pairs, seed, out } => bench_metrics(*pairs, *seed, out),
        Command::GradCheck { points, seed } => grad_check(*points, *seed),
        Command::Report { runs, out_csv, out_svg } => report(runs, out_csv, out_svg),
    };
    let _ = std::io::stdout().flush();
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}
