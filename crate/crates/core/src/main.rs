use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qghc::audit::{
    compare_table1, count_analytic, enumerate_params, enumerate_stack, format_comparison, format_comparison_csv,
    table1_rows,
};
use qghc::cam::{sample_cam, CSV_HEADER};
use qghc::checkpoint::{self, check_vocab};
use qghc::config::RunConfig;
use qghc::data::{Dataset, Family};
use qghc::error::{Error, Result};
use qghc::format::{read_file, write_file};
use qghc::model::{Head, Model};
use qghc::params::ParamStore;
use qghc::train::{evaluate, fit, LOG_HEADER};
use qghc::{gradsuite, par};

/// Question-guided hybrid convolution on a synthetic VQA task.
#[derive(Parser)]
#[command(name = "qghc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a QVD1 dataset.
    GenData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a QCK1 checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset evaluated after each epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of qghc, naive, full, group, concat, blind.
        #[arg(long)]
        variant: Option<String>,
        /// Question-guided attention pooling instead of global averaging.
        #[arg(long)]
        attention: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// CSV log, appended to (header written when new).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Parameter inventory by QD/QI role.
    AuditParams {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        /// Compare against the published ablation table instead.
        #[arg(long)]
        table1: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference gradient checks in 64-bit arithmetic.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Activation map of one sample as a PGM, with a CSV sidecar.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("{}", line.trim_start_matches("error: ").trim());
            return ExitCode::from(2);
        }
    };
    if let Some(n) = std::env::var("QGHC_THREADS").ok().and_then(|v| v.parse().ok()) {
        par::cap_threads(n);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData { seed, count, out } => gen_data(seed, count, &out)?,
        Command::Train {
            data,
            val,
            config,
            variant,
            attention,
            seed,
            epochs,
            out,
            log,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(v) = &variant {
                cfg.model.set_variant(v)?;
            }
            if attention {
                cfg.model.head = Head::Attention;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            train(&cfg, &data, val.as_deref(), &out, log.as_deref())?;
        }
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data)?,
        Command::AuditParams {
            config,
            variant,
            table1,
            csv,
        } => audit(config.as_deref(), variant.as_deref(), table1, csv)?,
        Command::GradCheck { seed, tol } => return grad_check(seed, tol),
        Command::Cam {
            checkpoint,
            data,
            index,
            out,
        } => cam(&checkpoint, &data, index, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let bytes = read_file(p)?;
            let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", p.display())))?;
            RunConfig::parse(&text)
        }
    }
}

fn gen_data(seed: u64, count: usize, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    let data = Dataset::generate(seed, count);
    data.save(out)?;
    println!("wrote {count} samples to {}", out.display());
    println!("answer,count");
    for (a, n) in data.vocab.answers.iter().zip(data.answer_histogram()) {
        println!("{a},{n}");
    }
    println!("blind_optimal_accuracy={:.6}", data.blind_optimal_accuracy());
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, val: Option<&Path>, out: &Path, log: Option<&Path>) -> Result<()> {
    let train_data = Dataset::load(data)?;
    let val_data = val.map(Dataset::load).transpose()?;
    if let Some(v) = &val_data {
        check_vocab(&train_data.vocab, &v.vocab)?;
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab = train_data.vocab.words.len();
    model_cfg.answers = train_data.vocab.answers.len();
    let mut store = ParamStore::<f32>::new(cfg.train.seed);
    let model = Model::declare(&mut store, &model_cfg)?;
    let mut log_file = match log {
        None => None,
        Some(p) => {
            let fresh = std::fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            }
            Some((p, f))
        }
    };
    let mut log_error = None;
    println!("{LOG_HEADER}");
    let trained = fit(model, store, &train_data, val_data.as_ref(), &cfg.train, |m| {
        let row = m.csv_row();
        println!("{row}");
        if let Some((p, f)) = &mut log_file {
            if let Err(e) = writeln!(f, "{row}") {
                log_error.get_or_insert(Error::io(*p, e));
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(e);
    }
    checkpoint::save(out, &trained.model.config, &train_data.vocab, &trained.store)?;
    if let Some(e) = &trained.final_eval {
        print_families(e.accuracy, |f| e.family_accuracy(f));
    }
    println!("wrote checkpoint {}", out.display());
    Ok(())
}

fn print_families(overall: f64, family: impl Fn(Family) -> f64) {
    println!("accuracy={overall:.6}");
    for f in Family::ALL {
        println!("accuracy.{}={:.6}", f.name(), family(f));
    }
}

fn eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let ck = checkpoint::load(checkpoint)?;
    let data = Dataset::load(data)?;
    check_vocab(&ck.vocab, &data.vocab)?;
    let e = evaluate(&ck.model, &ck.store, &data)?;
    println!("samples={}", e.total);
    print_families(e.accuracy, |f| e.family_accuracy(f));
    Ok(())
}

fn audit(config: Option<&Path>, variant: Option<&str>, table1: bool, csv: bool) -> Result<()> {
    if table1 {
        let rows = compare_table1(&table1_rows())?;
        print!(
            "{}",
            if csv {
                format_comparison_csv(&rows)
            } else {
                format_comparison(&rows)
            }
        );
        return Ok(());
    }
    let mut cfg = load_config(config)?;
    if let Some(v) = variant {
        cfg.model.set_variant(v)?;
    }
    let mut store = ParamStore::<f32>::new_abstract();
    Model::declare(&mut store, &cfg.model)?;
    let whole = enumerate_params(&store, &format!("model ({})", variant.unwrap_or("configured")))?;
    if csv {
        print!("{}", whole.to_csv());
        return Ok(());
    }
    print!("{}", whole.to_text());
    if cfg.model.fusion.uses_stack() {
        let analytic = count_analytic(&cfg.model.qghc, cfg.model.kind)?;
        let enumerated = enumerate_stack(&cfg.model.qghc, cfg.model.kind)?;
        print!("{}", analytic.to_text());
        let same = analytic.totals == enumerated.totals;
        println!("stack analytic == enumerated: {}", if same { "yes" } else { "NO" });
        if !same {
            return Err(Error::Audit("analytic and enumerated counts differ".into()));
        }
    }
    Ok(())
}

fn grad_check(seed: u64, tol: f64) -> Result<ExitCode> {
    let checks = gradsuite::run(seed, tol)?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "pass" } else { "FAIL" };
        println!("{:<24} {status}  max_rel_err={:.3e}", c.name, c.report.max_rel_err);
        if !c.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed at tol {tol:e}", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check failed: {}", failed.join(","));
        Ok(ExitCode::from(1))
    }
}

fn cam(checkpoint: &Path, data: &Path, index: usize, out: &Path) -> Result<()> {
    let ck = checkpoint::load(checkpoint)?;
    let data = Dataset::load(data)?;
    check_vocab(&ck.vocab, &data.vocab)?;
    let c = sample_cam(&ck.model, &ck.store, &data, index)?;
    write_file(out, &c.pgm())?;
    let sidecar = out.with_extension("csv");
    write_file(&sidecar, format!("{CSV_HEADER}\n{}\n", c.csv_row(&data)).as_bytes())?;
    println!("wrote {} and {}", out.display(), sidecar.display());
    Ok(())
}
