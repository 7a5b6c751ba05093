mod settings;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sesrec::analysis::{self, SweepParam, Variant};
use sesrec::data::write_events;
use sesrec::evaluator::{self, write_user_csv};
use sesrec::trainer::{self, config_hash_warning, load_checkpoint, save_checkpoint, write_history_csv};
use sesrec::{generate_synthetic, Corpus, EvalCase, SesRec};
use settings::{Settings, EVENTS_FILE};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

#[derive(Parser)]
#[command(name = "sesrec", version, about = "Search-enhanced sequential recommendation")]
struct Cli {
    /// Overrides the `seed` config key
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic event log to a directory
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log, defaults to `<out>.history.csv`
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rank sampled candidates and report HIT/NDCG/MRR
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Per-user CSV output
        #[arg(long)]
        users: Option<PathBuf>,
    },
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Validation,
    Test,
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analyze {
    /// Per-user JS divergence of selected sub-sequences
    Js {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        src: Source,
    },
    /// Query/clicked-item cosine summaries for models trained with and without alignment
    Cosine {
        #[arg(long = "with")]
        with_ali: PathBuf,
        #[arg(long = "without")]
        without_ali: PathBuf,
        #[command(flatten)]
        src: Source,
    },
    /// Selected positions and scores per test user
    Dump {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        src: Source,
    },
    /// One training run per value of alpha, beta or threshold_strategy
    Sweep {
        param: String,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        /// Run each value in its own process
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        src: Source,
    },
    /// Base, +L_ali, +L_con, +MIE
    Ablation {
        #[arg(long)]
        parallel: bool,
        #[arg(long, hide = true)]
        variant: Option<String>,
        #[command(flatten)]
        src: Source,
    },
    /// Text histogram of one numeric CSV column
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        column: String,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        min: Option<f64>,
        #[arg(long)]
        max: Option<f64>,
    },
}

fn emit<T: Serialize>(rows: &[T], format: Format, out: Option<&Path>) -> anyhow::Result<()> {
    let text = match format {
        Format::Json => serde_json::to_string_pretty(rows)? + "\n",
        Format::Csv => analysis::csv_string(rows)?,
    };
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print_out(&text)?,
    }
    Ok(())
}

/// Writes to stdout; a closed pipe ends output quietly.
fn print_out(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_model(ckpt: &Path, settings: &Settings, corpus: &Corpus) -> anyhow::Result<SesRec> {
    let cp = load_checkpoint(ckpt)?;
    let expected = settings.model_config(corpus)?;
    if cp.model.config.vocab != expected.vocab {
        return Err(sesrec::Error::Data(format!("{} was trained on a different vocabulary than this data", ckpt.display())).into());
    }
    if let Some(w) = config_hash_warning(&cp.meta, &expected) {
        log::warn!("{w}");
    }
    Ok(cp.model)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (seed, format) = (cli.seed, cli.format);
    match cli.command {
        Cmd::GenerateData { config, out } => {
            let s = Settings::load(config.as_deref(), seed)?;
            let data = generate_synthetic(&s.synth, s.seed())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_events(&out.join(EVENTS_FILE), &data.records)?;
            std::fs::write(out.join("profiles.json"), serde_json::to_string_pretty(&data.profiles)?)?;
            log::info!("{} records, measured overlap {:.3}", data.records.len(), data.measured_overlap());
        }
        Cmd::Train { config, data, out, log } => {
            let s = Settings::load(config.as_deref(), seed)?;
            let corpus = s.corpus(&data)?;
            let model_cfg = s.model_config(&corpus)?;
            let outcome = trainer::train(&corpus, &model_cfg, &s.train, |_| {})?;
            save_checkpoint(&out, &outcome.model, Some(&outcome.adam), outcome.best_epoch, outcome.best_metric)?;
            let log_path = log.unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", out.display())));
            write_history_csv(&log_path, &outcome.history)?;
            log::info!("best epoch {} with validation NDCG@10 {:.5}", outcome.best_epoch, outcome.best_metric);
        }
        Cmd::Evaluate { ckpt, data, config, split, users } => {
            let s = Settings::load(config.as_deref(), seed)?;
            let corpus = s.corpus(&data)?;
            let model = load_model(&ckpt, &s, &corpus)?;
            let cases: &[EvalCase] = match split {
                Split::Test => &corpus.test,
                Split::Validation => &corpus.validation,
            };
            let report = evaluator::evaluate(&model, &corpus, cases)?;
            if let Some(p) = users {
                write_user_csv(&p, &report.users)?;
            }
            match format {
                Format::Json => print_out(&(serde_json::to_string_pretty(&report.metrics)? + "\n"))?,
                Format::Csv => emit(&[report.metrics], format, None)?,
            }
        }
        Cmd::Analyze(a) => analyze(a, seed, format)?,
    }
    Ok(())
}

fn analyze(a: Analyze, seed: Option<u64>, format: Format) -> anyhow::Result<()> {
    match a {
        Analyze::Js { ckpt, src } => {
            let s = Settings::load(src.config.as_deref(), seed)?;
            let corpus = s.corpus(&src.data)?;
            let model = load_model(&ckpt, &s, &corpus)?;
            let report = analysis::disentanglement_report(&model, &corpus, &corpus.test)?;
            log::info!(
                "{} users, {} skipped; mean D_JS similar {:.4}, dissimilar {:.4}; similar < dissimilar for {:.1}%",
                report.rows.len(),
                report.skipped,
                report.mean_similar(),
                report.mean_dissimilar(),
                100.0 * report.fraction_ordered()
            );
            emit(&report.rows, format, src.out.as_deref())?;
        }
        Analyze::Cosine { with_ali, without_ali, src } => {
            let s = Settings::load(src.config.as_deref(), seed)?;
            let corpus = s.corpus(&src.data)?;
            let with = load_model(&with_ali, &s, &corpus)?;
            let without = load_model(&without_ali, &s, &corpus)?;
            let r = analysis::cosine_report(&with, &without, &corpus, &corpus.test)?;
            #[derive(Serialize)]
            struct Row<'a> {
                model: &'a str,
                #[serde(flatten)]
                summary: analysis::BoxSummary,
            }
            let rows = [Row { model: "with_ali", summary: r.with_alignment }, Row { model: "without_ali", summary: r.without_alignment }];
            emit(&rows, format, src.out.as_deref())?;
        }
        Analyze::Dump { ckpt, src } => {
            let s = Settings::load(src.config.as_deref(), seed)?;
            let corpus = s.corpus(&src.data)?;
            let model = load_model(&ckpt, &s, &corpus)?;
            let dump = analysis::selection_dump(&model, &corpus, &corpus.test)?;
            if format == Format::Csv {
                bail!(sesrec::Error::Config("the selection dump is JSON only".into()));
            }
            emit(&dump, format, src.out.as_deref())?;
        }
        Analyze::Sweep { param, values, parallel, src } => {
            let p: SweepParam = param.parse().map_err(sesrec::Error::Config)?;
            let values = values.unwrap_or_else(|| p.default_values());
            let rows = if parallel {
                let args: Vec<Vec<String>> = values.iter().map(|v| vec!["sweep".into(), param.clone(), "--values".into(), v.clone()]).collect();
                in_processes::<analysis::SweepRow>(&args, seed, &src)?
            } else {
                let s = Settings::load(src.config.as_deref(), seed)?;
                let corpus = s.corpus(&src.data)?;
                analysis::sweep(&corpus, &s.model_config(&corpus)?, &s.train, p, &values)?
            };
            emit(&rows, format, src.out.as_deref())?;
        }
        Analyze::Ablation { parallel, variant, src } => {
            let variants: Vec<Variant> = match &variant {
                Some(label) => vec![*Variant::ALL
                    .iter()
                    .find(|v| v.label() == label)
                    .ok_or_else(|| sesrec::Error::Config(format!("unknown variant {label:?}")))?],
                None => Variant::ALL.to_vec(),
            };
            let rows = if parallel && variants.len() > 1 {
                let args: Vec<Vec<String>> = variants.iter().map(|v| vec!["ablation".into(), "--variant".into(), v.label().into()]).collect();
                in_processes::<analysis::AblationRow>(&args, seed, &src)?
            } else {
                let s = Settings::load(src.config.as_deref(), seed)?;
                let corpus = s.corpus(&src.data)?;
                let model_cfg = s.model_config(&corpus)?;
                variants
                    .iter()
                    .map(|v| analysis::ablation_run(&corpus, &model_cfg, &s.train, *v).map(|(row, _)| row))
                    .collect::<sesrec::Result<Vec<_>>>()?
            };
            emit(&rows, format, src.out.as_deref())?;
        }
        Analyze::Plot { input, column, bins, min, max } => {
            if bins == 0 {
                bail!(sesrec::Error::Config("bins must be positive".into()));
            }
            let values = read_column(&input, &column)?;
            let lo = min.unwrap_or_else(|| values.iter().copied().fold(f64::INFINITY, f64::min));
            let hi = max.unwrap_or_else(|| values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let hist = analysis::histogram(&values, bins, lo, hi.max(lo + f64::EPSILON));
            match format {
                Format::Json => {
                    #[derive(Serialize)]
                    struct Bin {
                        lo: f64,
                        hi: f64,
                        count: usize,
                    }
                    let rows: Vec<Bin> = hist.iter().map(|&(lo, hi, count)| Bin { lo, hi, count }).collect();
                    emit(&rows, format, None)?;
                }
                Format::Csv => print_out(&analysis::render_histogram(&column, &hist, 50))?,
            }
        }
    }
    Ok(())
}

/// Reads one numeric column from a CSV file with a header row.
fn read_column(path: &Path, column: &str) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| sesrec::Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| sesrec::Error::Data(format!("{} is empty", path.display())))?;
    let idx = header
        .split(',')
        .position(|h| h == column)
        .ok_or_else(|| sesrec::Error::Data(format!("no column {column:?} in {}", path.display())))?;
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .nth(idx)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| sesrec::Error::Data(format!("bad value in column {column:?}: {l:?}")).into())
        })
        .collect()
}

/// Runs `sesrec analyze <args>` once per entry, concurrently, and concatenates the JSON rows.
fn in_processes<T: serde::de::DeserializeOwned>(jobs: &[Vec<String>], seed: Option<u64>, src: &Source) -> anyhow::Result<Vec<T>> {
    let exe = std::env::current_exe()?;
    let children = jobs
        .iter()
        .map(|job| {
            let mut cmd = Command::new(&exe);
            cmd.arg("analyze").args(job).arg("--data").arg(&src.data).args(["--format", "json"]);
            if let Some(c) = &src.config {
                cmd.arg("--config").arg(c);
            }
            if let Some(s) = seed {
                cmd.arg("--seed").arg(s.to_string());
            }
            cmd.stdout(std::process::Stdio::piped());
            cmd.spawn().with_context(|| format!("spawning {}", exe.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (job, child) in jobs.iter().zip(children) {
        let out = child.wait_with_output()?;
        if !out.status.success() {
            bail!("child run {job:?} failed with {}", out.status);
        }
        rows.extend(serde_json::from_slice::<Vec<T>>(&out.stdout)?);
    }
    Ok(rows)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<sesrec::Error>() {
        Some(sesrec::Error::Config(_)) => 2,
        Some(sesrec::Error::Data(_) | sesrec::Error::UnknownId { .. } | sesrec::Error::InsufficientNegatives { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
