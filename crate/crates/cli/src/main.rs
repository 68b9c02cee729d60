//! `survae`: generate datasets, train, evaluate and sample flows, and render
//! density grids.

mod grid;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use survae::data::{self, fmt_f64};
use survae::train::{self, write_trace_csv, TrainConfig};
use survae::{ckpt, docs, presets, Flow, FlowSpec, Noise, Parameterized};

#[derive(Parser)]
#[command(name = "survae", version, about = "SurVAE flow toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    Generate {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = data::TRAIN_SIZE)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a flow on a dataset's training split.
    Train {
        /// Preset name or path to a JSON flow descriptor.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 10_000)]
        iters: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt_out: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split paired with `--seed`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, value_enum, default_value_t = Metric::Nll)]
        metric: Metric,
        /// Importance samples for `iwbo`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-row values as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the density of a 2-D flow on a lattice of cell centres.
    Grid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
        xmin: f64,
        #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
        xmax: f64,
        #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
        ymin: f64,
        #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
        ymax: f64,
        #[arg(long, default_value_t = 200)]
        res: usize,
        /// `csv` or `ppm` for stdout, or a path ending in .csv, .ppm or .pgm.
        #[arg(long)]
        out: String,
    },
    /// Print the layer catalog as markdown.
    Catalog {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Metric {
    Nll,
    Elbo,
    Iwbo,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<survae::Error> for Failure {
    fn from(e: survae::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            let line = line.strip_prefix("error: ").unwrap_or(line);
            eprintln!("error: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {}", m.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("SURVAE_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("SURVAE_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

fn sink(out: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn check_dataset(name: &str) -> Outcome {
    if data::NAMES.contains(&name) {
        Ok(())
    } else {
        Err(usage(format!("unknown dataset {name:?} (expected one of {})", data::NAMES.join(", "))))
    }
}

fn load_arch(arch: &str) -> Result<FlowSpec, Failure> {
    if presets::document(arch).is_some() {
        return Ok(presets::preset(arch)?);
    }
    let path = Path::new(arch);
    if !path.is_file() {
        let names: Vec<_> = presets::names().collect();
        return Err(usage(format!(
            "--arch {arch:?} is neither a preset ({}) nor a descriptor file",
            names.join(", ")
        )));
    }
    let text = std::fs::read_to_string(path)?;
    FlowSpec::from_json(&text).map_err(|e| usage(format!("{arch}: {e}")))
}

fn arch_stem(arch: &str) -> String {
    Path::new(arch)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "flow".into())
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Generate { dataset, n, seed, out } => {
            check_dataset(&dataset)?;
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let d = data::generate(&dataset, n, seed)?;
            let mut w = sink(out.as_deref())?;
            data::write_csv(&mut w, &data::default_header(d.dim()), &d.samples)?;
            w.flush()?;
        }
        Command::Train {
            arch,
            dataset,
            iters,
            lr,
            batch,
            seed,
            ckpt_out,
            trace_out,
        } => {
            check_dataset(&dataset)?;
            let spec = load_arch(&arch)?;
            let config = TrainConfig {
                lr,
                iterations: iters,
                batch_size: batch,
                seed,
                ..TrainConfig::default()
            };
            config.validate().map_err(|e| usage(e.to_string()))?;
            let mut flow = Flow::build(&spec).map_err(|e| usage(format!("{arch}: {e}")))?;
            let train_set = data::generate(&dataset, data::TRAIN_SIZE, seed)?;
            if train_set.dim() != flow.input_dim() {
                return Err(usage(format!(
                    "architecture expects {} features but {dataset} has {}",
                    flow.input_dim(),
                    train_set.dim()
                )));
            }
            println!("parameters: {}", flow.num_parameters());
            let (trainer, trace) = train::train(&mut flow, &train_set.samples, config)?;
            let stem = arch_stem(&arch);
            let ckpt_path = ckpt_out.unwrap_or_else(|| PathBuf::from(format!("{stem}.ckpt")));
            let trace_path = trace_out.unwrap_or_else(|| PathBuf::from(format!("{stem}.trace.csv")));
            ckpt::save(&ckpt_path, &flow, &trainer.state())?;
            let mut w = sink(Some(&trace_path))?;
            write_trace_csv(&mut w, &trace)?;
            w.flush()?;
            if let Some(last) = trace.last() {
                println!("iteration {}: {} nats", last.iteration, fmt_f64(last.mean_nats));
            }
            println!("checkpoint: {}", ckpt_path.display());
            println!("trace: {}", trace_path.display());
        }
        Command::Eval {
            ckpt: path,
            dataset,
            metric,
            k,
            seed,
            out,
        } => {
            check_dataset(&dataset)?;
            let k = match (metric, k) {
                (Metric::Iwbo, None) => return Err(usage("--metric iwbo requires --k")),
                (Metric::Iwbo, Some(0)) => return Err(usage("--k must be at least 1")),
                (Metric::Iwbo, Some(k)) => k,
                (_, Some(_)) => return Err(usage("--k only applies to --metric iwbo")),
                (_, None) => 1,
            };
            let threads = threads()?;
            let (flow, _) = ckpt::load(&path)?;
            let test_set = data::generate(&dataset, data::TRAIN_SIZE, data::test_seed(seed))?;
            if test_set.dim() != flow.input_dim() {
                return Err(usage(format!(
                    "checkpoint expects {} features but {dataset} has {}",
                    flow.input_dim(),
                    test_set.dim()
                )));
            }
            if metric == Metric::Nll && !flow.is_exact() {
                return Err(usage("nll needs an exact flow; use --metric elbo or iwbo"));
            }
            let result = match metric {
                Metric::Iwbo => flow.iwbo(&test_set.samples, k, seed, threads)?,
                _ => flow.log_prob(&test_set.samples, &mut Noise::from_seed(seed))?,
            };
            // reported as a loss: negative log-likelihood or negative bound
            let nats = -result.mean();
            let bpd = nats / (flow.input_dim() as f64 * std::f64::consts::LN_2);
            let label = match metric {
                Metric::Nll => "nll".to_string(),
                Metric::Elbo => "neg-elbo".to_string(),
                Metric::Iwbo => format!("neg-iwbo k={k}"),
            };
            println!("{label}: {} nats, {} bits/dim", fmt_f64(nats), fmt_f64(bpd));
            if let Some(p) = out {
                let mut w = sink(Some(&p))?;
                writeln!(w, "index,nats")?;
                for (i, v) in result.values.iter().enumerate() {
                    writeln!(w, "{i},{}", fmt_f64(-v))?;
                }
                w.flush()?;
            }
        }
        Command::Sample { ckpt: path, n, seed, out } => {
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let (flow, _) = ckpt::load(&path)?;
            let x = flow.sample(n, &mut Noise::from_seed(seed))?;
            let mut w = sink(out.as_deref())?;
            data::write_csv(&mut w, &data::default_header(x.cols()), &x)?;
            w.flush()?;
        }
        Command::Grid {
            ckpt: path,
            xmin,
            xmax,
            ymin,
            ymax,
            res,
            out,
        } => {
            let format = grid::Format::from_out(&out).ok_or_else(|| {
                usage(format!("--out {out:?}: expected csv, ppm, or a path ending in .csv, .ppm or .pgm"))
            })?;
            let bounds = grid::Bounds::new(xmin, xmax, ymin, ymax, res).map_err(usage)?;
            let (flow, _) = ckpt::load(&path)?;
            if flow.input_dim() != 2 {
                return Err(usage(format!("grid needs a 2-D flow, checkpoint has {} features", flow.input_dim())));
            }
            let g = grid::evaluate(&flow, &bounds)?;
            let target = match out.as_str() {
                "csv" | "ppm" => None,
                p => Some(PathBuf::from(p)),
            };
            let mut w = sink(target.as_deref())?;
            match format {
                grid::Format::Csv => grid::write_csv(&mut w, &g)?,
                grid::Format::Pgm => grid::write_pgm(&mut w, &g)?,
            }
            w.flush()?;
        }
        Command::Catalog { out } => {
            let mut w = sink(out.as_deref())?;
            w.write_all(docs::catalog().as_bytes())?;
            w.flush()?;
        }
    }
    Ok(())
}
