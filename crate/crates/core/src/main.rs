use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use normlab::cli::{self, ExperimentConfig, Split, Task};
use normlab::gradcheck::{self, Suite};
use normlab::nn::NormVariant;
use normlab::tensor::{OpKind, DIFFERENTIABLE_OPS};

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "normlab",
    version,
    about = "Conditional batch/group normalization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, value_parser = parse_variant)]
    norm_variant: Option<NormVariant>,
    #[arg(long)]
    groups: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its manifest.
    GenData {
        /// sqoop or fewshot
        #[arg(long, value_parser = parse_task)]
        kind: Task,
        #[command(flatten)]
        common: Common,
    },
    /// Train every configured seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write per-step accuracy curves to plotdata.csv.
        #[arg(long)]
        emit_plotdata: bool,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Dataset directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Comma-separated subset of ops,norm,models.
        #[arg(long, value_delimiter = ',', value_parser = parse_suite)]
        suite: Vec<Suite>,
        /// Corrupt the backward rule of one op (checks that the suite notices).
        #[arg(long, hide = true, value_parser = parse_op)]
        inject_fault: Option<OpKind>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_variant(s: &str) -> Result<NormVariant, String> {
    NormVariant::parse(s).ok_or_else(|| {
        format!("unknown variant `{s}` (all_gn, gn_bn_stem, gn_bn_stem_noclf, all_bn)")
    })
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "sqoop" => Ok(Task::Sqoop),
        "fewshot" => Ok(Task::Fewshot),
        _ => Err(format!("unknown kind `{s}` (sqoop, fewshot)")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{s}` (train, val, test)"))
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    Suite::parse(s).ok_or_else(|| format!("unknown suite `{s}` (ops, norm, models)"))
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    DIFFERENTIABLE_OPS
        .iter()
        .copied()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown op `{s}`"))
}

fn experiment_config(common: &Common) -> normlab::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    if let Some(v) = common.norm_variant {
        cfg.norm_variant = v;
    }
    if let Some(g) = common.groups {
        cfg.groups = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fail(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_USAGE)
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors; 2 is reserved for divergence here
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match args.command {
        Command::GenData { kind, common } => {
            let Some(out) = common.out.as_deref() else {
                return fail("gen-data needs --out");
            };
            if common.seed.len() > 1 {
                return fail("gen-data takes a single --seed");
            }
            match cli::gen_data(
                kind,
                common.config.as_deref(),
                common.seed.first().copied(),
                out,
            ) {
                Ok(()) => {
                    println!("wrote {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Train {
            common,
            emit_plotdata,
        } => {
            let cfg = match experiment_config(&common) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let out = common
                .out
                .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.run_id));
            match cli::train(&cfg, &out, emit_plotdata) {
                Ok(report) => {
                    print!("{}", report.render());
                    if report.all_diverged() {
                        ExitCode::from(EXIT_DIVERGED)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Evaluate {
            checkpoint,
            split,
            dataset,
            common,
        } => match cli::evaluate_checkpoint(&checkpoint, split, dataset.as_deref()) {
            Ok(row) => {
                let mut w = csv::WriterBuilder::new()
                    .has_headers(false)
                    .from_writer(std::io::stdout());
                println!("{}", cli::HEADER);
                if w.serialize(&row)
                    .and_then(|_| w.flush().map_err(Into::into))
                    .is_err()
                {
                    return fail("could not write to stdout");
                }
                if let Some(out) = common.out {
                    let path = out.join(format!("eval_{}.csv", split.name()));
                    let written = cli::MetricsWriter::create(&path).and_then(|mut m| m.write(&row));
                    if let Err(e) = written {
                        return fail(e);
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Gradcheck {
            suite,
            inject_fault,
            ..
        } => {
            let suites = if suite.is_empty() {
                Suite::ALL.to_vec()
            } else {
                suite
            };
            let report = gradcheck::run(&suites, inject_fault);
            print!("{}", report.render());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_GRADCHECK)
            }
        }
    }
}
