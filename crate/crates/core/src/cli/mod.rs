//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 I/O error.

pub mod config;
pub mod pipeline;
pub mod tools;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::sensitivity::DecisionRule;

pub use config::{DataSource, Distribution, ModelSection, Overrides, RunConfig};
pub use pipeline::{
    cmd_analyze, cmd_eval, cmd_select, evaluate, AnalysisReport, CheckStatus, EvalReport,
    Evaluation,
};
pub use tools::{
    cmd_bench, cmd_kernels, cmd_searchspace, KernelInput, KernelSummary, KERNEL_NAMES,
};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "MIXEDQ_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "mixedq",
    version,
    about = "Layer-wise selection of integer non-linear kernels"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Activation bit width.
    #[arg(long, global = true, value_parser = ["6", "8"])]
    pub bits: Option<String>,
    /// Selection rule.
    #[arg(long, global = true, value_parser = parse_rule)]
    pub rule: Option<DecisionRule>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn parse_rule(s: &str) -> std::result::Result<DecisionRule, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure every layer under every method, select a map and evaluate it.
    Analyze,
    /// Re-run selection on an existing sensitivity.csv.
    Select {
        #[arg(long, value_name = "CSV")]
        table: PathBuf,
    },
    /// Evaluate an assignment map against the uniform baselines.
    Eval {
        #[arg(long, value_name = "JSON")]
        assignment: PathBuf,
    },
    /// SQNR and latency sweep over random matrices.
    Bench {
        /// Timed repetitions per cell.
        #[arg(long)]
        reps: Option<usize>,
        /// Matrix size as ROWSxCOLS; repeatable.
        #[arg(long = "size", value_parser = parse_size)]
        sizes: Vec<(usize, usize)>,
    },
    /// Run one kernel and report its error against the float function.
    Kernels {
        name: String,
        /// Raw tensor input file.
        #[arg(long, conflicts_with = "grid")]
        input: Option<PathBuf>,
        /// LO HI [N]: evenly spaced grid.
        #[arg(long, num_args = 2..=3, allow_negative_numbers = true, value_names = ["LO", "HI", "N"])]
        grid: Option<Vec<f64>>,
        /// Input quantization bits.
        #[arg(long = "input-bits", default_value_t = 16)]
        input_bits: u32,
        /// Write the dequantized output here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Exact search-space size and evaluation count for the given layer counts.
    Searchspace {
        softmax: usize,
        gelu: usize,
        layernorm: usize,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("size {s:?} must look like 100x100"))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("size {s:?}: {e}"))
    };
    Ok((p(r)?, p(c)?))
}

fn overrides(g: &GlobalArgs) -> Overrides {
    Overrides {
        bits: g
            .bits
            .as_deref()
            .map(|b| b.parse().expect("validated by clap")),
        rule: g.rule,
        seed: g.seed,
        out: g.out.clone(),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidInput(format!(
            "{THREADS_ENV} must be a positive integer, got {v:?}"
        ))
    })?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    configure_threads()?;
    let o = overrides(&cli.global);
    let cfg_path = cli.global.config.as_deref();
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match cli.command {
        Command::Analyze => {
            let cfg = RunConfig::resolve(cfg_path, &o)?;
            let r = cmd_analyze(&cfg)?;
            writeln!(out, "{} sensitivity records", r.sensitivity.records.len()).map_err(io)?;
            for (l, m) in r.assignment.iter() {
                writeln!(out, "{l}\t{m}").map_err(io)?;
            }
            report_check(&r.evaluation, out)?;
            writeln!(out, "wrote {}", cfg.output_dir.display()).map_err(io)?;
        }
        Command::Select { table } => {
            let rule = o.rule.unwrap_or(DecisionRule::SqnrDiff);
            let dir = o
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(config::DEFAULT_OUTPUT_DIR));
            let a = cmd_select(&table, rule, &dir)?;
            for (l, m) in a.iter() {
                writeln!(out, "{l}\t{m}").map_err(io)?;
            }
        }
        Command::Eval { assignment } => {
            let cfg = RunConfig::resolve(cfg_path, &o)?;
            let r = cmd_eval(&cfg, &assignment)?;
            for l in &r.evaluation.layers {
                writeln!(
                    out,
                    "{}\t{}\t{:.3}\tibert {:.3}\tfqvit {:.3}\tivit {:.3}",
                    l.layer, l.mixed_method, l.mixed_db, l.ibert_db, l.fqvit_db, l.ivit_db
                )
                .map_err(io)?;
            }
            report_check(&r.evaluation, out)?;
        }
        Command::Bench { reps, sizes } => {
            let mut cfg = RunConfig::resolve(cfg_path, &o)?;
            if let Some(r) = reps {
                cfg.bench.reps = r;
            }
            if !sizes.is_empty() {
                cfg.bench.sizes = sizes;
            }
            cfg.bench.validate()?;
            let rows = cmd_bench(&cfg)?;
            write!(out, "{}", crate::bench::to_text_table(&rows)).map_err(io)?;
        }
        Command::Kernels {
            name,
            input,
            grid,
            input_bits,
            output,
        } => {
            let src = match (input, grid) {
                (Some(p), _) => KernelInput::File(p),
                (None, Some(g)) => {
                    let n = match g.get(2) {
                        Some(&n) if n >= 1.0 && n.fract() == 0.0 => Some(n as usize),
                        Some(&n) => {
                            return Err(Error::InvalidInput(format!(
                                "grid count {n} is not a positive integer"
                            )))
                        }
                        None => None,
                    };
                    KernelInput::Grid {
                        lo: g[0],
                        hi: g[1],
                        n,
                    }
                }
                (None, None) => {
                    return Err(Error::InvalidInput(
                        "kernels needs --input or --grid".into(),
                    ))
                }
            };
            if !(2..=16).contains(&input_bits) {
                return Err(Error::InvalidInput(format!(
                    "input bits must be in 2..=16, got {input_bits}"
                )));
            }
            let s = cmd_kernels(&name, &src, input_bits, output.as_deref())?;
            write!(out, "{s}").map_err(io)?;
        }
        Command::Searchspace {
            softmax,
            gelu,
            layernorm,
        } => {
            write!(out, "{}", cmd_searchspace(softmax, gelu, layernorm)).map_err(io)?;
        }
    }
    Ok(())
}

fn report_check(e: &Evaluation, out: &mut dyn Write) -> Result<()> {
    let io = |err: std::io::Error| Error::io("<stdout>", err);
    writeln!(
        out,
        "mixed logit SQNR {:.3} dB, threshold {:.3} dB: {}",
        e.mixed_logit_db(),
        e.threshold_db,
        match e.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Warn => "warn",
        }
    )
    .map_err(io)?;
    if e.status == CheckStatus::Warn {
        eprintln!("warning: mixed assignment is below the uniform baselines; see eval_diff.csv");
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match execute(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
