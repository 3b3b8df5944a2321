use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use weaveperf::optimize::Constraint;
use weaveperf::resources::Partition;
use weaveperf_cli::api::{self, ApiError, Command, Resolver, RunRequest, Source};
use weaveperf_cli::server;

#[derive(Parser)]
#[command(name = "weaveperf", version, about = "Transfer, memory and schedule analysis for dataflow diagrams")]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Exact,
    Idealized,
}

impl From<PartitionArg> for Partition {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Exact => Partition::Exact,
            PartitionArg::Idealized => Partition::Idealized,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstraintArg {
    Exact,
    Idealized,
}

impl From<ConstraintArg> for Constraint {
    fn from(c: ConstraintArg) -> Self {
        match c {
            ConstraintArg::Exact => Constraint::Exact,
            ConstraintArg::Idealized => Constraint::Idealized,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Diagram file or shipped name (matmul, attention, mha, gqa).
    diagram: String,
    /// Size binding, repeatable: `--size q=4096`.
    #[arg(long = "size", value_name = "NAME=VALUE")]
    sizes: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Symbolic transfer and memory costs per level.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        level: Option<String>,
        /// Size ordering used to resolve maxima, repeatable: `--assume x>d`.
        #[arg(long)]
        assume: Vec<String>,
        #[arg(long, value_enum)]
        partition: Option<PartitionArg>,
    },
    /// Optimal group sizes for a memory budget.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Bytes available at the level.
        #[arg(long)]
        memory: f64,
        /// Bytes per value.
        #[arg(long)]
        quant: Option<f64>,
        #[arg(long)]
        closed_form: Option<String>,
        #[arg(long)]
        level: Option<String>,
        #[arg(long, value_enum)]
        constraint: Option<ConstraintArg>,
        #[arg(long, value_enum)]
        partition: Option<PartitionArg>,
    },
    /// Weighted transfer cost over a hardware hierarchy.
    Model {
        /// Diagram or performance model: file or shipped name.
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        catalog: String,
        #[arg(long)]
        quant: Option<f64>,
        /// Cluster sizes to report, comma separated.
        #[arg(long, value_delimiter = ',')]
        cluster_n: Vec<u64>,
        /// Cached data is dominated by outputs; enables the cache rewrite.
        #[arg(long)]
        output_restricted: bool,
    },
    /// Loop pseudocode, variable table, budgets and warpgroup schedule.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        catalog: String,
        /// `reference` (alias `paper-defaults`) or overrides such as `s_x=128,q.V=1`.
        #[arg(long)]
        config: Option<String>,
        /// inter, intra or three.
        #[arg(long)]
        strategy: Option<String>,
        /// Non-tensor overheads, e.g. `sfu=0.66,fp16=0.66`.
        #[arg(long)]
        overheads: Option<String>,
        #[arg(long)]
        warpgroups: Option<u64>,
    },
    /// Check every stream and group expansion against the dense oracle.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// HTTP service over the same commands.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory of static files served outside `/api`.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
}

fn pairs<T: std::str::FromStr>(items: &[String]) -> Result<BTreeMap<String, T>, ApiError> {
    items
        .iter()
        .flat_map(|s| s.split(','))
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let (k, v) = s.split_once('=').ok_or_else(|| ApiError::Validation(format!("expected NAME=VALUE, got `{s}`")))?;
            let v = v.trim().parse().map_err(|_| ApiError::Validation(format!("bad value in `{s}`")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn is_perf_model_file(name: &str) -> bool {
    let p = Path::new(name);
    p.is_file()
        && std::fs::read_to_string(p)
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .is_some_and(|v| v.get("terms").is_some() && v.get("columns").is_none())
}

fn request(cmd: Cmd) -> Result<(Command, RunRequest), ApiError> {
    let base = |c: &Common| -> Result<RunRequest, ApiError> {
        Ok(RunRequest { diagram: Some(Source::Name(c.diagram.clone())), sizes: pairs(&c.sizes)?, ..Default::default() })
    };
    Ok(match cmd {
        Cmd::Analyze { common, level, assume, partition } => {
            (Command::Analyze, RunRequest { level, assume, partition: partition.map(Into::into), ..base(&common)? })
        }
        Cmd::Optimize { common, memory, quant, closed_form, level, constraint, partition } => (
            Command::Optimize,
            RunRequest {
                memory: Some(memory),
                quant,
                closed_form,
                level,
                constraint: constraint.map(Into::into),
                partition: partition.map(Into::into),
                ..base(&common)?
            },
        ),
        Cmd::Model { common, catalog, quant, cluster_n, output_restricted } => {
            let mut req = RunRequest { catalog: Some(Source::Name(catalog)), quant, cluster_n, output_restricted, ..base(&common)? };
            if is_perf_model_file(&common.diagram) {
                req.perf_model = req.diagram.take().map(|d| match d {
                    Source::Name(n) => Source::Name(n),
                    Source::Inline(_) => unreachable!("built from a name"),
                });
            }
            (Command::Model, req)
        }
        Cmd::Plan { common, catalog, config, strategy, overheads, warpgroups } => (
            Command::Plan,
            RunRequest {
                catalog: Some(Source::Name(catalog)),
                config,
                strategy,
                overheads: pairs(overheads.as_slice())?,
                warpgroups,
                ..base(&common)?
            },
        ),
        Cmd::Verify { common, trials, seed, tol } => (Command::Verify, RunRequest { trials, seed, tol, ..base(&common)? }),
        Cmd::Serve { .. } => unreachable!("handled before"),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let resolver = Resolver::from_env();
    if let Cmd::Serve { port, assets } = cli.cmd {
        let rt = match tokio::runtime::Runtime::new() {
            Ok(rt) => rt,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(4);
            }
        };
        return match rt.block_on(server::serve(resolver, port, assets)) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(4)
            }
        };
    }
    let out = request(cli.cmd).and_then(|(cmd, req)| api::run(cmd, &req, &resolver));
    match out {
        Ok(o) => {
            match cli.format {
                Format::Json => print!("{}", o.json),
                Format::Text => print!("{}", o.text),
            }
            if o.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            match cli.format {
                Format::Json => print!("{}", api::error_json(&e)),
                Format::Text => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
