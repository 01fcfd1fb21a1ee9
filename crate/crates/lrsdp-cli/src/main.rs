//! Batch CLI: solve SDPA/NCM instances, generate benchmark families, run the
//! dense reference solver.

use clap::{Args, Parser, Subcommand};
use lrsdp::instances::{self, Graph, NcmInstanceFile, NcmLoss, ThetaVariant};
use lrsdp::palm::{Precond, SolveOptions, StagePolicy};
use lrsdp::report::{ConfigEcho, OracleReport, ResultReport};
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lrsdp", version, about = "Low-rank semidefinite programming solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve an instance file (.dat-s SDPA sparse or NCM JSON; `-` = stdin).
    Solve(SolveArgs),
    /// Generate a benchmark instance.
    Gen {
        #[command(subcommand)]
        family: GenCmd,
    },
    /// Dense small-instance reference solver.
    Oracle {
        #[command(subcommand)]
        cmd: OracleCmd,
    },
}

#[derive(Args)]
struct SolveArgs {
    /// Input path, or `-` for stdin.
    input: String,
    /// KKT residual tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Budget on total inner iterations.
    #[arg(long, default_value_t = 50_000)]
    max_iters: usize,
    /// Wall-clock budget in seconds.
    #[arg(long, default_value_t = 3600.0)]
    max_time: f64,
    /// 0 silent, 1 progress lines on stderr.
    #[arg(long, default_value_t = 0)]
    verbose: u8,
    /// Weight policy: auto | exact | ichol | identity.
    #[arg(long, default_value = "auto")]
    precond: String,
    /// Stage policy: auto | palm-only | feasible-only.
    #[arg(long, default_value = "auto")]
    stage: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include the per-iteration trace in the report.
    #[arg(long)]
    trace: bool,
}

#[derive(Subcommand)]
enum GenCmd {
    /// Lovasz theta instance.
    Theta {
        /// c5 | cycle:N | path:N | complete:N | petersen | file:PATH
        #[arg(long)]
        graph: String,
        /// plain | plus (adds entrywise nonnegativity)
        #[arg(long, default_value = "plain")]
        variant: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Max-cut relaxation.
    Maxcut {
        #[arg(long)]
        graph: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nearest correlation matrix instance (JSON descriptor).
    Ncm {
        #[arg(long)]
        n: usize,
        /// square | huber
        #[arg(long, default_value = "square")]
        loss: String,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Solve an instance densely and print a full-precision report.
    Solve {
        input: String,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 5000)]
        max_outer: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage problems exit 1; --help/--version print and exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Solve(args) => solve_cmd(args),
        Cmd::Gen { family } => gen_cmd(family),
        Cmd::Oracle {
            cmd:
                OracleCmd::Solve {
                    input,
                    tol,
                    max_outer,
                    out,
                },
        } => oracle_cmd(&input, tol, max_outer, out),
    }
}

fn read_input(path: &str) -> Result<String, Box<dyn std::error::Error>> {
    if path == "-" {
        let mut buf = String::new();
        std::io::stdin().read_to_string(&mut buf)?;
        Ok(buf)
    } else {
        Ok(std::fs::read_to_string(path)?)
    }
}

fn load_problem(text: &str) -> Result<lrsdp::problem::ConicProblem, Box<dyn std::error::Error>> {
    if text.trim_start().starts_with('{') {
        Ok(NcmInstanceFile::from_json(text)?.build()?)
    } else {
        Ok(lrsdp::sdpa::parse_sdpa(text)?)
    }
}

fn emit(text: &str, out: Option<PathBuf>) -> Result<(), Box<dyn std::error::Error>> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn solve_cmd(args: SolveArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let text = read_input(&args.input)?;
    let prob = load_problem(&text)?;
    let precond = match args.precond.as_str() {
        "auto" => Precond::Auto,
        "exact" => Precond::Exact,
        "ichol" => Precond::Ichol,
        "identity" => Precond::Identity,
        other => return Err(format!("unknown precond `{other}`").into()),
    };
    let stage = match args.stage.as_str() {
        "auto" => StagePolicy::Auto,
        "palm-only" => StagePolicy::PalmOnly,
        "feasible-only" => StagePolicy::FeasibleOnly,
        other => return Err(format!("unknown stage `{other}`").into()),
    };
    let opts = SolveOptions {
        tol: args.tol,
        max_iters: args.max_iters,
        max_time_secs: args.max_time,
        verbose: args.verbose > 0,
        precond,
        stage,
        seed: args.seed,
        ..Default::default()
    };
    let hist = lrsdp::feasible::solve(&prob, &opts)?;
    let config = ConfigEcho {
        tol: args.tol,
        max_iters: args.max_iters,
        max_time_secs: args.max_time,
        precond: args.precond,
        stage: args.stage,
        seed: args.seed,
        verbose: args.verbose > 0,
    };
    let report = ResultReport::from_history(&hist, config, args.trace);
    emit(&report.to_json(), args.out)?;
    Ok(ExitCode::from(report.exit_code() as u8))
}

fn parse_graph(spec: &str) -> Result<Graph, Box<dyn std::error::Error>> {
    let lower = spec.to_ascii_lowercase();
    if lower == "petersen" {
        return Ok(Graph::petersen());
    }
    if lower == "c5" {
        return Ok(Graph::cycle(5));
    }
    if let Some(rest) = lower.strip_prefix("cycle:") {
        return Ok(Graph::cycle(rest.parse()?));
    }
    if let Some(rest) = lower.strip_prefix("path:") {
        return Ok(Graph::path(rest.parse()?));
    }
    if let Some(rest) = lower.strip_prefix("complete:") {
        return Ok(Graph::complete(rest.parse()?));
    }
    if let Some(rest) = spec.strip_prefix("file:") {
        let text = std::fs::read_to_string(rest)?;
        let mut toks = text.split_whitespace();
        let n: usize = toks
            .next()
            .ok_or("edge file: missing vertex count")?
            .parse()?;
        let mut edges = Vec::new();
        while let Some(a) = toks.next() {
            let b = toks.next().ok_or("edge file: dangling endpoint")?;
            edges.push((a.parse()?, b.parse()?));
        }
        return Ok(Graph::new(n, edges)?);
    }
    Err(format!("unknown graph spec `{spec}`").into())
}

fn gen_cmd(family: GenCmd) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match family {
        GenCmd::Theta {
            graph,
            variant,
            out,
        } => {
            let g = parse_graph(&graph)?;
            let v = match variant.as_str() {
                "plain" => ThetaVariant::Plain,
                "plus" => ThetaVariant::Plus,
                other => return Err(format!("unknown theta variant `{other}`").into()),
            };
            if v == ThetaVariant::Plus {
                return Err(
                    "theta+ carries side constraints that SDPA sparse cannot encode; \
                     build it through the library API"
                        .into(),
                );
            }
            let prob = instances::gen_theta(&g, v)?;
            emit(&lrsdp::sdpa::write_sdpa(&prob)?, out)?;
        }
        GenCmd::Maxcut { graph, out } => {
            let g = parse_graph(&graph)?;
            let prob = instances::gen_maxcut(&g, None)?;
            emit(&lrsdp::sdpa::write_sdpa(&prob)?, out)?;
        }
        GenCmd::Ncm {
            n,
            loss,
            delta,
            seed,
            out,
        } => {
            let l = match loss.as_str() {
                "square" => NcmLoss::Square,
                "huber" => NcmLoss::Huber,
                other => return Err(format!("unknown ncm loss `{other}`").into()),
            };
            let inst = NcmInstanceFile::new(n, l, delta, seed);
            inst.build()?; // validate before emitting
            emit(&inst.to_json(), out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn oracle_cmd(
    input: &str,
    tol: f64,
    max_outer: usize,
    out: Option<PathBuf>,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let text = read_input(input)?;
    let prob = load_problem(&text)?;
    let sol = lrsdp::oracle::solve_dense(&prob, tol, max_outer, 0)?;
    let report = OracleReport::new(&sol, tol);
    emit(&report.to_json(), out)?;
    Ok(ExitCode::SUCCESS)
}
