use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ssmmp::graph::parse_graph_file;
use ssmmp::harness::{filter_messages, run_scenario_file, TraceFilter, TraceReport};
use ssmmp::wire::golden;

#[derive(Parser)]
#[command(
    name = "ssmmp",
    version,
    about = "Service mesh management protocol toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an application graph file.
    Validate { graph: PathBuf },
    /// Run a scenario and print its trace report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Use loopback TCP instead of the simulated network.
        #[arg(long)]
        tcp: bool,
        /// Write the report here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Roundtrip the golden message files in a directory.
    Conformance {
        dir: PathBuf,
        /// Rewrite the golden files from the serializer first.
        #[arg(long)]
        regen: bool,
    },
    /// Pretty-print the message flow recorded in a report.
    Trace {
        report: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct FilterArgs {
    /// Session id from the report's Manager snapshot.
    #[arg(long)]
    session: Option<u64>,
    /// Service instance as `service:id` or `service#id`.
    #[arg(long)]
    instance: Option<String>,
}

impl FilterArgs {
    fn to_filter(&self) -> Result<TraceFilter> {
        if let Some(id) = self.session {
            return Ok(TraceFilter::Session(id));
        }
        let Some(spec) = &self.instance else {
            return Ok(TraceFilter::All);
        };
        let Some((svc, id)) = spec.rsplit_once([':', '#']) else {
            bail!("instance must be service:id, got {spec:?}");
        };
        let id = id
            .parse()
            .with_context(|| format!("bad instance id in {spec:?}"))?;
        Ok(TraceFilter::Instance(svc.to_owned(), id))
    }
}

/// Writes to stdout; a reader that hangs up early is not an error.
fn emit(body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    match body(&mut out).and_then(|()| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn validate(path: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match parse_graph_file(&text) {
        Ok(g) => {
            println!(
                "ok: {} services, {} edges",
                g.services().len(),
                g.edges().len()
            );
            Ok(true)
        }
        Err(errors) => {
            for e in &errors {
                println!("error: {e}");
            }
            println!("{} error(s)", errors.len());
            Ok(false)
        }
    }
}

fn run(path: &Path, seed: Option<u64>, tcp: bool, out: Option<&Path>) -> Result<bool> {
    let report = run_scenario_file(path, seed, tcp)
        .with_context(|| format!("loading {}", path.display()))?;
    let text = report.render();
    match out {
        Some(o) => {
            fs::write(o, &text).with_context(|| format!("writing {}", o.display()))?;
            println!("result {}", if report.passed() { "pass" } else { "fail" });
        }
        None => emit(|out| out.write_all(text.as_bytes()))?,
    }
    Ok(report.passed())
}

fn conformance(dir: &Path, regen: bool) -> Result<bool> {
    if regen {
        let written =
            golden::regenerate(dir).with_context(|| format!("writing {}", dir.display()))?;
        println!("regenerated {} files", written.len());
    }
    let results = golden::check(dir);
    let passes = results.iter().filter(|r| r.outcome.is_ok()).count();
    for r in &results {
        match &r.outcome {
            Ok(()) => println!("pass {}", r.file),
            Err(e) => println!("FAIL {}: {e}", r.file),
        }
    }
    println!("{} files, {} passes", results.len(), passes);
    Ok(passes == results.len())
}

fn trace(path: &Path, filter: &FilterArgs) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report =
        TraceReport::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let filter = filter.to_filter()?;
    let lines = filter_messages(&report, &filter).map_err(anyhow::Error::msg)?;
    emit(|out| {
        for m in &lines {
            writeln!(out, "[{:>6} ms] {} -> {}", m.time, m.from, m.to)?;
            let body = m
                .message
                .to_bytes()
                .unwrap_or_else(|_| m.message.one_line().into_bytes());
            for line in String::from_utf8_lossy(&body)
                .lines()
                .filter(|l| !l.is_empty())
            {
                writeln!(out, "    {line}")?;
            }
        }
        writeln!(out, "{} message(s)", lines.len())
    })?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Validate { graph } => validate(graph),
        Command::Run {
            scenario,
            seed,
            tcp,
            out,
        } => run(scenario, *seed, *tcp, out.as_deref()),
        Command::Conformance { dir, regen } => conformance(dir, *regen),
        Command::Trace { report, filter } => trace(report, filter),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
