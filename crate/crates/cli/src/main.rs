//! `qkdlab` — command-line front end for the experiment-lab service.
//!
//! The tool is a client: it builds a scenario from a file plus `--set`
//! overrides, sends it to the service, and writes the returned reports to
//! disk. With no `--server` it spins up an in-process service on an
//! ephemeral loopback port, so it also works standalone.
//!
//! Exit codes: `0` when every trial completed (sessions that abort their
//! key exchange are completed *experiments*, recorded in the report, not
//! failures), `2` for configuration errors, `1` for transport or I/O
//! failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use qkd_lab::lab::{parse_scenario, RunMode, RunReport, Scenario, SweepReport};
use qkd_lab_client::{ClientError, LabClient, RunOutcome};

/// Experiment runner for quantum-key-distribution and handshake trials.
#[derive(Parser)]
#[command(name = "qkdlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Key-distillation experiments.
    Qkd {
        #[command(subcommand)]
        command: QkdCommand,
    },
    /// Pairwise key handshake experiments.
    Handshake {
        #[command(subcommand)]
        command: HandshakeCommand,
    },
    /// Run the experiment service in the foreground.
    Serve {
        /// Address to listen on.
        #[arg(long, default_value = "127.0.0.1:7787")]
        bind: String,
    },
}

#[derive(Subcommand)]
enum QkdCommand {
    /// Run every trial of a scenario through the distillation pipeline.
    Run(RunArgs),
    /// Re-run a scenario across several values of one field.
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum HandshakeCommand {
    /// Run every trial of a scenario through the full handshake.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (flat `key = value` text); defaults when omitted.
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    /// Override one scenario field, e.g. `--set eve.fraction=0.5`
    /// (repeatable; applied after the file and the subcommand's mode).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for report.csv, report.json, and transcript logs.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Also write one transcript log per trial.
    #[arg(long)]
    transcripts: bool,
    /// Use a running service instead of an in-process one.
    #[arg(long, value_name = "URL")]
    server: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario file (flat `key = value` text); defaults when omitted.
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    /// Override one scenario field (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// The scenario field to sweep, e.g. `eve.fraction`.
    #[arg(long, value_name = "NAME")]
    param: String,
    /// Comma-separated values to assign to the swept field.
    #[arg(long, value_name = "A,B,C", value_delimiter = ',')]
    values: Vec<String>,
    /// Directory for summary.csv, summary.json, and per-value reports.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Use a running service instead of an in-process one.
    #[arg(long, value_name = "URL")]
    server: Option<String>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Transport(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Transport(_) => ExitCode::from(1),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(err: ClientError) -> CliError {
        match &err {
            // 4xx answers mean the request was malformed or the scenario
            // invalid — a configuration problem on our side.
            ClientError::Api { status, .. } if (400..500).contains(status) => {
                CliError::Config(err.to_string())
            }
            _ => CliError::Transport(err.to_string()),
        }
    }
}

fn build_scenario(
    path: Option<&Path>,
    mode: RunMode,
    sets: &[String],
) -> Result<Scenario, CliError> {
    let mut scenario = match path {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read scenario file {}: {e}", path.display()))
            })?;
            parse_scenario(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => Scenario::default(),
    };
    scenario.mode = mode;
    for pair in sets {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(CliError::Config(format!(
                "--set expects KEY=VALUE, got `{pair}`"
            )));
        };
        scenario
            .set_field(key.trim(), value.trim())
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(scenario)
}

/// Connects to `--server`, or boots an in-process service on an ephemeral
/// loopback port and connects to that.
async fn connect(server: Option<String>) -> Result<LabClient, CliError> {
    match server {
        Some(url) => Ok(LabClient::new(url)),
        None => {
            let listener = tokio::net::TcpListener::bind(("127.0.0.1", 0))
                .await
                .map_err(|e| CliError::Transport(format!("cannot bind local service: {e}")))?;
            let addr = listener
                .local_addr()
                .map_err(|e| CliError::Transport(format!("cannot bind local service: {e}")))?;
            tokio::spawn(async move { qkd_lab_server::serve(listener).await });
            Ok(LabClient::new(format!("http://{addr}")))
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Transport(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_report(out: &Path, report: &RunReport) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Transport(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("report.csv"), &report.to_csv())?;
    write_file(&out.join("report.json"), &report.to_json())?;
    Ok(())
}

fn summarize(report: &RunReport) {
    let mut proceed = 0;
    let mut abort = 0;
    let mut short = 0;
    let mut established = 0;
    for row in &report.rows {
        match row.verdict.as_str() {
            "proceed" => proceed += 1,
            "abort" => abort += 1,
            _ => short += 1,
        }
        if row.handshake_outcome == "established" {
            established += 1;
        }
    }
    let mut line = format!(
        "{} trial(s): {proceed} proceed, {abort} abort, {short} short",
        report.rows.len()
    );
    if report.scenario.mode == RunMode::FullHandshake {
        line.push_str(&format!("; {established} established"));
    }
    println!("{line}");
}

async fn do_run(args: RunArgs, mode: RunMode) -> Result<(), CliError> {
    let scenario = build_scenario(args.scenario.as_deref(), mode, &args.set)?;
    let client = connect(args.server).await?;
    // `--set mode=...` may have overridden the subcommand's mode; address
    // the route that matches what will actually run.
    let outcome: RunOutcome = match scenario.mode {
        RunMode::FullHandshake => client.run_handshake(&scenario, args.transcripts).await?,
        RunMode::QkdOnly => client.run_qkd(&scenario, args.transcripts).await?,
    };
    summarize(&outcome.report);
    write_report(&args.out, &outcome.report)?;
    if let Some(transcripts) = &outcome.transcripts {
        for (row, transcript) in outcome.report.rows.iter().zip(transcripts) {
            let name = if outcome.report.rows.len() == 1 {
                "transcript.log".to_string()
            } else {
                format!("transcript-{}.log", row.seed)
            };
            write_file(&args.out.join(name), transcript)?;
        }
    }
    Ok(())
}

async fn do_sweep(args: SweepArgs) -> Result<(), CliError> {
    let scenario = build_scenario(args.scenario.as_deref(), RunMode::QkdOnly, &args.set)?;
    let client = connect(args.server).await?;
    let sweep: SweepReport = client.sweep(&scenario, &args.param, &args.values).await?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Transport(format!("cannot create {}: {e}", args.out.display())))?;
    for (value, report) in sweep.values.iter().zip(&sweep.reports) {
        let safe: String = value
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c == '.' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        write_report(&args.out.join(format!("value-{safe}")), report)?;
    }
    write_file(&args.out.join("summary.csv"), &sweep.summary_csv())?;
    write_file(&args.out.join("summary.json"), &sweep.to_json())?;
    println!(
        "swept {} over {} value(s)",
        sweep.parameter,
        sweep.values.len()
    );
    Ok(())
}

async fn serve(bind: String) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(&bind)
        .await
        .map_err(|e| CliError::Transport(format!("cannot bind {bind}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| CliError::Transport(format!("cannot bind {bind}: {e}")))?;
    println!("listening on http://{addr}");
    qkd_lab_server::serve(listener)
        .await
        .map_err(|e| CliError::Transport(format!("service failed: {e}")))
}

async fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Qkd {
            command: QkdCommand::Run(args),
        } => do_run(args, RunMode::QkdOnly).await,
        Command::Qkd {
            command: QkdCommand::Sweep(args),
        } => do_sweep(args).await,
        Command::Handshake {
            command: HandshakeCommand::Run(args),
        } => do_run(args, RunMode::FullHandshake).await,
        Command::Serve { bind } => serve(bind).await,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
