use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use omnistream_core::metrics::summarize;
use omnistream_core::orchestrator::{read_log, run_session_with, wallclock, write_log, SessionOptions};
use omnistream_core::synth::{synth_trace, Scenario, SynthSpec};
use omnistream_core::trace::{
    read_trace, validate_trace, write_trace, Trace, TraceError, Violation, ViolationKind,
};
use omnistream_core::SessionConfig;

const EXIT_INVALID: u8 = 2;

#[derive(Parser)]
#[command(name = "omnistream", version, about = "Replay audio-visual interaction traces through the streaming pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a trace through the pipeline and write the event log.
    Run {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Shuffle simultaneous events before queueing; the log must not change.
        #[arg(long)]
        stress_seed: Option<u64>,
        /// Run the stages as threads against the real clock instead.
        #[arg(long)]
        wall_clock: bool,
        /// Playback speed for --wall-clock.
        #[arg(long, default_value_t = 1.0, requires = "wall_clock")]
        speed: f64,
    },
    /// Check a trace file and list every violation.
    Validate {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Summarize an event log.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        /// Write the latency-per-turn CSV instead of the JSON report, to PATH
        /// or stdout.
        #[arg(long, value_name = "PATH", num_args = 0..=1, default_missing_value = "-")]
        emit_plot_data: Option<String>,
    },
    /// Write a synthetic trace.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        turns: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One of the fixed scenarios instead of a random conversation.
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
        /// Config whose VAD thresholds shape the pauses.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    Scenario::ALL
        .into_iter()
        .find(|sc| sc.name() == s)
        .ok_or_else(|| {
            let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
            format!("expected one of {}", names.join(", "))
        })
}

enum Loaded {
    Trace(Trace),
    Invalid(Vec<Violation>),
}

fn load_trace(path: &Path) -> Result<Loaded> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    match read_trace(BufReader::new(file)) {
        Ok(records) => Ok(match validate_trace(&records) {
            Ok(t) => Loaded::Trace(t),
            Err(v) => Loaded::Invalid(v),
        }),
        Err(TraceError::Schema { line, message }) => Ok(Loaded::Invalid(vec![Violation {
            line,
            kind: ViolationKind::Schema,
            message,
        }])),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn load_config(path: Option<&Path>) -> Result<SessionConfig> {
    match path {
        Some(p) => SessionConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SessionConfig::default()),
    }
}

fn report_violations(path: &Path, violations: &[Violation]) -> ExitCode {
    for v in violations {
        eprintln!("{}:{v}", path.display());
    }
    ExitCode::from(EXIT_INVALID)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            trace,
            config,
            out,
            stress_seed,
            wall_clock,
            speed,
        } => {
            let t = match load_trace(&trace)? {
                Loaded::Trace(t) => t,
                Loaded::Invalid(v) => return Ok(report_violations(&trace, &v)),
            };
            let cfg = load_config(config.as_deref())?;
            let script = cfg.load_script()?;
            let log = if wall_clock {
                wallclock::run_wall_clock(&t, &cfg, script, speed)?
            } else {
                let options = SessionOptions {
                    tie_stress_seed: stress_seed,
                };
                run_session_with(&t, &cfg, script, options)?.log
            };
            let mut w = create(&out)?;
            write_log(&mut w, &log)?;
            w.flush()?;
            let report = summarize(&log)?;
            println!(
                "{} events, {} turns, {} responded, latency p50 {} ms p95 {} ms",
                log.len(),
                report.turns.len(),
                report.responded_turns,
                report.latency_p50_ms.map_or("-".into(), |v| v.to_string()),
                report.latency_p95_ms.map_or("-".into(), |v| v.to_string()),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { trace } => match load_trace(&trace)? {
            Loaded::Trace(t) => {
                println!("ok: {} packets", t.packets.len());
                Ok(ExitCode::SUCCESS)
            }
            Loaded::Invalid(v) => Ok(report_violations(&trace, &v)),
        },
        Command::Metrics { log, emit_plot_data } => {
            let file = File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let events = read_log(BufReader::new(file)).with_context(|| format!("reading {}", log.display()))?;
            let report = summarize(&events)?;
            report.check_consistency()?;
            match emit_plot_data.as_deref() {
                None => println!("{}", serde_json::to_string_pretty(&report)?),
                Some("-") => print!("{}", report.plot_data_csv()),
                Some(path) => {
                    std::fs::write(path, report.plot_data_csv()).with_context(|| format!("writing {path}"))?
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            out,
            turns,
            seed,
            scenario,
            config,
        } => {
            let t = match scenario {
                Some(s) => s.trace(),
                None => {
                    let cfg = load_config(config.as_deref())?;
                    let spec = SynthSpec {
                        turns,
                        seed,
                        ..SynthSpec::default()
                    };
                    synth_trace(&spec, &cfg.vad)
                }
            };
            let mut w = create(&out)?;
            write_trace(&mut w, &t.to_records())?;
            w.flush()?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
