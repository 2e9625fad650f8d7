//! `tim` — run, list, and narrate the built-in scenarios.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use titm_harness::scenario::{self, Report};
use titm_harness::transcript::TranscriptFile;
use titm_harness::demo;

#[derive(Parser)]
#[command(name = "tim", about = "trust-in-the-middle simulation harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario by name, or `all`.
    Run {
        /// Scenario name from `tim list`, or `all`.
        scenario: String,
        /// Root seed; every run with the same seed replays bit-exactly.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write the recorded frames to this file.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// List the built-in scenarios.
    List,
    /// Narrate one honest end-to-end run with live values.
    Demo {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn print_report(report: &Report) {
    let status = if report.passed() { "PASS" } else { "FAIL" };
    let observed = match (&report.script_error, report.observed) {
        (Some(_), _) => "script-error".to_string(),
        (None, Some(o)) => o.to_string(),
        (None, None) => "none".to_string(),
    };
    println!(
        "{status} {:<28} expected {}, observed {} ({} frames)",
        report.name, report.expected, observed, report.entries.len()
    );
    if let Some(err) = &report.script_error {
        println!("       script error: {err}");
    }
    if let Some(d) = &report.detection {
        let kind = report
            .entries
            .get(d.step)
            .map(|e| e.frame.kind())
            .unwrap_or("?");
        println!("       detected at step {} ({kind}): {}", d.step, d.what);
    }
    for note in &report.notes {
        println!("       note: {note}");
    }
    for leak in &report.leaks {
        println!("       LEAK: {:?} at {}", leak.secret, leak.location);
    }
}

fn run(name: &str, seed: u64, transcript: Option<PathBuf>) -> ExitCode {
    let reports: Vec<Report> = if name == "all" {
        scenario::run_all(seed)
    } else {
        match scenario::find_scenario(name) {
            Some(s) => vec![scenario::run_scenario(&s, seed)],
            None => {
                eprintln!("no scenario named {name:?}; try `tim list`");
                return ExitCode::from(2);
            }
        }
    };

    for report in &reports {
        print_report(report);
    }
    let passed = reports.iter().filter(|r| r.passed()).count();
    println!("{} scenario(s), {} passed, {} failed", reports.len(), passed, reports.len() - passed);

    if let Some(path) = transcript {
        let mut file = TranscriptFile::new(seed);
        for report in &reports {
            let outcome = match (&report.script_error, report.observed) {
                (Some(_), _) => "script-error".to_string(),
                (None, Some(o)) => o.to_string(),
                (None, None) => "none".to_string(),
            };
            file.push(&report.name, &outcome, &report.entries);
        }
        if let Err(e) = file.save(&path) {
            eprintln!("cannot write transcript {}: {e}", path.display());
            return ExitCode::from(2);
        }
        println!("transcript written to {}", path.display());
    }

    if passed == reports.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { scenario, seed, transcript } => run(&scenario, seed, transcript),
        Command::List => {
            for s in scenario::builtin_scenarios() {
                let tag = if s.attack { "attack" } else { "baseline" };
                println!("{:<28} {:<9} expects {}", s.name, tag, s.expected);
                println!("{:<28}           {}", "", s.summary);
            }
            ExitCode::SUCCESS
        }
        Command::Demo { seed } => {
            print!("{}", demo::demo(seed));
            ExitCode::SUCCESS
        }
    }
}
