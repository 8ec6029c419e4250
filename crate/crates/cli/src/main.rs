use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uplink_qkd::error::Error;
use uplink_qkd::runner::{self, PassSummary, ReferenceTable, RunConfig};
use uplink_qkd::selftest;

const EXIT_CONFIG: u8 = 4;
const EXIT_OTHER: u8 = 1;

#[derive(Parser)]
#[command(name = "uplink-qkd", version, about = "Decoy-state BB84 uplink pass simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one pass. CONFIG is a JSON file, or `table1:<pass-id>` for a
    /// built-in replica of a reference pass.
    Run {
        config: String,
        /// Derive every subsystem seed from this master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for reconciliation.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Tabulate the summaries of one or more run directories.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Emit CSV instead of aligned text.
        #[arg(long)]
        csv: bool,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a run directory against the reference passes.
    Compare {
        dir: PathBuf,
        /// `table1` for the bundled table, or a path to a reference JSON.
        #[arg(long, default_value = "table1")]
        reference: String,
    },
    /// Print the JSON configuration of a built-in replica pass.
    Replica {
        /// Pass id; omit to list them.
        id: Option<String>,
    },
    /// Run the reduced oracle suite.
    Selftest,
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::UnknownPass(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_OTHER),
    }
}

fn load_config(spec: &str) -> Result<RunConfig, Error> {
    match spec.strip_prefix("table1:") {
        Some(id) => runner::replica_config(id),
        None => RunConfig::load(&PathBuf::from(spec)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out, threads } => {
            let mut cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            if let Some(s) = seed {
                cfg.reseed(s);
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            if cfg.output_dir.is_none() {
                cfg.output_dir = Some(PathBuf::from(format!("runs/{}", cfg.pass_id)));
            }
            if let Some(t) = threads {
                cfg.distill.threads = t.max(1);
            }
            match runner::run_pass(&cfg) {
                Ok(outcome) => {
                    let s = &outcome.summary;
                    println!("pass {} -> {}", s.pass_id, outcome.dir.display());
                    match runner::summarize(std::slice::from_ref(s)) {
                        Ok(t) => print!("{}", t.to_text()),
                        Err(e) => return fail(&e),
                    }
                    ExitCode::from(outcome.exit_code() as u8)
                }
                Err(e) => fail(&e),
            }
        }
        Command::Summarize { dirs, csv, out } => {
            let table = match runner::summarize_dirs(&dirs) {
                Ok(t) => t,
                Err(e) => return fail(&e),
            };
            let text = if csv { table.to_csv() } else { table.to_text() };
            match out {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, text) {
                        eprintln!("error: {}: {e}", path.display());
                        return ExitCode::from(EXIT_OTHER);
                    }
                }
                None => print!("{text}"),
            }
            ExitCode::SUCCESS
        }
        Command::Compare { dir, reference } => {
            let table = if reference == "table1" {
                ReferenceTable::bundled()
            } else {
                match uplink_qkd::io::read_json(&PathBuf::from(&reference)) {
                    Ok(t) => t,
                    Err(e) => return fail(&e),
                }
            };
            let report = PassSummary::load(&dir).and_then(|s| runner::compare_to_reference(&s, &table));
            match report {
                Ok(r) => {
                    print!("{}", r.to_text());
                    println!("{} of {} metrics outside tolerance", r.failures(), r.comparisons.len());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Replica { id } => match id {
            None => {
                for id in runner::replica_ids() {
                    println!("{id}");
                }
                ExitCode::SUCCESS
            }
            Some(id) => match runner::replica_config(&id) {
                Ok(c) => {
                    println!("{}", serde_json::to_string_pretty(&c).expect("config serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            },
        },
        Command::Selftest => {
            let checks = selftest::run_all();
            let mut failed = 0;
            for c in &checks {
                println!("{} {:<40} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_OTHER)
            }
        }
    }
}
