use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aegis_sim::checks::{self, Outcome, Property, Verdict};
use aegis_sim::{run, scenarios, Schedule, Trace};
use clap::{Parser, Subcommand};

// stdout may be a closed pipe (`aegis run x | head`)
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "aegis",
    about = "Deterministic simulator for the Aegis expansion-chain protocol"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a named scenario or a schedule file and check every property.
    Run {
        /// Scenario name or path to a .toml schedule.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace as NDJSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Check one property of a stored trace.
    Check {
        trace: PathBuf,
        #[arg(long)]
        property: Property,
    },
    /// Re-run a stored trace's schedule and compare the traces byte for byte.
    Replay { trace: PathBuf },
    /// Run a template over a seed range, checking the safety properties.
    Sweep {
        /// Seed range a..b (b exclusive).
        #[arg(long, value_parser = parse_range)]
        seeds: (u64, u64),
        /// Named scenario, or one of random, validity, progress, equivocation7.
        template: String,
        /// Properties to check instead of the safety set.
        #[arg(long = "property")]
        properties: Vec<Property>,
    },
    /// Check schedules from a template, by default random adversarial ones,
    /// until time runs out or a safety property fails.
    Fuzz {
        #[arg(long)]
        minutes: f64,
        #[arg(long, default_value = "random")]
        template: String,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the failing schedule and verdicts.
        #[arg(long, default_value = "fuzz-witness.toml")]
        witness: PathBuf,
    },
    /// List the named scenarios.
    Scenarios,
    /// Print a named scenario as a TOML schedule.
    Export {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once("..").ok_or("expected a..b")?;
    let a: u64 = a.parse().map_err(|e| format!("{e}"))?;
    let b: u64 = b.parse().map_err(|e| format!("{e}"))?;
    if a >= b {
        return Err("empty range".into());
    }
    Ok((a, b))
}

/// Usage or configuration problem.
struct Usage(String);

impl<E: std::fmt::Display> From<E> for Usage {
    fn from(e: E) -> Self {
        Usage(e.to_string())
    }
}

fn load_schedule(scenario: &str, seed: Option<u64>) -> Result<Schedule, Usage> {
    let mut s = match scenarios::named(scenario, seed.unwrap_or(0)) {
        Some(s) => s,
        None if Path::new(scenario).exists() => Schedule::load(Path::new(scenario))?,
        None => return Err(Usage(format!("no scenario or file named {scenario:?}"))),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

fn read_trace(path: &Path) -> Result<Trace, Usage> {
    let f = File::open(path)?;
    Ok(Trace::read_ndjson(BufReader::new(f))?)
}

fn failed(v: &Verdict) -> bool {
    matches!(v.outcome, Outcome::Fail | Outcome::ModelViolation)
}

fn print_verdict(v: &Verdict) {
    out!("{v}");
    for w in &v.witness {
        out!("    witness: {}", serde_json::to_string(w).unwrap());
    }
}

fn cmd_run(scenario: &str, seed: Option<u64>, trace: Option<PathBuf>) -> Result<bool, Usage> {
    let s = load_schedule(scenario, seed)?;
    let tr = run(&s)?;
    if let Some(p) = trace {
        let mut w = BufWriter::new(File::create(&p)?);
        tr.write_ndjson(&mut w)?;
        w.flush()?;
    }
    out!("{} seed {} digest {}", s.name, s.seed, tr.digest());
    let mut ok = true;
    for p in Property::ALL {
        let v = checks::check(&tr, p);
        ok &= !failed(&v);
        print_verdict(&v);
    }
    Ok(ok)
}

fn cmd_check(path: &Path, property: Property) -> Result<bool, Usage> {
    let tr = read_trace(path)?;
    let v = checks::check(&tr, property);
    print_verdict(&v);
    Ok(v.is_ok())
}

fn cmd_replay(path: &Path) -> Result<bool, Usage> {
    let stored = read_trace(path)?;
    let again = run(stored.schedule())?;
    let same = again.to_ndjson() == stored.to_ndjson();
    if same {
        out!("identical: digest {}", again.digest());
    } else {
        let at = stored
            .events
            .iter()
            .zip(&again.events)
            .position(|(a, b)| a != b)
            .unwrap_or(stored.events.len().min(again.events.len()));
        out!("traces differ from event {at}");
    }
    Ok(same)
}

fn cmd_sweep(range: (u64, u64), template: &str, properties: Vec<Property>) -> Result<bool, Usage> {
    if scenarios::template(template, range.0).is_none() {
        return Err(Usage(format!("unknown template {template:?}")));
    }
    let props = if properties.is_empty() {
        Property::SAFETY.to_vec()
    } else {
        properties
    };
    let mut failures = 0;
    for seed in range.0..range.1 {
        let s = scenarios::template(template, seed).unwrap();
        s.validate()?;
        let tr = run(&s)?;
        for p in &props {
            let v = checks::check(&tr, *p);
            if failed(&v) || v.outcome == Outcome::Inconclusive {
                failures += 1;
                let _ = write!(std::io::stdout(), "seed {seed}: ");
                print_verdict(&v);
            }
        }
    }
    out!(
        "{template}: {} runs, {failures} failures ({})",
        range.1 - range.0,
        props
            .iter()
            .map(|p| p.name())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(failures == 0)
}

fn cmd_fuzz(minutes: f64, template: &str, first: u64, witness: &Path) -> Result<bool, Usage> {
    if !(minutes >= 0.0 && minutes.is_finite()) {
        return Err(Usage("minutes must be a non-negative number".into()));
    }
    if scenarios::template(template, first).is_none() {
        return Err(Usage(format!("unknown template {template:?}")));
    }
    let budget = Duration::from_secs_f64(minutes * 60.0);
    let start = Instant::now();
    let mut seed = first;
    let mut runs = 0;
    while runs == 0 || start.elapsed() < budget {
        let s = scenarios::template(template, seed).unwrap();
        let tr = run(&s)?;
        let bad: Vec<Verdict> = checks::safety_verdicts(&tr)
            .into_iter()
            .filter(failed)
            .collect();
        runs += 1;
        if !bad.is_empty() {
            let mut text = String::new();
            for v in &bad {
                text.push_str(&format!("# {v}\n"));
                for w in &v.witness {
                    text.push_str(&format!(
                        "#   witness: {}\n",
                        serde_json::to_string(w).unwrap()
                    ));
                }
            }
            text.push_str(&s.to_toml());
            std::fs::write(witness, text)?;
            for v in &bad {
                print_verdict(v);
            }
            out!(
                "seed {seed} failed after {runs} runs; witness in {}",
                witness.display()
            );
            return Ok(false);
        }
        seed += 1;
    }
    out!("{runs} runs (seeds {first}..{seed}) without a failure");
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            trace,
        } => cmd_run(&scenario, seed, trace),
        Cmd::Check { trace, property } => cmd_check(&trace, property),
        Cmd::Replay { trace } => cmd_replay(&trace),
        Cmd::Sweep {
            seeds,
            template,
            properties,
        } => cmd_sweep(seeds, &template, properties),
        Cmd::Fuzz {
            minutes,
            template,
            seed,
            witness,
        } => cmd_fuzz(minutes, &template, seed, &witness),
        Cmd::Scenarios => {
            for n in scenarios::NAMES {
                out!("{n}");
            }
            Ok(true)
        }
        Cmd::Export { name, seed } => match scenarios::named(&name, seed) {
            Some(s) => {
                let _ = write!(std::io::stdout(), "{}", s.to_toml());
                Ok(true)
            }
            None => Err(Usage(format!("no scenario named {name:?}"))),
        },
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
