use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use pacsim::harness::{self, CollisionMode, CollisionResult, Corpus};
use pacsim::ir::{instrument, parse, OptFlags};
use pacsim::sealcodec::PacKey;
use pacsim::{Machine, RunConfig, Tool};

#[derive(Parser)]
#[command(name = "pacsim", version, about = "Sealed-pointer memory-safety simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Instrument and execute one .pir program.
    Run {
        file: PathBuf,
        /// Check stores only.
        #[arg(long)]
        write_only: bool,
        /// Comma-separated passes: loop-inv, loop-bounds, redundant, redundant-postdom, static.
        #[arg(long, default_value = "")]
        opt: String,
        #[arg(long, default_value = "pacsan")]
        tool: Tool,
        /// Keep executing after a violation.
        #[arg(long = "continue")]
        keep_going: bool,
        /// Write the JSON result to a file, or `-` for stdout.
        #[arg(long)]
        json: Option<String>,
        /// Print the optimized program before running it.
        #[arg(long)]
        emit: bool,
    },
    /// Generate a labelled corpus directory.
    Corpus {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        per_cwe: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a corpus directory with one checker.
    Score {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "pacsan")]
        tool: Tool,
        #[arg(long, default_value = "")]
        opt: String,
        #[arg(long)]
        json: Option<String>,
        #[arg(long)]
        time: bool,
    },
    /// Monte-Carlo estimate of the raw seal collision rate.
    Collide {
        #[arg(long, default_value_t = 10_000_000)]
        trials: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Dangling-pointer churn: how often a stale seal slips through.
    Churn {
        #[arg(long, default_value_t = 1_000_000)]
        derefs: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        live: usize,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("pacsim: {msg}");
    ExitCode::from(2)
}

fn emit_json(dest: &str, text: &str) -> Result<(), String> {
    if dest == "-" {
        print!("{text}");
        Ok(())
    } else {
        fs::write(dest, text).map_err(|e| format!("{dest}: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let key = match PacKey::from_env() {
        Ok(k) => k,
        Err(e) => return fail(e),
    };
    match cli.cmd {
        Cmd::Run {
            file,
            write_only,
            opt,
            tool,
            keep_going,
            json,
            emit,
        } => {
            let text = match fs::read_to_string(&file) {
                Ok(t) => t,
                Err(e) => return fail(format!("{}: {e}", file.display())),
            };
            let program = match parse(&text).and_then(|p| instrument(&p)) {
                Ok(p) => p,
                Err(e) => return fail(format!("{}: {e}", file.display())),
            };
            let mut flags = match OptFlags::parse_list(&opt) {
                Ok(f) => f,
                Err(e) => return fail(e),
            };
            flags.write_only = write_only;
            let program = flags.apply(&program);
            if emit {
                print!("{program}");
            }
            let mut cfg = RunConfig {
                tool,
                halt_on_first: !keep_going,
                ..RunConfig::default()
            };
            cfg.checker.write_only = write_only;
            let result = match Machine::new(key, cfg).run(&program) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            match json.as_deref() {
                Some(dest) => {
                    if let Err(e) = emit_json(dest, &(result.to_json() + "\n")) {
                        return fail(e);
                    }
                }
                None => {
                    for v in &result.violations {
                        let off = v.offset.map_or(String::new(), |o| format!(" offset {o}"));
                        println!("{} at site {} (seal {:#08x}{off})", v.kind.as_str(), v.site, v.seal);
                    }
                    println!("{} dynamic checks", result.dynamic_check_count);
                }
            }
            if result.violations.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Cmd::Corpus { seed, per_cwe, out } => {
            if per_cwe == 0 {
                return fail("--per-cwe must be at least 1");
            }
            let corpus = Corpus::generate(seed, per_cwe);
            if let Err(e) = corpus.write_dir(&out) {
                return fail(e);
            }
            println!("wrote {} cases to {}", corpus.cases.len(), out.display());
            ExitCode::SUCCESS
        }
        Cmd::Score {
            corpus,
            tool,
            opt,
            json,
            time,
        } => {
            let flags = match OptFlags::parse_list(&opt) {
                Ok(f) => f,
                Err(e) => return fail(e),
            };
            let corpus = match Corpus::read_dir(&corpus) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let start = Instant::now();
            let report = match harness::score(&corpus, tool, flags, key) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            match json.as_deref() {
                Some(dest) => {
                    if let Err(e) = emit_json(dest, &report.to_json()) {
                        return fail(e);
                    }
                }
                None => print!("{}", report.summary()),
            }
            if time {
                eprintln!("scored {} cases in {:.3}s", report.cases.len(), start.elapsed().as_secs_f64());
            }
            ExitCode::SUCCESS
        }
        Cmd::Collide { trials, seed } => {
            if trials == 0 {
                return fail("--trials must be positive");
            }
            let r = harness::collision_trial(key, trials, seed, CollisionMode::Independent);
            println!("trials     {}", r.trials);
            println!("matches    {}", r.matches);
            println!("analytic   {:.6e}", CollisionResult::ANALYTIC);
            println!("empirical  {:.6e}", r.rate());
            println!("z-score    {:+.3}", r.z_score());
            ExitCode::SUCCESS
        }
        Cmd::Churn { derefs, seed, live } => {
            if live == 0 {
                return fail("--live must be positive");
            }
            let r = harness::uaf_churn(key, seed, derefs, live, 4);
            println!("stale dereferences  {}", r.stale_derefs);
            println!("detected            {}", r.detected);
            println!("escapes             {}", r.escapes);
            println!("escape rate         {:.3e}", r.escape_rate());
            println!("bound (10 x 2^-24)  {:.3e}", 10.0 * CollisionResult::ANALYTIC);
            ExitCode::SUCCESS
        }
    }
}
