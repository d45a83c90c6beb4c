//! Thin experiment CLI over the library: validate configs, run experiment
//! grids, and aggregate metrics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use tfcp::harness::{parse_config, report, run_experiment};

const USAGE: &str = "\
tfcp - coupling-based transport filtering experiments

USAGE:
    tfcp run <config.toml> [--out <dir>] [--seed-offset <k>] [--parallel <n>]
    tfcp validate <config.toml>
    tfcp report <results-dir>

Exit codes: 0 completed (individual cell failures are recorded in the
manifest), 1 invalid configuration or arguments, 2 i/o failure.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("run") => cmd_run(&args[1..]),
        Some("validate") => cmd_validate(&args[1..]),
        Some("report") => cmd_report(&args[1..]),
        Some("--help" | "-h" | "help") | None => {
            print!("{USAGE}");
            ExitCode::SUCCESS
        }
        Some(other) => {
            eprintln!("unknown command `{other}`\n\n{USAGE}");
            ExitCode::from(1)
        }
    }
}

fn read_config(path: &str) -> Result<tfcp::harness::ExperimentConfig, ExitCode> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {path}: {e}");
            return Err(ExitCode::from(2));
        }
    };
    parse_config(&text).map_err(|e| {
        eprintln!("{e}");
        ExitCode::from(1)
    })
}

fn cmd_validate(args: &[String]) -> ExitCode {
    let Some(path) = args.first() else {
        eprintln!("validate: missing config path\n\n{USAGE}");
        return ExitCode::from(1);
    };
    match read_config(path) {
        Ok(cfg) => {
            println!(
                "ok: model={} methods=[{}] N={:?} seeds={} intervals={:?} cycles={}",
                cfg.model.as_str(),
                cfg.methods.iter().map(|m| m.id()).collect::<Vec<_>>().join(", "),
                cfg.ensemble_sizes,
                cfg.seeds.len(),
                cfg.obs_intervals,
                cfg.cycles,
            );
            ExitCode::SUCCESS
        }
        Err(code) => code,
    }
}

fn cmd_run(args: &[String]) -> ExitCode {
    let Some(path) = args.first() else {
        eprintln!("run: missing config path\n\n{USAGE}");
        return ExitCode::from(1);
    };
    let mut out: Option<PathBuf> = None;
    let mut seed_offset: u64 = 0;
    let mut parallel: Option<usize> = None;
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--out" if i + 1 < args.len() => {
                out = Some(PathBuf::from(&args[i + 1]));
                i += 2;
            }
            "--seed-offset" if i + 1 < args.len() => {
                match args[i + 1].parse() {
                    Ok(v) => seed_offset = v,
                    Err(_) => {
                        eprintln!("run: --seed-offset expects an integer");
                        return ExitCode::from(1);
                    }
                }
                i += 2;
            }
            "--parallel" if i + 1 < args.len() => {
                match args[i + 1].parse() {
                    Ok(v) if v >= 1 => parallel = Some(v),
                    _ => {
                        eprintln!("run: --parallel expects a positive integer");
                        return ExitCode::from(1);
                    }
                }
                i += 2;
            }
            other => {
                eprintln!("run: unknown argument `{other}`\n\n{USAGE}");
                return ExitCode::from(1);
            }
        }
    }
    if let Some(k) = parallel {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("warning: could not size the worker pool: {e}");
        }
    }
    let cfg = match read_config(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    match run_experiment(&cfg, out.as_deref(), seed_offset) {
        Ok(summary) => {
            let total = summary.cells.len();
            println!(
                "completed {total} cells ({} failed); results in {}",
                summary.failed,
                summary.out_dir.display()
            );
            for cell in summary.cells.iter().filter(|c| c.error.is_some()) {
                println!(
                    "  failed: {} N={} dt={} seed={}: {}",
                    cell.method,
                    cell.n,
                    cell.obs_interval,
                    cell.seed,
                    cell.error.as_deref().unwrap_or("")
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_report(args: &[String]) -> ExitCode {
    let Some(dir) = args.first() else {
        eprintln!("report: missing results directory\n\n{USAGE}");
        return ExitCode::from(1);
    };
    match report(Path::new(dir)) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("report failed: {e}");
            ExitCode::from(2)
        }
    }
}
