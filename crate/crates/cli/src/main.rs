//! `wpmon` — protocol-spec tooling, deterministic scenario replay, and the
//! intercepting monitor proxy.

use wpmon_cli::{config, proxy};

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use wpmon_core::automaton::compose;
use wpmon_core::catalog;
use wpmon_core::harness::run_scenarios;
use wpmon_core::scenario::parse_scenario;
use wpmon_core::spec::{has_errors, parse_spec, validate_spec};

#[derive(Parser)]
#[command(
    name = "wpmon",
    version,
    about = "Web-protocol security monitor: compile XML protocol specs to guarded automata, \
             replay attack scenarios, and enforce the specs live as an intercepting proxy"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Parse specs and print diagnostics; fails on error-level findings
    Validate {
        #[arg(required = true)]
        specs: Vec<PathBuf>,
    },
    /// Export the composed automaton as a DOT graph
    Graph {
        #[arg(required = true)]
        specs: Vec<PathBuf>,
        /// Output file; stdout when omitted
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Replay scenario files through the monitor and report per-step verdicts
    Replay {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Placeholder-RNG seed; fixed seeds give byte-identical reports
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the intercepting proxy
    Serve {
        /// key = value config file
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Listen address, overriding the config file
        #[arg(long)]
        listen: Option<String>,
        /// Spec file (repeatable, composition order); appended to the config
        #[arg(long = "spec")]
        specs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Commands::Validate { specs } => cmd_validate(&specs),
        Commands::Graph { specs, output } => cmd_graph(&specs, output.as_deref()),
        Commands::Replay { scenarios, seed } => cmd_replay(&scenarios, seed),
        Commands::Serve {
            config,
            listen,
            specs,
        } => cmd_serve(config.as_deref(), listen, specs).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("wpmon: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_validate(specs: &[PathBuf]) -> Result<bool> {
    let mut clean = true;
    for path in specs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        match parse_spec(&text) {
            Err(e) => {
                println!("{}: error: {e}", path.display());
                clean = false;
            }
            Ok(spec) => {
                let diags = validate_spec(&spec);
                for d in &diags {
                    println!("{}: {d}", path.display());
                }
                if has_errors(&diags) {
                    clean = false;
                } else {
                    println!("{}: ok (spec `{}`)", path.display(), spec.name);
                }
            }
        }
    }
    Ok(clean)
}

fn cmd_graph(specs: &[PathBuf], output: Option<&Path>) -> Result<bool> {
    let mut parsed = Vec::new();
    for path in specs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        parsed.push(parse_spec(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    let automaton = compose(&parsed)?;
    let dot = automaton.to_dot();
    match output {
        Some(path) => std::fs::write(path, dot).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{dot}"),
    }
    Ok(true)
}

fn cmd_replay(paths: &[PathBuf], seed: u64) -> Result<bool> {
    let mut scenarios = Vec::new();
    let mut search_dirs: Vec<PathBuf> = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        scenarios
            .push(parse_scenario(&text).with_context(|| format!("parsing {}", path.display()))?);
        if let Some(dir) = path.parent() {
            if !search_dirs.contains(&dir.to_path_buf()) {
                search_dirs.push(dir.to_path_buf());
            }
        }
    }

    // spec references resolve next to the scenario file, in a sibling
    // `specs/` directory (the catalog layout), or from the built-in catalog
    let resolve = move |name: &str| -> Option<String> {
        for dir in &search_dirs {
            for candidate in [dir.join(name), dir.join("../specs").join(name)] {
                if let Ok(text) = std::fs::read_to_string(&candidate) {
                    return Some(text);
                }
            }
        }
        catalog::builtin_resolver(name)
    };

    let mut all_pass = true;
    let mut passed = 0usize;
    let reports = run_scenarios(&scenarios, &resolve, seed);
    for (path, report) in paths.iter().zip(reports) {
        let report = report.with_context(|| format!("running {}", path.display()))?;
        print!("{report}");
        if report.pass {
            passed += 1;
        } else {
            all_pass = false;
        }
    }
    println!("{passed}/{} scenarios passed", paths.len());
    Ok(all_pass)
}

fn cmd_serve(
    config_path: Option<&Path>,
    listen: Option<String>,
    extra_specs: Vec<PathBuf>,
) -> Result<()> {
    let mut cfg = match config_path {
        Some(path) => config::load(path)?,
        None => config::ProxyConfig::default(),
    };
    if let Some(listen) = listen {
        cfg.listen = listen;
    }
    cfg.specs.extend(extra_specs);
    proxy::serve(cfg)
}
