use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskdyn_cli::config::{ExperimentConfig, RawConfig, KEYS, OUT_DIR_ENV};
use maskdyn_cli::experiment::{self, Verification};
use maskdyn_cli::{CliError, Document, EXIT_VERIFICATION_FAILED, VERSION};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "maskdyn", version = VERSION, about = "Token dynamics of masked self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify an attention mask.
    Mask {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        file: Option<PathBuf>,
        /// Print the JSON document instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Simulate one configuration and write per-seed trajectory CSVs.
    Run(Common),
    /// Run the grid mask x mode x temperature x seed in parallel.
    Sweep(Common),
    /// Check a collapse bound or the equilibrium construction.
    Verify(Common),
    /// Construct one equilibrium of the LayerNorm dynamics.
    Equilibrium(Common),
    /// List the configuration keys.
    Keys,
}

/// Every flag is an override of the config key of the same name.
#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long, alias = "mask_file")]
    mask_file: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long = "T", visible_alias = "steps")]
    steps: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, alias = "qk_norm")]
    qk_norm: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    w: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    signs: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    snapshots: Option<String>,
    #[arg(long)]
    theorem: Option<String>,
    #[arg(long = "out")]
    out_dir: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut raw = match &self.config {
            Some(path) => RawConfig::load(path)?,
            None => RawConfig::default(),
        };
        let flags = [
            ("mask", &self.mask),
            ("width", &self.width),
            ("mask_file", &self.mask_file),
            ("n", &self.n),
            ("d", &self.d),
            ("steps", &self.steps),
            ("mode", &self.mode),
            ("schedule", &self.schedule),
            ("qk_norm", &self.qk_norm),
            ("temperature", &self.temperature),
            ("w", &self.w),
            ("k", &self.k),
            ("signs", &self.signs),
            ("seeds", &self.seeds),
            ("init", &self.init),
            ("snapshots", &self.snapshots),
            ("theorem", &self.theorem),
            ("out_dir", &self.out_dir),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                raw.set(key, v.as_str())?;
            }
        }
        raw.apply_overrides(&self.set)?;
        ExperimentConfig::from_raw(&raw, std::env::var(OUT_DIR_ENV).ok().as_deref())
    }
}

#[derive(Serialize)]
struct MaskEcho<'a> {
    kind: &'a str,
    n: usize,
    width: Option<usize>,
    file: Option<&'a PathBuf>,
}

#[derive(Serialize)]
struct MaskReport {
    n: usize,
    edges: usize,
    has_self_loops: bool,
    strongly_connected: bool,
    quasi_strongly_connected: bool,
    /// 1-based.
    center_nodes: Vec<usize>,
    center_count: usize,
    radius: Option<usize>,
    diameter: Option<usize>,
    max_in_degree: usize,
}

fn cmd_mask(
    kind: &str,
    n: Option<usize>,
    width: Option<usize>,
    file: Option<&PathBuf>,
    json: bool,
) -> Result<bool, CliError> {
    let mut raw = RawConfig::default();
    raw.set("mask", kind)?;
    if let Some(n) = n {
        raw.set("n", n.to_string())?;
    } else if kind != "custom" {
        return Err(CliError::usage("--n is required"));
    }
    if let Some(w) = width {
        raw.set("width", w.to_string())?;
    }
    if let Some(f) = file {
        raw.set("mask_file", f.display().to_string())?;
    }
    let cfg = ExperimentConfig::from_raw(&raw, None)?;
    let g = cfg.build_mask(cfg.single_mask()?)?;
    let c = g.classify();
    let report = MaskReport {
        n: g.n(),
        edges: g.edge_count(),
        has_self_loops: c.has_self_loops,
        strongly_connected: c.strongly_connected,
        quasi_strongly_connected: c.quasi_strongly_connected,
        center_nodes: c.center_nodes_one_based(),
        center_count: c.center_count,
        radius: c.radius,
        diameter: c.diameter,
        max_in_degree: g.max_in_degree(),
    };
    if json {
        let echo = MaskEcho {
            kind,
            n: g.n(),
            width,
            file,
        };
        println!("{}", Document::new("mask", &echo, &report).to_json());
    } else {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        println!("n={}", report.n);
        println!("edges={}", report.edges);
        println!("has_self_loops={}", report.has_self_loops);
        println!("strongly_connected={}", report.strongly_connected);
        println!(
            "quasi_strongly_connected={}",
            report.quasi_strongly_connected
        );
        println!("center_nodes={:?}", report.center_nodes);
        println!("radius={}", opt(report.radius));
        println!("diameter={}", opt(report.diameter));
    }
    if let Err(e) = g.assert_a1() {
        return Err(CliError::usage(format!("A1 violation: {e}")));
    }
    Ok(true)
}

fn cmd_run(cfg: &ExperimentConfig) -> Result<bool, CliError> {
    let summaries = experiment::run(cfg)?;
    Document::new("run", cfg, &summaries).write(&cfg.out_dir.join("run.json"))?;
    for s in &summaries {
        let slope = s
            .mu_log10_slope
            .map_or("none".into(), |v| format!("{v:.4}"));
        let verdict = match s.pass {
            Some(true) => " bounds pass",
            Some(false) => " bounds FAIL",
            None => "",
        };
        println!(
            "seed {}: final mu {:.3e}, log10 slope {slope}, rank {}{verdict}",
            s.seed, s.final_mu, s.final_rank
        );
    }
    Ok(summaries.iter().all(|s| s.pass != Some(false)))
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<bool, CliError> {
    let outcomes = experiment::sweep(cfg)?;
    Document::new("sweep", cfg, &outcomes).write(&cfg.out_dir.join("sweep.json"))?;
    let failed: Vec<_> = outcomes.iter().filter(|o| o.error.is_some()).collect();
    println!(
        "{} trajectories, {} failed; aggregate in {}",
        outcomes.len(),
        failed.len(),
        cfg.out_dir.join("aggregate.csv").display()
    );
    for o in &failed {
        eprintln!(
            "{} {} temp {} seed {}: {}",
            o.mask.label(),
            o.mode,
            o.temperature,
            o.seed,
            o.error.as_deref().unwrap_or("")
        );
    }
    Ok(failed.is_empty())
}

fn cmd_verify(cfg: &ExperimentConfig) -> Result<bool, CliError> {
    let v = experiment::verify(cfg)?;
    Document::new("verify", cfg, &v).write(&cfg.out_dir.join("verify.json"))?;
    match &v {
        Verification::Bounds {
            theorem,
            seeds,
            pass,
        } => {
            for s in seeds {
                let violations: usize = s.reports.iter().map(|r| r.violations.len()).sum();
                println!(
                    "theorem {theorem} seed {}: {} ({violations} violations)",
                    s.seed,
                    verdict(s.pass)
                );
            }
            println!("theorem {theorem}: {}", verdict(*pass));
        }
        Verification::Equilibria { checks, pass, .. } => {
            for c in checks {
                println!(
                    "k={} signs {:?}: residual {:.2e}, rank {} {}",
                    c.k,
                    c.signs,
                    c.residual,
                    c.rank,
                    verdict(c.pass)
                );
            }
            println!("theorem 3: {} ({} checks)", verdict(*pass), checks.len());
        }
    }
    Ok(v.pass())
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn cmd_equilibrium(cfg: &ExperimentConfig) -> Result<bool, CliError> {
    let s = experiment::equilibrium(cfg)?;
    Document::new("equilibrium", cfg, &s).write(&cfg.out_dir.join("equilibrium.json"))?;
    let bound = s
        .stable_rank_bound
        .map_or(String::new(), |b| format!(" <= {b:.6}"));
    println!(
        "N={} d={} k={} w={}: residual {:.2e}, rank {}, stable rank {:.6}{bound}",
        s.n, s.d, s.k, s.w, s.residual, s.rank, s.stable_rank
    );
    Ok(s.stable_rank_bound
        .is_none_or(|b| s.stable_rank <= b + 1e-12))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Mask {
            kind,
            n,
            width,
            file,
            json,
        } => cmd_mask(kind, *n, *width, file.as_ref(), *json),
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<12} {doc}");
            }
            Ok(true)
        }
        Command::Run(c) => c.resolve().and_then(|cfg| cmd_run(&cfg)),
        Command::Sweep(c) => c.resolve().and_then(|cfg| cmd_sweep(&cfg)),
        Command::Verify(c) => c.resolve().and_then(|cfg| cmd_verify(&cfg)),
        Command::Equilibrium(c) => c.resolve().and_then(|cfg| cmd_equilibrium(&cfg)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERIFICATION_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
