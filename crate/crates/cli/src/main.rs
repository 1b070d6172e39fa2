//! `memlens`: run memory-correction experiments from a config file.
//!
//! Exit codes: 0 when every gate passes, 1 when a gate fails or the
//! computation breaks down, 2 for usage and configuration errors.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use commands::{Artifact, Failure, Outcome};

#[derive(Parser, Debug)]
#[command(name = "memlens", version, about = "Memoryless approximations of momentum optimizers and their correction terms")]
#[command(after_help = config::key_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config with [run], [loss], [optimizer] and [experiment] sections,
    /// or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set optimizer.beta1=0.95`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory [default: $MEMLENS_OUT_DIR, else ./memlens-out]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads [default: number of logical processors]
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// One trajectory (memoryful, or a memoryless kind via experiment.kind).
    Run,
    /// Global error of a memoryless kind over experiment.h_grid, with slope fit.
    Sweep,
    /// Sup one-step defect over experiment.h_grid, with slope fit.
    Defect,
    /// Per-step gaps of both memoryless kinds at each h in experiment.h_list.
    Closeness,
    /// Memoryful iterates against the modified ODE flow over experiment.h_grid.
    OdeCompare,
    /// Permutation-averaged correction for a mini-batch quadratic family.
    MinibatchCorr,
    /// Correction terms from every method at experiment.steps.
    CorrTable,
    /// Finite-difference checks of gradients and Hessian-vector products.
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Sweep => "sweep",
            Command::Defect => "defect",
            Command::Closeness => "closeness",
            Command::OdeCompare => "ode-compare",
            Command::MinibatchCorr => "minibatch-corr",
            Command::CorrTable => "corr-table",
            Command::Gradcheck => "gradcheck",
        }
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| std::env::var_os("MEMLENS_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("memlens-out"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn file_stem(a: &Artifact, hash: &str) -> String {
    format!("{}_{}_{hash}", a.experiment, a.kind)
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    let file = config::load(cli.config.as_deref(), &cli.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    let (mut resolved, run) = file.resolve().map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--jobs: {e}")))?;
    }
    let e = &mut resolved.experiment;
    let outcome: Outcome = match cli.command {
        Command::Run => commands::run(&run, e),
        Command::Sweep => commands::sweep(&run, e),
        Command::Defect => commands::defect(&run, e),
        Command::Closeness => commands::closeness(&run, e),
        Command::OdeCompare => commands::ode_compare(&run, e),
        Command::MinibatchCorr => commands::minibatch_corr(&run, e),
        Command::CorrTable => commands::corr_table_cmd(&run, e),
        Command::Gradcheck => commands::gradcheck(&run, e),
    }?;

    let echo = serde_json::to_value(&resolved).expect("config serializes");
    let canonical = serde_json::to_vec(&json!({ "command": cli.command.name(), "config": &echo })).expect("json");
    let hash = hex::encode(&Sha256::digest(&canonical)[..6]);

    let dir = out_dir(cli);
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for a in &outcome.artifacts {
        let stem = file_stem(a, &hash);
        let csv = format!("{stem}.csv");
        let summary = format!("{stem}.json");
        write(&dir.join(&csv), &a.csv)?;
        let text = serde_json::to_string_pretty(&a.summary).expect("json") + "\n";
        write(&dir.join(&summary), text.as_bytes())?;
        println!("wrote {}", dir.join(&csv).display());
        files.push(csv);
        files.push(summary);
    }
    let manifest = json!({
        "tool": "memlens",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "config": echo,
        "outputs": files,
        "gates": &outcome.gates,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("json") + "\n";
    write(&dir.join("manifest.json"), text.as_bytes())?;

    for line in &outcome.lines {
        println!("{line}");
    }
    let mut all = true;
    for g in &outcome.gates {
        println!("gate {}: {} ({})", g.name, if g.passed { "pass" } else { "FAIL" }, g.detail);
        all &= g.passed;
    }
    if !all {
        let failed: Vec<&str> = outcome.gates.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect();
        eprintln!("gate failure: {}", failed.join(", "));
    }
    Ok(all)
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
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
