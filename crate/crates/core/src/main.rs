use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lanecbf::controller::ControllerMode;
use lanecbf::sim::{run_scenario, write_log, RunResult, ScenarioConfig};

#[derive(Parser, Debug)]
#[command(name = "lanecbf", version, about = "Emergency lane-change lab with predictive CBF controllers")]
struct Cli {
    /// Recorded in the run summary; the pipeline itself is deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML scenario file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for logs.
    #[arg(long)]
    out: PathBuf,
    /// Config override `key=value` (TOML literal), repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one controller mode.
    Run {
        #[arg(long)]
        mode: ControllerMode,
        #[command(flatten)]
        common: Common,
    },
    /// Run baseline, nominal and robust on the same scenario.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Run one or all modes for each value of a config key.
    Sweep {
        /// Dotted config key, e.g. `kappa_ru` or `presets.idm.normal.b`.
        #[arg(long)]
        param: String,
        /// Values as TOML literals, space or comma separated.
        #[arg(long, num_args = 1.., required = true)]
        values: Vec<String>,
        /// Mode to run; all three when omitted.
        #[arg(long)]
        mode: Option<ControllerMode>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common, seed: Option<u64>) -> anyhow::Result<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        cfg = cfg.with_override(k.trim(), v.trim())?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_modes(cfg: &ScenarioConfig, modes: &[ControllerMode]) -> Vec<RunResult> {
    std::thread::scope(|s| {
        let handles: Vec<_> = modes.iter().map(|&m| s.spawn(move || run_scenario(cfg, m))).collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    })
}

fn report(r: &RunResult) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |t| format!("{t:.2}"));
    format!(
        "{:<8} outcome={:?} completion={} violation={} min_h_ru={:.3} min_h_sv={:.3} infeasible={} steps={}",
        r.mode.name(),
        r.outcome,
        fmt(r.completion_time),
        fmt(r.first_violation),
        r.min_h_ru,
        r.min_h_sv,
        r.infeasible_steps,
        r.records.len()
    )
}

fn write_all(results: &[RunResult], cfg: &ScenarioConfig, dir: &Path) -> anyhow::Result<()> {
    for r in results {
        let paths = write_log(r, cfg, dir)?;
        log::info!("wrote {} and {}", paths.csv.display(), paths.summary.display());
        println!("{}", report(r));
    }
    Ok(())
}

fn split_values(values: &[String]) -> Vec<String> {
    values
        .iter()
        .flat_map(|v| {
            if v.trim_start().starts_with('[') {
                vec![v.trim().to_string()]
            } else {
                v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
        })
        .collect()
}

fn sweep(param: &str, values: &[String], modes: &[ControllerMode], base: &ScenarioConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    let table_path = out.join("sweep.csv");
    let mut table = csv::Writer::from_path(&table_path).with_context(|| format!("writing {}", table_path.display()))?;
    table.write_record([
        "index",
        "param",
        "value",
        "mode",
        "outcome",
        "completion_time",
        "first_violation",
        "min_h_ru",
        "min_h_sv",
        "infeasible_steps",
    ])?;
    for (i, value) in split_values(values).iter().enumerate() {
        let cfg = base.with_override(param, value)?;
        let dir = out.join(format!("{i:03}"));
        println!("{param} = {value} -> {}", dir.display());
        let results = run_modes(&cfg, modes);
        write_all(&results, &cfg, &dir)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |t| t.to_string());
        for r in &results {
            table.write_record([
                i.to_string(),
                param.to_string(),
                value.clone(),
                r.mode.name().to_string(),
                format!("{:?}", r.outcome).to_lowercase(),
                opt(r.completion_time),
                opt(r.first_violation),
                r.min_h_ru.to_string(),
                r.min_h_sv.to_string(),
                r.infeasible_steps.to_string(),
            ])?;
        }
    }
    table.flush().with_context(|| format!("writing {}", table_path.display()))?;
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { mode, common } => {
            let cfg = load_config(&common, cli.seed)?;
            write_all(&run_modes(&cfg, &[mode]), &cfg, &common.out)
        }
        Command::Compare { common } => {
            let cfg = load_config(&common, cli.seed)?;
            write_all(&run_modes(&cfg, &ControllerMode::ALL), &cfg, &common.out)
        }
        Command::Sweep {
            param,
            values,
            mode,
            common,
        } => {
            let cfg = load_config(&common, cli.seed)?;
            let modes = mode.map_or(ControllerMode::ALL.to_vec(), |m| vec![m]);
            sweep(&param, &values, &modes, &cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
