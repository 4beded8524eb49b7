//! `degaa` command line: run pipeline stages and ablation studies.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 missing or stale prerequisite, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use degaa::config::RunConfig;
use degaa::pipeline::{run_ablation, run_seeds, write_ablation, Stage, Study, Workspace};
use degaa::Error;

#[derive(Parser, Debug)]
#[command(name = "degaa", version, about = "Open-set multi-source multi-target domain adaptation on synthetic data")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: `output_dir` from the config, else `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of consecutive seeds, starting at the configured seed.
    #[arg(long, global = true, default_value_t = 1)]
    seeds: usize,

    /// Recompute centroids at each pseudo-label refresh.
    #[arg(long, global = true)]
    refresh_centroids: Option<bool>,

    /// Draw fresh source and target batches for every episode.
    #[arg(long, global = true)]
    resample_per_episode: bool,

    /// Restrict intra-role edges to pairs from different domains.
    #[arg(long, global = true)]
    strict_intra: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic bundle.
    Gen,
    /// Train the embedding network and write the domain table.
    Embed,
    /// Supervised warm-up and class centroids.
    Warmup,
    /// Pseudo-labelling and joint adaptation.
    Adapt,
    /// Open-set evaluation on the targets.
    Eval,
    /// Run several stages in order (default: all of them).
    All {
        /// Comma-separated subset of gen,embed,warmup,adapt,eval.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Run ablation studies and write CSV reports.
    Ablate {
        /// embedding, combine, aggregation, lof_dim, label_curve or all.
        #[arg(default_value = "all")]
        study: String,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::MissingPrerequisite { .. } | Error::StalePrerequisite { .. } => 3,
        Error::Numeric { .. } => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.refresh_centroids {
        cfg.adapt.refresh_centroids = r;
    }
    if common.resample_per_episode {
        cfg.adapt.resample_per_episode = true;
    }
    if common.strict_intra {
        cfg.gaa.strict_intra = true;
    }
    if common.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));

    let stages: Vec<Stage> = match &cli.command {
        Command::Gen => vec![Stage::Gen],
        Command::Embed => vec![Stage::Embed],
        Command::Warmup => vec![Stage::Warmup],
        Command::Adapt => vec![Stage::Adapt],
        Command::Eval => vec![Stage::Eval],
        Command::All { stages: None } => Stage::ALL.to_vec(),
        Command::All { stages: Some(list) } => list.iter().map(|s| s.trim().parse()).collect::<Result<_, _>>()?,
        Command::Ablate { study } => {
            let studies: Vec<Study> =
                if study == "all" { Study::ALL.to_vec() } else { vec![study.parse()?] };
            let seeds: Vec<u64> = (0..cli.common.seeds as u64).map(|i| cfg.seed + i).collect();
            for st in studies {
                let report = run_ablation(&cfg, st, &seeds)?;
                for path in write_ablation(&report, &cfg, &out)? {
                    info!("wrote {}", path.display());
                }
                for row in &report.rows {
                    println!(
                        "{}/{}: os={:.4} os*={:.4} unknown_recall={}",
                        row.study,
                        row.variant,
                        row.os,
                        row.os_star,
                        row.unknown_recall.map_or("n/a".into(), |u| format!("{u:.4}"))
                    );
                }
            }
            return Ok(());
        }
    };

    if cli.common.seeds > 1 {
        if let Some(summary) = run_seeds(&cfg, &out, &stages, cli.common.seeds)? {
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    } else {
        let ws = Workspace::new(cfg, &out)?;
        if let Some(m) = ws.run(&stages)? {
            println!(
                "os={:.4} os*={:.4} unknown_recall={}",
                m.os,
                m.os_star,
                m.unknown_recall.map_or("n/a".into(), |u| format!("{u:.4}"))
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEGAA_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
