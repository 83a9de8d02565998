use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use idmlab::harness::{
    emit_plots, oracle_accuracy, read_csv, run_experiment, write_outputs, ExperimentConfig, ExperimentKind,
    RunOptions,
};
use idmlab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "idmlab", version, about = "IDM-based imitation learning experiments on gridworlds")]
struct Cli {
    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory; overrides the config's.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment config and write results.csv and summary.csv.
    Run { config: PathBuf },
    /// Run the tabular identity suite.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Render one SVG per (experiment, environment) from a results CSV.
    Plot {
        csv: PathBuf,
        /// Only plot these methods.
        #[arg(long = "method")]
        methods: Vec<String>,
    },
    /// Analytic-IDM accuracy on five seeded mazes of the given size.
    Oracle { grid_size: usize },
}

fn run(cli: Cli) -> Result<bool> {
    let opts = RunOptions {
        jobs: cli.jobs,
        seed_offset: cli.seed_offset,
    };
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_experiment(&cfg, &opts)?;
            let dir = cli.out.unwrap_or(cfg.output_dir);
            let path = write_outputs(&out, &dir)?;
            println!("{} rows -> {}", out.rows.len(), path.display());
            Ok(true)
        }
        Command::Verify { trials } => {
            let mut cfg = ExperimentConfig::new(ExperimentKind::VerifyTabular, Vec::new(), vec![0]);
            cfg.verify.trials = trials;
            let out = run_experiment(&cfg, &opts)?;
            let report = &out.artifacts[0].1;
            print!("{report}");
            if let Some(dir) = cli.out {
                write_outputs(&out, &dir)?;
            }
            Ok(!out.rows.iter().any(|r| r.metric == "passed" && r.value == 0.0))
        }
        Command::Plot { csv, methods } => {
            let file = std::fs::File::open(&csv).map_err(|e| Error::io(&csv, e))?;
            let rows = read_csv(file)?;
            let dir = cli
                .out
                .unwrap_or_else(|| csv.parent().map(PathBuf::from).unwrap_or_default());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let plots = emit_plots(&rows, &methods);
            if plots.is_empty() {
                eprintln!("warning: nothing to plot");
            }
            for p in plots {
                let path = dir.join(p.file_name());
                std::fs::write(&path, &p.svg).map_err(|e| Error::io(&path, e))?;
                println!("{} ({} series)", path.display(), p.series);
            }
            Ok(true)
        }
        Command::Oracle { grid_size } => {
            let seeds: Vec<u64> = (0..5).map(|s| s + cli.seed_offset).collect();
            let mut exact = true;
            for line in oracle_accuracy(grid_size, &seeds)? {
                println!(
                    "maze{grid_size} seed={} transitions={} pos_accuracy={:.4} img_accuracy={:.4}",
                    line.maze_seed, line.transitions, line.pos_accuracy, line.img_accuracy
                );
                exact &= line.pos_accuracy == 1.0 && line.img_accuracy == 1.0;
            }
            Ok(exact)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
