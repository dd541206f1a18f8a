use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use efkf::bench::{
    fully_failed_cells, render_table, table_rows, write_energy_trace, write_paths, write_rmse_table, BenchConfig,
    BenchError, ENERGY_TRACE_FILE, RMSE_TABLE_FILE,
};
use efkf::gradcheck::{run_gradcheck, GradcheckOptions, COV_TOLERANCE, MEAN_TOLERANCE};
use efkf::tracking::{benchmark_table, efkf_cell_trace};

#[derive(Parser)]
#[command(name = "efkf", version, about = "Energy-minimization Kalman filtering benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tracking benchmark and write rmse_table.csv.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: all cores). Results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare analytic energy gradients with finite differences.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 4])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 24, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long, default_value_t = 20_190_512)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Write the energy trace of one EFKF measurement update.
    EnergyTrace {
        #[arg(long)]
        config: PathBuf,
        /// Filter label, e.g. ef_0.7.
        #[arg(long)]
        filter: String,
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Time step of the update (0-based).
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Assumed-Q column label (default: the last column).
        #[arg(long)]
        column: Option<String>,
    },
}

fn runtime(e: impl std::fmt::Display) -> BenchError {
    BenchError::Runtime(e.to_string())
}

fn bench(config: PathBuf, threads: Option<usize>) -> Result<(), BenchError> {
    let cfg = BenchConfig::load(&config)?;
    let scenario = cfg.scenario()?;
    let filters = cfg.filter_specs()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(BenchError::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(runtime)?;
    let result = pool.install(|| benchmark_table(&scenario, &filters)).map_err(runtime)?;

    fs::create_dir_all(&cfg.output_dir)?;
    let rows = table_rows(&result);
    write_rmse_table(&cfg.output_dir.join(RMSE_TABLE_FILE), &rows)?;
    if cfg.write_paths {
        let column = &scenario.columns.last().expect("validated").label;
        write_paths(&cfg.output_dir, &result, column, cfg.path_runs)?;
    }
    print!("{}", render_table(&rows));
    let failed = fully_failed_cells(&result);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(BenchError::AllRunsFailed(failed))
    }
}

fn gradcheck(dims: Vec<usize>, trials: u64, seed: u64, corrupt: bool) -> Result<(), BenchError> {
    let opts = GradcheckOptions {
        dims,
        trials: trials as usize,
        seed,
        corrupt,
    };
    let report = run_gradcheck(&opts).map_err(|e| BenchError::Config(e.to_string()))?;
    for c in &report.cases {
        println!(
            "d={} alpha={} S={}: mean {:.3e} cov {:.3e}{}",
            c.dim,
            c.alpha,
            c.samples,
            c.mean_error,
            c.cov_error,
            if c.passed() { "" } else { "  FAIL" }
        );
    }
    println!(
        "worst relative error: mean {:.3e} (tol {MEAN_TOLERANCE:e}), cov {:.3e} (tol {COV_TOLERANCE:e})",
        report.worst_mean_error(),
        report.worst_cov_error()
    );
    if report.passed() {
        println!("gradcheck passed ({} instances)", report.cases.len());
        Ok(())
    } else {
        Err(BenchError::Runtime("gradcheck failed".into()))
    }
}

fn energy_trace(
    config: PathBuf,
    filter: String,
    run: usize,
    step: usize,
    column: Option<String>,
) -> Result<(), BenchError> {
    let cfg = BenchConfig::load(&config)?;
    let scenario = cfg.scenario()?;
    let spec = cfg.filter_spec(&filter)?;
    let col = match column {
        Some(label) => scenario
            .columns
            .iter()
            .position(|c| c.label == label)
            .ok_or_else(|| BenchError::Config(format!("unknown column `{label}`")))?,
        None => scenario.columns.len() - 1,
    };
    let trace = efkf_cell_trace(&spec, &scenario, col, run, step).map_err(|e| match e {
        efkf::FilterError::InvalidConfig(m) => BenchError::Config(m),
        other => runtime(other),
    })?;
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(ENERGY_TRACE_FILE);
    write_energy_trace(&path, &trace)?;
    println!("wrote {} ({} iterations)", path.display(), trace.records.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Bench { config, threads } => bench(config, threads),
        Command::Gradcheck {
            dims,
            trials,
            seed,
            corrupt,
        } => gradcheck(dims, trials, seed, corrupt),
        Command::EnergyTrace {
            config,
            filter,
            run,
            step,
            column,
        } => energy_trace(config, filter, run, step, column),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
