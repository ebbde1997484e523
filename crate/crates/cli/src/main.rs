use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Parser)]
#[command(name = "pcbf", version)]
#[command(about = "Safe MPC value function as a predictive control barrier function")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct ProblemArgs {
    /// Built-in problem: linear-unstable | nonlinear-pendulum
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,

    /// JSON problem file instead of a preset
    #[arg(long)]
    pub spec: Option<PathBuf>,

    /// Override the prediction horizon N
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// Output directory (created if missing)
    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    /// Worker threads
    #[arg(long, env = "PCBF_JOBS")]
    pub jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate V* on a 2-D grid and extract level sets.
    ///
    /// Writes grid.csv, contour_zero.json, contours.json and manifest.json.
    /// Use --res 41 for quick runs and --res 101 for figures.
    Grid {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        run: RunArgs,

        /// x1_min x1_max x2_min x2_max (default: 1.5 times the state box)
        #[arg(long, num_args = 4, allow_negative_numbers = true, value_names = ["X1_MIN", "X1_MAX", "X2_MIN", "X2_MAX"])]
        range: Option<Vec<f64>>,

        /// Grid points per axis (at least 3)
        #[arg(long, default_value_t = 41)]
        res: usize,

        /// Constraint tightening step: Δᵢ = i·δ
        #[arg(long)]
        tighten: Option<f64>,

        /// Contour levels
        #[arg(long, num_args = 1.., default_values_t = [0.0, 0.1, 0.3, 1.0, 3.0])]
        levels: Vec<f64>,
    },
    /// Closed-loop runs from seeded unsafe initial states.
    ///
    /// Writes traj_000.csv, traj_001.csv, ... and manifest.json.
    Simulate {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        run: RunArgs,

        /// Number of trajectories
        #[arg(long, default_value_t = 10)]
        samples: usize,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        /// Closed-loop steps T
        #[arg(long, default_value_t = 50)]
        steps: usize,

        /// Two-stage safety filter around u = K_p x
        #[arg(long)]
        filter: bool,

        /// Sampling box as a multiple of the state box
        #[arg(long, default_value_t = 1.2)]
        scale: f64,
    },
    /// Invariant-set baselines.
    ///
    /// polytope: LQR closed-loop maximal invariant set (mpi_polytope.json);
    /// kernel: grid viability kernel (kernel.csv); handcrafted-cbf: zero
    /// contour of the ellipse barrier (handcrafted_cbf.json).
    Baseline {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        run: RunArgs,

        #[arg(long, value_enum)]
        method: Method,

        /// Grid points per axis for kernel and handcrafted-cbf
        #[arg(long, default_value_t = 201)]
        res: usize,

        /// Sampled inputs per input axis for the kernel
        #[arg(long, default_value_t = 61)]
        inputs: usize,

        /// Barrier semi-axis along x1
        #[arg(long, default_value_t = 0.046)]
        a: f64,

        /// Barrier semi-axis along x2
        #[arg(long, default_value_t = 0.06)]
        b: f64,
    },
    /// Compare grid runs with each other and with a kernel baseline.
    ///
    /// Writes report.json: zero-set areas and area ratios, nesting of the
    /// zero sets by tightening, and Hausdorff distances between zero contours.
    Compare {
        /// Output directories of `grid` runs (or their grid.csv files)
        #[arg(long = "grid", required = true, num_args = 1..)]
        grids: Vec<PathBuf>,

        /// kernel.csv from `baseline --method kernel`
        #[arg(long)]
        baseline: Option<PathBuf>,

        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Polytope,
    Kernel,
    HandcraftedCbf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Grid {
            problem,
            run,
            range,
            res,
            tighten,
            levels,
        } => commands::grid(&problem, &run, range, res, tighten, &levels),
        Command::Simulate {
            problem,
            run,
            samples,
            seed,
            steps,
            filter,
            scale,
        } => commands::simulate(&problem, &run, samples, seed, steps, filter, scale),
        Command::Baseline {
            problem,
            run,
            method,
            res,
            inputs,
            a,
            b,
        } => commands::baseline(&problem, &run, method, res, inputs, a, b),
        Command::Compare {
            grids,
            baseline,
            out,
        } => commands::compare(&grids, baseline.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
