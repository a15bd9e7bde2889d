use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use mspg::corrector::{corrector_decay, fit_decay_ratio};
use mspg::grid::{build_mesh, BoxDomain};
use mspg::harness::{
    parse_kappa, report_patch_stats, run_experiment, scatterer_domain, write_csv, write_outputs,
    ExperimentConfig, Overrides, ProblemName,
};
use mspg::interpolation::MeshPair;

#[derive(Parser)]
#[command(name = "mspg", version, about = "Multiscale Petrov-Galerkin FEM for the Helmholtz equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a convergence study described by a config file.
    Run {
        config: PathBuf,
        #[arg(long, value_parser = parse_kappa)]
        kappa: Option<f64>,
        /// Oversampling orders, comma separated.
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<usize>>,
        /// Coarse mesh exponents k of H = 2^-k, comma separated.
        #[arg(long, value_delimiter = ',')]
        coarse: Option<Vec<u32>>,
        /// Fine mesh exponent k of h = 2^-k.
        #[arg(long)]
        fine: Option<u32>,
        #[arg(long)]
        problem: Option<String>,
        /// Output prefix; `.csv` and `.json` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count patch configuration classes (no solves).
    PatchStats {
        #[arg(long, value_enum, default_value_t = DomainArg::Square)]
        domain: DomainArg,
        /// Cells per axis.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        m: usize,
    },
    /// Decay of the correctors of the central cell on a pure-Robin unit square.
    Decay {
        /// Coarse cells per axis.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Refinement levels from coarse to fine.
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value = "8", value_parser = parse_kappa)]
        kappa: f64,
        /// Largest oversampling order.
        #[arg(long, default_value_t = 5)]
        m_max: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Square,
    Cube,
    Scatterers,
}

fn domain_of(d: DomainArg) -> BoxDomain {
    match d {
        DomainArg::Square => BoxDomain::unit(2),
        DomainArg::Cube => BoxDomain::unit(3),
        DomainArg::Scatterers => scatterer_domain(),
    }
}

fn run(cli: Cli) -> mspg::Result<bool> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Run {
            config,
            kappa,
            m,
            coarse,
            fine,
            problem,
            out,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            let problem = problem.map(|p| p.parse::<ProblemName>()).transpose()?;
            cfg.apply(&Overrides {
                kappa,
                m,
                coarse,
                fine,
                problem,
                output: out,
            });
            let rows = run_experiment(&cfg)?;
            match &cfg.output {
                Some(path) => write_outputs(&cfg, &rows, path)?,
                None => write_csv(&rows, stdout.lock())?,
            }
            Ok(rows.iter().all(|r| r.succeeded()))
        }
        Command::PatchStats { domain, n, m } => {
            let s = report_patch_stats(&domain_of(domain), n, m)?;
            let mut w = stdout.lock();
            writeln!(w, "n,m,n_classes,n_cells,reuse_factor,seconds")?;
            writeln!(
                w,
                "{},{},{},{},{:.1},{:.3}",
                s.n_per_axis, s.m, s.n_classes, s.n_cells, s.reuse_factor, s.seconds
            )?;
            Ok(true)
        }
        Command::Decay {
            n,
            levels,
            kappa,
            m_max,
        } => {
            let coarse = build_mesh(&BoxDomain::unit(2), &[n, n])?;
            let cell = coarse.cell_index([n / 2, n / 2, 0]);
            let pair = MeshPair::new(coarse, levels)?;
            let ms: Vec<usize> = (1..=m_max).collect();
            let rows = corrector_decay(&pair, cell, kappa, &ms)?;
            let mut w = stdout.lock();
            writeln!(w, "m,tail,localization_error")?;
            for r in &rows {
                writeln!(w, "{},{:e},{:e}", r.m, r.tail, r.localization_error)?;
            }
            let tails: Vec<f64> = rows.iter().map(|r| r.tail).collect();
            let locs: Vec<f64> = rows.iter().map(|r| r.localization_error).collect();
            writeln!(w, "# fitted ratio (tail): {:.4}", fit_decay_ratio(&ms, &tails))?;
            writeln!(w, "# fitted ratio (localization): {:.4}", fit_decay_ratio(&ms, &locs))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            error!("some rows failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}
