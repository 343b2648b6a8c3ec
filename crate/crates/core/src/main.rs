use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use arfbl::config::{Config, ModelKind};
use arfbl::controllers::LawKind;
use arfbl::experiment;
use arfbl::Result;

#[derive(Parser)]
#[command(
    name = "arfbl",
    version,
    about = "Robust and adaptive feedback-linearization experiments on a planar RR arm"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static bound-based robust control vs the adaptive law on the perturbed model.
    Experiment1(Common),
    /// Plain feedback linearization vs the adaptive law on the GP model.
    Experiment2(Common),
    /// Compute the uncertainty bounds of the perturbed model.
    Bounds(Common),
    /// Sample the GP training set from the true inverse dynamics.
    GenDataset(Common),
    /// Fit the per-joint GP hyperparameters.
    FitGp(Common),
    /// One closed-loop run with the configured model and law.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    law: Option<LawKind>,
    /// Growth rate of ρ; applies to the selected subcommand's adaptive run.
    #[arg(long)]
    k_rho: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    eps1: Option<f64>,
    #[arg(long)]
    kp: Option<f64>,
    #[arg(long)]
    kd: Option<f64>,
    #[arg(long)]
    p_e: Option<f64>,
    #[arg(long)]
    p_ed: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long)]
    rho0: Option<f64>,
    /// Reference trajectory seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    n_components: Option<usize>,
    #[arg(long)]
    relative_scale: Option<f64>,
    #[arg(long)]
    perturbation_seed: Option<u64>,
    #[arg(long)]
    dataset_seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    hyperparams: Option<PathBuf>,
    /// Tie all GP lengthscales to one value.
    #[arg(long)]
    isotropic: bool,
    #[arg(long)]
    fit_seed: Option<u64>,
    #[arg(long)]
    model: Option<ModelKind>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Common {
    fn config(&self, which: &Command) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        let c = &mut cfg.controller;
        set(&mut c.law, self.law);
        set(&mut c.eps, self.eps);
        set(&mut c.eps1, self.eps1);
        set(&mut c.kp, self.kp);
        set(&mut c.kd, self.kd);
        set(&mut c.p_e, self.p_e);
        set(&mut c.p_ed, self.p_ed);
        match which {
            Command::Experiment1(_) => set(&mut cfg.experiment1.k_rho, self.k_rho),
            Command::Experiment2(_) => set(&mut cfg.experiment2.k_rho, self.k_rho),
            _ => set(&mut cfg.controller.k_rho, self.k_rho),
        }
        set(&mut cfg.sim.duration, self.duration);
        set(&mut cfg.sim.step, self.step);
        set(&mut cfg.sim.substeps, self.substeps);
        set(&mut cfg.sim.rho0, self.rho0);
        set(&mut cfg.trajectory.seed, self.seed);
        set(&mut cfg.trajectory.amplitude, self.amplitude);
        set(&mut cfg.trajectory.n_components, self.n_components);
        set(&mut cfg.perturbation.relative_scale, self.relative_scale);
        set(&mut cfg.perturbation.seed, self.perturbation_seed);
        set(&mut cfg.gp.dataset_seed, self.dataset_seed);
        set(&mut cfg.gp.fit.seed, self.fit_seed);
        set(&mut cfg.simulate.model, self.model);
        if self.dataset.is_some() {
            cfg.gp.dataset = self.dataset.clone();
        }
        if self.hyperparams.is_some() {
            cfg.gp.hyperparams = self.hyperparams.clone();
        }
        if self.isotropic {
            cfg.gp.fit.ard = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<String> {
    let common = match &cli.command {
        Command::Experiment1(c)
        | Command::Experiment2(c)
        | Command::Bounds(c)
        | Command::GenDataset(c)
        | Command::FitGp(c)
        | Command::Simulate(c) => c,
    };
    let cfg = common.config(&cli.command)?;
    let out = &common.out;
    Ok(match &cli.command {
        Command::Experiment1(_) => experiment::experiment1(&cfg, out)?.report.to_text(),
        Command::Experiment2(_) => experiment::experiment2(&cfg, out)?.report.to_text(),
        Command::Bounds(_) => {
            let b = experiment::cmd_bounds(&cfg, out)?;
            format!(
                "alpha={} phi={} q_m={} m_min={} m_max={}\nwritten to {}\n",
                b.alpha,
                b.phi,
                b.q_m,
                b.m_min,
                b.m_max,
                out.join("bounds.toml").display()
            )
        }
        Command::GenDataset(_) => {
            let ds = experiment::cmd_gen_dataset(&cfg, out)?;
            format!(
                "{} samples written to {}\n",
                ds.len(),
                out.join("dataset.csv").display()
            )
        }
        Command::FitGp(_) => {
            let models = experiment::cmd_fit_gp(&cfg, out)?;
            let mut s = String::new();
            for (j, m) in models.iter().enumerate() {
                s += &format!(
                    "joint {}: log marginal likelihood {:.6}\n",
                    j + 1,
                    m.log_marginal_likelihood()
                );
            }
            s + &format!(
                "hyperparameters written to {}\n",
                out.join("hyperparams.toml").display()
            )
        }
        Command::Simulate(_) => experiment::cmd_simulate(&cfg, out)?.1.to_text(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
