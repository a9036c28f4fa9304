use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mlkbf_core::harness::{estimator_fit, matched_mse_costs, run_rate_experiment, Estimator};
use mlkbf_core::io::{self as mio, read_dataset, write_dataset, ExperimentFile, ModelConfig};
use mlkbf_core::kalman::{exact_log_nc, kbf_run};
use mlkbf_core::multilevel::{ml_log_nc, single_level_cost, MLConfig};
use mlkbf_core::spsa::rml_spsa_run;
use mlkbf_core::{enkbf, paths, SeedSpec, Variant};

#[derive(Parser, Debug)]
#[command(name = "mlkbf", version, about = "Multilevel ensemble Kalman-Bucy filters: normalizing constants and parameter estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a truth path and its observation record.
    GenData {
        /// Preset name (ou5, ou1, linear, scalar-drift, lorenz63, lorenz96) or a TOML file with a [model] table.
        #[arg(long)]
        model: String,
        #[arg(long)]
        level: u32,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reference Kalman-Bucy filter and its exact log-normalizing-constant.
    Kbf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        level: u32,
        /// Also write the mean and covariance diagonal at every step.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Single-level ensemble estimate of the log-normalizing-constant.
    Nc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        level: u32,
        #[arg(long)]
        particles: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Multilevel estimate of the log-normalizing-constant.
    MlNc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        lstar: u32,
        #[arg(long = "L")]
        target: u32,
        #[arg(long)]
        c0: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Single-level versus multilevel MSE/cost sweep.
    Rates {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online parameter estimation on a synthetic record.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MLKBF_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MLKBF_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("MLKBF_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    Ok(())
}

fn load_model(name: &str) -> Result<ModelConfig> {
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "toml") || path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        #[derive(serde::Deserialize)]
        struct Wrapper {
            model: ModelConfig,
        }
        let w: Wrapper = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(w.model)
    } else {
        Ok(ModelConfig::preset(name))
    }
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            model,
            level,
            horizon,
            seed,
            out,
        } => {
            let cfg = load_model(&model)?;
            let data = mio::generate_dataset(&cfg, level, horizon, seed)?;
            write_dataset(&out, &data).with_context(|| format!("writing {}", out.display()))?;
            log::info!("wrote {} steps to {}", data.obs.steps(), out.display());
        }
        Command::Kbf { data, level, path } => {
            let ds = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let run = kbf_run(&ds.model, &ds.obs, level)?;
            let u = exact_log_nc(&run.means, &ds.obs, &ds.model, level)?;
            if let Some(p) = path {
                mio::write_kbf_path(File::create(&p)?, &run)?;
            }
            let m = run.means.last().expect("non-empty path");
            let p = run.covs.last().expect("non-empty path");
            let mut w = csv_writer(io::stdout().lock());
            let mut header = vec!["level".to_string(), "steps".to_string(), "log_nc".to_string()];
            header.extend((1..=m.len()).map(|i| format!("m_{i}")));
            header.extend((1..=m.len()).map(|i| format!("P_{i}{i}")));
            w.write_record(&header)?;
            let mut row = vec![level.to_string(), (run.means.len() - 1).to_string(), mio::fmt_f64(u)];
            row.extend(m.iter().map(|v| mio::fmt_f64(*v)));
            row.extend((0..m.len()).map(|i| mio::fmt_f64(p[(i, i)])));
            w.write_record(&row)?;
            w.flush()?;
        }
        Command::Nc {
            data,
            variant,
            level,
            particles,
            seed,
        } => {
            let ds = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let run = enkbf::enkbf_run(&ds.model, &ds.obs, level, particles, variant, &SeedSpec::new(seed))?;
            let mut w = csv_writer(io::stdout().lock());
            w.write_record(["variant", "level", "particles", "seed", "log_nc", "cost"])?;
            w.write_record([
                variant.tag().to_string(),
                level.to_string(),
                particles.to_string(),
                seed.to_string(),
                mio::fmt_f64(run.log_nc.u),
                mio::fmt_f64(single_level_cost(level, particles) * ds.obs.horizon() as f64),
            ])?;
            w.flush()?;
        }
        Command::MlNc {
            data,
            variant,
            lstar,
            target,
            c0,
            seed,
        } => {
            let ds = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let cfg = MLConfig::allocated(c0, lstar, target, variant, ds.obs.horizon())?;
            let est = ml_log_nc(&ds.model, &ds.obs, &cfg, &SeedSpec::new(seed))?;
            mio::write_ml_estimate(io::stdout().lock(), &est)?;
        }
        Command::Rates { config, out } => {
            let file = ExperimentFile::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let (cfg, l_data) = file.rates()?;
            let model = file.model.build(file.data.seed)?;
            let (_, obs) = paths::simulate_truth_and_obs(&model, l_data, cfg.horizon, &SeedSpec::new(file.data.seed));
            let mut w = csv_writer(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            w.write_record(mio::RECORD_HEADER)?;
            w.flush()?;
            let mut write_err = None;
            let outcome = run_rate_experiment(&model, &obs, &cfg, |r| {
                let res = w.write_record(mio::record_row(r)).and_then(|_| w.flush().map_err(csv::Error::from));
                if let (Err(e), None) = (res, &write_err) {
                    write_err = Some(e);
                }
            });
            if let Some(e) = write_err {
                return Err(e).context("writing records");
            }
            let outcome = outcome?;
            log::info!("reference {:.10e}", outcome.reference);
            for est in [Estimator::SL, Estimator::ML] {
                if let Ok(fit) = estimator_fit(&outcome.records, est) {
                    eprintln!("{est} log-log slope {:.4}", fit.slope);
                }
            }
            if let Ok(matched) = matched_mse_costs(&outcome.records) {
                for m in matched {
                    eprintln!(
                        "L={} ML cost {:.4e} vs SL cost at equal MSE {:.4e}",
                        m.level, m.ml_cost, m.sl_cost
                    );
                }
            }
        }
        Command::Estimate { config, out } => {
            let file = ExperimentFile::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let (cfg, truth, l_data) = file.spsa()?;
            let family = file
                .model
                .family(file.data.seed)?
                .with_context(|| format!("preset {:?} has no parameters to estimate", file.model.preset))?;
            let horizon = file.data.horizon.max(cfg.iterations);
            let truth_model = family.build(&truth)?;
            let (_, obs) = paths::simulate_truth_and_obs(&truth_model, l_data, horizon, &SeedSpec::new(file.data.seed));
            let traj = rml_spsa_run(family.as_ref(), &obs, &cfg)?;
            mio::write_trajectory(File::create(&out).with_context(|| format!("creating {}", out.display()))?, &traj)?;
            if let Some(e) = traj.aborted {
                bail!("estimation stopped after {} iterations: {e}", traj.records.len());
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    init_logging();
    init_threads()?;
    run(Cli::parse())
}
