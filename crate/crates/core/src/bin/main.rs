use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_design::pipeline::{self, RunConfig, Stage};
use latent_design::{Error, Result};

const CONFIG_KEYS: &str = "\
CONFIG KEYS (TOML; every key optional, unknown keys are rejected)
  seed                              master seed; unset section seeds derive from it [0]

  [world]
  seed                              synthetic world seed [derived]
  archetypes                        number of site archetypes K [8]
  latent_dim                        latent chemical width [56]
  oracle_scale                      oracle well depth [300]
  kernel_width                      oracle kernel width tau [latent_dim]
  dsx_noise                         observed dsx noise stddev [10]
  jitter_min, jitter_max            binder jitter range around a center [0.3, 1.0]
  min_atoms, max_atoms              site size range [8, 30]
  site_radius                       site coordinate radius [12]

  [model]
  latent_dim                        must equal world.latent_dim [56]
  signature_dim                     site signature width N_P [100]
  gcn_layers                        convolution layers L [2]
  affinity_hidden, affinity_dropout [100, 50], 0.25
  mapper_hidden, mapper_dropout     [150, 75], 0.4
  toxicity_hidden, toxicity_dropout [100, 50], 0.25
  property_hidden, property_dropout [120, 60], 0.5

  [training]
  seed                              shuffling and dropout seed [derived]
  learning_rate                     ADAM step size [1e-3]
  batch_size                        joint batch, half positive half scrambled; even [32]
  epochs                            joint epochs [100]
  toxicity_epochs, property_epochs  head epochs [epochs]
  weight_decay                      L2 coefficient [1e-4]
  w_m                               toxicity weight at label 1 [5]
  validation_fraction               held out of each training set [0.1]
  plc_train, plc_test               PLC dataset sizes [4000, 500]
  tox_train, tox_test               toxicity dataset sizes [8000, 1000]
  prop_train, prop_test             property dataset sizes [20000, 1000]
  loss_weights.bce, .dsx, .mapper   joint loss weights [1, 1, 1]

  [evaluation]
  scrambles                         scrambled negatives per positive [100]
  histogram_bins                    [40]
  delta_threshold                   restricted-delta cutoff [-100]

  [optimization]
  seed                              per-target seeds derive from it [derived]
  steps                             descent steps T [20000]
  learning_rate                     ADAM step size [0.01]
  stride                            trajectory sampling stride [100]
  targets                           optimize only the first N test sites [all]
  coeffs.alpha                      weights of p_B and g_h(dsx) [-10, 0.005]
  coeffs.gamma                      weights of g_q(logP), QED, SAS, tox [-0.5, -1, 0.1, 1]
  coeffs.dsx_floor                  g_h floor [-250]
  coeffs.logp_window                g_q roots [0, 5]

  [paths]
  data_dir                          [data]
  checkpoint_dir                    [checkpoints]
  report_dir                        [reports]

EXIT CODES
  0 ok, 2 usage, 3 config, 4 missing-file, 5 checkpoint, 6 parse, 7 io, 8 data,
  9 dimension, 10 numeric/divergence/non-finite-energy, 11 index, 12 batch-size";

#[derive(Parser)]
#[command(
    name = "latent-design",
    version,
    about = "Targeted molecular design in a continuous latent space"
)]
#[command(after_long_help = CONFIG_KEYS)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set training.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world manifest and every dataset.
    GenData,
    /// Train models and write checkpoints plus loss histories.
    Train {
        /// Train only these stages: joint, toxicity, properties.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Score trained models on held-out data.
    Evaluate,
    /// Optimize latent chemicals for the held-out sites.
    Optimize {
        /// Worker threads; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate report CSVs into summary.csv.
    Report,
    /// Print the fully resolved configuration.
    ShowConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        Error::Config(_) => 3,
        Error::MissingFile(_) => 4,
        Error::Checkpoint { .. } => 5,
        Error::Parse { .. } => 6,
        Error::Io { .. } => 7,
        Error::Data(_) => 8,
        Error::Dimension { .. } => 9,
        Error::Numeric { .. } | Error::Divergence { .. } | Error::NonFiniteEnergy { .. } => 10,
        Error::Index { .. } => 11,
        Error::BatchSize { .. } => 12,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path, &cli.common.overrides)?,
        None => RunConfig::from_overrides(&cli.common.overrides)?,
    };
    match cli.command {
        Command::GenData => {
            for path in pipeline::cmd_gen_data(&cfg)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train { only } => {
            let stages = if only.is_empty() {
                Stage::ALL.to_vec()
            } else {
                only.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?
            };
            for (stage, history) in pipeline::cmd_train(&cfg, &stages)? {
                if let Some(last) = history.last() {
                    let val = last
                        .validation
                        .map(|v| format!(" validation={v:.6}"))
                        .unwrap_or_default();
                    println!(
                        "{} epochs={} train={:.6}{val}",
                        stage.name(),
                        history.len(),
                        last.train
                    );
                }
            }
        }
        Command::Evaluate => {
            let s = pipeline::cmd_evaluate(&cfg)?;
            println!("auroc={:.4}", s.auroc);
            if let Some(p) = s.pearson_oracle {
                println!("pearson_oracle_dsx={p:.4}");
            }
            println!("pearson_observed_dsx={:.4}", s.pearson_observed);
            println!("r_e_train={:.4} se={:.4}", s.r_e_train.mean, s.r_e_train.se);
            println!("r_e_test={:.4} se={:.4}", s.r_e_test.mean, s.r_e_test.se);
            let [a, b, c] = s.property_relative_error;
            println!("relative_error logp={a:.4} qed={b:.4} sas={c:.4}");
        }
        Command::Optimize { jobs } => {
            if jobs == 0 {
                return Err(Error::Usage("--jobs must be at least 1".into()));
            }
            let s = pipeline::cmd_optimize(&cfg, jobs)?;
            let n = s.outcomes.len().max(1) as f64;
            let e0: f64 = s
                .outcomes
                .iter()
                .map(|o| o.initial_report.total)
                .sum::<f64>()
                / n;
            let e1: f64 = s.outcomes.iter().map(|o| o.final_report.total).sum::<f64>() / n;
            println!(
                "targets={} mean_initial_energy={e0:.4} mean_final_energy={e1:.4}",
                s.outcomes.len()
            );
            if let Some(d) = &s.delta {
                println!("fraction_better={:.4}", d.fraction_better);
            }
        }
        Command::Report => {
            let table = pipeline::cmd_report(&cfg)?;
            println!("{}", table.header.join(","));
            for row in &table.rows {
                println!("{}", row.join(","));
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}
