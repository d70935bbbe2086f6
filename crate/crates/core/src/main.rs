use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vqlti::atmosphere::{knots_to_ms, make_windows, read_dataset, split_storms, synth_dataset, write_dataset, Storm};
use vqlti::harness::{
    evaluate, export_latents, gradsuite, load_stage1, load_stage2, pretrain, stage1_checkpoint, stage2_checkpoint,
    train_forecast, Checkpoint, RunConfig,
};
use vqlti::potential_intensity::potential_intensity_at_center;
use vqlti::{Error, Result};

#[derive(Parser)]
#[command(name = "vqlti", version, about = "Tropical cyclone intensity forecasting in a discrete latent space")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file; defaults to the desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one key, as `key=value`. Repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic storm dataset.
    GenData,
    /// First stage: train the conditional autoencoder.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Second stage: train the latent iteration model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// First-stage checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forecast the first window of every test storm.
    Forecast {
        #[arg(long)]
        data: PathBuf,
        /// First-stage then second-stage checkpoint.
        #[arg(long = "checkpoint", num_args = 1, required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Per-lead errors on the test split against persistence.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Second-stage checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Potential intensity at every storm centre.
    Pi {
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference verification of every op and both objectives.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Encoder latents and codebook indices per timestep.
    ExportLatents {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Resolve the run configuration: explicit file, else the one stored in a
/// checkpoint, else the desk profile; then seed and overrides.
fn resolve_config(common: &Common, stored: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, stored) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(text)) => RunConfig::parse(text)?,
        (None, None) => RunConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for kv in &common.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(Error::Config)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = out.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn load_storms(path: &Path) -> Result<Vec<Storm>> {
    Ok(read_dataset(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    fs::create_dir_all(&common.out)?;
    let out = common.out.as_path();
    let cfg = match &cli.command {
        Command::Train { checkpoint, .. } | Command::ExportLatents { checkpoint, .. } | Command::Evaluate { checkpoint, .. } => {
            let ck = Checkpoint::load(checkpoint)?;
            resolve_config(common, Some(&ck.config))?
        }
        Command::Forecast { checkpoints, .. } => {
            let ck = Checkpoint::load(checkpoints.last().expect("clap requires one"))?;
            resolve_config(common, Some(&ck.config))?
        }
        _ => resolve_config(common, None)?,
    };
    write(out, "config.resolved", cfg.to_text())?;

    match cli.command {
        Command::GenData => {
            let storms = synth_dataset(cfg.storms, &cfg.synth_params(), cfg.seed).map_err(Error::Config)?;
            let path = out.join("dataset.tcds");
            write_dataset(&path, &storms)?;
            println!("wrote {} storms to {}", storms.len(), path.display());
        }
        Command::Pretrain { data } => {
            let storms = load_storms(&data)?;
            let split = split_storms(&storms);
            let s1 = pretrain(&cfg, &storms, &split, false)?;
            let path = out.join("stage1.vqlt");
            stage1_checkpoint(&s1)?.save(&path)?;
            if let Some(e) = s1.log.last() {
                println!("validation reconstruction {:.5}, codebook usage {:.3}", e.val_recon, e.utilization);
            }
            println!("wrote {}", path.display());
        }
        Command::Train { data, checkpoint } => {
            let storms = load_storms(&data)?;
            let split = split_storms(&storms);
            let ck = Checkpoint::load(&checkpoint)?;
            let s1 = load_stage1(&ck)?;
            let s2 = train_forecast(&cfg, &s1, ck.fingerprint()?, &storms, &split)?;
            let path = out.join("stage2.vqlt");
            stage2_checkpoint(&s2)?.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Forecast { data, checkpoints, horizon } => {
            if checkpoints.len() != 2 {
                return Err(Error::Config("forecast takes --checkpoint twice: first stage, then second".into()));
            }
            let ck1 = Checkpoint::load(&checkpoints[0])?;
            let s2 = load_stage2(&Checkpoint::load(&checkpoints[1])?)?;
            if ck1.fingerprint()? != s2.stage1_fingerprint {
                return Err(Error::Config("second-stage checkpoint was not trained from this first stage".into()));
            }
            let m = horizon.unwrap_or(cfg.m);
            let storms = load_storms(&data)?;
            let split = split_storms(&storms);
            let test: Vec<Storm> = split.test.iter().map(|&i| storms[i].clone()).collect();
            let degrade = cfg.degrade_params();
            let mut csv = String::from("storm_id,init_step,lead_step,msw_knots,msw_ms,mslp_hpa\n");
            let mut seen = std::collections::HashSet::new();
            for w in make_windows(&test, cfg.n, m).map_err(Error::Data)? {
                if !seen.insert(w.storm) {
                    continue;
                }
                let d = w.materialize(&test, &degrade, cfg.seed);
                let f = s2.model.forecast_intensity(&d.history, &d.history_cubes, &d.future_cubes, m)?;
                for (i, r) in f.iter().enumerate() {
                    let init = d.history[cfg.n - 1].valid_time;
                    writeln!(csv, "{},{},{},{},{},{}", r.storm_id, init, i + 1, r.msw, knots_to_ms(r.msw), r.mslp).unwrap();
                }
            }
            let path = write(out, "forecast.csv", csv)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate { data, checkpoint } => {
            let s2 = load_stage2(&Checkpoint::load(&checkpoint)?)?;
            let storms = load_storms(&data)?;
            let split = split_storms(&storms);
            let report = evaluate(
                &s2.model,
                &storms,
                &split.test,
                split.fingerprint,
                cfg.n,
                cfg.m,
                &cfg.degrade_params(),
                cfg.seed,
                cfg.batch_size,
            )?;
            write(out, "leads.csv", report.leads_csv())?;
            write(out, "predictions.csv", report.rows_csv())?;
            write(out, "table.txt", report.table())?;
            print!("{}", report.table());
        }
        Command::Pi { data } => {
            let storms = load_storms(&data)?;
            let consts = cfg.pi_constants();
            let mut csv = String::from("storm_id,step,vmax_ms,pmin_hpa\n");
            for s in &storms {
                for (t, c) in s.cubes.iter().enumerate() {
                    let r = potential_intensity_at_center(c, &consts)?;
                    writeln!(csv, "{},{},{},{}", s.id, t, r.vmax, r.pmin).unwrap();
                }
            }
            let path = write(out, "pi.csv", csv)?;
            println!("wrote {}", path.display());
        }
        Command::GradCheck { seeds } => {
            let results = gradsuite::run(seeds, seeds)?;
            let mut failed = 0;
            for r in &results {
                println!("{:<20} seeds {:>3}  max rel err {:.3e}  {}", r.name, r.seeds, r.worst, if r.passed() { "ok" } else { "FAIL" });
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Divergence {
                    stage: "grad-check",
                    step: 0,
                    detail: format!("{failed} checks above tolerance {}", gradsuite::TOLERANCE),
                });
            }
        }
        Command::ExportLatents { data, checkpoint } => {
            let s1 = load_stage1(&Checkpoint::load(&checkpoint)?)?;
            let storms = load_storms(&data)?;
            let path = write(out, "latents.csv", export_latents(&s1.vae, &s1.norm, &storms)?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
