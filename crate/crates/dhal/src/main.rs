//! `dhal` command line: dataset generation, DHA and RL training, evaluation,
//! and CSV export. Exit codes: 0 success, 2 usage/config, 3 data/shape,
//! 4 numerical failure.

use clap::{Parser, Subcommand, ValueEnum};
use dhal::config::{default_seed, DhaTrainConfig, EnvConfig, ExperimentConfig};
use dhal::dha::{build_windows, train_dha, DhaModel};
use dhal::envs::dataset::{self, DatasetHeader};
use dhal::error::{DhalError, Result};
use dhal::eval::{
    eval_mode_accuracy, eval_prediction, export_actor_activations, export_metrics_csv,
    write_trace_csv,
};
use dhal::ppo::{CriticMode, PolicyKind, PpoConfig, Trainer};
use dhal::ckpt;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dhal", version, about = "hybrid-automata mode learning and control")]
struct Cli {
    /// Optional TOML config file; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyFlag {
    Beta,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriticsFlag {
    Multi,
    SingleTransfer,
    SingleRaw,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled transition dataset.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise_scale: Option<f64>,
        /// Cart phase-clock period override, seconds.
        #[arg(long)]
        period: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the DHA mode learner on a dataset.
    TrainDha {
        #[arg(long)]
        data: PathBuf,
        /// Number of modes K.
        #[arg(long)]
        modes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Small-network preset for CPU-budget runs.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch loss curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Train the multi-critic PPO controller on the cart env.
    TrainRl {
        #[arg(long, default_value = "cart")]
        env: String,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "beta")]
        policy: PolicyFlag,
        #[arg(long, value_enum, default_value = "multi")]
        critics: CriticsFlag,
        #[arg(long, default_value_t = 100)]
        ckpt_every: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Mode-accuracy report of a DHA checkpoint against a labeled dataset.
    EvalDha {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prediction-quality report of a DHA checkpoint.
    EvalPred {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset path; omit together with --clock-period to regenerate.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Regenerate cart data with this clock period instead of --data.
        #[arg(long)]
        clock_period: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional per-step predicted-vs-actual trace CSV.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Export a JSON-lines metrics log (and optionally actor activations) to CSV.
    Export {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// RL checkpoint for the activation dump.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dataset the activations are evaluated on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Activation CSV path; requires --ckpt and --data.
        #[arg(long)]
        activations: Option<PathBuf>,
    },
}

/// Sidecar written next to every checkpoint so the model shape can be
/// rebuilt on load.
#[derive(Serialize, Deserialize)]
struct CkptMeta {
    dha: dhal::dha::DhaConfig,
    ppo: Option<PpoConfig>,
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn save_checkpoint(model: &DhaModel, ppo: Option<&PpoConfig>, path: &Path) -> Result<()> {
    ckpt::save(&model.store, path)?;
    let meta = CkptMeta { dha: model.cfg.clone(), ppo: ppo.cloned() };
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(DhaModel, Option<PpoConfig>)> {
    let store = ckpt::load(path)?;
    let text = std::fs::read_to_string(meta_path(path))?;
    let meta: CkptMeta = serde_json::from_str(&text)
        .map_err(|e| DhalError::Data(format!("bad checkpoint meta: {e}")))?;
    Ok((DhaModel::from_store(meta.dha, store)?, meta.ppo))
}

fn base_config(file: &Option<PathBuf>, env: Option<&str>) -> Result<ExperimentConfig> {
    match file {
        Some(p) => ExperimentConfig::load(p),
        None => match env {
            Some(name) => ExperimentConfig::preset(name),
            None => Ok(ExperimentConfig::default()),
        },
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { env, episodes, steps, seed, noise_scale, period, out } => {
            let mut cfg = base_config(&cli.config, Some(&env))?;
            cfg.env.name = env;
            if let Some(e) = episodes {
                cfg.env.episodes = e;
            }
            if let Some(s) = steps {
                cfg.env.steps = s;
            }
            if let Some(n) = noise_scale {
                cfg.env.noise_scale = n;
            }
            if let Some(p) = period {
                cfg.env.cart.period = p;
            }
            let seed = seed.unwrap_or(cfg.seed);
            if cfg.env.episodes == 0 || cfg.env.steps == 0 {
                return Err(DhalError::Config("episodes and steps must be >= 1".into()));
            }
            let (obs_dim, act_dim, contact_dim) = cfg.env.dims()?;
            let transitions = cfg.env.generate(seed)?;
            let header = DatasetHeader {
                version: String::new(),
                env: cfg.env.name.clone(),
                obs_dim,
                act_dim,
                contact_dim,
                episodes: cfg.env.episodes,
                steps: cfg.env.steps,
                seed,
                checksum: String::new(),
            };
            dataset::save(&header, &transitions, &out)?;
            let checksum = dataset::body_checksum(&out)?;
            println!("records: {}", transitions.len());
            println!("checksum: {checksum}");
        }
        Cmd::TrainDha { data, modes, epochs, batch_size, lr, seed, desk, out, curve } => {
            let cfg = base_config(&cli.config, None)?;
            let mut tc = if cli.config.is_some() {
                cfg.dha.clone()
            } else if desk {
                DhaTrainConfig::desk()
            } else {
                DhaTrainConfig::default()
            };
            if let Some(k) = modes {
                tc.k = k;
            }
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(b) = batch_size {
                tc.batch_size = b;
            }
            if let Some(l) = lr {
                tc.lr = l;
            }
            let seed = seed.unwrap_or(cfg.seed);
            let ds = dataset::load(&data)?;
            let dcfg = tc.dha_config(ds.header.obs_dim, ds.header.act_dim, ds.header.contact_dim);
            let mut model = DhaModel::init(dcfg, seed)?;
            let samples = build_windows(&ds.transitions, &model.cfg)?;
            let losses = train_dha(&mut model, &samples, tc.epochs, tc.batch_size, tc.lr, seed)?;
            if let Some(curve) = curve {
                let mut csv = String::from("epoch,loss\n");
                for (i, l) in losses.iter().enumerate() {
                    csv.push_str(&format!("{i},{l}\n"));
                }
                std::fs::write(curve, csv)?;
            }
            save_checkpoint(&model, None, &out)?;
            let report = dhal::dha::eval_prediction_mse(&model, &samples)?;
            let summary = serde_json::json!({
                "modes": model.cfg.k,
                "epochs": tc.epochs,
                "final_loss": losses.last().copied(),
                "final_mse": report.overall_mse,
                "final_bce": report.overall_bce,
                "mode_histogram": report.mode_histogram,
            });
            println!("{summary}");
        }
        Cmd::TrainRl { env, iters, seed, policy, critics, ckpt_every, out_dir } => {
            if env != "cart" {
                return Err(DhalError::Config(format!(
                    "train-rl supports only the cart env, got {env:?}"
                )));
            }
            let cfg = base_config(&cli.config, Some("cart"))?;
            let seed = seed.unwrap_or(cfg.seed);
            let mut ppo = cfg.ppo.clone();
            ppo.policy = match policy {
                PolicyFlag::Beta => PolicyKind::Beta,
                PolicyFlag::Gaussian => PolicyKind::Gaussian,
            };
            ppo.critic_mode = match critics {
                CriticsFlag::Multi => CriticMode::Multi,
                CriticsFlag::SingleTransfer => CriticMode::SingleTransfer,
                CriticsFlag::SingleRaw => CriticMode::SingleRaw,
            };
            ppo.action_bound = cfg.env.cart.action_bound;
            let (obs_dim, act_dim, contact_dim) = cfg.env.dims()?;
            let dcfg = cfg.dha.dha_config(obs_dim, act_dim, contact_dim);
            let dha = DhaModel::init(dcfg, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut trainer = Trainer::new(ppo.clone(), cfg.env.cart, dha, seed)?;
            save_checkpoint(&trainer.dha, Some(&ppo), &out_dir.join("init.ckpt"))?;
            let mut metrics = std::fs::File::create(out_dir.join("metrics.jsonl"))?;
            for i in 0..iters {
                let m = trainer.train_iteration()?;
                writeln!(metrics, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
                metrics.flush()?;
                if ckpt_every > 0 && (i + 1) % ckpt_every == 0 {
                    save_checkpoint(
                        &trainer.dha,
                        Some(&ppo),
                        &out_dir.join(format!("ckpt_{:05}.ckpt", i + 1)),
                    )?;
                }
            }
            if iters > 0 {
                save_checkpoint(&trainer.dha, Some(&ppo), &out_dir.join("final.ckpt"))?;
            }
        }
        Cmd::EvalDha { ckpt, data, out } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let ds = dataset::load(&data)?;
            let report = eval_mode_accuracy(&model, &ds.transitions)?;
            emit_json(&report, out.as_deref())?;
        }
        Cmd::EvalPred { ckpt, data, clock_period, out, traces } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let cfg = base_config(&cli.config, None)?;
            let transitions = match (&data, clock_period) {
                (Some(path), _) => dataset::load(path)?.transitions,
                (None, Some(period)) => {
                    let mut env = EnvConfig { name: "cart".into(), ..cfg.env.clone() };
                    env.cart.period = period;
                    env.episodes = env.episodes.min(5);
                    env.generate(cfg.seed)?
                }
                (None, None) => {
                    return Err(DhalError::Config(
                        "eval-pred needs --data or --clock-period".into(),
                    ))
                }
            };
            let samples = build_windows(&transitions, &model.cfg)?;
            let report = eval_prediction(&model, &samples)?;
            if let Some(traces) = traces {
                write_trace_csv(&model, &samples, &traces)?;
            }
            emit_json(&report, out.as_deref())?;
        }
        Cmd::Export { metrics, out, ckpt, data, activations } => {
            let rows = export_metrics_csv(&metrics, &out)?;
            println!("rows: {rows}");
            if let Some(act_out) = activations {
                let (Some(ckpt), Some(data)) = (ckpt, data) else {
                    return Err(DhalError::Config(
                        "--activations requires --ckpt and --data".into(),
                    ));
                };
                let (model, ppo) = load_checkpoint(&ckpt)?;
                let hidden = ppo
                    .map(|p| p.actor_hidden)
                    .ok_or_else(|| DhalError::Data("checkpoint meta has no PPO section".into()))?;
                let ds = dataset::load(&data)?;
                export_actor_activations(&model, &hidden, &ds.transitions, &act_out)?;
            }
        }
    }
    Ok(())
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn main() {
    // Makes DHAL_SEED visible in --help behavior through config defaults.
    let _ = default_seed();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
