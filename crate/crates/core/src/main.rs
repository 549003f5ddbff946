use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use twinmac::bayes::map_estimate;
use twinmac::coma::train;
use twinmac::config::{ExperimentConfig, Likelihood, Mode};
use twinmac::harness::{self, collect_learning_data, evaluate_policy, stream};
use twinmac::monitor::{frequentist_score, log_likelihood, LikelihoodKind, MonitoringDataset, PosteriorEnsemble, ScoreKind};
use twinmac::nn::PolicyParams;
use twinmac::policy::{AccessPolicy, ExplorationPolicy, PersistentPolicy};
use twinmac::records;

/// Relative output paths are resolved against this directory when set.
const OUT_DIR_ENV: &str = "TWINMAC_OUT_DIR";

#[derive(Parser)]
#[command(name = "twinmac", version, about = "Digital twin of a multi-access sensing network")]
struct Cli {
    /// Configuration file; the built-in reference system when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; defaults to `experiment.seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, or directory for `train` and `roc`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the ground truth and write a trajectory.
    Simulate {
        /// Number of slots observed.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[command(flatten)]
        policy: PolicyArg,
    },
    /// Learn a posterior from a trajectory or a fresh exploration phase.
    Learn(DataArgs),
    /// Train a policy and write its networks and training curve.
    Train {
        /// Posterior written by `learn`; ignored by the oracle.
        #[arg(long)]
        posterior: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a policy on the ground truth.
    Evaluate {
        #[command(flatten)]
        policy: PolicyArg,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Score a trajectory with the anomaly detector of the selected mode.
    Monitor {
        #[arg(long)]
        posterior: PathBuf,
        /// Trajectory to score.
        #[arg(long)]
        data: PathBuf,
        /// Policy that generated the trajectory (needed for full likelihoods).
        #[arg(long, default_value = "exploration")]
        policy: String,
    },
    /// Policy sweep over learning-phase sizes, modes and cycles.
    Sweep,
    /// Anomaly-detection ROC study for both detectors.
    Roc {
        /// Operating policy; a Bayesian policy is trained when omitted.
        #[arg(long)]
        policy: Option<String>,
    },
}

#[derive(Args)]
struct PolicyArg {
    /// `exploration`, `idle`, `always`, `p=<prob>`, or a policy tensor file.
    #[arg(long, default_value = "exploration")]
    policy: String,
}

#[derive(Args)]
struct DataArgs {
    /// Trajectory to learn from.
    #[arg(long, conflicts_with = "steps")]
    data: Option<PathBuf>,
    /// Size of a fresh exploration phase.
    #[arg(long)]
    steps: Option<usize>,
}

struct Session {
    config: ExperimentConfig,
    seed: u64,
    out: Option<PathBuf>,
    mode: Mode,
}

impl Session {
    fn out_path(&self, default: &str) -> PathBuf {
        let path = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if path.is_relative() => Path::new(&dir).join(path),
            _ => path,
        }
    }
}

fn load_policy(spec: &str, config: &ExperimentConfig) -> anyhow::Result<Box<dyn AccessPolicy>> {
    Ok(match spec {
        "exploration" => Box::new(ExplorationPolicy {
            shared: config.learning.shared_exploration,
        }),
        "idle" => Box::new(PersistentPolicy { p: 0.0 }),
        "always" => Box::new(PersistentPolicy { p: 1.0 }),
        _ if spec.starts_with("p=") => {
            let p: f64 = spec[2..].parse().with_context(|| format!("bad probability in {spec:?}"))?;
            if !(0.0..=1.0).contains(&p) {
                bail!("transmit probability {p} outside [0, 1]");
            }
            Box::new(PersistentPolicy { p })
        }
        path => {
            let file = File::open(path).with_context(|| format!("cannot open policy {path}"))?;
            let policy = PolicyParams::load(BufReader::new(file)).with_context(|| format!("reading {path}"))?;
            if policy.encoding.num_devices != config.system.num_devices {
                bail!("policy {path} is for {} devices", policy.encoding.num_devices);
            }
            Box::new(policy)
        }
    })
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn save_rows<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut out = create(path)?;
    records::write_rows(&mut out, rows)?;
    out.flush()?;
    Ok(())
}

fn learning_data(ctx: &Session, args: &DataArgs) -> anyhow::Result<Vec<twinmac::bayes::TransitionRecord>> {
    let system = &ctx.config.system;
    match (&args.data, args.steps) {
        (Some(path), _) => {
            let (data, _) =
                records::load_trajectory(path, system).with_context(|| format!("reading {}", path.display()))?;
            Ok(data)
        }
        (None, steps) => {
            let exploration = ExplorationPolicy {
                shared: ctx.config.learning.shared_exploration,
            };
            let steps = steps.unwrap_or(20);
            Ok(collect_learning_data(system, steps, &exploration, &mut stream(ctx.seed, &[10, steps as u64]))?)
        }
    }
}

#[derive(Serialize)]
struct EvaluationRow<'a> {
    policy: &'a str,
    episodes: usize,
    horizon: usize,
    throughput: f64,
    throughput_se: f64,
    overflow_prob: f64,
    overflow_se: f64,
    #[serde(rename = "return")]
    discounted_return: f64,
    return_se: f64,
}

#[derive(Serialize)]
struct ScoreRow {
    kind: ScoreKind,
    transitions: usize,
    value: f64,
}

#[derive(Serialize)]
struct RocRow {
    #[serde(rename = "T")]
    learning_size: usize,
    phase: usize,
    threshold: f64,
    #[serde(rename = "FPR")]
    fpr: f64,
    #[serde(rename = "TPR")]
    tpr: f64,
}

#[derive(Serialize)]
struct AverageRow {
    detector: ScoreKind,
    #[serde(rename = "T")]
    learning_size: usize,
    #[serde(rename = "FPR")]
    fpr: f64,
    #[serde(rename = "TPR")]
    tpr: f64,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::reference(),
    };
    let ctx = Session {
        seed: cli.seed.unwrap_or(config.experiment.seed),
        mode: cli.mode.unwrap_or(Mode::Bayesian),
        out: cli.out,
        config,
    };
    let system = &ctx.config.system;

    match cli.command {
        Command::Simulate { steps, policy } => {
            let pi = load_policy(&policy.policy, &ctx.config)?;
            let mut rng = stream(ctx.seed, &[11]);
            let data = harness::simulate(&system.dynamics, system, pi.as_ref(), steps.saturating_sub(1), &mut rng)?;
            let mut out = create(&ctx.out_path("trajectory.csv"))?;
            records::write_trajectory(&mut out, &data, 0, system)?;
            out.flush()?;
        }
        Command::Learn(args) => {
            if ctx.mode == Mode::Oracle {
                bail!("the oracle does not learn a model");
            }
            let data = learning_data(&ctx, &args)?;
            let posterior = harness::learn(ctx.mode, &data, &ctx.config)?;
            let path = ctx.out_path("posterior.toml");
            create(&path)?.write_all(records::posterior_to_toml(&posterior)?.as_bytes())?;
        }
        Command::Train { posterior, data } => {
            let mut rng = stream(ctx.seed, &[12]);
            let train_config = match ctx.mode {
                Mode::Oracle => ctx.config.training.oracle_train_config(),
                _ => ctx.config.training.train_config(),
            };
            let outcome = match (ctx.mode, posterior) {
                (Mode::Oracle, _) => train(twinmac::coma::ModelSource::Fixed(&system.dynamics), system, &train_config, &mut rng)?,
                (mode, source) => {
                    let posterior = match source {
                        Some(path) => records::load_posterior(&path)?,
                        None => harness::learn(mode, &learning_data(&ctx, &data)?, &ctx.config)?,
                    };
                    if mode == Mode::Bayesian {
                        train(twinmac::coma::ModelSource::Posterior(&posterior), system, &train_config, &mut rng)?
                    } else {
                        let theta = map_estimate(&posterior)?;
                        train(twinmac::coma::ModelSource::Fixed(&theta), system, &train_config, &mut rng)?
                    }
                }
            };
            let dir = ctx.out_path("train");
            std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let mut policy_out = create(&dir.join("policy.tensors"))?;
            outcome.policy.save(&mut policy_out)?;
            policy_out.flush()?;
            let mut critic_out = create(&dir.join("critic.tensors"))?;
            outcome.critic.save(&mut critic_out)?;
            critic_out.flush()?;
            save_rows(&dir.join("curve.csv"), &outcome.curve)?;
        }
        Command::Evaluate { policy, episodes, horizon } => {
            let pi = load_policy(&policy.policy, &ctx.config)?;
            let episodes = episodes.unwrap_or(ctx.config.experiment.eval_episodes);
            let horizon = horizon.unwrap_or(ctx.config.experiment.eval_horizon);
            let eval = evaluate_policy(pi.as_ref(), system, horizon, episodes, &mut stream(ctx.seed, &[13]))?;
            save_rows(
                &ctx.out_path("evaluation.csv"),
                &[EvaluationRow {
                    policy: &policy.policy,
                    episodes,
                    horizon,
                    throughput: eval.throughput,
                    throughput_se: eval.throughput_se,
                    overflow_prob: eval.overflow_prob,
                    overflow_se: eval.overflow_se,
                    discounted_return: eval.discounted_return,
                    return_se: eval.return_se,
                }],
            )?;
        }
        Command::Monitor { posterior, data, policy } => {
            let posterior = records::load_posterior(&posterior)?;
            let (records, start) =
                records::load_trajectory(&data, system).with_context(|| format!("reading {}", data.display()))?;
            let window = MonitoringDataset::new(records, start)?;
            let pi = load_policy(&policy, &ctx.config)?;
            let m = &ctx.config.monitoring;
            let cluster = m.cluster - 1;
            let score = match ctx.mode {
                Mode::Bayesian => {
                    let kind = match m.likelihood {
                        Likelihood::Cluster => LikelihoodKind::Cluster(cluster),
                        Likelihood::Full => LikelihoodKind::Full(pi.as_ref()),
                    };
                    let ensemble = PosteriorEnsemble::draw(&posterior, m.num_samples, &mut stream(ctx.seed, &[14]))?;
                    ensemble.score(&window, kind, system)?
                }
                Mode::Frequentist => {
                    let theta = map_estimate(&posterior)?;
                    match m.likelihood {
                        Likelihood::Cluster => frequentist_score(&theta, &window, cluster, system)?,
                        Likelihood::Full => twinmac::monitor::AnomalyScore {
                            value: -log_likelihood(&theta, &window, pi.as_ref(), system),
                            kind: ScoreKind::FrequentistNegll,
                        },
                    }
                }
                Mode::Oracle => bail!("monitoring needs a learned model; use --mode bayesian or frequentist"),
            };
            save_rows(
                &ctx.out_path("score.csv"),
                &[ScoreRow {
                    kind: score.kind,
                    transitions: window.len(),
                    value: score.value,
                }],
            )?;
        }
        Command::Sweep => {
            let mut config = ctx.config.clone();
            if let Some(mode) = cli.mode {
                config.experiment.modes = vec![mode];
            }
            let sweep = harness::experiment_policy_sweep(&config, ctx.seed, |row| {
                eprintln!(
                    "{} T={} cycle={} throughput={:.4} overflow={:.4}",
                    row.mode, row.learning_size, row.cycle, row.throughput, row.overflow_prob
                );
            });
            let path = ctx.out_path("sweep.csv");
            save_rows(&path, &sweep.rows)?;
            save_rows(&path.with_extension("summary.csv"), &sweep.summary())?;
            if !sweep.failures.is_empty() {
                save_rows(&path.with_extension("failures.csv"), &sweep.failures)?;
                eprintln!("{} cycles failed", sweep.failures.len());
            }
        }
        Command::Roc { policy } => {
            let dir = ctx.out_path("roc");
            std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let pi: Box<dyn AccessPolicy> = match policy {
                Some(spec) => load_policy(&spec, &ctx.config)?,
                None => {
                    let trained = harness::train_monitoring_policy(&ctx.config, ctx.seed)?;
                    let mut out = create(&dir.join("policy.tensors"))?;
                    trained.save(&mut out)?;
                    out.flush()?;
                    Box::new(trained)
                }
            };
            let roc = harness::experiment_anomaly_roc(&ctx.config, pi.as_ref(), ctx.seed)?;
            let mut bayes = Vec::new();
            let mut freq = Vec::new();
            let mut average = Vec::new();
            for (b, f) in &roc.reports {
                for (report, rows) in [(b, &mut bayes), (f, &mut freq)] {
                    for (phase, curve) in report.curves.iter().enumerate() {
                        rows.extend(curve.points.iter().map(|p| RocRow {
                            learning_size: report.learning_size,
                            phase,
                            threshold: p.threshold,
                            fpr: p.fpr,
                            tpr: p.tpr,
                        }));
                    }
                    average.extend(report.average.iter().map(|&(fpr, tpr)| AverageRow {
                        detector: report.detector,
                        learning_size: report.learning_size,
                        fpr,
                        tpr,
                    }));
                }
            }
            save_rows(&dir.join("roc_bayesian.csv"), &bayes)?;
            save_rows(&dir.join("roc_frequentist.csv"), &freq)?;
            save_rows(&dir.join("roc_average.csv"), &average)?;
            save_rows(&dir.join("roc_summary.csv"), &roc.summary(&ctx.config))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
