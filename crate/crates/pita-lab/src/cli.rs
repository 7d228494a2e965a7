//! Command-line front end: configuration, experiment orchestration, and
//! deterministic seeding.
//!
//! Commands: `stargraph` (the end-to-end alignment comparison),
//! `theory {mle|regret|gradient|convexity}` (numerical checks of the
//! estimation and regret behaviour), `selftest` (soft-value invariant
//! suite), and `gen-stargraph` (instance files). Configuration comes from
//! an optional JSON file with flag overrides (flags win); every command
//! writes a `manifest.json` echoing the resolved configuration. All
//! randomness derives from the single seed, so outputs are byte-identical
//! across reruns and thread counts.
//!
//! Exit codes: 0 success, 1 property failure, 2 usage or config error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    cd_score, fit_success_from_rollouts, qsharp_hf_pipeline, qsharp_score,
};
use crate::error::Error;
use crate::mdp::{
    enumerate_completions, greedy_decode, sample_rollout, Environment, Policy, State, Token,
};
use crate::metrics::{format_sig9, write_preferences, write_results, Metric, ResultRow};
use crate::pita::{induced_policy, run_pita, PitaConfig};
use crate::preference::{
    bce_grad_on, bce_loss_on, bt_prob, gamma_conservative, project_theta, psi, sample_win_label,
    seminorm_on, BtOracle, MleOptions, ThetaParams,
};
use crate::seeding::derive_rng;
use crate::soft_value::{
    backward_soft_values, exact_kl, forward_soft_q, mc_kl, tilt_policy, TableScore,
};
use crate::star_graph::{
    encode_instance, evaluate_policy, faulty_reference, generate_instance, star_environment,
    star_feature_map, star_reward, write_instances, StarGraphInstance, StarVocab,
};
use crate::theory::{
    gradient_identity_check, make_random_tree_env, mle_scaling_experiment, regret_experiment,
    RandomTreeEnv,
};
use crate::Result;

use rand::Rng as _;

/// Fully resolved run configuration. Every field has a default; a JSON
/// config file overrides the defaults and command-line flags override the
/// file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 picks the runtime default. Outputs do not depend
    /// on this.
    pub threads: usize,

    /// KL temperature for guided decoding.
    pub eta: f64,
    /// Alignment rounds `K`.
    pub iterations: usize,
    /// Roll-in tasks per round `N`.
    pub rollouts_per_iter: usize,
    /// Reference samples per context `M`.
    pub samples_per_context: usize,
    /// Preference-parameter norm bound `B`.
    pub bound_b: f64,
    /// Feature norm bound `L`.
    pub feature_l: f64,
    pub clamp_eps: f64,

    /// Star-graph task shape.
    pub degree: usize,
    pub path_len: usize,
    pub node_pool: u32,
    pub train_instances: usize,
    pub test_instances: usize,
    /// Majority-vote sample count.
    pub eval_k: usize,
    /// Reference rollouts for the success-model fits.
    pub baseline_rollouts: usize,
    /// Preference pairs for the two-stage reward fit.
    pub hf_pairs: usize,

    /// Tree-fixture shape and theory-experiment settings.
    pub tree_vocab: u32,
    pub tree_depth: usize,
    pub theory_bound_b: f64,
    pub theory_eta: f64,
    pub lambda: f64,
    pub delta: f64,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub regret_rounds: usize,
    pub regret_base_samples: usize,
    pub regret_seeds: usize,

    /// Self-test sweep size and Monte-Carlo KL sample count.
    pub selftest_envs: usize,
    pub mc_kl_samples: usize,

    /// Instance-file generation.
    pub gen_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out: PathBuf::from("out"),
            threads: 0,
            eta: 0.1,
            iterations: 3,
            rollouts_per_iter: 500,
            samples_per_context: 4,
            bound_b: 5.0,
            feature_l: 1.0,
            clamp_eps: 1e-6,
            degree: 2,
            path_len: 4,
            node_pool: 50,
            train_instances: 500,
            test_instances: 2000,
            eval_k: 8,
            baseline_rollouts: 4000,
            hf_pairs: 2000,
            tree_vocab: 3,
            tree_depth: 3,
            theory_bound_b: 2.0,
            theory_eta: 1.0,
            lambda: 0.01,
            delta: 0.05,
            n_grid: vec![64, 256, 1024, 4096],
            trials: 50,
            regret_rounds: 8,
            regret_base_samples: 128,
            regret_seeds: 20,
            selftest_envs: 100,
            mc_kl_samples: 4000,
            gen_count: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        }
        fn at_least(name: &str, v: usize, min: usize) -> Result<()> {
            if v >= min {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be >= {min}, got {v}")))
            }
        }
        positive("eta", self.eta)?;
        positive("theory_eta", self.theory_eta)?;
        positive("bound_b", self.bound_b)?;
        positive("feature_l", self.feature_l)?;
        positive("theory_bound_b", self.theory_bound_b)?;
        if self.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::config(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        at_least("iterations", self.iterations, 1)?;
        at_least("rollouts_per_iter", self.rollouts_per_iter, 1)?;
        at_least("samples_per_context", self.samples_per_context, 1)?;
        at_least("degree", self.degree, 2)?;
        at_least("path_len", self.path_len, 1)?;
        at_least("train_instances", self.train_instances, 1)?;
        at_least("test_instances", self.test_instances, 1)?;
        at_least("eval_k", self.eval_k, 1)?;
        at_least("baseline_rollouts", self.baseline_rollouts, 1)?;
        at_least("hf_pairs", self.hf_pairs, 1)?;
        at_least("tree_vocab", self.tree_vocab as usize, 2)?;
        at_least("tree_depth", self.tree_depth, 1)?;
        at_least("trials", self.trials, 2)?;
        at_least("regret_rounds", self.regret_rounds, 1)?;
        at_least("regret_base_samples", self.regret_base_samples, 1)?;
        at_least("regret_seeds", self.regret_seeds, 1)?;
        at_least("selftest_envs", self.selftest_envs, 1)?;
        at_least("mc_kl_samples", self.mc_kl_samples, 2)?;
        at_least("gen_count", self.gen_count, 1)?;
        if (self.node_pool as usize) < self.degree * self.path_len + 1 {
            return Err(Error::config(format!(
                "node_pool {} too small for degree {} and path_len {}",
                self.node_pool, self.degree, self.path_len
            )));
        }
        if self.n_grid.len() < 2 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("n_grid must be strictly increasing with >= 2 points"));
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "pita-lab",
    about = "Preference-guided inference-time alignment experiments",
    version
)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = runtime default); outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct StarOverrides {
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub path_len: Option<usize>,
    #[arg(long)]
    pub node_pool: Option<u32>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub rollouts_per_iter: Option<usize>,
    #[arg(long)]
    pub samples_per_context: Option<usize>,
    #[arg(long)]
    pub train_instances: Option<usize>,
    #[arg(long)]
    pub test_instances: Option<usize>,
    #[arg(long)]
    pub eval_k: Option<usize>,
    #[arg(long)]
    pub bound_b: Option<f64>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TheoryOverrides {
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub tree_vocab: Option<u32>,
    #[arg(long)]
    pub tree_depth: Option<usize>,
    #[arg(long)]
    pub bound_b: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub regret_rounds: Option<usize>,
    #[arg(long)]
    pub regret_seeds: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the star-graph alignment comparison end to end.
    Stargraph {
        #[command(flatten)]
        overrides: StarOverrides,
    },
    /// Numerical checks of the estimation-error and regret behaviour.
    Theory {
        #[arg(value_enum)]
        which: TheoryKind,
        #[command(flatten)]
        overrides: TheoryOverrides,
    },
    /// Soft-value invariant suite on seeded random environments.
    Selftest {
        /// Override the number of environments.
        #[arg(long)]
        envs: Option<usize>,
        /// Perturb rewards on one side of the dual-route check
        /// (negative control; must fail).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Generate star-graph instance files.
    GenStargraph {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        path_len: Option<usize>,
        #[arg(long)]
        node_pool: Option<u32>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TheoryKind {
    Mle,
    Regret,
    Gradient,
    Convexity,
}

impl TheoryKind {
    fn as_str(self) -> &'static str {
        match self {
            TheoryKind::Mle => "mle",
            TheoryKind::Regret => "regret",
            TheoryKind::Gradient => "gradient",
            TheoryKind::Convexity => "convexity",
        }
    }
}

/// Outcome of a command body: completed, or a named property failure.
pub enum Outcome {
    Pass,
    PropertyFailure(String),
}

/// Entry point used by the binary. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let mut config = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 2;
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    apply_command_overrides(&mut config, &cli.command);
    if let Err(e) = config.validate() {
        eprintln!("config error: {e}");
        return 2;
    }

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(config.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("thread pool error: {e}");
            return 2;
        }
    };

    let result = pool.install(|| dispatch(&config, &cli.command));
    match result {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::PropertyFailure(name)) => {
            eprintln!("property failure: {name}");
            1
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))
        }
    }
}

fn apply_command_overrides(config: &mut RunConfig, command: &Command) {
    match command {
        Command::Stargraph { overrides } => {
            let o = overrides.clone();
            if let Some(v) = o.eta {
                config.eta = v;
            }
            if let Some(v) = o.degree {
                config.degree = v;
            }
            if let Some(v) = o.path_len {
                config.path_len = v;
            }
            if let Some(v) = o.node_pool {
                config.node_pool = v;
            }
            if let Some(v) = o.iterations {
                config.iterations = v;
            }
            if let Some(v) = o.rollouts_per_iter {
                config.rollouts_per_iter = v;
            }
            if let Some(v) = o.samples_per_context {
                config.samples_per_context = v;
            }
            if let Some(v) = o.train_instances {
                config.train_instances = v;
            }
            if let Some(v) = o.test_instances {
                config.test_instances = v;
            }
            if let Some(v) = o.eval_k {
                config.eval_k = v;
            }
            if let Some(v) = o.bound_b {
                config.bound_b = v;
            }
        }
        Command::Theory { overrides, .. } => {
            let o = overrides.clone();
            if let Some(v) = o.eta {
                config.theory_eta = v;
            }
            if let Some(v) = o.tree_vocab {
                config.tree_vocab = v;
            }
            if let Some(v) = o.tree_depth {
                config.tree_depth = v;
            }
            if let Some(v) = o.bound_b {
                config.theory_bound_b = v;
            }
            if let Some(v) = o.lambda {
                config.lambda = v;
            }
            if let Some(v) = o.delta {
                config.delta = v;
            }
            if let Some(v) = o.trials {
                config.trials = v;
            }
            if let Some(v) = o.regret_rounds {
                config.regret_rounds = v;
            }
            if let Some(v) = o.regret_seeds {
                config.regret_seeds = v;
            }
        }
        Command::Selftest { envs, .. } => {
            if let Some(v) = envs {
                config.selftest_envs = *v;
            }
        }
        Command::GenStargraph { count, degree, path_len, node_pool } => {
            if let Some(v) = count {
                config.gen_count = *v;
            }
            if let Some(v) = degree {
                config.degree = *v;
            }
            if let Some(v) = path_len {
                config.path_len = *v;
            }
            if let Some(v) = node_pool {
                config.node_pool = *v;
            }
        }
    }
}

fn dispatch(config: &RunConfig, command: &Command) -> Result<Outcome> {
    std::fs::create_dir_all(&config.out)?;
    let command_name = match command {
        Command::Stargraph { .. } => "stargraph",
        Command::Theory { which, .. } => which.as_str(),
        Command::Selftest { .. } => "selftest",
        Command::GenStargraph { .. } => "gen-stargraph",
    };
    write_manifest(config, command_name)?;
    match command {
        Command::Stargraph { .. } => cmd_stargraph(config),
        Command::Theory { which, .. } => cmd_theory(config, *which),
        Command::Selftest { inject_fault, .. } => cmd_selftest(config, *inject_fault),
        Command::GenStargraph { .. } => cmd_gen_stargraph(config),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
}

fn write_manifest(config: &RunConfig, command: &str) -> Result<()> {
    let manifest = Manifest { version: env!("CARGO_PKG_VERSION"), command, config };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest: {e}")))?;
    std::fs::write(config.out.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn generate_instances(
    config: &RunConfig,
    tag: &str,
    count: usize,
) -> Result<Vec<StarGraphInstance>> {
    (0..count)
        .map(|i| {
            let mut rng = derive_rng(config.seed, tag, i as u64);
            generate_instance(config.degree, config.path_len, config.node_pool, &mut rng)
        })
        .collect()
}

/// Mean exact trajectory KL of a guided policy to the reference over test
/// instances.
fn mean_exact_kl<P: Policy + Sync + ?Sized>(
    policy: &P,
    vocab: StarVocab,
    instances: &[StarGraphInstance],
) -> Result<f64> {
    let reference = faulty_reference(vocab);
    let kls: Result<Vec<f64>> = instances
        .par_iter()
        .map(|inst| {
            let env = star_environment(vocab, std::slice::from_ref(inst))?;
            let ctx = encode_instance(inst, &vocab)?;
            exact_kl(policy, &reference, &env, &ctx, 10_000)
        })
        .collect();
    let kls = kls?;
    Ok(kls.iter().sum::<f64>() / kls.len() as f64)
}

/// The end-to-end comparison: train the preference guide on the train
/// split, fit the baselines, evaluate everything on the test split, and
/// write `results.csv` plus the aggregated preference dataset.
pub fn cmd_stargraph(config: &RunConfig) -> Result<Outcome> {
    let vocab = StarVocab::new(config.node_pool)?;
    let reference = faulty_reference(vocab);
    let phi = star_feature_map(vocab, config.feature_l);
    let env_name = format!("star-{}-{}", config.degree, config.path_len);

    let train = generate_instances(config, "star-train", config.train_instances)?;
    let test = generate_instances(config, "star-test", config.test_instances)?;
    let train_env = star_environment(vocab, &train)?;

    log::info!("training preference guide on {} instances", train.len());
    let oracle = BtOracle::deterministic_by_correctness(star_reward(vocab));
    let pita_config = PitaConfig {
        eta: config.eta,
        iterations: config.iterations,
        rollouts_per_iter: config.rollouts_per_iter,
        samples_per_context: config.samples_per_context,
        clamp_eps: config.clamp_eps,
        seed: config.seed,
        mle: MleOptions::default(),
    };
    let (theta, history, dataset) =
        run_pita(&pita_config, &train_env, &reference, &phi, &oracle, config.bound_b)?;
    let pita_policy = induced_policy(&theta, &phi, &reference, config.eta, config.clamp_eps)?;

    log::info!("fitting success model on {} reference rollouts", config.baseline_rollouts);
    let reward = star_reward(vocab);
    let reward_for_labels = reward.clone();
    let success = fit_success_from_rollouts(
        &train_env,
        &reference,
        move |c| u8::from(reward_for_labels(c) == 1.0),
        &phi,
        config.baseline_rollouts,
        config.seed ^ 0x51a9,
        &MleOptions::default(),
    )?;
    let qsharp_policy =
        tilt_policy(&reference, qsharp_score(success.clone(), config.eta)?, config.eta)?;
    let cd_policy = tilt_policy(&reference, cd_score(success), config.eta)?;

    log::info!("building {} preference pairs for the two-stage baseline", config.hf_pairs);
    let pairs = collect_reward_pairs(&train_env, &reference, &reward, config.hf_pairs, config.seed)?;
    let (hf_policy, hf_diag) = qsharp_hf_pipeline(
        &pairs,
        &phi,
        &train_env,
        &reference,
        config.eta,
        config.baseline_rollouts,
        config.seed ^ 0x2b7e,
        &MleOptions::default(),
    )?;
    log::info!(
        "two-stage threshold {:.4}, degenerate: {}",
        hf_diag.threshold,
        hf_diag.success_degenerate
    );

    let mut rows: Vec<ResultRow> = Vec::new();
    {
        let named: Vec<(&str, &dyn Policy)> = vec![
            ("reference", &reference),
            ("pita", &pita_policy),
            ("qsharp", &qsharp_policy),
            ("qsharp-hf", &hf_policy),
            ("cd", &cd_policy),
        ];
        for (name, policy) in named {
            let eval_seed = derive_rng(config.seed, &format!("eval-{name}"), 0).gen::<u64>();
            let report = evaluate_policy(policy, vocab, &test, config.eval_k, eval_seed)?;
            log::info!("{name}: pass@1 {:.4}, maj@{} {:.4}", report.pass1, config.eval_k, report.majk);
            rows.push(ResultRow::new(name, &env_name, Metric::Pass1, report.pass1, config.seed));
            rows.push(
                ResultRow::new(name, &env_name, Metric::MajK, report.majk, config.seed)
                    .with_extra("k", config.eval_k),
            );
            if name != "reference" {
                let kl = mean_exact_kl(policy, vocab, &test)?;
                rows.push(
                    ResultRow::new(name, &env_name, Metric::KlExact, kl, config.seed)
                        .with_extra("estimator", "exact"),
                );
            }
        }
    }
    for record in &history.rounds {
        rows.push(
            ResultRow::new(
                "pita",
                &env_name,
                Metric::DatasetSize,
                record.dataset_size as f64,
                config.seed,
            )
            .with_extra("round", record.iteration)
            .with_extra("mle_converged", record.mle_converged),
        );
    }

    write_results(&rows, &config.out.join("results.csv"))?;
    write_preferences(&dataset, &config.out.join("preferences.jsonl"))?;
    Ok(Outcome::Pass)
}

/// Sample (winner, loser) completion pairs from reference rollouts, ordered
/// by the true reward; contexts whose samples never split are skipped.
fn collect_reward_pairs<P: Policy + Sync + ?Sized>(
    env: &Environment,
    reference: &P,
    reward: &(impl Fn(&crate::mdp::Completion) -> f64 + Sync),
    count: usize,
    seed: u64,
) -> Result<Vec<(crate::mdp::Completion, crate::mdp::Completion)>> {
    let pairs: Result<Vec<Option<(crate::mdp::Completion, crate::mdp::Completion)>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng(seed, "hf-pairs", i as u64);
            let ctx = env.sample_context(&mut rng)?;
            let mut winner = None;
            let mut loser = None;
            for _ in 0..16 {
                let c = sample_rollout(reference, env, &ctx, &mut rng)?;
                if reward(&c) == 1.0 {
                    winner.get_or_insert(c);
                } else {
                    loser.get_or_insert(c);
                }
                if winner.is_some() && loser.is_some() {
                    break;
                }
            }
            Ok(winner.zip(loser))
        })
        .collect();
    Ok(pairs?.into_iter().flatten().collect())
}

pub fn cmd_theory(config: &RunConfig, which: TheoryKind) -> Result<Outcome> {
    match which {
        TheoryKind::Mle => theory_mle(config),
        TheoryKind::Regret => theory_regret(config),
        TheoryKind::Gradient => theory_gradient(config),
        TheoryKind::Convexity => theory_convexity(config),
    }
}

fn tree_fixture(config: &RunConfig, tag: &str, index: u64) -> Result<RandomTreeEnv> {
    let mut rng = derive_rng(config.seed, tag, index);
    make_random_tree_env(config.tree_vocab, config.tree_depth, config.theory_bound_b, rng.gen())
}

fn theory_env_name(config: &RunConfig) -> String {
    format!("tree-{}-{}", config.tree_vocab, config.tree_depth)
}

fn theory_mle(config: &RunConfig) -> Result<Outcome> {
    let fixture = tree_fixture(config, "theory-mle-env", 0)?;
    let report = mle_scaling_experiment(
        &fixture,
        &config.n_grid,
        config.trials,
        config.lambda,
        config.seed,
        &MleOptions::default(),
    )?;
    let env_name = theory_env_name(config);
    let mut rows = Vec::new();
    for (gi, &n) in report.n_grid.iter().enumerate() {
        for (trial, err) in report.errors[gi].iter().enumerate() {
            rows.push(
                ResultRow::new("mle", &env_name, Metric::SeminormErr, *err, config.seed)
                    .with_extra("n", n)
                    .with_extra("trial", trial)
                    .with_extra("lambda", config.lambda),
            );
        }
        rows.push(
            ResultRow::new("mle-median", &env_name, Metric::SeminormErr, report.medians[gi], config.seed)
                .with_extra("n", n)
                .with_extra("slope", format!("{:.6}", report.slope))
                .with_extra("paired_improvement", format!("{:.4}", report.paired_improvement)),
        );
    }
    write_results(&rows, &config.out.join("mle_scaling.csv"))?;
    println!(
        "mle scaling: slope {:.4} (want [-0.65,-0.35]), paired improvement {:.3} (want >= 0.95)",
        report.slope, report.paired_improvement
    );
    if !(report.slope >= -0.65 && report.slope <= -0.35) {
        return Ok(Outcome::PropertyFailure(format!(
            "mle-rate: slope {:.4} outside [-0.65, -0.35]",
            report.slope
        )));
    }
    if report.paired_improvement < 0.95 {
        return Ok(Outcome::PropertyFailure(format!(
            "mle-rate: paired improvement {:.3} < 0.95",
            report.paired_improvement
        )));
    }
    Ok(Outcome::Pass)
}

fn theory_regret(config: &RunConfig) -> Result<Outcome> {
    let schedule: Vec<usize> = (0..config.regret_rounds)
        .map(|k| config.regret_base_samples << k)
        .collect();
    let env_name = theory_env_name(config);
    let runs: Result<Vec<_>> = (0..config.regret_seeds)
        .into_par_iter()
        .map(|i| {
            let fixture = tree_fixture(config, "theory-regret-env", i as u64)?;
            regret_experiment(
                &fixture,
                config.theory_eta,
                &schedule,
                config.seed ^ (i as u64),
                &MleOptions::default(),
            )
        })
        .collect();
    let runs = runs?;

    let mut rows = Vec::new();
    for (i, rounds) in runs.iter().enumerate() {
        for r in rounds {
            rows.push(
                ResultRow::new("pita", &env_name, Metric::Suboptimality, r.suboptimality, config.seed)
                    .with_extra("env_seed", i)
                    .with_extra("round", r.round)
                    .with_extra("n_round", r.samples_this_round)
                    .with_extra("n_cumulative", r.samples_cumulative),
            );
        }
    }
    write_results(&rows, &config.out.join("regret.csv"))?;

    let mut firsts: Vec<f64> = runs.iter().map(|r| r[0].suboptimality).collect();
    let mut lasts: Vec<f64> =
        runs.iter().map(|r| r[config.regret_rounds - 1].suboptimality).collect();
    firsts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lasts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = |v: &[f64]| {
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
    };
    let m_first = median(&firsts);
    let m_last = median(&lasts);
    println!(
        "regret: median suboptimality round 1 = {:.6}, round {} = {:.6} (want <= 10%)",
        m_first, config.regret_rounds, m_last
    );
    for (i, rounds) in runs.iter().enumerate() {
        for r in rounds {
            if r.suboptimality < -1e-10 {
                return Ok(Outcome::PropertyFailure(format!(
                    "regret: negative suboptimality {} at env {i} round {}",
                    r.suboptimality, r.round
                )));
            }
        }
    }
    if m_last > 0.1 * m_first {
        return Ok(Outcome::PropertyFailure(format!(
            "regret: median final suboptimality {m_last:.6} exceeds 10% of round-1 {m_first:.6}"
        )));
    }
    Ok(Outcome::Pass)
}

fn theory_gradient(config: &RunConfig) -> Result<Outcome> {
    let fixture = tree_fixture(config, "theory-gradient-env", 0)?;
    let mut lines = vec!["theta,eta,max_rel_err_exact,max_rel_err_fd".to_string()];
    let mut worst_exact: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let mut thetas = vec![("zero".to_string(), ThetaParams::zeros(fixture.dim(), config.theory_bound_b))];
    for i in 0..5u64 {
        let mut rng = derive_rng(config.seed, "theory-gradient-theta", i);
        let raw = DVector::from_fn(fixture.dim(), |_, _| rng.gen_range(-1.0..1.0));
        thetas.push((format!("random-{i}"), project_theta(&raw, config.theory_bound_b)));
    }
    for (name, theta) in &thetas {
        for eta in [0.1, 1.0, 10.0] {
            let (err_exact, err_fd) = gradient_identity_check(&fixture, theta, eta)?;
            worst_exact = worst_exact.max(err_exact);
            worst_fd = worst_fd.max(err_fd);
            lines.push(format!(
                "{name},{eta},{},{}",
                format_sig9(err_exact)?,
                format_sig9(err_fd)?
            ));
        }
    }
    std::fs::write(config.out.join("gradient.csv"), lines.join("\n") + "\n")?;
    println!(
        "gradient identity: max exact-route error {worst_exact:.3e} (want < 1e-8), \
         max finite-difference error {worst_fd:.3e} (want < 1e-4)"
    );
    if worst_exact >= 1e-8 {
        return Ok(Outcome::PropertyFailure(format!(
            "gradient-identity: exact-route error {worst_exact:.3e} >= 1e-8"
        )));
    }
    if worst_fd >= 1e-4 {
        return Ok(Outcome::PropertyFailure(format!(
            "gradient-identity: finite-difference error {worst_fd:.3e} >= 1e-4"
        )));
    }
    Ok(Outcome::Pass)
}

fn theory_convexity(config: &RunConfig) -> Result<Outcome> {
    let fixture = tree_fixture(config, "theory-convexity-env", 0)?;
    // A fixed dataset drawn from the reference at the true parameter.
    let mut rng = derive_rng(config.seed, "theory-convexity-data", 0);
    let mut xs = Vec::new();
    let mut os = Vec::new();
    for _ in 0..512 {
        let i = fixture.sample_completion_index(&mut rng);
        let label = sample_win_label(fixture.oracle(), &fixture.completions()[i].0, &mut rng)?;
        let mut x = DVector::zeros(fixture.dim());
        x[i] = fixture.feature_bound();
        xs.push(x);
        os.push(label as f64);
    }
    let g = gamma_conservative(fixture.feature_bound(), fixture.theta_bound());
    let mut lines = vec!["trial,bregman_gap,bound,margin".to_string()];
    let mut worst_margin = f64::INFINITY;
    for trial in 0..100u64 {
        let mut rng = derive_rng(config.seed, "theory-convexity-pair", trial);
        let theta_star = project_theta(
            &DVector::from_fn(fixture.dim(), |_, _| rng.gen_range(-2.0..2.0)),
            fixture.theta_bound(),
        );
        let perturbed = project_theta(
            &(theta_star.vector()
                + DVector::from_fn(fixture.dim(), |_, _| rng.gen_range(-1.0..1.0))),
            fixture.theta_bound(),
        );
        let delta = perturbed.vector() - theta_star.vector();
        let gap = bce_loss_on(&xs, &os, perturbed.vector())
            - bce_loss_on(&xs, &os, theta_star.vector())
            - bce_grad_on(&xs, &os, theta_star.vector()).dot(&delta);
        let bound = g * seminorm_on(&xs, &delta, 0.0).powi(2);
        let margin = gap - bound;
        worst_margin = worst_margin.min(margin);
        lines.push(format!(
            "{trial},{},{},{}",
            format_sig9(gap)?,
            format_sig9(bound)?,
            format_sig9(margin)?
        ));
    }
    std::fs::write(config.out.join("convexity.csv"), lines.join("\n") + "\n")?;
    println!("strong convexity: worst margin {worst_margin:.3e} (want >= -1e-10)");
    if worst_margin < -1e-10 {
        return Ok(Outcome::PropertyFailure(format!(
            "strong-convexity: margin {worst_margin:.3e} below -1e-10"
        )));
    }
    Ok(Outcome::Pass)
}

struct CheckReport {
    name: &'static str,
    max_deviation: f64,
    threshold: f64,
}

/// The soft-value invariant suite on seeded enumerable environments:
/// backward/forward agreement, the tilt normalization identity, the
/// preference-form/reward-form consistency, and the KL estimator checks.
pub fn cmd_selftest(config: &RunConfig, inject_fault: bool) -> Result<Outcome> {
    let started = std::time::Instant::now();
    let n_envs = config.selftest_envs;
    let per_env: Result<Vec<[f64; 4]>> = (0..n_envs)
        .into_par_iter()
        .map(|i| selftest_one_env(config, i as u64, inject_fault))
        .collect();
    let per_env = per_env?;
    let collect_max = |idx: usize| {
        per_env.iter().map(|d| d[idx]).fold(0.0f64, f64::max)
    };

    // Monte-Carlo KL agreement on a subset of environments.
    let mut mc_worst_sigma: f64 = 0.0;
    for i in (0..n_envs).step_by(10.max(n_envs / 10)) {
        let fixture = tree_fixture(config, "selftest-env", i as u64)?;
        let eta = 1.0;
        let root = fixture.root();
        let tables =
            backward_soft_values(fixture.env(), fixture.reference(), eta, &root, 1_000_000)?;
        let tilted = tilt_policy(fixture.reference(), TableScore(&tables), eta)?;
        let exact = exact_kl(&tilted, fixture.reference(), fixture.env(), &root, 1_000_000)?;
        let mut rng = derive_rng(config.seed, "selftest-mc-kl", i as u64);
        let (est, se) = mc_kl(
            &tilted,
            fixture.reference(),
            fixture.env(),
            &root,
            config.mc_kl_samples,
            &mut rng,
        )?;
        mc_worst_sigma = mc_worst_sigma.max((est - exact).abs() / se.max(1e-15));
    }

    let checks = [
        CheckReport { name: "backward-forward", max_deviation: collect_max(0), threshold: 1e-10 },
        CheckReport { name: "tilt-identity", max_deviation: collect_max(1), threshold: 1e-12 },
        CheckReport {
            name: "preference-form-consistency",
            max_deviation: collect_max(2),
            threshold: 1e-9,
        },
        CheckReport { name: "kl-eta-monotone", max_deviation: collect_max(3), threshold: 1e-10 },
        CheckReport { name: "mc-kl-sigmas", max_deviation: mc_worst_sigma, threshold: 3.0 },
    ];

    let mut lines = vec!["check,envs,max_deviation,threshold,pass".to_string()];
    let mut failure: Option<String> = None;
    for c in &checks {
        let pass = c.max_deviation < c.threshold;
        lines.push(format!(
            "{},{},{},{},{}",
            c.name,
            n_envs,
            format_sig9(c.max_deviation)?,
            format_sig9(c.threshold)?,
            pass
        ));
        println!(
            "selftest {}: max deviation {:.3e} (threshold {:.1e}) -> {}",
            c.name,
            c.max_deviation,
            c.threshold,
            if pass { "pass" } else { "FAIL" }
        );
        if !pass && failure.is_none() {
            failure = Some(c.name.to_string());
        }
    }
    std::fs::write(config.out.join("selftest.csv"), lines.join("\n") + "\n")?;
    log::info!("selftest finished in {:.2?}", started.elapsed());
    match failure {
        Some(name) => Ok(Outcome::PropertyFailure(name)),
        None => Ok(Outcome::Pass),
    }
}

/// Runs the per-environment deviations:
/// `[backward-forward, tilt-identity, preference-form, kl-monotonicity]`.
fn selftest_one_env(config: &RunConfig, index: u64, inject_fault: bool) -> Result<[f64; 4]> {
    // Vary the shape across the sweep within enumerable bounds.
    let vocab = 2 + (index % 3) as u32;
    let depth = 2 + (index % 4) as usize;
    let mut rng = derive_rng(config.seed, "selftest-env-seed", index);
    let fixture_seed: u64 = rng.gen();
    let fixture = make_random_tree_env(vocab, depth, config.theory_bound_b, fixture_seed)?;
    let env = fixture.env();
    let reference = fixture.reference();
    let root = fixture.root();
    let eta = [0.5, 1.0, 2.0][(index % 3) as usize];

    // Optionally perturb the reward on the forward route only.
    let fault_env = if inject_fault {
        let base = fixture.env_with_reward(fixture.theta_star())?;
        let vocab_size = base.vocab_size();
        let horizon = base.horizon();
        let eos = base.eos();
        let inner = fixture.env_with_reward(fixture.theta_star())?;
        Some(Environment::new(
            vocab_size,
            horizon,
            eos,
            vec![(State::empty(), 1.0)],
            move |c: &crate::mdp::Completion| inner.reward(c) + 0.1,
        )?)
    } else {
        None
    };
    let forward_env = fault_env.as_ref().unwrap_or(env);

    let tables = backward_soft_values(env, reference, eta, &root, 1_000_000)?;

    // 1. Backward induction against the forward log-expectation form.
    let mut dev_bf: f64 = 0.0;
    for (s, a, q_backward) in tables.q_entries() {
        if env.is_forced(s) {
            continue;
        }
        let q_forward = forward_soft_q(forward_env, reference, eta, s, a, 1_000_000)?;
        dev_bf = dev_bf.max((q_backward - q_forward).abs());
    }

    // 2. Tilt identity: the guided policy against plain normalization of
    //    pi_ref(a|s) exp(q/eta).
    let tilted = tilt_policy(reference, TableScore(&tables), eta)?;
    let mut dev_tilt: f64 = 0.0;
    // 3. Preference-form consistency via the greedy reference completion.
    let mut dev_pref: f64 = 0.0;
    for (s, _) in tables.states() {
        if env.is_terminal(s) || env.is_forced(s) {
            continue;
        }
        let probs = reference.action_distribution(s)?;
        let guided = tilted.action_distribution(s)?;
        let weights: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if p == 0.0 {
                    0.0
                } else {
                    p * (tables.q_value(s, Token(i as u32)).unwrap() / eta).exp()
                }
            })
            .collect();
        let z: f64 = weights.iter().sum();
        for (g, w) in guided.iter().zip(&weights) {
            dev_tilt = dev_tilt.max((g - w / z).abs());
        }

        // Preference-form guidance: win probabilities against the greedy
        // reference completion, logit-transformed inside the forward
        // expectation. It differs from the reward form by a state-only
        // constant, so the induced distributions must agree.
        let y_ref = greedy_decode(reference, env, s)?;
        let r_ref = env.reward(&y_ref);
        let pref_score = |state: &State, action: Token| -> Result<f64> {
            let next = state.extend(action);
            if env.is_terminal(&next) {
                let c = crate::mdp::Completion::new(state.clone(), vec![action], true);
                return psi(bt_prob(env.reward(&c), r_ref));
            }
            let completions = enumerate_completions(env, reference, &next, 1_000_000)?;
            let mut terms = Vec::with_capacity(completions.len());
            for (c, p) in &completions {
                terms.push(p.ln() + psi(bt_prob(env.reward(c), r_ref))? / eta);
            }
            Ok(eta * crate::soft_value::log_sum_exp(&terms))
        };
        let pref_tilted = tilt_policy(reference, &pref_score, eta)?;
        let pref_dist = pref_tilted.action_distribution(s)?;
        for (a, b) in guided.iter().zip(&pref_dist) {
            dev_pref = dev_pref.max((a - b).abs());
        }
    }

    // 4. KL non-increasing in eta for the per-eta optimal tilts.
    let mut dev_kl: f64 = 0.0;
    let mut previous = f64::INFINITY;
    for eta_k in [0.1, 1.0, 10.0] {
        let t = backward_soft_values(env, reference, eta_k, &root, 1_000_000)?;
        let pi = tilt_policy(reference, TableScore(&t), eta_k)?;
        let kl = exact_kl(&pi, reference, env, &root, 1_000_000)?;
        if kl > previous {
            dev_kl = dev_kl.max(kl - previous);
        }
        previous = kl;
    }

    // Identity policies have exactly zero trajectory KL.
    let self_kl = exact_kl(reference, reference, env, &root, 1_000_000)?;
    dev_kl = dev_kl.max(self_kl.abs());

    Ok([dev_bf, dev_tilt, dev_pref, dev_kl])
}

pub fn cmd_gen_stargraph(config: &RunConfig) -> Result<Outcome> {
    let instances = generate_instances(config, "star-gen", config.gen_count)?;
    let path = config.out.join("instances.txt");
    write_instances(&instances, &path)?;
    println!(
        "wrote {} G({},{}) instances to {}",
        instances.len(),
        config.degree,
        config.path_len,
        path.display()
    );
    Ok(Outcome::Pass)
}
