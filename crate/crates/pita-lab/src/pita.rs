//! The iterative preference-alignment loop.
//!
//! Each round induces a guided policy from the current preference
//! parameter by certainty equivalence: the learned win probability at the
//! one-step-extended state `(s|a)` passes through the logit transform and
//! tilts the reference. Fresh pairwise feedback is then collected by
//! rolling in with that policy and sampling reference continuations
//! against the greedy reference completion, and the parameter is refit
//! from scratch on all data aggregated so far.

use rayon::prelude::*;

use crate::error::Error;
use crate::mdp::{greedy_decode, sample_rollout, Environment, Policy, State, Token};
use crate::preference::{
    fit_mle, predict, psi, sample_label, BtOracle, FeatureMap, MleOptions, PreferenceDataset,
    PreferenceSample, ThetaParams,
};
use crate::seeding::derive_rng;
use crate::soft_value::{tilt_policy, GuidedPolicy, Score};
use crate::Result;

/// Hyperparameters of the alignment loop.
#[derive(Debug, Clone)]
pub struct PitaConfig {
    /// KL-regularization temperature.
    pub eta: f64,
    /// Number of collect/refit rounds `K`.
    pub iterations: usize,
    /// Roll-in tasks per round `N`.
    pub rollouts_per_iter: usize,
    /// Reference continuations per context `M`.
    pub samples_per_context: usize,
    /// Win probabilities are clamped to `[clamp_eps, 1 - clamp_eps]`
    /// before the logit transform.
    pub clamp_eps: f64,
    pub seed: u64,
    pub mle: MleOptions,
}

impl Default for PitaConfig {
    fn default() -> Self {
        PitaConfig {
            eta: 0.1,
            iterations: 3,
            rollouts_per_iter: 500,
            samples_per_context: 4,
            clamp_eps: 1e-6,
            seed: 7,
            mle: MleOptions::default(),
        }
    }
}

impl PitaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(Error::NonPositiveEta(self.eta));
        }
        if self.iterations < 1 || self.rollouts_per_iter < 1 || self.samples_per_context < 1 {
            return Err(Error::config("iteration and sample counts must be >= 1"));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::config("clamp_eps must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Per-round training record.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta: ThetaParams,
    pub dataset_size: usize,
    pub skipped_contexts: usize,
    pub mle_converged: bool,
    pub mle_iterations: usize,
    pub mle_loss: f64,
}

/// Training history across rounds; dataset sizes are strictly increasing
/// because data is aggregated, never discarded.
#[derive(Debug, Clone, Default)]
pub struct PitaHistory {
    pub rounds: Vec<IterationRecord>,
}

/// Guidance score by certainty equivalence: the learned win probability of
/// the extended state `(s|a)`, clamped, through the logit transform.
#[derive(Clone)]
pub struct PreferenceScore {
    theta: ThetaParams,
    phi: FeatureMap,
    clamp_eps: f64,
}

impl PreferenceScore {
    pub fn new(theta: ThetaParams, phi: FeatureMap, clamp_eps: f64) -> Self {
        PreferenceScore { theta, phi, clamp_eps }
    }

    pub fn theta(&self) -> &ThetaParams {
        &self.theta
    }
}

impl Score for PreferenceScore {
    fn score(&self, state: &State, action: Token) -> Result<f64> {
        let extended = state.extend(action);
        let p = predict(&self.theta, &self.phi, &extended)?;
        psi(p.clamp(self.clamp_eps, 1.0 - self.clamp_eps))
    }
}

/// The policy induced by a preference parameter: reference mass reweighted
/// by `exp(psi(clamp(P_hat(s|a))) / eta)`.
pub fn induced_policy<P: Policy>(
    theta: &ThetaParams,
    phi: &FeatureMap,
    reference: P,
    eta: f64,
    clamp_eps: f64,
) -> Result<GuidedPolicy<P, PreferenceScore>> {
    if !(clamp_eps > 0.0 && clamp_eps < 0.5) {
        return Err(Error::config("clamp_eps must lie in (0, 0.5)"));
    }
    tilt_policy(reference, PreferenceScore::new(theta.clone(), phi.clone(), clamp_eps), eta)
}

/// One round of preference data.
#[derive(Debug, Clone)]
pub struct CollectedRound {
    pub samples: Vec<PreferenceSample>,
    /// Contexts discarded because they were already terminal.
    pub skipped_contexts: usize,
}

const MAX_CONTEXT_ATTEMPTS: usize = 64;

/// Roll in with `prev_policy` to a random depth, then gather `m` reference
/// continuations labelled against the greedy reference completion of the
/// reached context. Runs the `n` tasks in parallel on seeded streams
/// derived from `(seed, round, task index)`.
#[allow(clippy::too_many_arguments)]
pub fn collect_round<P: Policy + ?Sized, Q: Policy + ?Sized>(
    prev_policy: &P,
    reference: &Q,
    env: &Environment,
    oracle: &BtOracle,
    n: usize,
    m: usize,
    round: usize,
    seed: u64,
) -> Result<CollectedRound> {
    if n < 1 || m < 1 {
        return Err(Error::config("n and m must be >= 1"));
    }
    let tag = format!("pita-collect-{round}");
    let tasks: Result<Vec<(Vec<PreferenceSample>, usize)>> = (0..n)
        .into_par_iter()
        .map(|task| {
            let mut rng = derive_rng(seed, &tag, task as u64);
            let mut skipped = 0usize;
            for _ in 0..MAX_CONTEXT_ATTEMPTS {
                let start = env.sample_context(&mut rng)?;
                if env.is_terminal(&start) {
                    skipped += 1;
                    continue;
                }
                let t = rng.gen_range(0..env.horizon());
                // Roll in for t steps; if the episode would end earlier,
                // keep the last non-terminal state as the context.
                let mut context = start;
                for _ in 0..t {
                    if env.is_forced(&context) {
                        break;
                    }
                    let probs = prev_policy.action_distribution(&context)?;
                    env.validate_distribution(&probs)?;
                    let mut u = rng.gen::<f64>();
                    let mut choice = None;
                    for (i, &p) in probs.iter().enumerate() {
                        u -= p;
                        if u < 0.0 {
                            choice = Some(Token(i as u32));
                            break;
                        }
                    }
                    let action = choice.unwrap_or(env.eos());
                    if action == env.eos() {
                        break;
                    }
                    context = context.extend(action);
                }
                let y_ref = greedy_decode(reference, env, &context)?;
                let mut samples = Vec::with_capacity(m);
                for _ in 0..m {
                    let y = sample_rollout(reference, env, &context, &mut rng)?;
                    let label = sample_label(oracle, &y, &y_ref, &mut rng)?;
                    samples.push(PreferenceSample {
                        context: context.clone(),
                        y,
                        y_ref: y_ref.clone(),
                        label,
                        iteration: round,
                    });
                }
                return Ok((samples, skipped));
            }
            Err(Error::Domain(format!(
                "no non-terminal context found after {MAX_CONTEXT_ATTEMPTS} attempts"
            )))
        })
        .collect();
    let tasks = tasks?;
    let mut samples = Vec::with_capacity(n * m);
    let mut skipped_contexts = 0;
    for (s, k) in tasks {
        samples.extend(s);
        skipped_contexts += k;
    }
    Ok(CollectedRound { samples, skipped_contexts })
}

use rand::Rng as _;

/// Run the full loop: from `theta = 0`, alternate guided collection and
/// from-scratch MLE refits on the aggregated dataset. Returns the final
/// parameter, the training history, and the dataset.
pub fn run_pita<P: Policy + Sync + ?Sized>(
    config: &PitaConfig,
    env: &Environment,
    reference: &P,
    phi: &FeatureMap,
    oracle: &BtOracle,
    bound: f64,
) -> Result<(ThetaParams, PitaHistory, PreferenceDataset)> {
    config.validate()?;
    let mut dataset = PreferenceDataset::new();
    let mut theta = ThetaParams::zeros(phi.dim(), bound);
    let mut history = PitaHistory::default();
    for round in 1..=config.iterations {
        let induced = induced_policy(&theta, phi, reference, config.eta, config.clamp_eps)?;
        let collected = collect_round(
            &induced,
            reference,
            env,
            oracle,
            config.rollouts_per_iter,
            config.samples_per_context,
            round,
            config.seed,
        )?;
        dataset.extend(collected.samples);
        // Retrained from scratch each round on all data so far.
        let fit = fit_mle(&dataset, phi, bound, &config.mle)?;
        theta = fit.theta;
        history.rounds.push(IterationRecord {
            iteration: round,
            theta: theta.clone(),
            dataset_size: dataset.len(),
            skipped_contexts: collected.skipped_contexts,
            mle_converged: fit.converged,
            mle_iterations: fit.iterations,
            mle_loss: fit.loss,
        });
        log::info!(
            "round {round}: dataset {} samples, loss {:.6}, converged {}",
            dataset.len(),
            fit.loss,
            fit.converged
        );
    }
    Ok((theta, history, dataset))
}

/// Diagnostic for the certainty-equivalence approximation: the maximum
/// per-state total-variation distance between the induced policy (logit of
/// the point estimate at `(s|a)`) and the idealized policy that tilts by
/// the log-expectation of `exp(psi(P_hat)/eta)` over reference
/// continuations. Enumerates every reachable non-terminal state.
#[allow(clippy::too_many_arguments)]
pub fn certainty_equivalence_gap<P: Policy + ?Sized>(
    theta: &ThetaParams,
    phi: &FeatureMap,
    reference: &P,
    env: &Environment,
    eta: f64,
    start: &State,
    clamp_eps: f64,
    limit: usize,
) -> Result<f64> {
    use crate::mdp::enumerate_completions;
    use crate::soft_value::log_sum_exp;

    let ce = induced_policy(theta, phi, reference, eta, clamp_eps)?;

    // Idealized score is the soft value of psi(P_hat) over continuations.
    let ideal_score = |state: &State, action: Token| -> Result<f64> {
        let next = state.extend(action);
        if env.is_terminal(&next) {
            let p = predict(theta, phi, &next)?;
            return psi(p.clamp(clamp_eps, 1.0 - clamp_eps));
        }
        let completions = enumerate_completions(env, reference, &next, limit)?;
        let mut terms = Vec::with_capacity(completions.len());
        for (c, prob) in &completions {
            let p = predict(theta, phi, &c.full_state())?;
            terms.push(prob.ln() + psi(p.clamp(clamp_eps, 1.0 - clamp_eps))? / eta);
        }
        Ok(eta * log_sum_exp(&terms))
    };
    let ideal = tilt_policy(reference, &ideal_score, eta)?;

    let mut stack = vec![start.clone()];
    let mut max_tv: f64 = 0.0;
    let mut visited = 0usize;
    while let Some(state) = stack.pop() {
        visited += 1;
        if visited > limit {
            return Err(Error::BudgetExceeded { limit });
        }
        if env.is_terminal(&state) || env.is_forced(&state) {
            continue;
        }
        let a = ce.action_distribution(&state)?;
        let b = ideal.action_distribution(&state)?;
        let tv = 0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        max_tv = max_tv.max(tv);
        let probs = reference.action_distribution(&state)?;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                stack.push(state.extend(Token(i as u32)));
            }
        }
    }
    Ok(max_tv)
}
