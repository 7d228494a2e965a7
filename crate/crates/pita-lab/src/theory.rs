//! Numerical verification of the estimation and regret theory on
//! exhaustively enumerable tree environments.
//!
//! The fixture realizes the linear preference class exactly: features are
//! one-hot over terminal completions (scaled to norm `L = 1`), the true
//! parameter lives on the zero-sum sphere of radius `B`, rewards are
//! `<theta*, Phi(y)>`, and labels are win draws at `sigma(<theta*, Phi>)`
//! against the renormalized reference completion.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use std::collections::HashMap;

use crate::error::Error;
use crate::mdp::{enumerate_completions, Completion, Environment, Policy, State, Token};
use crate::preference::{
    fit_mle_on, sample_win_label, seminorm_on, BtOracle, FeatureMap, MleOptions,
    ThetaParams,
};
use crate::seeding::derive_rng;
use crate::soft_value::{backward_soft_values, soft_return, tilt_policy, TableScore};
use crate::Result;

/// A strictly positive next-token distribution derived deterministically
/// from a seed and the state, so enumeration and rollouts agree without
/// storing tables.
#[derive(Debug, Clone, Copy)]
pub struct SeededPolicy {
    seed: u64,
    vocab_size: u32,
}

impl SeededPolicy {
    pub fn new(seed: u64, vocab_size: u32) -> Self {
        SeededPolicy { seed, vocab_size }
    }
}

impl Policy for SeededPolicy {
    fn action_distribution(&self, state: &State) -> Result<Vec<f64>> {
        let mut hash = 0xcbf29ce484222325u64 ^ self.seed;
        for t in state.tokens() {
            hash ^= u64::from(t.id()) + 0x9e3779b9;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash ^= state.gen_len() as u64;
        let mut rng = derive_rng(hash, "seeded-policy", 0);
        let mut probs: Vec<f64> =
            (0..self.vocab_size).map(|_| rng.gen_range(0.2..1.0)).collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        Ok(probs)
    }
}

/// Enumerable environment with exactly realizable linear preferences.
pub struct RandomTreeEnv {
    env: Environment,
    reference: SeededPolicy,
    phi: FeatureMap,
    theta_star: ThetaParams,
    oracle: BtOracle,
    /// All completions with their reference probabilities.
    completions: Vec<(Completion, f64)>,
    /// Feature vector per completion, in enumeration order.
    features: Vec<DVector<f64>>,
    feature_bound: f64,
    theta_bound: f64,
}

fn completion_index_map(completions: &[(Completion, f64)]) -> HashMap<Vec<u32>, usize> {
    completions
        .iter()
        .enumerate()
        .map(|(i, (c, _))| (c.full_state().tokens().iter().map(|t| t.0).collect(), i))
        .collect()
}

/// Build a fixture: `vocab_size` tokens (EOS highest), `depth` free steps,
/// reference strictly positive, `theta*` uniform on the zero-sum sphere of
/// radius `bound_b`, one-hot completion features of norm 1.
pub fn make_random_tree_env(
    vocab_size: u32,
    depth: usize,
    bound_b: f64,
    seed: u64,
) -> Result<RandomTreeEnv> {
    if vocab_size < 2 {
        return Err(Error::config("vocab must include at least one token plus EOS"));
    }
    if depth < 1 {
        return Err(Error::config("depth must be >= 1"));
    }
    let eos = Token(vocab_size - 1);
    let reference = SeededPolicy::new(seed, vocab_size);

    // Enumerate the support once against a zero-reward shell.
    let shell = Environment::new(
        vocab_size,
        depth,
        eos,
        vec![(State::empty(), 1.0)],
        |_: &Completion| 0.0,
    )?;
    let completions = enumerate_completions(&shell, &reference, &State::empty(), 100_000)?;
    let dim = completions.len();
    let index = completion_index_map(&completions);

    let mut rng = derive_rng(seed, "tree-theta-star", 0);
    let raw = DVector::from_fn(dim, |_, _| {
        // Standard normal via Box-Muller.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let mean = raw.sum() / dim as f64;
    let centered = raw.map(|x| x - mean);
    let theta_star =
        ThetaParams::new(&centered * (bound_b / centered.norm()), bound_b)?;

    let feature_bound = 1.0;
    let index_for_phi = index.clone();
    let phi = FeatureMap::new(dim, feature_bound, move |s: &State| {
        let key: Vec<u32> = s.tokens().iter().map(|t| t.0).collect();
        let i = *index_for_phi
            .get(&key)
            .ok_or_else(|| Error::Domain("state is not a terminal completion".into()))?;
        let mut v = DVector::zeros(dim);
        v[i] = feature_bound;
        Ok(v)
    });

    let features: Vec<DVector<f64>> = (0..dim)
        .map(|i| {
            let mut v = DVector::zeros(dim);
            v[i] = feature_bound;
            v
        })
        .collect();

    let theta_for_reward = theta_star.clone();
    let index_for_reward = index;
    let env = Environment::new(
        vocab_size,
        depth,
        eos,
        vec![(State::empty(), 1.0)],
        move |c: &Completion| {
            let key: Vec<u32> = c.full_state().tokens().iter().map(|t| t.0).collect();
            index_for_reward
                .get(&key)
                .map_or(0.0, |&i| feature_bound * theta_for_reward.vector()[i])
        },
    )?;

    let theta_for_oracle = theta_star.clone();
    let index_for_oracle = completion_index_map(&completions);
    let oracle = BtOracle::win_rate(move |c: &Completion| {
        let key: Vec<u32> = c.full_state().tokens().iter().map(|t| t.0).collect();
        index_for_oracle
            .get(&key)
            .map_or(0.0, |&i| feature_bound * theta_for_oracle.vector()[i])
    });

    Ok(RandomTreeEnv {
        env,
        reference,
        phi,
        theta_star,
        oracle,
        completions,
        features,
        feature_bound,
        theta_bound: bound_b,
    })
}

impl RandomTreeEnv {
    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn reference(&self) -> &SeededPolicy {
        &self.reference
    }

    pub fn phi(&self) -> &FeatureMap {
        &self.phi
    }

    pub fn theta_star(&self) -> &ThetaParams {
        &self.theta_star
    }

    pub fn oracle(&self) -> &BtOracle {
        &self.oracle
    }

    pub fn completions(&self) -> &[(Completion, f64)] {
        &self.completions
    }

    pub fn dim(&self) -> usize {
        self.completions.len()
    }

    pub fn feature_bound(&self) -> f64 {
        self.feature_bound
    }

    pub fn theta_bound(&self) -> f64 {
        self.theta_bound
    }

    pub fn root(&self) -> State {
        State::empty()
    }

    /// Environment identical in structure but rewarded by `<theta, Phi>`.
    pub fn env_with_reward(&self, theta: &ThetaParams) -> Result<Environment> {
        let index = completion_index_map(&self.completions);
        let theta = theta.vector().clone();
        let scale = self.feature_bound;
        Environment::new(
            self.env.vocab_size(),
            self.env.horizon(),
            self.env.eos(),
            vec![(State::empty(), 1.0)],
            move |c: &Completion| {
                let key: Vec<u32> = c.full_state().tokens().iter().map(|t| t.0).collect();
                index.get(&key).map_or(0.0, |&i| scale * theta[i])
            },
        )
    }

    /// Draw a completion index from the exact reference distribution.
    pub fn sample_completion_index<R: Rng>(&self, rng: &mut R) -> usize {
        let mut u = rng.gen::<f64>();
        for (i, (_, p)) in self.completions.iter().enumerate() {
            u -= p;
            if u < 0.0 {
                return i;
            }
        }
        self.completions.len() - 1
    }

    /// The policy induced by a parameter: the reference tilted by the
    /// optimal soft action values of the plug-in reward `<theta, Phi>`.
    /// Its trajectory law is the Gibbs reweighting
    /// `pi_ref(y) exp(<theta, Phi(y)>/eta) / Z`.
    pub fn induced_policy(
        &self,
        theta: &ThetaParams,
        eta: f64,
    ) -> Result<impl Policy + use<'_>> {
        let env_hat = self.env_with_reward(theta)?;
        let tables = backward_soft_values(&env_hat, &self.reference, eta, &State::empty(), 1_000_000)?;
        tilt_policy(&self.reference, OwnedTableScore(tables), eta)
    }
}

/// Owning variant of [`TableScore`] for policies that outlive the tables.
struct OwnedTableScore(crate::soft_value::SoftValueTables);

impl crate::soft_value::Score for OwnedTableScore {
    fn score(&self, state: &State, action: Token) -> Result<f64> {
        TableScore(&self.0).score(state, action)
    }
}

/// Draw `n` labelled completions from the reference at the true parameter.
fn draw_dataset<R: Rng>(
    fixture: &RandomTreeEnv,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
    let mut xs = Vec::with_capacity(n);
    let mut os = Vec::with_capacity(n);
    for _ in 0..n {
        let i = fixture.sample_completion_index(rng);
        let label = sample_win_label(fixture.oracle(), &fixture.completions[i].0, rng)?;
        xs.push(fixture.features[i].clone());
        os.push(label as f64);
    }
    Ok((xs, os))
}

/// Estimation-error scaling of the constrained MLE.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub n_grid: Vec<usize>,
    /// Seminorm errors per grid point, trial-major.
    pub errors: Vec<Vec<f64>>,
    pub medians: Vec<f64>,
    /// Least-squares slope of `ln median` against `ln n`.
    pub slope: f64,
    /// Fraction of paired trials where the largest-n error beats the
    /// smallest-n error.
    pub paired_improvement: f64,
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fit the MLE at each sample size over repeated trials and report the
/// seminorm-error decay.
pub fn mle_scaling_experiment(
    fixture: &RandomTreeEnv,
    n_grid: &[usize],
    trials: usize,
    lambda: f64,
    seed: u64,
    opts: &MleOptions,
) -> Result<ScalingReport> {
    if n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("n grid must be strictly increasing"));
    }
    if trials < 2 {
        return Err(Error::config("need at least 2 trials"));
    }
    let errors: Result<Vec<Vec<f64>>> = n_grid
        .iter()
        .map(|&n| {
            (0..trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng =
                        derive_rng(seed, "mle-scaling", (n as u64) << 16 | trial as u64);
                    let (xs, os) = draw_dataset(fixture, n, &mut rng)?;
                    let fit = fit_mle_on(&xs, &os, fixture.theta_bound(), opts)?;
                    let delta = fit.theta.vector() - fixture.theta_star().vector();
                    Ok(seminorm_on(&xs, &delta, lambda))
                })
                .collect()
        })
        .collect();
    let errors = errors?;
    let medians: Vec<f64> = errors.iter().map(|e| median_of(e.clone())).collect();

    // Least-squares slope on the log-log points.
    let xs: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();

    let improved = errors[0]
        .iter()
        .zip(&errors[n_grid.len() - 1])
        .filter(|(first, last)| last < first)
        .count();
    Ok(ScalingReport {
        n_grid: n_grid.to_vec(),
        errors,
        medians,
        slope,
        paired_improvement: improved as f64 / trials as f64,
    })
}

/// One round of the iterative loop on the fixture.
#[derive(Debug, Clone)]
pub struct RegretRound {
    pub round: usize,
    pub samples_this_round: usize,
    pub samples_cumulative: usize,
    /// `V* - soft_return(pi_theta_k)` under the true reward; non-negative.
    pub suboptimality: f64,
}

/// Run the iterative estimation loop with `n_schedule[k]` fresh samples per
/// round, refitting from scratch on the aggregate, and score each round's
/// induced policy exactly.
pub fn regret_experiment(
    fixture: &RandomTreeEnv,
    eta: f64,
    n_schedule: &[usize],
    seed: u64,
    opts: &MleOptions,
) -> Result<Vec<RegretRound>> {
    if n_schedule.is_empty() {
        return Err(Error::config("need at least one round"));
    }
    if n_schedule.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("n schedule must be non-decreasing"));
    }
    let root = fixture.root();
    let v_star = backward_soft_values(fixture.env(), fixture.reference(), eta, &root, 1_000_000)?
        .value(&root)
        .expect("root value exists");

    let mut xs: Vec<DVector<f64>> = Vec::new();
    let mut os: Vec<f64> = Vec::new();
    let mut rounds = Vec::with_capacity(n_schedule.len());
    for (k, &n_k) in n_schedule.iter().enumerate() {
        let mut rng = derive_rng(seed, "regret-round", k as u64);
        let (mut x_new, mut o_new) = draw_dataset(fixture, n_k, &mut rng)?;
        xs.append(&mut x_new);
        os.append(&mut o_new);
        let fit = fit_mle_on(&xs, &os, fixture.theta_bound(), opts)?;
        let pi_k = fixture.induced_policy(&fit.theta, eta)?;
        let value =
            soft_return(&pi_k, fixture.env(), fixture.reference(), eta, &root, 1_000_000)?;
        rounds.push(RegretRound {
            round: k + 1,
            samples_this_round: n_k,
            samples_cumulative: xs.len(),
            suboptimality: v_star - value,
        });
    }
    Ok(rounds)
}

/// Check the log-partition gradient identity
/// `grad_theta ln E_ref[exp(<theta,Phi>/eta)] = E_{pi_theta}[Phi]/eta`
/// three ways: the tilted-weight enumeration, the step-wise induced policy
/// (an independent route through backward induction), and central finite
/// differences of the log-partition itself.
pub fn gradient_identity_check(
    fixture: &RandomTreeEnv,
    theta: &ThetaParams,
    eta: f64,
) -> Result<(f64, f64)> {
    let dim = fixture.dim();
    let log_partition = |t: &DVector<f64>| -> f64 {
        let terms: Vec<f64> = fixture
            .completions
            .iter()
            .enumerate()
            .map(|(i, (_, p))| p.ln() + fixture.feature_bound * t[i] / eta)
            .collect();
        crate::soft_value::log_sum_exp(&terms)
    };

    // Direct route: normalized tilted weights.
    let lse = log_partition(theta.vector());
    let mut direct = DVector::zeros(dim);
    for (i, (_, p)) in fixture.completions.iter().enumerate() {
        let w = (p.ln() + fixture.feature_bound * theta.vector()[i] / eta - lse).exp();
        direct += w / eta * &fixture.features[i];
    }

    // Policy route: enumerate the completions of the step-wise induced
    // policy built by backward induction.
    let pi = fixture.induced_policy(theta, eta)?;
    let pi_completions =
        enumerate_completions(fixture.env(), &pi, &fixture.root(), 1_000_000)?;
    let index = completion_index_map(&fixture.completions);
    let mut policy_route = DVector::zeros(dim);
    for (c, p) in &pi_completions {
        let key: Vec<u32> = c.full_state().tokens().iter().map(|t| t.0).collect();
        let i = *index.get(&key).expect("induced support inside reference support");
        policy_route += *p / eta * &fixture.features[i];
    }

    // Finite differences of the log-partition, central, step 1e-5.
    let h = 1e-5;
    let mut fd = DVector::zeros(dim);
    for j in 0..dim {
        let mut plus = theta.vector().clone();
        let mut minus = theta.vector().clone();
        plus[j] += h;
        minus[j] -= h;
        fd[j] = (log_partition(&plus) - log_partition(&minus)) / (2.0 * h);
    }

    let scale = direct.amax().max(1e-12);
    let err_exact = (&policy_route - &direct).amax() / scale;
    let err_fd = (&fd - &direct).amax() / scale;
    Ok((err_exact, err_fd))
}

/// The concentrability coefficient: the maximum over the supplied tilted
/// policies of `|| (Sigma_D + lambda I)^{-1/2} E_{y ~ pi_theta}[Phi(y)] ||`.
pub fn concentrability(
    fixture: &RandomTreeEnv,
    dataset_features: &[DVector<f64>],
    lambda: f64,
    policy_grid: &[ThetaParams],
    eta: f64,
) -> Result<f64> {
    if dataset_features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = fixture.dim();
    let n = dataset_features.len() as f64;
    let mut sigma = DMatrix::zeros(dim, dim);
    for x in dataset_features {
        sigma.syger(1.0 / n, x, x, 1.0);
    }
    sigma.fill_upper_triangle_with_lower_triangle();
    for i in 0..dim {
        sigma[(i, i)] += lambda;
    }
    let eig = sigma.symmetric_eigen();
    if eig.eigenvalues.min() <= 1e-12 {
        return Err(Error::Domain(
            "Sigma_D + lambda I is singular; use lambda > 0".into(),
        ));
    }
    let inv_sqrt = {
        let mut d = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            d[(i, i)] = 1.0 / eig.eigenvalues[i].sqrt();
        }
        &eig.eigenvectors * d * eig.eigenvectors.transpose()
    };

    let mut best: f64 = 0.0;
    for theta in policy_grid {
        // Tilted completion distribution in closed form.
        let logits: Vec<f64> = fixture
            .completions
            .iter()
            .enumerate()
            .map(|(i, (_, p))| p.ln() + fixture.feature_bound * theta.vector()[i] / eta)
            .collect();
        let lse = crate::soft_value::log_sum_exp(&logits);
        let mut mean_phi = DVector::zeros(dim);
        for (i, logit) in logits.iter().enumerate() {
            mean_phi += (logit - lse).exp() * &fixture.features[i];
        }
        best = best.max((&inv_sqrt * mean_phi).norm());
    }
    Ok(best)
}
