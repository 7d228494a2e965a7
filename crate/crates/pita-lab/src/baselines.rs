//! Value-guided baselines sharing the MDP and soft-value substrate.
//!
//! All three guide decoding through a success-probability model
//! `g(x) ~= P(reward = 1 | x)` fitted on reference rollouts by logistic
//! regression:
//!
//! - the soft-value guide scores `eta * ln((1-g) + g e^{1/eta})`, the
//!   Bernoulli closed form of the optimal soft action value;
//! - the expected-reward guide (controlled decoding) scores plain `g`,
//!   the non-regularized variant;
//! - the two-stage pipeline first fits a pairwise reward model on
//!   preference pairs, relabels rollouts by thresholding that learned
//!   reward at its training median, and only then runs the soft-value
//!   guide on the relabelled data.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::Error;
use crate::mdp::{sample_rollout, Completion, Environment, Policy, State, Token};
use crate::preference::{gd_fit_on, sigmoid, FeatureMap, MleOptions};
use crate::seeding::derive_rng;
use crate::soft_value::{log_sum_exp, tilt_policy, GuidedPolicy, Score};
use crate::Result;

/// Logistic success-probability model over the feature map. Degenerate
/// single-class training data yields a flagged constant predictor.
#[derive(Clone)]
pub struct SuccessModel {
    weights: DVector<f64>,
    phi: FeatureMap,
    constant: Option<f64>,
    degenerate: bool,
}

impl SuccessModel {
    /// A constant predictor (used directly in tests and for degenerate fits).
    pub fn constant(phi: FeatureMap, g: f64) -> Self {
        SuccessModel {
            weights: DVector::zeros(phi.dim()),
            phi,
            constant: Some(g.clamp(1e-6, 1.0 - 1e-6)),
            degenerate: true,
        }
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Predicted success probability of a state; always in (0, 1).
    pub fn predict(&self, state: &State) -> Result<f64> {
        if let Some(c) = self.constant {
            return Ok(c);
        }
        let x = self.phi.features(state)?;
        Ok(sigmoid(self.weights.dot(&x)))
    }
}

/// Fit the success model by unconstrained logistic regression (same
/// optimizer as the preference MLE, no projection). Single-class data
/// returns the flagged constant model.
pub fn fit_success_model(
    labelled: &[(State, u8)],
    phi: &FeatureMap,
    opts: &MleOptions,
) -> Result<SuccessModel> {
    if labelled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mean = labelled.iter().map(|(_, o)| *o as f64).sum::<f64>() / labelled.len() as f64;
    if mean == 0.0 || mean == 1.0 {
        return Ok(SuccessModel::constant(phi.clone(), mean));
    }
    let mut xs = Vec::with_capacity(labelled.len());
    let mut os = Vec::with_capacity(labelled.len());
    for (s, o) in labelled {
        xs.push(phi.features(s)?);
        os.push(*o as f64);
    }
    let fit = gd_fit_on(&xs, &os, opts, |v| v.clone());
    Ok(SuccessModel { weights: fit.point, phi: phi.clone(), constant: None, degenerate: false })
}

/// Soft-value guidance from a success model: the Bernoulli closed form
/// `eta * ln((1 - g) + g e^{1/eta})` evaluated at the extended state.
/// Strictly increasing in `g`, with limits 0 at `g = 0` and the full unit
/// reward at `g = 1`.
#[derive(Clone)]
pub struct QSharpScore {
    model: SuccessModel,
    eta: f64,
}

pub fn qsharp_score(model: SuccessModel, eta: f64) -> Result<QSharpScore> {
    if eta <= 0.0 {
        return Err(Error::NonPositiveEta(eta));
    }
    Ok(QSharpScore { model, eta })
}

/// The closed form itself, stable at small `eta`.
pub fn bernoulli_soft_value(g: f64, eta: f64) -> f64 {
    if g <= 0.0 {
        return 0.0;
    }
    if g >= 1.0 {
        return 1.0;
    }
    eta * log_sum_exp(&[(1.0 - g).ln(), g.ln() + 1.0 / eta])
}

impl Score for QSharpScore {
    fn score(&self, state: &State, action: Token) -> Result<f64> {
        let g = self.model.predict(&state.extend(action))?;
        Ok(bernoulli_soft_value(g, self.eta))
    }
}

/// Controlled-decoding guidance: the plain expected reward `g`, no
/// log-exp tilt.
#[derive(Clone)]
pub struct CdScore {
    model: SuccessModel,
}

pub fn cd_score(model: SuccessModel) -> CdScore {
    CdScore { model }
}

impl Score for CdScore {
    fn score(&self, state: &State, action: Token) -> Result<f64> {
        self.model.predict(&state.extend(action))
    }
}

/// Reference rollouts with every prefix labelled by the completion's
/// binary label (reward-to-go supervision).
pub fn rollout_supervision<P: Policy + ?Sized>(
    env: &Environment,
    reference: &P,
    labeler: impl Fn(&Completion) -> u8 + Sync,
    rollouts: usize,
    seed: u64,
) -> Result<Vec<(State, u8)>> {
    let rows: Result<Vec<Vec<(State, u8)>>> = (0..rollouts)
        .into_par_iter()
        .map(|task| {
            let mut rng = derive_rng(seed, "baseline-rollouts", task as u64);
            let context = env.sample_context(&mut rng)?;
            let completion = sample_rollout(reference, env, &context, &mut rng)?;
            let label = labeler(&completion);
            let mut out = Vec::with_capacity(completion.suffix().len() + 1);
            let mut state = context;
            out.push((state.clone(), label));
            for &t in completion.suffix() {
                state = state.extend(t);
                out.push((state.clone(), label));
            }
            Ok(out)
        })
        .collect();
    Ok(rows?.into_iter().flatten().collect())
}

/// Fit the success model on reference rollouts labelled by `labeler`.
pub fn fit_success_from_rollouts<P: Policy + ?Sized>(
    env: &Environment,
    reference: &P,
    labeler: impl Fn(&Completion) -> u8 + Sync,
    phi: &FeatureMap,
    rollouts: usize,
    seed: u64,
    opts: &MleOptions,
) -> Result<SuccessModel> {
    let data = rollout_supervision(env, reference, labeler, rollouts, seed)?;
    fit_success_model(&data, phi, opts)
}

/// Linear pairwise reward model `r_hat(y) = <w, Phi(y)>`.
#[derive(Debug, Clone)]
pub struct PairwiseRewardModel {
    weights: DVector<f64>,
}

impl PairwiseRewardModel {
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn reward(&self, phi: &FeatureMap, completion: &Completion) -> Result<f64> {
        Ok(self.weights.dot(&phi.features_of(completion)?))
    }
}

/// Fit the pairwise reward model by maximum likelihood on the
/// Bradley-Terry pair loss `-ln sigma(<w, Phi(y_w) - Phi(y_l)>)`.
pub fn fit_pairwise_reward(
    pairs: &[(Completion, Completion)],
    phi: &FeatureMap,
    opts: &MleOptions,
) -> Result<PairwiseRewardModel> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut xs = Vec::with_capacity(pairs.len());
    let os = vec![1.0; pairs.len()];
    for (w, l) in pairs {
        xs.push(phi.features_of(w)? - phi.features_of(l)?);
    }
    let fit = gd_fit_on(&xs, &os, opts, |v| v.clone());
    Ok(PairwiseRewardModel { weights: fit.point })
}

/// Diagnostics of the two-stage pipeline.
#[derive(Debug, Clone)]
pub struct HfDiagnostics {
    pub reward_weights: DVector<f64>,
    pub threshold: f64,
    pub positive_fraction: f64,
    pub success_degenerate: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Stage 2 shared by the soft-value guide and the two-stage pipeline:
/// draw reference rollouts, binarize them with `reward` thresholded at the
/// training median (falling back to `>=` when `>` collapses to one class),
/// fit the success model, and tilt the reference by the Bernoulli soft
/// value. `reward` values that are already binary reproduce the true-label
/// guide exactly.
#[allow(clippy::too_many_arguments)]
pub fn qsharp_stage2<P: Policy>(
    reward: impl Fn(&Completion) -> f64 + Sync,
    env: &Environment,
    reference: P,
    phi: &FeatureMap,
    eta: f64,
    rollouts: usize,
    seed: u64,
    opts: &MleOptions,
) -> Result<(GuidedPolicy<P, QSharpScore>, f64, SuccessModel)> {
    let completions: Result<Vec<Completion>> = (0..rollouts)
        .into_par_iter()
        .map(|task| {
            let mut rng = derive_rng(seed, "baseline-rollouts", task as u64);
            let context = env.sample_context(&mut rng)?;
            sample_rollout(&reference, env, &context, &mut rng)
        })
        .collect();
    let completions = completions?;
    let mut scores: Vec<f64> = completions.iter().map(&reward).collect();
    let threshold = median(&mut scores.clone());
    let strict: Vec<u8> = completions.iter().map(|c| u8::from(reward(c) > threshold)).collect();
    let labels = if strict.iter().all(|&z| z == strict[0]) {
        completions.iter().map(|c| u8::from(reward(c) >= threshold)).collect()
    } else {
        strict
    };
    scores.clear();

    let mut data = Vec::new();
    for (completion, label) in completions.iter().zip(&labels) {
        let mut state = completion.context().clone();
        data.push((state.clone(), *label));
        for &t in completion.suffix() {
            state = state.extend(t);
            data.push((state.clone(), *label));
        }
    }
    let model = fit_success_model(&data, phi, opts)?;
    let policy = tilt_policy(reference, qsharp_score(model.clone(), eta)?, eta)?;
    Ok((policy, threshold, model))
}

/// The two-stage pipeline: fit the pairwise reward on preference pairs,
/// then run the soft-value guide on rollouts relabelled by that reward.
#[allow(clippy::too_many_arguments)]
pub fn qsharp_hf_pipeline<P: Policy>(
    pairs: &[(Completion, Completion)],
    phi: &FeatureMap,
    env: &Environment,
    reference: P,
    eta: f64,
    rollouts: usize,
    seed: u64,
    opts: &MleOptions,
) -> Result<(GuidedPolicy<P, QSharpScore>, HfDiagnostics)> {
    let reward_model = fit_pairwise_reward(pairs, phi, opts)?;
    let weights = reward_model.weights().clone();
    let phi_for_reward = phi.clone();
    let reward = move |c: &Completion| {
        phi_for_reward.features_of(c).map(|x| weights.dot(&x)).unwrap_or(f64::NEG_INFINITY)
    };
    let (policy, threshold, model) =
        qsharp_stage2(reward, env, reference, phi, eta, rollouts, seed, opts)?;
    let diagnostics = HfDiagnostics {
        reward_weights: reward_model.weights().clone(),
        threshold,
        positive_fraction: 0.0,
        success_degenerate: model.is_degenerate(),
    };
    Ok((policy, diagnostics))
}
