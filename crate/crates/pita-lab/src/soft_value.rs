//! KL-regularized soft value machinery.
//!
//! For temperature `eta`, the soft value of a policy adds the terminal
//! reward and subtracts `eta` times the per-step KL to the reference. The
//! optimal soft values satisfy a backward recursion with terminal value 0,
//! and in deterministic sparse-reward MDPs they equal a forward
//! log-expectation of `exp(reward / eta)` under reference rollouts. Both
//! routes are implemented here and checked against each other; the optimal
//! policy is the reference tilted by `exp(Q / eta)`.

use std::collections::HashMap;

use rand::Rng;

use crate::error::Error;
use crate::mdp::{
    completion_log_prob, enumerate_completions, sample_rollout, Completion, Environment, Policy,
    State, Token,
};
use crate::Result;

/// Numerically stable `ln(sum(exp(x_i)))` with max subtraction.
/// Empty input or all `-inf` yields `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// A state-action guidance signal in reward units.
pub trait Score: Sync {
    fn score(&self, state: &State, action: Token) -> Result<f64>;
}

impl<F> Score for F
where
    F: Fn(&State, Token) -> Result<f64> + Sync,
{
    fn score(&self, state: &State, action: Token) -> Result<f64> {
        self(state, action)
    }
}

/// Exact optimal soft values over the tree reachable from one start state.
///
/// `v` maps each stored state to its soft value; `q` maps `(state, action)`
/// pairs on the reference support to the soft action value. Terminal states
/// hold `v = 0`, and every stored state satisfies
/// `v(s) = eta * ln sum_a pi_ref(a|s) exp(q(s,a)/eta)`.
#[derive(Debug, Clone)]
pub struct SoftValueTables {
    eta: f64,
    v: HashMap<State, f64>,
    q: HashMap<(State, Token), f64>,
}

impl SoftValueTables {
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn value(&self, state: &State) -> Option<f64> {
        self.v.get(state).copied()
    }

    pub fn q_value(&self, state: &State, action: Token) -> Option<f64> {
        self.q.get(&(state.clone(), action)).copied()
    }

    /// All stored states with their values.
    pub fn states(&self) -> impl Iterator<Item = (&State, f64)> {
        self.v.iter().map(|(s, &v)| (s, v))
    }

    pub fn q_entries(&self) -> impl Iterator<Item = (&State, Token, f64)> {
        self.q.iter().map(|((s, a), &q)| (s, *a, q))
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Borrow a value table as a guidance score (`q` lookups).
#[derive(Debug, Clone, Copy)]
pub struct TableScore<'a>(pub &'a SoftValueTables);

impl Score for TableScore<'_> {
    fn score(&self, state: &State, action: Token) -> Result<f64> {
        self.0.q_value(state, action).ok_or_else(|| {
            Error::Domain(format!(
                "no stored q value for state of length {} / action {action}",
                state.len()
            ))
        })
    }
}

/// Exact backward induction of the optimal soft values from `start`.
///
/// Deterministic transitions collapse the successor expectation to the
/// single concatenated state; the recursion bottoms out at `v = 0` on
/// terminal states. Fails if the reachable tree exceeds `limit` nodes.
pub fn backward_soft_values<P: Policy + ?Sized>(
    env: &Environment,
    reference: &P,
    eta: f64,
    start: &State,
    limit: usize,
) -> Result<SoftValueTables> {
    if eta <= 0.0 {
        return Err(Error::NonPositiveEta(eta));
    }
    let mut tables = SoftValueTables { eta, v: HashMap::new(), q: HashMap::new() };
    let mut nodes = 0usize;
    backward_visit(env, reference, eta, start, start, &mut tables, &mut nodes, limit)?;
    Ok(tables)
}

#[allow(clippy::too_many_arguments)]
fn backward_visit<P: Policy + ?Sized>(
    env: &Environment,
    reference: &P,
    eta: f64,
    start: &State,
    state: &State,
    tables: &mut SoftValueTables,
    nodes: &mut usize,
    limit: usize,
) -> Result<f64> {
    if let Some(v) = tables.v.get(state) {
        return Ok(*v);
    }
    *nodes += 1;
    if *nodes > limit {
        return Err(Error::BudgetExceeded { limit });
    }
    if env.is_terminal(state) {
        tables.v.insert(state.clone(), 0.0);
        return Ok(0.0);
    }

    let step = |action: Token,
                tables: &mut SoftValueTables,
                nodes: &mut usize|
     -> Result<f64> {
        let next = state.extend(action);
        let reward = if env.is_terminal(&next) {
            let completion =
                Completion::new(start.clone(), next.suffix_from(start).to_vec(), true);
            env.reward(&completion)
        } else {
            0.0
        };
        let v_next = backward_visit(env, reference, eta, start, &next, tables, nodes, limit)?;
        let q = reward + v_next;
        tables.q.insert((state.clone(), action), q);
        Ok(q)
    };

    let v = if env.is_forced(state) {
        // Probability-1 EOS transition.
        step(env.eos(), tables, nodes)?
    } else {
        let probs = reference.action_distribution(state)?;
        env.validate_distribution(&probs)?;
        let mut terms = Vec::new();
        for (i, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let q = step(Token(i as u32), tables, nodes)?;
            terms.push(p.ln() + q / eta);
        }
        eta * log_sum_exp(&terms)
    };
    tables.v.insert(state.clone(), v);
    Ok(v)
}

/// The forward form of the optimal soft action value:
/// `eta * ln E_pi_ref[exp(reward / eta) | s, a]`, evaluated by exhaustive
/// enumeration of reference continuations after taking `action` at `state`.
/// A terminal action returns its reward exactly.
pub fn forward_soft_q<P: Policy + ?Sized>(
    env: &Environment,
    reference: &P,
    eta: f64,
    state: &State,
    action: Token,
    limit: usize,
) -> Result<f64> {
    if eta <= 0.0 {
        return Err(Error::NonPositiveEta(eta));
    }
    let next = state.extend(action);
    if env.is_terminal(&next) {
        let completion = Completion::new(state.clone(), vec![action], true);
        return Ok(env.reward(&completion));
    }
    let completions = enumerate_completions(env, reference, &next, limit)?;
    let terms: Vec<f64> = completions
        .iter()
        .map(|(c, p)| p.ln() + env.reward(c) / eta)
        .collect();
    Ok(eta * log_sum_exp(&terms))
}

/// The reference policy reweighted by `exp(score / eta)` and renormalized
/// per state. Support never grows: zero reference mass stays zero.
pub struct GuidedPolicy<P, S> {
    reference: P,
    score: S,
    eta: f64,
}

impl<P: Policy, S: Score> GuidedPolicy<P, S> {
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn reference(&self) -> &P {
        &self.reference
    }

    pub fn score(&self) -> &S {
        &self.score
    }
}

impl<P: Policy, S: Score> Policy for GuidedPolicy<P, S> {
    fn action_distribution(&self, state: &State) -> Result<Vec<f64>> {
        let probs = self.reference.action_distribution(state)?;
        let mut log_w = vec![f64::NEG_INFINITY; probs.len()];
        let mut max = f64::NEG_INFINITY;
        for (i, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let s = self.score.score(state, Token(i as u32))?;
            if s == f64::NEG_INFINITY {
                continue;
            }
            if !s.is_finite() {
                return Err(Error::Domain(format!("score produced {s}")));
            }
            log_w[i] = p.ln() + s / self.eta;
            max = max.max(log_w[i]);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateState);
        }
        let mut out = vec![0.0; probs.len()];
        let mut z = 0.0;
        for (o, lw) in out.iter_mut().zip(&log_w) {
            if *lw > f64::NEG_INFINITY {
                *o = (lw - max).exp();
                z += *o;
            }
        }
        for o in &mut out {
            *o /= z;
        }
        Ok(out)
    }
}

/// Reweight `reference` by `exp(score / eta)`.
pub fn tilt_policy<P: Policy, S: Score>(
    reference: P,
    score: S,
    eta: f64,
) -> Result<GuidedPolicy<P, S>> {
    if eta <= 0.0 {
        return Err(Error::NonPositiveEta(eta));
    }
    Ok(GuidedPolicy { reference, score, eta })
}

/// Exact forward KL divergence `KL(pi || reference)` over terminal
/// trajectories from `start`, by exhaustive enumeration of `pi`.
///
/// Requires `pi`'s support to lie inside the reference support.
pub fn exact_kl<P: Policy + ?Sized, Q: Policy + ?Sized>(
    pi: &P,
    reference: &Q,
    env: &Environment,
    start: &State,
    limit: usize,
) -> Result<f64> {
    let completions = enumerate_completions(env, pi, start, limit)?;
    let mut kl = 0.0;
    for (c, p) in &completions {
        let log_ref = completion_log_prob(reference, env, c)?;
        if log_ref == f64::NEG_INFINITY {
            return Err(Error::AbsoluteContinuity(format!(
                "trajectory with pi-mass {p} has zero reference mass"
            )));
        }
        kl += p * (p.ln() - log_ref);
    }
    Ok(kl)
}

/// Monte-Carlo estimate of `KL(pi || reference)` from `n` rollouts of `pi`,
/// with its standard error.
pub fn mc_kl<P: Policy + ?Sized, Q: Policy + ?Sized, R: Rng>(
    pi: &P,
    reference: &Q,
    env: &Environment,
    start: &State,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::Domain(format!("need n >= 2 samples, got {n}")));
    }
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let c = sample_rollout(pi, env, start, rng)?;
        let log_pi = completion_log_prob(pi, env, &c)?;
        let log_ref = completion_log_prob(reference, env, &c)?;
        if log_ref == f64::NEG_INFINITY {
            return Err(Error::AbsoluteContinuity(
                "sampled trajectory has zero reference mass".into(),
            ));
        }
        xs.push(log_pi - log_ref);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    Ok((mean, (var / n as f64).sqrt()))
}

/// Exact soft return of `pi` from `start`: expected terminal reward minus
/// `eta` times the exact KL to the reference. Maximized over all policies by
/// the optimally tilted reference.
pub fn soft_return<P: Policy + ?Sized, Q: Policy + ?Sized>(
    pi: &P,
    env: &Environment,
    reference: &Q,
    eta: f64,
    start: &State,
    limit: usize,
) -> Result<f64> {
    if eta <= 0.0 {
        return Err(Error::NonPositiveEta(eta));
    }
    let completions = enumerate_completions(env, pi, start, limit)?;
    let mut expected_reward = 0.0;
    let mut kl = 0.0;
    for (c, p) in &completions {
        let log_ref = completion_log_prob(reference, env, c)?;
        if log_ref == f64::NEG_INFINITY {
            return Err(Error::AbsoluteContinuity(format!(
                "trajectory with pi-mass {p} has zero reference mass"
            )));
        }
        expected_reward += p * env.reward(c);
        kl += p * (p.ln() - log_ref);
    }
    Ok(expected_reward - eta * kl)
}
