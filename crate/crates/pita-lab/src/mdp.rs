//! Finite-horizon deterministic token MDP: states, policies, rollouts,
//! greedy decoding, and exhaustive enumeration of completions.
//!
//! A state is the immutable token sequence written so far (instruction
//! context plus generated tokens). Transitions concatenate one token. An
//! episode ends when the policy emits the end-of-sequence token, or after
//! `horizon` generated tokens, at which point EOS is appended as a
//! probability-1 transition.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::Error;
use crate::Result;

/// A vocabulary item. Valid ids are `0..vocab_size` of the owning
/// environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(pub u32);

impl Token {
    pub fn id(self) -> u32 {
        self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An immutable token sequence plus the number of tokens generated since the
/// episode started. Finite-horizon states are time-indexed: `gen` is what
/// remains of the clock, so a state reached mid-episode keeps its position
/// relative to the forced-termination step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    tokens: Vec<Token>,
    gen: usize,
}

impl State {
    /// A fresh episode context; nothing generated yet.
    pub fn new(tokens: Vec<Token>) -> Self {
        State { tokens, gen: 0 }
    }

    pub fn from_ids(ids: &[u32]) -> Self {
        State::new(ids.iter().map(|&i| Token(i)).collect())
    }

    /// The empty context.
    pub fn empty() -> Self {
        State::new(Vec::new())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of tokens generated since the episode's initial context.
    pub fn gen_len(&self) -> usize {
        self.gen
    }

    pub fn last(&self) -> Option<Token> {
        self.tokens.last().copied()
    }

    /// The successor state after emitting `token`.
    pub fn extend(&self, token: Token) -> State {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(token);
        State { tokens, gen: self.gen + 1 }
    }

    /// Tokens generated since `context` (which must be a prefix).
    pub fn suffix_from(&self, context: &State) -> &[Token] {
        &self.tokens[context.len()..]
    }
}

/// A terminal trajectory: the context it started from and the generated
/// suffix, which ends at the terminal condition exactly once, at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    context: State,
    suffix: Vec<Token>,
    terminal: bool,
}

impl Completion {
    pub fn new(context: State, suffix: Vec<Token>, terminal: bool) -> Self {
        Completion { context, suffix, terminal }
    }

    pub fn context(&self) -> &State {
        &self.context
    }

    pub fn suffix(&self) -> &[Token] {
        &self.suffix
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Context and suffix concatenated into the terminal state.
    pub fn full_state(&self) -> State {
        let mut tokens = Vec::with_capacity(self.context.len() + self.suffix.len());
        tokens.extend_from_slice(self.context.tokens());
        tokens.extend_from_slice(&self.suffix);
        State { tokens, gen: self.context.gen + self.suffix.len() }
    }

    /// All tokens of the terminal sequence.
    pub fn full_tokens(&self) -> Vec<Token> {
        self.full_state().tokens.clone()
    }
}

/// A stochastic next-token map. Implementations must return a probability
/// vector of length `vocab_size` with non-negative entries summing to 1
/// within 1e-12; callers validate.
pub trait Policy: Sync {
    fn action_distribution(&self, state: &State) -> Result<Vec<f64>>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn action_distribution(&self, state: &State) -> Result<Vec<f64>> {
        (**self).action_distribution(state)
    }
}

impl Policy for Arc<dyn Policy + Send + Sync> {
    fn action_distribution(&self, state: &State) -> Result<Vec<f64>> {
        self.as_ref().action_distribution(state)
    }
}

/// Wrap a closure `Fn(&State) -> Result<Vec<f64>>` as a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&State) -> Result<Vec<f64>> + Sync,
{
    fn action_distribution(&self, state: &State) -> Result<Vec<f64>> {
        (self.0)(state)
    }
}

/// Uniform over a fixed support set, zero elsewhere.
#[derive(Debug, Clone)]
pub struct UniformPolicy {
    support: Vec<Token>,
    vocab_size: u32,
}

impl UniformPolicy {
    /// Uniform over the whole vocabulary.
    pub fn new(vocab_size: u32) -> Self {
        UniformPolicy { support: (0..vocab_size).map(Token).collect(), vocab_size }
    }

    /// Uniform over `support` only.
    pub fn over(support: Vec<Token>, vocab_size: u32) -> Self {
        UniformPolicy { support, vocab_size }
    }
}

impl Policy for UniformPolicy {
    fn action_distribution(&self, _state: &State) -> Result<Vec<f64>> {
        let mut probs = vec![0.0; self.vocab_size as usize];
        let p = 1.0 / self.support.len() as f64;
        for &t in &self.support {
            probs[t.0 as usize] = p;
        }
        Ok(probs)
    }
}

/// Probability 1 on a single token at every state.
#[derive(Debug, Clone)]
pub struct PointMassPolicy {
    token: Token,
    vocab_size: u32,
}

impl PointMassPolicy {
    pub fn new(token: Token, vocab_size: u32) -> Self {
        PointMassPolicy { token, vocab_size }
    }
}

impl Policy for PointMassPolicy {
    fn action_distribution(&self, _state: &State) -> Result<Vec<f64>> {
        let mut probs = vec![0.0; self.vocab_size as usize];
        probs[self.token.0 as usize] = 1.0;
        Ok(probs)
    }
}

type RewardFn = Arc<dyn Fn(&Completion) -> f64 + Send + Sync>;

/// The task definition: vocabulary, horizon, EOS token, initial contexts
/// with sampling weights, and the terminal reward. Intermediate rewards are
/// implicitly zero (sparse-reward convention).
#[derive(Clone)]
pub struct Environment {
    vocab_size: u32,
    horizon: usize,
    eos: Token,
    initial_contexts: Vec<(State, f64)>,
    terminal_reward: RewardFn,
}

impl Environment {
    pub fn new(
        vocab_size: u32,
        horizon: usize,
        eos: Token,
        initial_contexts: Vec<(State, f64)>,
        terminal_reward: impl Fn(&Completion) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        if eos.0 >= vocab_size {
            return Err(Error::config(format!(
                "eos id {} outside vocabulary of size {vocab_size}",
                eos.0
            )));
        }
        for (_, w) in &initial_contexts {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::config("context weights must be finite and >= 0"));
            }
        }
        Ok(Environment {
            vocab_size,
            horizon,
            eos,
            initial_contexts,
            terminal_reward: Arc::new(terminal_reward),
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn initial_contexts(&self) -> &[(State, f64)] {
        &self.initial_contexts
    }

    /// Terminal reward of a completion. Finite by environment invariant.
    pub fn reward(&self, completion: &Completion) -> f64 {
        let r = (self.terminal_reward)(completion);
        debug_assert!(r.is_finite(), "terminal reward must be finite");
        r
    }

    /// A state is terminal once EOS has been written.
    pub fn is_terminal(&self, state: &State) -> bool {
        state.last() == Some(self.eos)
    }

    /// True when the horizon is exhausted and EOS must be appended with
    /// probability 1.
    pub fn is_forced(&self, state: &State) -> bool {
        !self.is_terminal(state) && state.gen_len() >= self.horizon
    }

    /// Draw an initial context according to the weights.
    pub fn sample_context<R: Rng>(&self, rng: &mut R) -> Result<State> {
        if self.initial_contexts.is_empty() {
            return Err(Error::config("environment has no initial contexts"));
        }
        let total: f64 = self.initial_contexts.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::config("context weights sum to zero"));
        }
        let mut u = rng.gen::<f64>() * total;
        for (state, w) in &self.initial_contexts {
            u -= w;
            if u <= 0.0 {
                return Ok(state.clone());
            }
        }
        Ok(self.initial_contexts.last().unwrap().0.clone())
    }

    /// Check the policy-distribution invariant: length, non-negativity, and
    /// normalization within 1e-12.
    pub fn validate_distribution(&self, probs: &[f64]) -> Result<()> {
        if probs.len() != self.vocab_size as usize {
            return Err(Error::distribution(format!(
                "length {} != vocab size {}",
                probs.len(),
                self.vocab_size
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::distribution(format!("entry {i} is {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::distribution(format!("sum {sum} != 1")));
        }
        Ok(())
    }
}

impl fmt::Debug for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Environment")
            .field("vocab_size", &self.vocab_size)
            .field("horizon", &self.horizon)
            .field("eos", &self.eos)
            .field("initial_contexts", &self.initial_contexts.len())
            .finish()
    }
}

fn check_start(env: &Environment, start: &State) -> Result<()> {
    if env.is_terminal(start) {
        return Err(Error::Domain("start state is already terminal".into()));
    }
    if start.gen_len() > env.horizon() {
        return Err(Error::Domain(format!(
            "start has generated {} tokens, beyond horizon {}",
            start.gen_len(),
            env.horizon()
        )));
    }
    Ok(())
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding residue: fall back to the last positive-mass entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Sample one terminal trajectory from `start` under `policy`.
pub fn sample_rollout<P: Policy + ?Sized, R: Rng>(
    policy: &P,
    env: &Environment,
    start: &State,
    rng: &mut R,
) -> Result<Completion> {
    check_start(env, start)?;
    let mut state = start.clone();
    let mut suffix = Vec::new();
    loop {
        if env.is_forced(&state) {
            suffix.push(env.eos());
            break;
        }
        let probs = policy.action_distribution(&state)?;
        env.validate_distribution(&probs)?;
        let tok = Token(sample_index(&probs, rng) as u32);
        suffix.push(tok);
        state = state.extend(tok);
        if tok == env.eos() {
            break;
        }
    }
    Ok(Completion::new(start.clone(), suffix, true))
}

/// Deterministic argmax decode. Ties break to the lowest token id, so the
/// output is unique per `(policy, start)`.
pub fn greedy_decode<P: Policy + ?Sized>(
    policy: &P,
    env: &Environment,
    start: &State,
) -> Result<Completion> {
    check_start(env, start)?;
    let mut state = start.clone();
    let mut suffix = Vec::new();
    loop {
        if env.is_forced(&state) {
            suffix.push(env.eos());
            break;
        }
        let probs = policy.action_distribution(&state)?;
        env.validate_distribution(&probs)?;
        let mut best = 0usize;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        let tok = Token(best as u32);
        suffix.push(tok);
        state = state.extend(tok);
        if tok == env.eos() {
            break;
        }
    }
    Ok(Completion::new(start.clone(), suffix, true))
}

/// Exhaustively enumerate every positive-probability terminal completion
/// reachable from `start`, with its exact trajectory probability (the
/// product of per-step policy probabilities).
///
/// Fails with a budget error when more than `limit` completions exist.
pub fn enumerate_completions<P: Policy + ?Sized>(
    env: &Environment,
    policy: &P,
    start: &State,
    limit: usize,
) -> Result<Vec<(Completion, f64)>> {
    check_start(env, start)?;
    let mut out = Vec::new();
    let mut suffix = Vec::new();
    dfs_enumerate(env, policy, start, &start.clone(), 1.0, &mut suffix, &mut out, limit)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn dfs_enumerate<P: Policy + ?Sized>(
    env: &Environment,
    policy: &P,
    start: &State,
    state: &State,
    prob: f64,
    suffix: &mut Vec<Token>,
    out: &mut Vec<(Completion, f64)>,
    limit: usize,
) -> Result<()> {
    if env.is_terminal(state) {
        if out.len() >= limit {
            return Err(Error::BudgetExceeded { limit });
        }
        out.push((Completion::new(start.clone(), suffix.clone(), true), prob));
        return Ok(());
    }
    if env.is_forced(state) {
        let next = state.extend(env.eos());
        suffix.push(env.eos());
        dfs_enumerate(env, policy, start, &next, prob, suffix, out, limit)?;
        suffix.pop();
        return Ok(());
    }
    let probs = policy.action_distribution(state)?;
    env.validate_distribution(&probs)?;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let tok = Token(i as u32);
        let next = state.extend(tok);
        suffix.push(tok);
        dfs_enumerate(env, policy, start, &next, prob * p, suffix, out, limit)?;
        suffix.pop();
    }
    Ok(())
}

/// Sum of per-step log probabilities of `completion` under `policy`.
/// Steps the environment forces (the horizon EOS) contribute log 1 = 0.
/// A step outside the policy's support yields `-inf` rather than an error.
pub fn completion_log_prob<P: Policy + ?Sized>(
    policy: &P,
    env: &Environment,
    completion: &Completion,
) -> Result<f64> {
    let mut state = completion.context().clone();
    let mut log_prob = 0.0;
    for &tok in completion.suffix() {
        if tok.0 >= env.vocab_size() {
            return Err(Error::Domain(format!(
                "token {} outside vocabulary of size {}",
                tok.0,
                env.vocab_size()
            )));
        }
        if env.is_forced(&state) {
            if tok != env.eos() {
                return Ok(f64::NEG_INFINITY);
            }
            state = state.extend(tok);
            continue;
        }
        let probs = policy.action_distribution(&state)?;
        env.validate_distribution(&probs)?;
        let p = probs[tok.0 as usize];
        if p == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        log_prob += p.ln();
        state = state.extend(tok);
    }
    Ok(log_prob)
}
